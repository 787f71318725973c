"""A tour of the building blocks: tape gradients, adapter transforms, bank sizes.

Run with ``python3 demos/01_tape_and_adapters.py``.
"""

import numpy as np

from madapt import autodiff as ad
from madapt.adapters import ALL_KINDS, apply_adapter, count_learnable, enumerate_injection_points, init_bank
from madapt.model import Batch, ModalitySubset, ModelSpec, build_model, forward

# %% gradients come from a tape recorded inside a context manager
x = ad.Tensor([[1.0, -2.0, 0.5]], requires_grad=True)
w = ad.Tensor([[0.3], [0.1], [-0.4]], requires_grad=True)
with ad.Tape() as tape:
    loss = ad.sum_all(ad.gelu(ad.matmul(x, w)))
ad.backward(loss, tape)
print("loss", loss.item())
print("dloss/dx", x.grad)
print("dloss/dw", w.grad.ravel())

# %% the adapter transforms on tiny inputs
print(apply_adapter("scale_shift", {"gamma": [2.0, 0.5], "beta": [1.0, -1.0]}, [[3.0, 4.0]]).data)
print(apply_adapter("bitfit", {"beta": [1.0, 1.0]}, [[0.0, -1.0]]).data)
h_in = ad.Tensor([[2.0, 3.0]])
print(apply_adapter("lora", {"A": [[1.0, 1.0]], "B": [[1.0], [0.0]]}, h_in, h_in).data)

# %% where adapters go: every linear and norm of the available encoders plus fusion
spec = ModelSpec()
subset = ModalitySubset.of([0], 2)
for p in enumerate_injection_points(spec, subset, "scale_shift"):
    print(f"  {p.name:22s} {p.position:13s} width={p.width}")

# %% bank sizes for each kind, and a check that fresh banks change nothing
theta = build_model(spec)
rng = np.random.default_rng(0)
batch = Batch([rng.normal(size=(5, 4, 12)) for _ in range(2)], rng.integers(0, 6, 5))
base = forward(theta, batch, subset)
for kind in ALL_KINDS:
    count, ratio = count_learnable(spec, subset, kind)
    same = np.array_equal(forward(theta, batch, subset, init_bank(spec, subset, kind, theta=theta)), base)
    print(f"{kind.value:12s} {count:4d} scalars ({100 * ratio:5.2f}% of the model)  identity at init: {same}")
