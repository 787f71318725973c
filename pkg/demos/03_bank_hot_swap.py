"""Keep one frozen checkpoint on disk and swap small banks in as modalities come and go.

Everything is written under ``demo_run/`` in the current directory.
"""

from pathlib import Path

import numpy as np

from madapt.adapters import enumerate_subsets
from madapt.io import load_bank, load_theta, save_bank, save_theta
from madapt.model import ModalitySubset, ModelSpec, predict
from madapt.synth import TaskConfig, generate
from madapt.training import TrainConfig, adapt, pretrain

out = Path("demo_run")
data = generate(TaskConfig(n_train=600, n_val=0, n_test=300))
spec = ModelSpec(num_modalities=3, input_dims=(12, 12, 12), embed_dim=16, num_classes=6)
theta, _ = pretrain(spec, data.train, TrainConfig(epochs=15, batch_size=32, base_lr=3e-3, warmup_epochs=1))
save_theta(theta.freeze(), out / "theta.mmad")

cfg = TrainConfig(epochs=15, batch_size=32, base_lr=1e-2, warmup_epochs=1)
for s in enumerate_subsets(3):
    bank, _ = adapt(theta, s, "scale_shift", data.train, cfg)
    path = save_bank(bank, out / f"S{s.mask}.mmad")
    print(f"bank for {{{s.label()}}}: {path.stat().st_size} bytes")
print(f"frozen checkpoint: {(out / 'theta.mmad').stat().st_size} bytes")

# %% a stream of test batches with different modalities present
theta = load_theta(out / "theta.mmad")
rng = np.random.default_rng(1)
for step in range(5):
    available = sorted(rng.choice(3, size=rng.integers(1, 3), replace=False).tolist())
    s = ModalitySubset.of(available, 3)
    idx = rng.choice(len(data.test), 60, replace=False)
    batch = data.test.take(idx)
    bank = load_bank(out / f"S{s.mask}.mmad")
    plain = np.mean(predict(theta, batch, s) == batch.labels)
    swapped = np.mean(predict(theta, batch, s, bank) == batch.labels)
    print(f"batch {step}: modalities {available}  zero-filled {plain:.3f}  with bank {swapped:.3f}")
