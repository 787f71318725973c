"""Subset-aware multimodal classifier: per-modality encoders, a fusion block, a linear head.

Architecture (row-vector convention, ``y = x @ W + b``)::

    enc{m}.embed            linear  input_dim_m -> d           [inject]
    enc{m}.block{j}.linear  linear  d -> d, then gelu          [inject]
    enc{m}.block{j}.norm    layer norm over d                  [inject]
    (token mean per modality -> batch x d)
    fusion.linear           concat_linear: M*d -> d, mean_pool_linear: d -> d, then gelu   [inject]
    fusion.norm             layer norm over d                  [inject]
    head                    linear d -> C                      (never adapted)

Parameter names follow ``<layer>.weight`` / ``<layer>.bias`` for linears and
``<layer>.gain`` / ``<layer>.bias`` for norms. Missing modalities are
zero-filled before encoding; their encoder still runs on the zeros, so the
fused input keeps its width.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ValidationError
from .rng import XorShift64Star

FUSIONS = ("concat_linear", "mean_pool_linear")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    num_modalities: int = 2
    input_dims: Tuple[int, ...] = (12, 12)
    tokens_per_modality: int = 4
    embed_dim: int = 8
    encoder_depth: int = 2
    fusion: str = "concat_linear"
    num_classes: int = 6
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(w) for w in self.input_dims))
        self.validate()

    def validate(self):
        checks = [
            ("num_modalities", self.num_modalities >= 2),
            ("input_dims", len(self.input_dims) == self.num_modalities
             and all(w >= 1 for w in self.input_dims)),
            ("tokens_per_modality", self.tokens_per_modality >= 1),
            ("embed_dim", self.embed_dim >= 2),
            ("encoder_depth", self.encoder_depth >= 1),
            ("fusion", self.fusion in FUSIONS),
            ("num_classes", self.num_classes >= 2),
            ("seed", 0 <= int(self.seed) < 2**64),
        ]
        for name, ok in checks:
            if not ok:
                raise ValidationError(f"invalid ModelSpec field {name!r}: {getattr(self, name)!r}")

    @property
    def fusion_in_dim(self):
        if self.fusion == "concat_linear":
            return self.num_modalities * self.embed_dim
        return self.embed_dim

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ModalitySubset:
    """Available modalities as a bitmask (bit m set means modality m is present)."""

    mask: int
    num_modalities: int

    def __post_init__(self):
        if self.num_modalities < 1:
            raise ValidationError("num_modalities must be positive")
        if not 0 <= self.mask < (1 << self.num_modalities):
            raise ValidationError(
                f"mask {self.mask} out of range for {self.num_modalities} modalities"
            )

    @classmethod
    def of(cls, available, num_modalities):
        mask = 0
        for m in available:
            if not 0 <= m < num_modalities:
                raise ValidationError(f"modality index {m} out of range [0, {num_modalities})")
            mask |= 1 << m
        return cls(mask, num_modalities)

    @classmethod
    def full(cls, num_modalities):
        return cls((1 << num_modalities) - 1, num_modalities)

    @property
    def available(self):
        return [m for m in range(self.num_modalities) if self.mask >> m & 1]

    @property
    def missing(self):
        return [m for m in range(self.num_modalities) if not self.mask >> m & 1]

    @property
    def is_empty(self):
        return self.mask == 0

    @property
    def is_full(self):
        return self.mask == (1 << self.num_modalities) - 1

    def __contains__(self, m):
        return 0 <= m < self.num_modalities and bool(self.mask >> m & 1)

    def require_nonempty(self):
        if self.is_empty:
            raise ContractError("the empty modality subset cannot be evaluated")

    def label(self):
        return "+".join(str(m) for m in self.available) or "none"


@dataclass
class Batch:
    """Per-modality inputs of shape ``batch x N x input_dim_m`` plus integer labels."""

    xs: list
    labels: np.ndarray

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        sizes = {x.shape[0] for x in self.xs}
        if len(sizes) != 1:
            raise DimensionError(f"modalities disagree on batch size: {sorted(sizes)}")
        if self.labels.shape != (self.xs[0].shape[0],):
            raise DimensionError(
                f"{self.labels.shape[0]} labels for batch size {self.xs[0].shape[0]}"
            )

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx):
        return Batch([x[idx] for x in self.xs], self.labels[idx])


@dataclass
class Theta:
    """Named parameter arrays of a model. Frozen thetas are read-only arrays."""

    spec: ModelSpec
    params: Dict[str, np.ndarray]
    frozen: bool = False

    def names(self):
        return list(self.params)

    def num_scalars(self):
        return int(sum(p.size for p in self.params.values()))

    def freeze(self):
        for p in self.params.values():
            p.flags.writeable = False
        self.frozen = True
        return self

    def frozen_copy(self):
        return Theta(self.spec, {k: v.copy() for k, v in self.params.items()}).freeze()

    def copy(self):
        return Theta(self.spec, {k: np.array(v) for k, v in self.params.items()})


def layer_names(spec):
    """Linear and norm layers in forward order, as (name, kind, d_in, d_out) tuples."""
    d = spec.embed_dim
    out = []
    for m in range(spec.num_modalities):
        out.append((f"enc{m}.embed", "linear", spec.input_dims[m], d))
        for j in range(spec.encoder_depth):
            out.append((f"enc{m}.block{j}.linear", "linear", d, d))
            out.append((f"enc{m}.block{j}.norm", "norm", d, d))
    out.append(("fusion.linear", "linear", spec.fusion_in_dim, d))
    out.append(("fusion.norm", "norm", d, d))
    out.append(("head", "linear", d, spec.num_classes))
    return out


def parameter_schema(spec):
    """Ordered (name, shape) list for every parameter of the model."""
    schema = []
    for name, kind, d_in, d_out in layer_names(spec):
        if kind == "linear":
            schema.append((f"{name}.weight", (d_in, d_out)))
            schema.append((f"{name}.bias", (d_out,)))
        else:
            schema.append((f"{name}.gain", (d_out,)))
            schema.append((f"{name}.bias", (d_out,)))
    return schema


def build_model(spec):
    """Initialize parameters deterministically from ``spec.seed``.

    Linear weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` drawn
    from xorshift64*; biases are zero; norm gains one.
    """
    spec.validate()
    rng = XorShift64Star(spec.seed)
    params = {}
    for name, shape in parameter_schema(spec):
        if name.endswith(".weight"):
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return Theta(spec, params)


def _check_subset(spec, subset):
    if subset.num_modalities != spec.num_modalities:
        raise ContractError(
            f"subset covers {subset.num_modalities} modalities, model has {spec.num_modalities}"
        )
    subset.require_nonempty()


def zero_fill(batch, subset):
    """Replace every missing modality's input with zeros of the same shape."""
    subset.require_nonempty()
    xs = [x if m in subset else np.zeros_like(x) for m, x in enumerate(batch.xs)]
    return Batch(xs, batch.labels)


def duplicate_fill(batch, subset, source=None):
    """Substitute each missing modality's input with a copy of ``source``'s input.

    ``source`` defaults to the lowest-index available modality.
    """
    subset.require_nonempty()
    if source is None:
        source = subset.available[0]
    if source not in subset:
        raise ContractError(f"duplication source modality {source} is not available")
    widths = {x.shape[1:] for x in batch.xs}
    if len(widths) != 1:
        raise DimensionError(
            f"duplication needs equal modality shapes, got {[x.shape[1:] for x in batch.xs]}"
        )
    xs = [x if m in subset else batch.xs[source].copy() for m, x in enumerate(batch.xs)]
    return Batch(xs, batch.labels)


def _check_batch(spec, batch):
    if len(batch.xs) != spec.num_modalities:
        raise ContractError(f"batch has {len(batch.xs)} modalities, model expects {spec.num_modalities}")
    for m, x in enumerate(batch.xs):
        expect = (spec.tokens_per_modality, spec.input_dims[m])
        if x.ndim != 3 or x.shape[1:] != expect:
            raise DimensionError(f"modality {m} input has shape {x.shape}, expected (B, *{expect})")


def leaves_from(params, requires_grad):
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def run_network(spec, P, xs, subset, adapter=None):
    """Tape-recordable forward pass over parameter tensors ``P``.

    ``adapter`` is an object with ``linear(name, h_in, out)`` and
    ``norm(name, h, gain, bias)`` hooks (see :mod:`madapt.adapters`); it is
    consulted only for encoders of available modalities and the fusion
    block. Returns ``(logits, fused)``.
    """

    def linear(name, h, hook):
        out = ad.add(ad.matmul(h, P[f"{name}.weight"]), P[f"{name}.bias"])
        if hook is not None:
            out = hook.linear(name, h, out)
        return out

    def norm(name, h, hook):
        if hook is not None:
            return hook.norm(name, h, P[f"{name}.gain"], P[f"{name}.bias"])
        return ad.layer_norm(h, P[f"{name}.gain"], P[f"{name}.bias"], NORM_EPS)

    pooled = []
    for m in range(spec.num_modalities):
        hook = adapter if m in subset else None
        h = linear(f"enc{m}.embed", ad.Tensor(xs[m]), hook)
        for j in range(spec.encoder_depth):
            h = ad.gelu(linear(f"enc{m}.block{j}.linear", h, hook))
            h = norm(f"enc{m}.block{j}.norm", h, hook)
        pooled.append(ad.mean(h, axis=1))
    if spec.fusion == "concat_linear":
        f_in = ad.concat(pooled, axis=-1)
    else:
        f_in = pooled[0]
        for p in pooled[1:]:
            f_in = ad.add(f_in, p)
        f_in = ad.mul(f_in, ad.Tensor(np.full(spec.embed_dim, 1.0 / spec.num_modalities)))
    fused = ad.gelu(linear("fusion.linear", f_in, adapter))
    fused = norm("fusion.norm", fused, adapter)
    logits = ad.add(ad.matmul(fused, P["head.weight"]), P["head.bias"])
    return logits, fused


def _prepare(theta, batch, subset, bank):
    spec = theta.spec
    _check_subset(spec, subset)
    _check_batch(spec, batch)
    hook = None
    if bank is not None:
        if bank.subset != subset:
            raise ContractError(
                f"bank was trained for subset {bank.subset.label()}, not {subset.label()}"
            )
        if bank.spec != spec:
            raise ContractError("bank was built for a different model spec")
        hook = bank.hook(requires_grad=False)
    filled = zero_fill(batch, subset)
    P = leaves_from(theta.params, requires_grad=False)
    return spec, P, filled, hook


def forward(theta, batch, subset, bank=None):
    """Logits (``batch x C`` array) for ``batch`` with only ``subset`` available."""
    spec, P, filled, hook = _prepare(theta, batch, subset, bank)
    logits, _ = run_network(spec, P, filled.xs, subset, hook)
    return logits.data


def extract_fused_feature(theta, batch, subset, bank=None):
    """Fusion-block output (after its adapter, before the head), ``batch x d``."""
    spec, P, filled, hook = _prepare(theta, batch, subset, bank)
    _, fused = run_network(spec, P, filled.xs, subset, hook)
    return fused.data


def predict(theta, batch, subset, bank=None):
    return np.argmax(forward(theta, batch, subset, bank), axis=1)
