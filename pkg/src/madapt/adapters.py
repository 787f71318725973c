"""Per-subset adapter banks attached to a frozen multimodal model.

Six kinds share one injection scheme: an adapter sits after every linear and
every layer norm of the available modalities' encoders and of the fusion
block. The prediction head is never adapted.

==============  ======================  ==========================  ===============
kind            points                  transform                   scalars/point
==============  ======================  ==========================  ===============
scale_shift     linear + norm           gamma * h + beta            2 d
scale_only      linear + norm           gamma * h                   d
shift_only      linear + norm           h + beta                    d
bitfit          linear + norm           h + beta                    d
lora            linear                  h + (h_in A^T) B^T          r (d_in + d_out)
norm_tune       norm                    learnable norm affine       2 d
==============  ======================  ==========================  ===============

``bitfit`` and ``shift_only`` compute the same function: a shift after a
frozen linear is a correction to that linear's bias, and a shift after a norm
is a correction to the norm's bias. They are kept as separate kinds so that
reports list both rows.
"""

import enum
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ValidationError
from .model import ModalitySubset, ModelSpec, NORM_EPS, layer_names, parameter_schema
from .rng import XorShift64Star

DEFAULT_LORA_RANK = 2
LORA_INIT_RANGE = 0.01


class AdapterKind(str, enum.Enum):
    SCALE_SHIFT = "scale_shift"
    SCALE_ONLY = "scale_only"
    SHIFT_ONLY = "shift_only"
    BITFIT = "bitfit"
    LORA = "lora"
    NORM_TUNE = "norm_tune"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValidationError(f"unknown adapter kind {value!r}; expected one of {names}") from None

    @property
    def has_scale(self):
        return self in (AdapterKind.SCALE_SHIFT, AdapterKind.SCALE_ONLY)

    @property
    def has_shift(self):
        return self in (AdapterKind.SCALE_SHIFT, AdapterKind.SHIFT_ONLY, AdapterKind.BITFIT)


ALL_KINDS = tuple(AdapterKind)


@dataclass(frozen=True)
class InjectionPoint:
    name: str
    position: str  # "after-linear" or "after-norm"
    width: int
    d_in: int
    d_out: int


def enumerate_subsets(num_modalities):
    """Every proper, non-empty subset in ascending bitmask order (2**M - 2 of them)."""
    if num_modalities < 1:
        raise ValidationError("num_modalities must be at least 1")
    full = (1 << num_modalities) - 1
    return [ModalitySubset(mask, num_modalities) for mask in range(1, full)]


def enumerate_injection_points(spec, subset, kind):
    kind = AdapterKind.parse(kind)
    if subset.num_modalities != spec.num_modalities:
        raise ContractError("subset and spec disagree on the number of modalities")
    subset.require_nonempty()
    points = []
    for name, layer, d_in, d_out in layer_names(spec):
        if name == "head":
            continue
        if name.startswith("enc"):
            m = int(name[3:].split(".", 1)[0])
            if m not in subset:
                continue
        if layer == "linear" and kind is AdapterKind.NORM_TUNE:
            continue
        if layer == "norm" and kind is AdapterKind.LORA:
            continue
        position = "after-linear" if layer == "linear" else "after-norm"
        points.append(InjectionPoint(name, position, d_out, d_in, d_out))
    return points


def _point_cost(kind, point, rank):
    if kind is AdapterKind.LORA:
        return rank * (point.d_in + point.d_out)
    if kind in (AdapterKind.SCALE_SHIFT, AdapterKind.NORM_TUNE):
        return 2 * point.width
    return point.width


def _check_rank(spec, subset, rank):
    if rank < 1:
        raise ValidationError(f"LoRA rank must be >= 1, got {rank}")
    for p in enumerate_injection_points(spec, subset, AdapterKind.LORA):
        if rank >= min(p.d_in, p.d_out):
            raise ValidationError(
                f"LoRA rank {rank} must be below min(d_in, d_out) = {min(p.d_in, p.d_out)} at {p.name}"
            )


def total_model_parameters(spec):
    return int(sum(np.prod(shape) for _, shape in parameter_schema(spec)))


def count_learnable(spec, subset, kind, rank=DEFAULT_LORA_RANK):
    """Return ``(count, ratio)`` where ratio = count / (count + model parameters)."""
    kind = AdapterKind.parse(kind)
    count = sum(_point_cost(kind, p, rank) for p in enumerate_injection_points(spec, subset, kind))
    return count, count / (count + total_model_parameters(spec))


@dataclass
class AdapterBank:
    """Learnable parameters for one (subset, kind) pair.

    ``params`` maps injection-point name to a dict with some of the keys
    ``gamma``, ``beta`` (modulation and norm_tune) or ``A``, ``B`` (lora).
    """

    spec: ModelSpec
    subset: ModalitySubset
    kind: AdapterKind
    params: Dict[str, Dict[str, np.ndarray]]
    rank: int = DEFAULT_LORA_RANK

    def flat(self):
        return {f"{pt}.{k}": v for pt, group in self.params.items() for k, v in group.items()}

    @classmethod
    def from_flat(cls, spec, subset, kind, flat, rank=DEFAULT_LORA_RANK):
        params = {}
        for name, arr in flat.items():
            pt, key = name.rsplit(".", 1)
            params.setdefault(pt, {})[key] = np.asarray(arr, dtype=np.float64)
        return cls(spec, subset, AdapterKind.parse(kind), params, rank)

    def num_scalars(self):
        return int(sum(v.size for v in self.flat().values()))

    def copy(self):
        params = {pt: {k: v.copy() for k, v in g.items()} for pt, g in self.params.items()}
        return AdapterBank(self.spec, self.subset, self.kind, params, self.rank)

    def hook(self, requires_grad=False):
        return BankHook(self, requires_grad)


def init_bank(spec, subset, kind, *, theta=None, rank=DEFAULT_LORA_RANK):
    """Fresh bank whose transforms are the identity.

    Modulation kinds start at gamma = 1, beta = 0. LoRA starts with B = 0 and
    A uniform in [-0.01, 0.01] from a stream keyed by the spec seed and the
    subset mask. norm_tune copies the frozen norm affine pair, so ``theta``
    is required for it.
    """
    kind = AdapterKind.parse(kind)
    points = enumerate_injection_points(spec, subset, kind)
    if kind is AdapterKind.LORA:
        _check_rank(spec, subset, rank)
        rng = XorShift64Star(spec.seed).fork(subset.mask)
    if kind is AdapterKind.NORM_TUNE and theta is None:
        raise ContractError("norm_tune banks copy the frozen norm affine; pass theta")
    params = {}
    for p in points:
        if kind is AdapterKind.LORA:
            group = {
                "A": rng.uniform(-LORA_INIT_RANGE, LORA_INIT_RANGE, size=(rank, p.d_in)),
                "B": np.zeros((p.d_out, rank)),
            }
        elif kind is AdapterKind.NORM_TUNE:
            group = {
                "gamma": np.array(theta.params[f"{p.name}.gain"]),
                "beta": np.array(theta.params[f"{p.name}.bias"]),
            }
        else:
            group = {}
            if kind.has_scale:
                group["gamma"] = np.ones(p.width)
            if kind.has_shift:
                group["beta"] = np.zeros(p.width)
        params[p.name] = group
    return AdapterBank(spec, subset, kind, params, rank)


def apply_adapter(kind, point_params, h, h_in=None):
    """Apply one injection point's transform to ``h`` (an ``N x d`` tensor).

    For ``lora`` ``h`` is the frozen linear's output and ``h_in`` its input;
    the result is ``h + (h_in A^T) B^T``. For ``norm_tune`` ``h`` is the
    normalized, pre-affine feature.
    """
    kind = AdapterKind.parse(kind)
    h = ad.as_tensor(h)
    P = {k: ad.as_tensor(v) for k, v in point_params.items()}
    if kind is AdapterKind.LORA:
        if h_in is None:
            raise ContractError("lora needs the linear layer's input h_in")
        h_in = ad.as_tensor(h_in)
        A, B = P["A"], P["B"]
        if A.shape[1] != h_in.shape[-1] or B.shape[0] != h.shape[-1]:
            raise DimensionError(
                f"lora factors A{A.shape}, B{B.shape} do not fit h_in{h_in.shape} -> h{h.shape}"
            )
        delta = ad.matmul(ad.matmul(h_in, ad.transpose(A)), ad.transpose(B))
        return ad.add(h, delta)
    return ad.scale_shift(h, P.get("gamma"), P.get("beta"))


class BankHook:
    """Adapter callbacks used by :func:`madapt.model.run_network`."""

    def __init__(self, bank, requires_grad):
        self.kind = bank.kind
        self.leaves = {
            name: ad.Tensor(v, requires_grad=requires_grad) for name, v in bank.flat().items()
        }
        self.groups = {}
        for name, t in self.leaves.items():
            pt, key = name.rsplit(".", 1)
            self.groups.setdefault(pt, {})[key] = t

    def linear(self, name, h_in, out):
        group = self.groups.get(name)
        if group is None:
            return out
        return apply_adapter(self.kind, group, out, h_in)

    def norm(self, name, h, gain, bias):
        group = self.groups.get(name)
        if group is None:
            return ad.layer_norm(h, gain, bias, NORM_EPS)
        if self.kind is AdapterKind.NORM_TUNE:
            return ad.layer_norm(h, group["gamma"], group["beta"], NORM_EPS)
        out = ad.layer_norm(h, gain, bias, NORM_EPS)
        return apply_adapter(self.kind, group, out)


def normalize_feature_shape(grid):
    """Flatten an ``H x W x d`` feature grid to ``(H*W) x d`` tokens, row-major."""
    grid = ad.as_tensor(grid)
    if len(grid.shape) != 3:
        raise DimensionError(f"expected an H x W x d grid, got shape {grid.shape}")
    H, W, d = grid.shape
    return ad.reshape(grid, (H * W, d))


def restore_feature_shape(tokens, height, width):
    """Inverse of :func:`normalize_feature_shape`."""
    tokens = ad.as_tensor(tokens)
    if len(tokens.shape) != 2 or tokens.shape[0] != height * width:
        raise DimensionError(f"cannot restore {tokens.shape} to a {height} x {width} grid")
    return ad.reshape(tokens, (height, width, tokens.shape[1]))
