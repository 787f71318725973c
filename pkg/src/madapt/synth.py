"""Seeded synthetic multimodal classification tasks.

Each modality's view of a sample is a token grid ``N x input_dim_m``::

    x_m = rho * class_proto_m[label] + (1 - rho) * style_m[s] + sigma * noise

``class_proto_m[c]`` is the shared class signal, cropped to the modality's
width. It is drawn once per class, so every modality carries the same class
information (redundancy). ``style_m[s]`` is a modality-private nuisance drawn
per modality and picked per sample independently of the label. Lowering rho
moves weight from the shared class signal to the private nuisance.

A dominance entry ``(c1, c2, k)`` makes the pair separable only in modality
``k``: in every other modality class ``c2`` reuses ``c1``'s prototype.
"""

import hashlib
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ValidationError
from .model import Batch

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskConfig:
    num_modalities: int = 3
    num_classes: int = 6
    input_dims: Tuple[int, ...] = (12, 12, 12)
    tokens: int = 4
    n_train: int = 1200
    n_val: int = 200
    n_test: int = 600
    noise_sigma: float = 0.6
    redundancy: float = 0.7
    dominance: Tuple[Tuple[int, int, int], ...] = ((0, 1, 0), (2, 3, 1), (4, 5, 2))
    num_styles: int = 4
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(w) for w in self.input_dims))
        object.__setattr__(
            self, "dominance", tuple(tuple(int(v) for v in p) for p in self.dominance)
        )
        self.validate()

    def validate(self):
        M, C = self.num_modalities, self.num_classes
        if M < 1:
            raise ValidationError("num_modalities must be >= 1")
        if C < 2:
            raise ValidationError("num_classes must be >= 2")
        if len(self.input_dims) != M or min(self.input_dims) < 1:
            raise ValidationError(f"input_dims must list {M} positive widths")
        if self.tokens < 1 or self.num_styles < 1:
            raise ValidationError("tokens and num_styles must be positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValidationError("split sizes must be non-negative")
        if not self.noise_sigma >= 0:
            raise ValidationError("noise_sigma must be non-negative")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ValidationError(f"redundancy must lie in [0, 1], got {self.redundancy}")
        owned = set()
        for entry in self.dominance:
            if len(entry) != 3:
                raise ValidationError(f"dominance entry {entry} must be (class, class, modality)")
            c1, c2, k = entry
            if not (0 <= c1 < C and 0 <= c2 < C) or c1 == c2:
                raise ValidationError(f"dominance pair ({c1}, {c2}) must name two distinct classes")
            if not 0 <= k < M:
                raise ValidationError(f"dominance modality {k} out of range")
            if c2 in owned:
                raise ValidationError(f"class {c2} already collapsed by another dominance pair")
            owned.add(c2)

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["dominance"] = [list(p) for p in self.dominance]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    config: TaskConfig
    splits: Dict[str, Batch]
    prototypes: List[np.ndarray]  # per modality, C x N x d_m class-conditional means

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]

    def arrays(self):
        """Flat name -> array view, in a fixed order (used for checksums and persistence)."""
        out = {}
        for m, p in enumerate(self.prototypes):
            out[f"prototypes.{m}"] = p
        for split in SPLITS:
            b = self.splits[split]
            for m, x in enumerate(b.xs):
                out[f"{split}.x{m}"] = x
            out[f"{split}.labels"] = b.labels.astype(np.float64)
        return out

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def manifest(self):
        return {"config": self.config.to_dict(), "seed": self.config.seed, "checksum": self.checksum()}


def _class_source(cfg):
    """source[m][c]: whose shared prototype class c uses in modality m."""
    src = [list(range(cfg.num_classes)) for _ in range(cfg.num_modalities)]
    for c1, c2, k in cfg.dominance:
        for m in range(cfg.num_modalities):
            if m != k:
                src[m][c2] = src[m][c1]
    return src


def generate(cfg):
    """Draw a dataset. Identical configs give bitwise-identical datasets."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    M, C, N = cfg.num_modalities, cfg.num_classes, cfg.tokens
    dmax = max(cfg.input_dims)
    rho = cfg.redundancy
    shared = rng.standard_normal((C, N, dmax))
    styles = rng.standard_normal((M, cfg.num_styles, N, dmax))
    src = _class_source(cfg)

    class_views = []
    style_views = []
    for m, w in enumerate(cfg.input_dims):
        class_views.append(rho * shared[src[m], :, :w])
        style_views.append((1.0 - rho) * styles[m, :, :, :w])
    # class-conditional means: styles are uniform and independent of the label
    prototypes = [cv + sv.mean(axis=0) for cv, sv in zip(class_views, style_views)]

    splits = {}
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        labels = rng.permutation(np.arange(n) % C)
        xs = []
        for m, w in enumerate(cfg.input_dims):
            s = rng.integers(0, cfg.num_styles, size=n)
            noise = rng.standard_normal((n, N, w))
            xs.append(class_views[m][labels] + style_views[m][s] + cfg.noise_sigma * noise)
        splits[split] = Batch(xs, labels)
    return Dataset(cfg, splits, prototypes)


def nearest_prototype(dataset, batch, subset):
    """Nearest class-conditional mean over the available modalities (missing ones zeroed)."""
    n = len(batch)
    C = dataset.config.num_classes
    dist = np.zeros((n, C))
    for m in subset.available:
        x = batch.xs[m].reshape(n, 1, -1)
        p = dataset.prototypes[m].reshape(1, C, -1)
        dist += ((x - p) ** 2).sum(axis=2)
    return np.argmin(dist, axis=1)


def oracle_accuracy(dataset, subset, split="test"):
    """Model-free reference accuracy of the nearest-prototype rule on ``split``."""
    subset.require_nonempty()
    batch = dataset.splits[split]
    if len(batch) == 0:
        return float("nan")
    pred = nearest_prototype(dataset, batch, subset)
    return float(np.mean(pred == batch.labels))


def pair_accuracy(dataset, subset, c1, c2, split="test"):
    """Nearest-prototype accuracy restricted to samples of classes c1, c2 and to those two prototypes."""
    batch = dataset.splits[split]
    keep = np.isin(batch.labels, (c1, c2))
    sub = batch.take(keep)
    n = len(sub)
    dist = np.zeros((n, 2))
    for m in subset.available:
        x = sub.xs[m].reshape(n, 1, -1)
        p = dataset.prototypes[m][[c1, c2]].reshape(1, 2, -1)
        dist += ((x - p) ** 2).sum(axis=2)
    pred = np.where(np.argmin(dist, axis=1) == 0, c1, c2)
    return float(np.mean(pred == sub.labels))
