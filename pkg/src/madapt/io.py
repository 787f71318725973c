"""Binary container for checkpoints, adapter banks and datasets, plus run configs.

Container layout (all integers little-endian)::

    b"MMAD"                      magic
    u32                          format version (1)
    u32                          kind tag: 0 theta, 1 bank, 2 dataset
    u32 + bytes                  metadata: UTF-8 JSON, sorted keys
    u32                          tensor count
    per tensor:
        u32 + bytes              name (UTF-8)
        u32                      dtype code: 0 float64, 1 float32
        u32                      rank
        u64 * rank               dims
        raw values               little-endian, row-major

The metadata carries ``checksum``: SHA-256 of everything from the tensor
count to the end of the file. It is verified on load. Writes go to a
temporary file in the destination directory followed by an atomic rename.
"""

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .adapters import DEFAULT_LORA_RANK, AdapterBank, AdapterKind
from .errors import FormatError, ValidationError
from .model import Batch, ModalitySubset, ModelSpec, Theta
from .synth import SPLITS, Dataset, TaskConfig
from .training import TrainConfig

MAGIC = b"MMAD"
VERSION = 1
KIND_TAGS = {"theta": 0, "bank": 1, "dataset": 2}
_TAG_NAMES = {v: k for k, v in KIND_TAGS.items()}
_DTYPES = {0: "<f8", 1: "<f4"}


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _tensor_table(tensors, precision):
    code = {"f64": 0, "f32": 1}[precision]
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<II", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def encode_container(kind, metadata, tensors, precision="f64"):
    """Serialize to bytes. ``tensors`` is an ordered name -> array mapping."""
    if kind not in KIND_TAGS:
        raise ValidationError(f"unknown container kind {kind!r}")
    if precision not in ("f64", "f32"):
        raise ValidationError(f"precision must be 'f64' or 'f32', got {precision!r}")
    table = _tensor_table(tensors, precision)
    meta = dict(metadata)
    meta["checksum"] = hashlib.sha256(table).hexdigest()
    meta["precision"] = precision
    meta_raw = _dumps(meta).encode("utf-8")
    head = MAGIC + struct.pack("<III", VERSION, KIND_TAGS[kind], len(meta_raw))
    return head + meta_raw + table


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode_container(buf, expect_kind=None):
    """Parse bytes into ``(kind, metadata, tensors)``; tensors come back as float64."""
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an MMAD container", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    tag = r.u32("kind tag")
    if tag not in _TAG_NAMES:
        raise FormatError(f"unknown kind tag {tag}", 8)
    kind = _TAG_NAMES[tag]
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"expected a {expect_kind} container, found {kind}", 8)
    meta_len = r.u32("metadata length")
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", meta_at) from None
    table_at = r.pos
    digest = hashlib.sha256(r.buf[table_at:]).hexdigest()
    if digest != metadata.get("checksum"):
        raise FormatError("checksum mismatch in tensor table", table_at)
    count = r.u32("tensor count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        code = r.u32("dtype code")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", at)
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims"))
        width = np.dtype(_DTYPES[code]).itemsize
        raw = r.take(int(np.prod(dims, dtype=np.int64)) * width, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[code]).astype(np.float64).reshape(dims)
        tensors[name] = arr
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after tensor table", r.pos)
    return kind, metadata, tensors


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _read(path, kind):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror}") from None
    return decode_container(buf, kind)


# theta

def theta_bytes(theta, precision="f64"):
    meta = {"spec": theta.spec.to_dict(), "frozen": theta.frozen}
    return encode_container("theta", meta, theta.params, precision)


def save_theta(theta, path, precision="f64"):
    return atomic_write(path, theta_bytes(theta, precision))


def load_theta(path):
    _, meta, tensors = _read(path, "theta")
    spec = ModelSpec.from_dict(meta["spec"])
    theta = Theta(spec, {k: np.array(v) for k, v in tensors.items()})
    return theta.freeze() if meta.get("frozen") else theta


# banks

def bank_bytes(bank, precision="f64"):
    meta = {
        "spec": bank.spec.to_dict(),
        "subset_mask": bank.subset.mask,
        "num_modalities": bank.subset.num_modalities,
        "adapter_kind": bank.kind.value,
        "rank": bank.rank,
    }
    return encode_container("bank", meta, bank.flat(), precision)


def save_bank(bank, path, precision="f64"):
    return atomic_write(path, bank_bytes(bank, precision))


def load_bank(path):
    _, meta, tensors = _read(path, "bank")
    spec = ModelSpec.from_dict(meta["spec"])
    subset = ModalitySubset(meta["subset_mask"], meta["num_modalities"])
    return AdapterBank.from_flat(
        spec, subset, meta["adapter_kind"], {k: np.array(v) for k, v in tensors.items()},
        meta.get("rank", DEFAULT_LORA_RANK),
    )


# datasets

def dataset_bytes(dataset):
    return encode_container("dataset", {"manifest": dataset.manifest()}, dataset.arrays())


def save_dataset(dataset, path):
    return atomic_write(path, dataset_bytes(dataset))


def load_dataset(path):
    _, meta, tensors = _read(path, "dataset")
    manifest = meta["manifest"]
    cfg = TaskConfig.from_dict(manifest["config"])
    M = cfg.num_modalities
    prototypes = [tensors[f"prototypes.{m}"] for m in range(M)]
    splits = {}
    for split in SPLITS:
        xs = [tensors[f"{split}.x{m}"] for m in range(M)]
        splits[split] = Batch(xs, tensors[f"{split}.labels"].astype(np.int64))
    ds = Dataset(cfg, splits, prototypes)
    if ds.checksum() != manifest["checksum"]:
        raise FormatError("dataset content does not match its manifest checksum")
    return ds


# run configuration

_MODEL_KEYS = {"embed_dim", "encoder_depth", "fusion"}
_TASK_KEYS = {f.name for f in fields(TaskConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_TOP_KEYS = {
    "seed", "model", "task", "pretrain", "adapt_train", "kind", "lora_rank",
    "subsets", "arms", "duplication_source", "workdir",
}

DEFAULT_PRETRAIN = {"epochs": 30, "batch_size": 32, "base_lr": 3e-3, "warmup_epochs": 3}
DEFAULT_ADAPT = {"epochs": 30, "batch_size": 32, "base_lr": 1e-2, "warmup_epochs": 3}
DEFAULT_SEED = 42


def _strict(section, allowed, where):
    if not isinstance(section, dict):
        raise ValidationError(f"{where} must be an object")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return section


@dataclass
class RunConfig:
    """Everything one pipeline run needs.

    ``model`` holds only the architecture knobs (``embed_dim``,
    ``encoder_depth``, ``fusion``); modality count, widths, token count and
    class count come from ``task``. One ``seed`` drives data, initialization
    and batching. ``subsets`` lists available-modality index lists and
    defaults to every proper non-empty subset.
    """

    seed: int = DEFAULT_SEED
    model: dict = field(default_factory=lambda: {"embed_dim": 16, "encoder_depth": 2, "fusion": "concat_linear"})
    task: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=lambda: dict(DEFAULT_PRETRAIN))
    adapt_train: dict = field(default_factory=lambda: dict(DEFAULT_ADAPT))
    kind: str = "scale_shift"
    lora_rank: int = DEFAULT_LORA_RANK
    subsets: Optional[List[List[int]]] = None
    arms: List[str] = field(default_factory=lambda: ["pretrained", "duplication", "dedicated", "adapted"])
    duplication_source: Optional[int] = None
    workdir: str = "run"

    @classmethod
    def from_dict(cls, d, env_seed=None):
        _strict(d, _TOP_KEYS, "config")
        _strict(d.get("model", {}), _MODEL_KEYS, "model")
        _strict(d.get("task", {}), _TASK_KEYS, "task")
        _strict(d.get("pretrain", {}), _TRAIN_KEYS, "pretrain")
        _strict(d.get("adapt_train", {}), _TRAIN_KEYS, "adapt_train")
        base = cls()
        kwargs = {k: v for k, v in d.items() if k not in ("model", "pretrain", "adapt_train")}
        if "seed" not in d:
            kwargs["seed"] = env_seed if env_seed is not None else DEFAULT_SEED
        cfg = cls(**kwargs)
        cfg.model = {**base.model, **d.get("model", {})}
        cfg.pretrain = {**DEFAULT_PRETRAIN, **d.get("pretrain", {})}
        cfg.adapt_train = {**DEFAULT_ADAPT, **d.get("adapt_train", {})}
        AdapterKind.parse(cfg.kind)
        cfg.model_spec()  # validates the combined spec
        cfg.train_config("pretrain")
        cfg.train_config("adapt_train")
        return cfg

    @classmethod
    def load(cls, path, env_seed=None):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d, env_seed)

    def to_dict(self):
        return {
            "seed": self.seed, "model": self.model, "task": self.task,
            "pretrain": self.pretrain, "adapt_train": self.adapt_train, "kind": self.kind,
            "lora_rank": self.lora_rank, "subsets": self.subsets, "arms": self.arms,
            "duplication_source": self.duplication_source, "workdir": self.workdir,
        }

    def task_config(self):
        return TaskConfig(**{**self.task, "seed": self.seed})

    def model_spec(self):
        t = self.task_config()
        return ModelSpec(
            num_modalities=t.num_modalities,
            input_dims=t.input_dims,
            tokens_per_modality=t.tokens,
            num_classes=t.num_classes,
            seed=self.seed,
            **self.model,
        )

    def train_config(self, which):
        return TrainConfig(**{**getattr(self, which), "seed": self.seed})

    def subset_list(self):
        from .adapters import enumerate_subsets

        M = self.task_config().num_modalities
        if self.subsets is None:
            return enumerate_subsets(M)
        return [ModalitySubset.of(s, M) for s in self.subsets]
