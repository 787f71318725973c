"""Pretraining, dedicated retraining and adapter-bank adaptation.

All three regimes share one loop: shuffled minibatches, softmax cross-entropy,
AdamW with decoupled weight decay, and a polynomial learning-rate schedule
with a constant-factor warm-up.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List

import numpy as np

from . import autodiff as ad
from .adapters import AdapterKind, init_bank
from .errors import ContractError, NumericError, ValidationError
from .model import ModalitySubset, build_model, leaves_from, run_network, zero_fill

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 6e-5
    warmup_epochs: int = 3
    warmup_factor: float = 0.1
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 42

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not 0 < self.warmup_factor <= 1:
            raise ValidationError(f"warmup_factor must lie in (0, 1], got {self.warmup_factor}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.poly_power <= 0:
            raise ValidationError("poly_power must be positive")
        if self.base_lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValidationError("base_lr and eps must be positive, weight_decay non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def poly_lr(step, total_steps, cfg, steps_per_epoch=1):
    """Learning rate at ``step``.

    The first ``warmup_epochs * steps_per_epoch`` steps use
    ``base_lr * warmup_factor`` (constant, no ramp); after that
    ``base_lr * (1 - step / total_steps) ** poly_power``.
    """
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if step < cfg.warmup_epochs * steps_per_epoch:
        return cfg.base_lr * cfg.warmup_factor
    return cfg.base_lr * (1.0 - step / total_steps) ** cfg.poly_power


@dataclass
class OptState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def num_scalars(self):
        return int(sum(a.size for a in self.m.values()))


def adamw_step(params, grads, state, lr, cfg, decay=None):
    """One AdamW update, in place on ``params``.

    Order per parameter: ``w *= 1 - lr * wd`` first, then the bias-corrected
    moment step. ``decay`` optionally names the parameters that receive weight
    decay (all of them when None). A non-finite gradient aborts the step
    before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        w = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        if decay is None or name in decay:
            w *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


@dataclass
class TrainLog:
    steps: List[int] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)

    def lines(self):
        """One structured-text line per epoch."""
        return [
            f"epoch={e['epoch']} step={e['step']} lr={e['lr']!r} loss={e['loss']!r}"
            for e in self.epochs
        ]

    def window_means(self, frac=0.1):
        k = max(1, int(len(self.losses) * frac))
        return float(np.mean(self.losses[:k])), float(np.mean(self.losses[-k:]))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _run_loop(spec, data, subset, cfg, params, make_hook, decay):
    """Shared minibatch loop. ``params`` is the dict of arrays being trained."""
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    state = OptState()
    log = TrainLog()
    filled = zero_fill(data, subset)
    step = 0
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for idx in _batches(n, cfg.batch_size, rng):
            lr = poly_lr(step, total, cfg, per_epoch)
            xs = [x[idx] for x in filled.xs]
            P, hook, trainable = make_hook()
            with ad.Tape() as tape:
                logits, _ = run_network(spec, P, xs, subset, hook)
                loss = ad.softmax_cross_entropy(logits, filled.labels[idx])
            ad.backward(loss, tape)
            grads = {name: t.grad for name, t in trainable.items()}
            adamw_step(params, grads, state, lr, cfg, decay)
            log.steps.append(step)
            log.lrs.append(lr)
            log.losses.append(loss.item())
            epoch_losses.append(loss.item())
            step += 1
        log.epochs.append(
            {"epoch": epoch, "step": step, "lr": log.lrs[-1], "loss": float(np.mean(epoch_losses))}
        )
        logger.debug(log.lines()[-1])
    return state, log


def _train_full(spec, data, subset, cfg):
    if len(data.xs) != spec.num_modalities:
        raise ContractError(
            f"data provides {len(data.xs)} modalities, model expects {spec.num_modalities}"
        )
    theta = build_model(spec)

    def make_hook():
        P = leaves_from(theta.params, requires_grad=True)
        return P, None, P

    state, log = _run_loop(spec, data, subset, cfg, theta.params, make_hook, None)
    return theta, log


def pretrain(spec, data, cfg):
    """Train every parameter on complete inputs. Returns ``(theta, log)``."""
    return _train_full(spec, data, ModalitySubset.full(spec.num_modalities), cfg)


def train_dedicated(spec, subset, data, cfg):
    """Train a fresh model from scratch with the missing modalities zeroed throughout."""
    return _train_full(spec, data, subset, cfg)


def adapt(theta, subset, kind, data, cfg, rank=None, return_state=False):
    """Learn an adapter bank for ``subset`` on top of a frozen ``theta``.

    Only bank parameters are optimized. Weight decay applies to LoRA factors
    only; scale and shift vectors are exempt so they are not pulled toward
    zero. Returns ``(bank, log)``, or ``(bank, log, opt_state)`` with
    ``return_state``.
    """
    if not theta.frozen:
        raise ContractError("adapt requires a frozen theta; call theta.freeze() first")
    kind = AdapterKind.parse(kind)
    extra = {} if rank is None else {"rank": rank}
    bank = init_bank(theta.spec, subset, kind, theta=theta, **extra)
    params = bank.flat()
    # flat() returns views into bank.params, so in-place updates land in the bank
    decay = set(params) if kind is AdapterKind.LORA else set()

    P = leaves_from(theta.params, requires_grad=False)

    def make_hook():
        hook = bank.hook(requires_grad=True)
        return P, hook, hook.leaves

    state, log = _run_loop(theta.spec, data, subset, cfg, params, make_hook, decay)
    if return_state:
        return bank, log, state
    return bank, log
