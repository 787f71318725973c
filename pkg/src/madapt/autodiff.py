"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one operand requires a gradient. Outside a tape nothing is recorded,
which is how evaluation runs.

    with Tape() as tape:
        y = matmul(x, w)
        loss = softmax_cross_entropy(y, labels)
    backward(loss, tape)

Broadcasting is limited to a length-``d`` vector applied across every row of
an ``(..., d)`` operand. Leading axes of activations are treated as rows.
"""

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "transpose",
    "add",
    "mul",
    "relu",
    "gelu",
    "scale_shift",
    "elementwise",
    "layer_norm",
    "mean",
    "sum_all",
    "concat",
    "reshape",
    "softmax",
    "softmax_cross_entropy",
    "backward",
]

_state = threading.local()


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    """Immutable float64 array with an optional gradient slot.

    ``values`` are frozen after construction; only ``grad`` changes, and only
    through :func:`backward` or :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, values, shape=None, requires_grad=False):
        arr = np.array(values, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 1 for s in shape):
                raise DimensionError(f"dimension sizes must be positive, got {shape}")
            if arr.size != int(np.prod(shape)):
                raise DimensionError(
                    f"{arr.size} values cannot fill shape {shape}"
                )
            arr = arr.reshape(shape)
        _check_finite(arr, "Tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel()

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order. A tape may be replayed backward exactly once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def leaves(self):
        """Tensors requiring grad that enter the tape without being produced on it."""
        produced = {id(n.output) for n in self.nodes}
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(data, inputs, backward_rule, name):
    data = np.asarray(data, dtype=np.float64)  # 0-d products come back as numpy scalars
    _check_finite(data, name)
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out._tape = None
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._tape = tape
        tape.nodes.append(_Node(tuple(inputs), out, backward_rule))
    return out


def _sum_to_vector(g, d):
    return g.reshape(-1, d).sum(axis=0)


def _broadcast_kind(a, b, opname):
    """Return 'same', 'b_vec' or 'a_vec' for an elementwise pair."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_vec"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_vec"
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable")


def matmul(a, b):
    """Product of an ``(..., K)`` tensor with a ``(K, D)`` matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    K = B.shape[0]

    def rule(g):
        ga = g @ B.T
        gb = A.reshape(-1, K).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(A @ B, (a, b), rule, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "add")

    def rule(g):
        if kind == "same":
            return g, g
        if kind == "b_vec":
            return g, _sum_to_vector(g, b.shape[0])
        return _sum_to_vector(g, a.shape[0]), g

    return _emit(a.data + b.data, (a, b), rule, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "mul")
    A, B = a.data, b.data

    def rule(g):
        ga, gb = g * B, g * A
        if kind == "b_vec":
            gb = _sum_to_vector(gb, B.shape[0])
        elif kind == "a_vec":
            ga = _sum_to_vector(ga, A.shape[0])
        return ga, gb

    return _emit(A * B, (a, b), rule, "mul")


def relu(x):
    x = as_tensor(x)
    X = x.data
    # subgradient at exactly 0 is 0
    return _emit(np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    X = x.data
    u = _GELU_C * (X + 0.044715 * X**3)
    t = np.tanh(u)

    def rule(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * X**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t**2) * du),)

    return _emit(0.5 * X * (1.0 + t), (x,), rule, "gelu")


def scale_shift(x, gamma=None, beta=None):
    """``gamma * x + beta`` with length-d vectors broadcast over the rows of x.

    Either vector may be omitted, giving the scale-only or shift-only form.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    for name, v in (("gamma", gamma), ("beta", beta)):
        if v is not None and v.shape != (d,):
            raise DimensionError(f"scale_shift: {name} has shape {v.shape}, expected ({d},)")
    X = x.data
    out = X * gamma.data if gamma is not None else X.copy()
    if beta is not None:
        out = out + beta.data
    inputs = [x] + [v for v in (gamma, beta) if v is not None]

    def rule(g):
        grads = [g * gamma.data if gamma is not None else g]
        if gamma is not None:
            grads.append(_sum_to_vector(g * X, d))
        if beta is not None:
            grads.append(_sum_to_vector(g, d))
        return grads

    return _emit(out, inputs, rule, "scale_shift")


def elementwise(op, *operands):
    """Dispatch by name: add, mul, relu, gelu or scale_shift."""
    table = {"add": add, "mul": mul, "relu": relu, "gelu": gelu, "scale_shift": scale_shift}
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def layer_norm(x, affine_gain=None, affine_bias=None, eps=1e-5):
    """Normalize each row over the last axis (population variance), then apply the affine pair."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    for name, v in (("gain", affine_gain), ("bias", affine_bias)):
        if v is not None and v.shape != (d,):
            raise DimensionError(f"layer_norm: {name} has shape {v.shape}, expected ({d},)")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * affine_gain.data if affine_gain is not None else xhat.copy()
    if affine_bias is not None:
        out = out + affine_bias.data
    inputs = [x] + [v for v in (affine_gain, affine_bias) if v is not None]

    def rule(g):
        gx_hat = g * affine_gain.data if affine_gain is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if affine_gain is not None:
            grads.append(_sum_to_vector(g * xhat, d))
        if affine_bias is not None:
            grads.append(_sum_to_vector(g, d))
        return grads

    return _emit(out, inputs, rule, "layer_norm")


def mean(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), rule, "mean")


def sum_all(x):
    x = as_tensor(x)
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def rule(g):
        return np.split(g, splits, axis=axis)

    return _emit(out, tensors, rule, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    return _emit(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def softmax(logits):
    """Row-wise softmax as a plain array (analysis only, not recorded)."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under row softmax."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), labels] - logsum
    p = np.exp(z - logsum[:, None])

    def rule(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return _emit(np.array(-logp.mean()), (logits,), rule, "softmax_cross_entropy")


def backward(loss, tape=None):
    """Populate ``grad`` on every gradient-requiring leaf recorded on the tape.

    Leaves that do not influence ``loss`` receive zeros. Running backward a
    second time on the same tape, or into a leaf whose grad was not cleared,
    raises ContractError instead of accumulating.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")
    if tape.consumed:
        raise ContractError("backward already ran on this tape")
    leaves = tape.leaves()
    stale = [t for t in leaves if t.grad is not None]
    if stale:
        raise ContractError(
            f"{len(stale)} leaf tensor(s) still hold gradients; call zero_grad() first"
        )
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(t.shape)
    for t in leaves:
        t.grad = grads.get(id(t), np.zeros(t.shape))
