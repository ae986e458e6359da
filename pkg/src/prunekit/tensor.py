"""Dense float32 tensors with taped reverse-mode differentiation.

Just enough machinery for a small decoder-only transformer: matmul,
elementwise arithmetic, GELU, softmax / log-softmax, layer normalization,
row gathers, and the loss helpers built on top of them. Every primitive
checks its output for NaN/Inf and raises instead of propagating garbage.

Recording model: ops executed inside a ``with ComputeGraph() as g:`` block
append one node per primitive, in execution order. ``g.backward(loss)``
walks the nodes in reverse, accumulating gradients additively into
``Tensor.grad`` (call ``zero_grad`` between batches if you do not want the
sums). Outside a graph, ops run plain numpy with no recording overhead.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


_SQRT_2_OVER_PI = np.float32(0.7978845608028654)
_GELU_C = np.float32(0.044715)

# Additive mask value: large enough that exp() underflows to zero after the
# max-shift, small enough to stay finite in float32.
NEG_INF = np.float32(-1e9)


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A contiguous row-major float32 array plus an optional grad buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_f32(data)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return self.data.item()

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE: list["ComputeGraph"] = []


class ComputeGraph:
    """Tape of recorded primitives, in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Populate grads of everything reachable from ``loss``.

        Parameter grads accumulate additively across calls; grads of
        intermediate tensors (op outputs) are rebuilt from scratch each call.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        for node in self.nodes:
            node.out.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            contribs = node.backward_fn(g)
            for inp, contrib in zip(node.inputs, contribs):
                if contrib is None or not isinstance(inp, Tensor):
                    continue
                if inp.grad is None:
                    inp.grad = contrib.astype(np.float32, copy=True)
                else:
                    np.add(inp.grad, contrib, out=inp.grad, casting="unsafe")


def recording_active() -> bool:
    return bool(_ACTIVE)


def _emit(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericError("op produced a non-finite value")
    out = Tensor(out_data)
    if _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operand(x):
    """Return (raw ndarray or scalar, tensor-or-None) for a mixed operand."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.float32(x) if np.isscalar(x) else _as_f32(x), None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    out = ad + bd

    def backward(g):
        ga = _unbroadcast(g, ad.shape) if at is not None else None
        gb = _unbroadcast(g, bd.shape) if bt is not None else None
        return ga, gb

    return _emit(out, (at, bt), backward)


def sub(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    out = ad - bd

    def backward(g):
        ga = _unbroadcast(g, ad.shape) if at is not None else None
        gb = _unbroadcast(-g, bd.shape) if bt is not None else None
        return ga, gb

    return _emit(out, (at, bt), backward)


def mul(a, b) -> Tensor:
    ad, at = _operand(a)
    bd, bt = _operand(b)
    out = ad * bd

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if at is not None else None
        gb = _unbroadcast(g * ad, bd.shape) if bt is not None else None
        return ga, gb

    return _emit(out, (at, bt), backward)


def neg(a: Tensor) -> Tensor:
    return mul(a, -1.0)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# matmul and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b``. Supports 2D @ 2D, batched @ batched (equal leading dims),
    and batched @ 2D (shared weight)."""
    ad, at = _operand(a)
    bd, bt = _operand(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {ad.shape} x {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(
            f"matmul leading dims disagree: {ad.shape} x {bd.shape}"
        )
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if at is not None:
            ga = g @ np.swapaxes(bd, -1, -2)
        if bt is not None:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                n = g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(out, (at, bt), backward)


def reshape(a: Tensor, shape) -> Tensor:
    ad = a.data
    out = ad.reshape(shape)

    def backward(g):
        return (g.reshape(ad.shape),)

    return _emit(np.ascontiguousarray(out), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(u)
    out = np.float32(0.5) * x * (1.0 + t)

    def backward(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dydx,)

    return _emit(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0)

    def backward(g):
        return (g * (x > 0.0),)

    return _emit(out, (a,), backward)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, max-shifted. ``mask`` is an additive
    constant (e.g. a causal mask of ``NEG_INF``), broadcast onto the input."""
    x = a.data if mask is None else a.data + mask
    y = _softmax_np(x)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _emit(y, (a,), backward)


def log_softmax(a: Tensor, mask=None) -> Tensor:
    x = a.data if mask is None else a.data + mask
    out = _log_softmax_np(x)
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _emit(xhat, (a,), backward)


# ---------------------------------------------------------------------------
# gathers and reductions


def index_rows(a: Tensor, ids) -> Tensor:
    """Select rows of a 2D tensor: ``out[..., :] = a[ids[...], :]``.

    Doubles as the embedding lookup; the gradient scatter-adds.
    """
    ids = np.asarray(ids)
    if a.ndim != 2:
        raise DimensionError(f"index_rows needs a 2D table, got {a.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[0]):
        bad = int(np.argwhere(~((ids >= 0) & (ids < a.shape[0]))).flat[0])
        raise ContractError(f"row index out of range at flat position {bad}")
    out = a.data[ids]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, ids.reshape(-1), g.reshape(-1, a.shape[1]))
        return (ga,)

    return _emit(out, (a,), backward)


def gather_last(a: Tensor, idx) -> Tensor:
    """Pick one entry along the last axis: ``out[...] = a[..., idx[...]]``."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(
            f"gather_last index shape {idx.shape} does not match {a.shape[:-1]}"
        )
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    v = a.shape[-1]

    def backward(g):
        ga = np.zeros_like(a.data).reshape(-1, v)
        flat = np.arange(ga.shape[0])
        np.add.at(ga, (flat, idx.reshape(-1)), g.reshape(-1))
        return (ga.reshape(a.shape),)

    return _emit(out, (a,), backward)


def max_last(a: Tensor) -> Tensor:
    """Max over the last axis; gradient flows to the first argmax."""
    idx = a.data.argmax(axis=-1)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    v = a.shape[-1]

    def backward(g):
        ga = np.zeros_like(a.data).reshape(-1, v)
        flat = np.arange(ga.shape[0])
        np.add.at(ga, (flat, idx.reshape(-1)), g.reshape(-1))
        return (ga.reshape(a.shape),)

    return _emit(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum(dtype=np.float32)

    def backward(g):
        return (np.broadcast_to(g, a.shape),)

    return _emit(np.asarray(out), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = np.float32(a.size)
    out = a.data.sum(dtype=np.float32) / n

    def backward(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _emit(np.asarray(out), (a,), backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` is [..., V]; ``targets`` holds int ids of shape
    ``logits.shape[:-1]``. Optional ``weights`` (same shape as targets)
    reweights positions; the result is sum(w * nll) / sum(w).
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError("target id out of range")
    lsm = log_softmax(logits)
    picked = gather_last(lsm, targets)
    if weights is None:
        return neg(mean_all(picked))
    weights = _as_f32(weights)
    total = float(weights.sum())
    if total <= 0.0:
        raise ContractError("cross_entropy weights sum to zero")
    return mul(sum_all(mul(picked, weights)), -1.0 / total)


def kl_divergence(student_logits: Tensor, teacher_logits) -> Tensor:
    """KL(softmax(teacher) || softmax(student)), summed over rows.

    The teacher side is treated as a constant; no gradient flows to it.
    Computed in log space with max-shifting.
    """
    td = teacher_logits.data if isinstance(teacher_logits, Tensor) else _as_f32(teacher_logits)
    if td.shape != tuple(student_logits.shape):
        raise DimensionError(
            f"logit shapes disagree: student {student_logits.shape}, teacher {td.shape}"
        )
    t_lsm = _log_softmax_np(td)
    t_p = np.exp(t_lsm)
    entropy_term = float((t_p * t_lsm).sum(dtype=np.float32))
    s_lsm = log_softmax(student_logits)
    cross = sum_all(mul(s_lsm, t_p))
    return add(neg(cross), entropy_term)
