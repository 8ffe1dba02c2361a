"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad=True`` appends a
record to the active :class:`GradTape`.  :func:`backward` replays the tape in
reverse recording order.  Tensors hold float32 numpy arrays unless a wider
dtype is requested through :func:`default_dtype` (the gradient checks run in
float64).
"""

from __future__ import annotations

import contextlib
import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "TapeError",
    "EmptyLossWarning",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "is_grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "get_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "exp",
    "log",
    "relu",
    "gelu",
    "tanh",
    "embedding",
    "layer_norm",
    "softmax",
    "log_softmax",
    "softmax_with_temperature",
    "attention",
    "dropout",
    "cross_entropy",
    "kl_divergence",
    "KL_FLOOR",
]

KL_FLOOR = 1e-9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape."""


class EmptyLossWarning(UserWarning):
    """A loss was requested over zero unmasked positions."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class GradTape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` for inputs that
    need none).
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        if self.consumed:
            # first op of a fresh forward pass after a backward
            self.records.clear()
            self.consumed = False
        self.records.append((out, inputs, fn))

    def clear(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed or not self.records:
            raise TapeError("backward() called without a new taped forward pass")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = inp
        # whatever is left never appeared as an op output: leaf tensors
        for key, g in grads.items():
            t = leaves.get(key)
            if t is None:
                continue
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        self.consumed = True


_TAPE = GradTape()


def get_tape() -> GradTape:
    return _TAPE


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that contributed to ``loss``."""
    _TAPE.backward(loss)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPE.record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1 + 0.044715 * x2))
    out = 0.5 * x * (1 + t)

    def fn(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), fn)


# ---------------------------------------------------------------------------
# shape and reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``matmul`` broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} x {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes so the weight gradient is one GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[-1])

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), fn)

    out = ad @ bd

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as one taped op."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {xd.shape} x {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, wd.shape[1])
    inputs = (x, w) if b is None else (x, w, b)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, inputs, fn)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    wd = weight.data
    if ids.size and (ids.min() < 0 or ids.max() >= wd.shape[0]):
        raise IndexError(f"embedding id out of range [0, {wd.shape[0]})")

    def fn(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[1]))
        return (gw,)

    return _make(wd[ids], (weight,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = xd.shape[-1]

    def fn(g):
        gg = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = rstd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        ggamma = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn)


# ---------------------------------------------------------------------------
# distributions and losses


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(a.data, axis)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), fn)


def softmax_with_temperature(logits: Tensor, T: float = 1.0) -> Tensor:
    """``softmax(logits / T)`` over the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if T == 1.0:
        return softmax(logits, axis=-1)
    return softmax(div(logits, float(T)), axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d) + bias) v``.

    ``q`` is ``[..., Lq, d]``, ``k`` and ``v`` are ``[..., Lk, d]``; ``bias`` is a
    constant additive mask broadcastable to ``[..., Lq, Lk]``.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if bias is not None:
        s = s + bias
    p = _softmax_np(s, -1).astype(qd.dtype, copy=False)
    out = p @ vd

    def fn(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _make(out, (q, k, v), fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[N, V]`` (leading axes are flattened); ``mask`` marks the
    positions that count.  With no counted position the loss is 0 and an
    :class:`EmptyLossWarning` is emitted.
    """
    ld = logits.data
    V = ld.shape[-1]
    x = ld.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {x.shape[0]} rows vs {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= V):
        raise IndexError(f"cross_entropy target out of range [0, {V})")
    m = np.ones(t.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        warnings.warn("cross_entropy over zero unmasked positions", EmptyLossWarning, stacklevel=2)
        return _make(np.zeros((), dtype=ld.dtype), (logits,), lambda g: (np.zeros_like(ld),))
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t.shape[0])
    nll = lse - z[rows, t]
    loss = np.asarray(nll[m].sum(dtype=np.float64) / n, dtype=ld.dtype)

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        p *= (m[:, None] * (g / n))
        return (p.reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _make(loss, (logits,), fn)


def kl_divergence(p: Tensor, q: Tensor, mask=None) -> Tensor:
    """Mean over rows of ``sum_v p_v ln(p_v / q_v)`` in nats.

    Rows live on the last axis.  ``q`` is floored at :data:`KL_FLOOR` so a zero
    in ``q`` never yields ``inf``; ``0 ln 0`` is taken as 0.  ``mask`` selects
    the rows that count toward the mean.
    """
    pd, qd = p.data, q.data
    if pd.shape != qd.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {pd.shape} vs {qd.shape}")
    V = pd.shape[-1]
    p2 = pd.reshape(-1, V)
    q2 = qd.reshape(-1, V)
    m = np.ones(p2.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        warnings.warn("kl_divergence over zero unmasked rows", EmptyLossWarning, stacklevel=2)
        return _make(np.zeros((), dtype=pd.dtype), (p, q), lambda g: (np.zeros_like(pd), np.zeros_like(qd)))
    qf = np.maximum(q2, KL_FLOOR)
    pf = np.maximum(p2, KL_FLOOR)
    pos = p2 > 0
    logratio = np.where(pos, np.log(pf) - np.log(qf), 0.0)
    rowkl = (p2 * logratio).sum(axis=1, dtype=np.float64)
    loss = np.asarray(rowkl[m].sum() / n, dtype=pd.dtype)

    def fn(g):
        w = (m[:, None] * (float(g) / n)).astype(pd.dtype)
        gp = gq = None
        if p.requires_grad:
            gp = (w * np.where(pos, logratio + 1.0, 0.0)).reshape(pd.shape).astype(pd.dtype, copy=False)
        if q.requires_grad:
            gq = (w * np.where(q2 > KL_FLOOR, -p2 / qf, 0.0)).reshape(qd.shape).astype(qd.dtype, copy=False)
        return gp, gq

    return _make(loss, (p, q), fn)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3, index=None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` with respect to ``x``.

    With ``index`` (flat positions) only those coordinates are probed and the
    result is the 1-D vector of their partial derivatives.
    """
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if index is None else np.asarray(index)
    out = np.zeros(idx.size, dtype=np.float64)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if index is None else out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``, 0 when both vanish.

    ``floor`` keeps gradients that are zero up to rounding (e.g. key biases,
    which cancel inside the softmax) from turning noise into a large ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3, samples: int | None = None,
              rng: np.random.Generator | None = None, floor: float = 1e-7) -> float:
    """Worst relative error between taped and finite-difference gradients.

    ``samples`` limits the probe to that many random coordinates per input.
    """
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if samples is None or samples >= t.size:
            worst = max(worst, relative_error(analytic, numeric_gradient(f, t, h), floor))
        else:
            idx = rng.choice(t.size, samples, replace=False)
            worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric_gradient(f, t, h, idx), floor))
    return worst
