"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is open, every
primitive whose inputs carry gradient information appends a record holding a
closure for its vector-Jacobian product; :func:`backward` replays those
records in reverse. Without an open tape nothing is recorded, so inference
pays no autodiff cost.

Every tensor is checked for NaN/Inf on construction. Overflow is a hard
error rather than something that silently propagates.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Record", "NonFiniteError", "ShapeError", "TapeError",
    "backward", "grad_check", "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "exp", "log",
    "relu", "gelu", "softmax", "log_softmax", "layer_norm", "embedding",
    "gather_last", "masked_fill", "sum", "mean", "concat", "reshape",
    "transpose", "conv2d", "depthwise_conv2d", "upsample2x", "swapaxes",
]


class NonFiniteError(FloatingPointError):
    """A forward computation produced or received NaN/Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # min/max propagate NaN and expose +-inf without allocating a mask
        if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


@dataclass
class Record:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Scoped recording context; confined to the thread that opened it."""

    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def __post_init__(self):
        self._node_of: dict[int, int] = {}
        self._tensors: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def node(self, t: Tensor) -> int | None:
        """Node id of ``t`` on this tape, registering trainable leaves lazily."""
        n = self._node_of.get(id(t))
        if n is None and t.requires_grad:
            n = self._register(t)
        return n

    def _register(self, t: Tensor) -> int:
        n = len(self._tensors)
        self._tensors.append(t)
        self._node_of[id(t)] = n
        return n

    def tensor(self, node: int) -> Tensor:
        return self._tensors[node]

    def leaves(self) -> list[int]:
        produced = {r.output for r in self.records}
        return [n for n, t in enumerate(self._tensors) if n not in produced and t.requires_grad]


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None:
        ids = tuple(tape.node(t) for t in inputs)
        if any(i is not None for i in ids):
            out_id = tape._register(result)
            tape.records.append(Record(kind, ids, out_id, vjp))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div: division by zero")
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _emit("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _coerce(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = _coerce(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = _coerce(a)
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit("gelu", out, (a,), vjp)


# ---------------------------------------------------------------- softmax family

def softmax(a, axis: int) -> Tensor:
    a = _coerce(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)


def log_softmax(a, axis: int) -> Tensor:
    a = _coerce(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} "
                         f"do not match feature width of {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (a, gamma, beta), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])

        def vjp_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _emit("matmul", out, (a, b), vjp_flat)
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------- indexing

def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    rows = table.shape[0]

    def vjp(g):
        gt = np.zeros((rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), vjp)


def gather_last(a, idx) -> Tensor:
    """Pick ``a[..., idx[...]]``; ``idx`` has the shape of ``a`` minus its last axis."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs tensor {a.shape}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def vjp(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _emit("gather_last", out, (a,), vjp)


def masked_fill(a, mask, value: float) -> Tensor:
    a = _coerce(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, a.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs tensor {a.shape}") from None
    if out.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} vs tensor {a.shape}")
    keep = ~mask
    return _emit("masked_fill", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _coerce(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", out, (a,), vjp)


def concat(tensors: Iterable, axis: int) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(t.shape) for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, ts, vjp)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = _coerce(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


# ---------------------------------------------------------------- convolution (NHWC)

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def conv2d(x, w, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense convolution; ``x`` is (B,H,W,Cin), ``w`` is (kh,kw,Cin,Cout)."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    p = kh // 2 if padding is None else padding
    xp = _pad_hw(x.data, p)
    B, Hp, Wp, _ = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    # patches: (B,Ho,Wo,kh,kw,Cin)
    cols = np.empty((B, Ho, Wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols2 = cols.reshape(B, Ho * Wo, kh * kw * cin)
    wd = w.data
    out = np.matmul(cols2, wd.reshape(-1, cout)).reshape(B, Ho, Wo, cout)
    xshape = x.shape

    def vjp(g):
        g2 = g.reshape(B, Ho * Wo, cout)
        gw = np.matmul(np.swapaxes(cols2, 1, 2), g2).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(g2, wd.reshape(-1, cout).T).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros((B, Hp, Wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, p:p + xshape[1], p:p + xshape[2], :] if p else gxp
        return gx, gw

    return _emit("conv2d", out, (x, w), vjp)


def depthwise_conv2d(x, w) -> Tensor:
    """Per-channel 'same' convolution; ``x`` is (B,H,W,C), ``w`` is (kh,kw,C)."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, _ = w.shape
    p = kh // 2
    xp = _pad_hw(x.data, p)
    B, H, W, C = x.shape
    wd = w.data
    out = np.zeros(x.shape)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + H, j:j + W, :] * wd[i, j]

    def vjp(g):
        gw = np.empty_like(wd)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = (xp[:, i:i + H, j:j + W, :] * g).sum(axis=(0, 1, 2))
                gxp[:, i:i + H, j:j + W, :] += g * wd[i, j]
        return gxp[:, p:p + H, p:p + W, :], gw

    return _emit("depthwise_conv2d", out, (x, w), vjp)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NHWC map."""
    x = _coerce(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _emit("upsample2x", out, (x,),
                 lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] = (),
             retain: bool = False) -> dict[int, Tensor]:
    """Reverse-mode sweep over ``tape`` from scalar ``loss``.

    Populates ``.grad`` on every trainable leaf of the tape and on each tensor
    in ``params`` (zeros when unreachable). Returns node id -> gradient.
    The tape is consumed unless ``retain`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward: tape already consumed")
    root = tape._node_of.get(id(loss))
    if root is None or tape.tensor(root) is not loss:
        raise TapeError("backward: loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {root: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for node, gi in zip(rec.inputs, rec.vjp(g)):
            if node is None or gi is None:
                continue
            prev = grads.get(node)
            grads[node] = gi if prev is None else prev + gi

    for n in tape.leaves():
        t = tape.tensor(n)
        t.grad = grads[n] if n in grads else np.zeros(t.shape)
    for p in params:
        n = tape._node_of.get(id(p))
        p.grad = grads[n] if n is not None and n in grads else np.zeros(p.shape)
    tape.consumed = not retain
    return {n: Tensor(g) for n, g in grads.items()}


# ---------------------------------------------------------------- gradient check

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    nonfinite: bool = False


@dataclass
class GradCheckReport:
    tol: float
    step: float
    params: list[ParamCheck]
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def __str__(self) -> str:
        lines = [f"grad_check step={self.step:g} tol={self.tol:g} floor={self.floor:.2e}"]
        for p in self.params:
            flag = "ok" if p.passed else ("NONFINITE" if p.nonfinite else "FAIL")
            lines.append(f"  {p.name:<24} rel={p.max_rel_error:.3e} abs={p.max_abs_error:.3e} {flag}")
        return "\n".join(lines)


def grad_check(objective: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5, tol: float = 1e-4, floor: float | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``objective`` takes no arguments and reads the current values of
    ``params``. The relative error of an entry is |a - f| / max(|a|, |f|, floor).

    By default ``floor`` is the smallest derivative a central difference can
    resolve to within ``tol``: roundoff in the objective is about
    eps * |L| / step, so the floor is max(1e-6, eps * |L| / (step * tol)).
    Entries below it are effectively compared in absolute terms.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    params = list(params)
    try:
        with Tape() as tape:
            loss = objective()
        backward(loss, tape, params=params)
    except NonFiniteError:
        return GradCheckReport(tol, step, [
            ParamCheck(p.name or f"param{i}", math.inf, math.inf, False, True)
            for i, p in enumerate(params)], floor or 0.0)
    analytic = [p.grad.copy() for p in params]
    if floor is None:
        floor = max(1e-6, np.finfo(np.float64).eps * abs(loss.item()) / (step * tol))

    def evaluate() -> float:
        try:
            return objective().item()
        except NonFiniteError:
            return math.nan

    checks = []
    for i, (p, a) in enumerate(zip(params, analytic)):
        fd = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        nonfinite = False
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = evaluate()
            flat[k] = orig - step
            fm = evaluate()
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                nonfinite = True
            fd.reshape(-1)[k] = (fp - fm) / (2 * step)
        if nonfinite:
            checks.append(ParamCheck(p.name or f"param{i}", math.inf, math.inf, False, True))
            continue
        diff = np.abs(a - fd)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        rel = float((diff / denom).max()) if diff.size else 0.0
        checks.append(ParamCheck(p.name or f"param{i}", rel, float(diff.max(initial=0.0)), rel <= tol))
    return GradCheckReport(tol, step, checks, floor)
