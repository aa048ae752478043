"""Dense float64 tensors with a reverse-mode gradient tape.

The operation set is exactly what the dual-encoder graph needs: affine
maps, the attention pieces (softmax, reshape, transpose), GELU, layer
norm, feature normalization, cosine similarity, and cross-entropy heads.
Every operation evaluates eagerly with numpy. When a tape is active and
at least one input requires gradients, the operation also registers a
vector-Jacobian rule so :func:`grad` can replay the trace backward.

Tapes are thread-local: concurrent client training uses one tape per
thread with no shared mutable state. All operations are pure; identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateVectorError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_REL_ERR_FLOOR = 1e-8  # denominator floor for relative errors near zero


class Tensor:
    """A float64 array plus autodiff bookkeeping.

    ``trainable`` marks leaf parameters eligible to receive gradients.
    ``requires_grad`` is set internally on intermediate results that
    depend on a trainable leaf while a tape is active. Identity is the
    parameter id: gradient maps are keyed by the Tensor object itself.
    """

    __slots__ = ("data", "trainable", "requires_grad", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), trainable=self.trainable, name=self.name)
        return t

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, trainable={self.trainable}{tag})"

    # Small amount of operator sugar so model code reads naturally.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Tape:
    """Ordered trace of primitive applications for one forward pass.

    Entering the tape as a context manager makes it the active tape of
    the current thread; operations executed inside append their reverse
    rules. A tape is single-writer; replay via :func:`grad` is read-only
    and may run repeatedly.
    """

    __slots__ = ("_records",)

    def __init__(self):
        # Each record: (output tensor, input tensors, vjp callable).
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._records)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Wrap an op result, recording it when gradients must flow."""
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes when present."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g: np.ndarray):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if na else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if nb else None
        return ga, gb

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from exc
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g: np.ndarray):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _make(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.data * c
    na = a.requires_grad

    def vjp(g: np.ndarray):
        return (g * c if na else None,)

    return _make(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU, applied elementwise."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    na = a.requires_grad

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data
    _check_finite(out, "layer_norm")
    nx, ng, nb = x.requires_grad, gain.requires_grad, bias.requires_grad
    n = xd.shape[-1]

    def vjp(g: np.ndarray):
        gx = gg = gb = None
        if nx:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        if ng:
            gg = _unbroadcast(g * xhat, gain.data.shape)
        if nb:
            gb = _unbroadcast(g, bias.data.shape)
        return gx, gg, gb

    del n
    return _make(out, (x, gain, bias), vjp)


def softmax(a: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    na = a.requires_grad

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under a stable softmax.

    ``logits`` is a length-K vector already divided by any temperature.
    """
    ld = logits.data
    if ld.ndim != 1 or ld.size < 1:
        raise ShapeError(f"softmax_xent expects a 1-D logit vector, got shape {ld.shape}")
    k = ld.shape[0]
    target = int(target)
    if not 0 <= target < k:
        raise IndexError(f"target {target} outside [0, {k})")
    m = ld.max()
    z = ld - m
    e = np.exp(z)
    se = e.sum()
    loss = np.log(se) - z[target]
    _check_finite(loss, "softmax_xent")
    na = logits.requires_grad

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        p = e / se
        p[target] -= 1.0
        return (g * p,)

    return _make(np.asarray(loss), (logits,), vjp)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean stable cross-entropy over rows of a (B, K) logit matrix."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy_mean expects (batch, classes), got {ld.shape}")
    t = np.asarray(targets)
    if t.shape != (ld.shape[0],):
        raise ShapeError(f"targets shape {t.shape} does not match batch {ld.shape[0]}")
    if t.size == 0:
        raise ContractError("cross_entropy_mean: empty batch")
    if t.min() < 0 or t.max() >= ld.shape[1]:
        raise IndexError("target outside class range")
    b = ld.shape[0]
    rows = np.arange(b)
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    e = np.exp(z)
    se = e.sum(axis=-1)
    losses = np.log(se) - z[rows, t]
    loss = losses.mean()
    _check_finite(loss, "cross_entropy_mean")
    na = logits.requires_grad

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        p = e / se[:, None]
        p[rows, t] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), vjp)


def cosine(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1]."""
    ud, vd = u.data, v.data
    if ud.ndim != 1 or vd.ndim != 1 or ud.shape != vd.shape:
        raise ShapeError(f"cosine expects equal-length vectors, got {ud.shape} and {vd.shape}")
    nu = math.sqrt(float(ud @ ud))
    nv = math.sqrt(float(vd @ vd))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    raw = float(ud @ vd) / (nu * nv)
    out = min(1.0, max(-1.0, raw))
    clipped = raw != out
    nu_grad, nv_grad = u.requires_grad, v.requires_grad

    def vjp(g: np.ndarray):
        if clipped:
            z = np.zeros_like
            return (z(ud) if nu_grad else None, z(vd) if nv_grad else None)
        gu = g * (vd / (nu * nv) - raw * ud / (nu * nu)) if nu_grad else None
        gv = g * (ud / (nu * nv) - raw * vd / (nv * nv)) if nv_grad else None
        return gu, gv

    return _make(np.asarray(out), (u, v), vjp)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    out = x / norm
    na = a.requires_grad

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    na = a.requires_grad
    orig = a.data.shape

    def vjp(g: np.ndarray):
        return (g.reshape(orig) if na else None,)

    return _make(out, (a,), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    out = a.data.transpose(axes)
    na = a.requires_grad
    inverse = tuple(np.argsort(axes))

    def vjp(g: np.ndarray):
        return (g.transpose(inverse) if na else None,)

    return _make(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    needs = [p.requires_grad for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if need else None for piece, need in zip(pieces, needs))

    return _make(out, tuple(parts), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    na = a.requires_grad
    orig = a.data.shape

    def vjp(g: np.ndarray):
        return (_unbroadcast(g, orig) if na else None,)

    return _make(out, (a,), vjp)


def take_token(a: Tensor, index: int) -> Tensor:
    """Select one position along the token axis (second-to-last)."""
    x = a.data
    if x.ndim < 2:
        raise ShapeError(f"take_token expects (..., tokens, width), got {x.shape}")
    t = x.shape[-2]
    if not -t <= index < t:
        raise IndexError(f"token index {index} outside sequence of length {t}")
    out = x[..., index, :]
    na = a.requires_grad
    shape = x.shape

    def vjp(g: np.ndarray):
        if not na:
            return (None,)
        full = np.zeros(shape)
        full[..., index, :] = g
        return (full,)

    return _make(out.copy(), (a,), vjp)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table; ids may be any integer shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embed ids must be integers")
    v = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"token id outside table of size {v}")
    out = table.data[ids]
    nt = table.requires_grad
    tshape = table.data.shape

    def vjp(g: np.ndarray):
        if not nt:
            return (None,)
        full = np.zeros(tshape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (full,)

    return _make(out, (table,), vjp)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()
    na = a.requires_grad
    shape = a.data.shape

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g, shape).copy() if na else None,)

    return _make(np.asarray(out), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()
    na = a.requires_grad
    shape = a.data.shape

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g / n, shape).copy() if na else None,)

    return _make(np.asarray(out), (a,), vjp)


def detach(a: Tensor) -> Tensor:
    """Return the same values as a constant: gradients do not flow back."""
    return Tensor(a.data)


def _check_finite(value: np.ndarray | float, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced a non-finite value")


# ---------------------------------------------------------------------------
# Reverse pass and gradient checking
# ---------------------------------------------------------------------------

def grad(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse the tape from a scalar loss.

    Returns gradients for every trainable leaf reachable from ``loss``,
    keyed by the parameter object. Frozen parameters and disconnected
    trainables are absent from the map.
    """
    if loss.data.shape != ():
        raise ContractError(f"grad needs a scalar loss, got shape {loss.data.shape}")
    adjoint: dict[Tensor, np.ndarray] = {loss: np.ones(())}
    for out, inputs, vjp in reversed(tape._records):
        g = adjoint.pop(out, None)
        if g is None:
            continue
        for tensor, piece in zip(inputs, vjp(g)):
            if piece is None:
                continue
            held = adjoint.get(tensor)
            adjoint[tensor] = piece if held is None else held + piece
    return {t: Tensor(g) for t, g in adjoint.items() if t.trainable}


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-6,
    entries_per_param: int | None = None,
    entry_rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a deterministic zero-argument function of the current values
    of ``params`` returning a scalar Tensor. The analytic gradient comes
    from one taped evaluation; each checked entry then costs two untaped
    evaluations at +/- ``h``. ``entries_per_param`` limits the check to a
    random subset of entries per parameter (all entries when None).

    Returns the maximum relative error, with denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite_diff_check requires h > 0")
    params = list(params)
    tape = Tape()
    with tape:
        loss = f()
    _require_finite_scalar(loss)
    grads = grad(tape, loss)

    worst = 0.0
    for p in params:
        analytic = grads[p].data if p in grads else np.zeros_like(p.data)
        flat_param = p.data.reshape(-1)
        flat_grad = analytic.reshape(-1)
        idx = np.arange(flat_param.size)
        if entries_per_param is not None and entries_per_param < flat_param.size:
            gen = entry_rng if entry_rng is not None else np.random.default_rng(0)
            idx = gen.choice(flat_param.size, size=entries_per_param, replace=False)
        for i in idx:
            saved = flat_param[i]
            flat_param[i] = saved + h
            up = _require_finite_scalar(f())
            flat_param[i] = saved - h
            down = _require_finite_scalar(f())
            flat_param[i] = saved
            numeric = (up - down) / (2.0 * h)
            a = float(flat_grad[i])
            denom = max(abs(a), abs(numeric), _REL_ERR_FLOOR)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def _require_finite_scalar(t: Tensor) -> float:
    value = float(t.data)
    if not math.isfinite(value):
        raise NumericError("objective evaluated to a non-finite value")
    return value
