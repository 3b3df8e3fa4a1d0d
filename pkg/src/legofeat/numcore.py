"""Dense tensors with reverse-mode differentiation on a numpy backend.

Everything in this package that needs gradients runs through the small
set of primitives defined here. Each primitive computes its forward value
with plain numpy and registers a closure that produces the parent
gradients, so a backward pass is a single reverse sweep over the recorded
trace. Default precision is 64-bit; 32-bit is available via the ``dtype``
argument of :class:`Tensor` for speed experiments.

Reductions run in a fixed order, so repeated runs of the same trace give
bit-identical gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ContractError(ValueError):
    """A documented precondition or invariant was violated."""


DEFAULT_DTYPE = np.float64

_NEG_INF = -np.inf


class Tensor:
    """Row-major dense array, optionally participating in differentiation.

    Tensors are immutable after construction except for explicit in-place
    parameter updates performed by an optimizer (which operate on
    ``.data`` directly, outside any trace).
    """

    __slots__ = ("data", "requires_grad", "_rec", "_idx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._rec: DiffRecord | None = None
        self._idx: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class DiffRecord:
    """Topologically ordered trace of traced operations.

    Nodes are appended in execution order, which is already a topological
    order, so ``backward`` is one reverse sweep visiting every traced
    operation exactly once. Leaves (parameters) are registered lazily on
    first use. A record can be replayed backward any number of times;
    gradient slots are rebuilt from scratch on every call.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...] | None] = []
        self._bwd: list[Callable | None] = []
        self._leaf_by_id: dict[int, int] = {}
        self._leaf_tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "DiffRecord":
        global _ACTIVE
        if _ACTIVE is not None:
            raise ContractError("nested differentiation records are not supported")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = None

    def _slot_of(self, t: Tensor) -> int | None:
        if t._rec is self:
            return t._idx
        if t.requires_grad:
            slot = self._leaf_by_id.get(id(t))
            if slot is None:
                slot = len(self._parents)
                self._parents.append(None)
                self._bwd.append(None)
                self._leaf_by_id[id(t)] = slot
                self._leaf_tensors[slot] = t
            return slot
        return None

    def _add_op(self, parent_slots: tuple[int | None, ...], bwd: Callable) -> int:
        slot = len(self._parents)
        self._parents.append(parent_slots)
        self._bwd.append(bwd)
        return slot

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss``; returns grads keyed by ``id(leaf)``."""
        if loss._rec is not self:
            raise ContractError("loss was not produced under this record")
        if loss.size != 1:
            raise ContractError("loss must be scalar")
        n = loss._idx + 1
        needed = [False] * n
        needed[loss._idx] = True
        for i in range(loss._idx, -1, -1):
            if needed[i] and self._parents[i] is not None:
                for p in self._parents[i]:
                    if p is not None:
                        needed[p] = True
        grads: list[np.ndarray | None] = [None] * n
        grads[loss._idx] = np.ones_like(loss.data)
        for i in range(loss._idx, -1, -1):
            if not needed[i] or grads[i] is None or self._bwd[i] is None:
                continue
            pgrads = self._bwd[i](grads[i])
            for p, pg in zip(self._parents[i], pgrads):
                if p is None or pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        out: dict[int, np.ndarray] = {}
        for tid, slot in self._leaf_by_id.items():
            if slot < n and grads[slot] is not None:
                out[tid] = grads[slot]
        return out


_ACTIVE: DiffRecord | None = None


def trace() -> DiffRecord:
    """Open a differentiation record; use as a context manager."""
    return DiffRecord()


def emit_op(out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Register a custom primitive on the active record (no-op when no
    record is open). ``bwd`` maps the output gradient to a tuple of
    parent gradients, one per parent, None where nothing flows."""
    rec = _ACTIVE
    if rec is None:
        return out
    slots = tuple(rec._slot_of(p) for p in parents)
    if any(s is not None for s in slots):
        out._rec = rec
        out._idx = rec._add_op(slots, bwd)
    return out


_emit = emit_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ContractError(
            f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar"
        )


# ---------------------------------------------------------------------------
# Primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g, ash=a.shape, bsh=b.shape):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g, ash=a.shape, bsh=b.shape):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g, ad=a.data, bd=b.data, ash=a.shape, bsh=b.shape):
        return _unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)

    return _emit(out, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def bwd(g, c=c):
        return (g * c,)

    return _emit(out, (x,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., D] + b[D]; the one sanctioned non-scalar broadcast."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ContractError(f"add_bias: bias {b.shape} does not match {x.shape}")
    out = Tensor(x.data + b.data)

    def bwd(g, d=b.shape[0]):
        return g, g.reshape(-1, d).sum(axis=0)

    return _emit(out, (x, b), bwd)


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """x[..., D] * s[..., 1]; explicit per-row scaling."""
    if s.shape != x.shape[:-1] + (1,):
        raise ContractError(f"mul_rows: scale {s.shape} does not match {x.shape}")
    out = Tensor(x.data * s.data)

    def bwd(g, xd=x.data, sd=s.data):
        return g * sd, (g * xd).sum(axis=-1, keepdims=True)

    return _emit(out, (x, s), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g, ad=a.data, bd=b.data):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _emit(out, (a, b), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def bwd(g, y=y):
        return (g * (1.0 - y * y),)

    return _emit(out, (x,), bwd)


def pairwise_sum(a: Tensor, b: Tensor) -> Tensor:
    """a[B,T,H] (+) b[B,U,H] -> [B,T,U,H]; explicit outer broadcast."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ContractError(f"pairwise_sum: incompatible shapes {a.shape}, {b.shape}")
    out = Tensor(a.data[:, :, None, :] + b.data[:, None, :, :])

    def bwd(g):
        return g.sum(axis=2), g.sum(axis=1)

    return _emit(out, (a, b), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g, orig=x.shape):
        return (g.reshape(orig),)

    return _emit(out, (x,), bwd)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(x.data.swapaxes(a, b))

    def bwd(g, a=a, b=b):
        return (g.swapaxes(a, b),)

    return _emit(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat: empty input")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bwd(g, sizes=tuple(sizes), axis=axis):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(splits)

    return _emit(out, tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def bwd(g, shape=x.shape, idx=idx):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit(out, (x,), bwd)


def stack_steps(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack equally shaped step outputs along a new axis."""
    if not parts:
        raise ContractError("stack_steps: empty input")
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def bwd(g, n=len(parts), axis=axis):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(out, tuple(parts), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def bwd(g, shape=x.shape, dt=x.data.dtype):
        return (np.full(shape, float(g), dtype=dt),)

    return _emit(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()))

    def bwd(g, shape=x.shape, n=x.size, dt=x.data.dtype):
        return (np.full(shape, float(g) / n, dtype=dt),)

    return _emit(out, (x,), bwd)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """table[N, E] indexed by an integer array -> [idx.shape..., E].

    The index array is data, not a differentiable input; gradients flow
    into the table only (scatter-add, fixed order).
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("gather_rows: index out of range")
    out = Tensor(table.data[idx])

    def bwd(g, idx=idx, shape=table.shape, dt=table.data.dtype):
        gt = np.zeros(shape, dtype=dt)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(out, (table,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = x.data - m
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    y = s - lse
    out = Tensor(y)

    def bwd(g, y=y, axis=axis):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), bwd)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where ``mask`` is True; masked weights are
    exactly zero. Rows with no admitted position come out all-zero."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    neg = np.where(mask, x.data, _NEG_INF)
    m = neg.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(x.data - m_safe), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    y = e / np.where(tot == 0.0, 1.0, tot)
    out = Tensor(y)

    def bwd(g, y=y, axis=axis):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractError("layer_norm: gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gain.data + bias.data)

    def bwd(g, xh=xh, inv=inv, gd=gain.data, d=d):
        gxh = g * gd
        dx = inv * (
            gxh
            - gxh.mean(axis=-1, keepdims=True)
            - xh * (gxh * xh).mean(axis=-1, keepdims=True)
        )
        flat = (g * xh).reshape(-1, d)
        return dx, flat.sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _emit(out, (x, gain, bias), bwd)


def depthwise_conv1d(x: Tensor, w: Tensor, left: int, right: int) -> Tensor:
    """Per-channel 1-D convolution over the time axis of x[B, T, D].

    Output frame t reads input frames t-left .. t+right; positions beyond
    the sequence ends contribute zeros.
    """
    k = left + right + 1
    if w.shape != (k, x.shape[-1]):
        raise ContractError(f"depthwise_conv1d: kernel {w.shape} wants ({k},{x.shape[-1]})")
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    y = w.data[0] * xp[:, 0:t, :]
    for j in range(1, k):
        y = y + w.data[j] * xp[:, j : j + t, :]
    out = Tensor(y)

    def bwd(g, xp=xp, wd=w.data, k=k, t=t, left=left):
        dw = np.empty_like(wd)
        for j in range(k):
            dw[j] = (g * xp[:, j : j + t, :]).sum(axis=(0, 1))
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j : j + t, :] += wd[j] * g
        return dxp[:, left : left + t, :], dw

    return _emit(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# Plain numeric utilities


def logsumexp(v) -> float:
    """log(sum(exp(v))) with a max shift; -inf iff every entry is -inf."""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ContractError("logsumexp: empty input")
    if np.isnan(arr).any() or (arr == np.inf).any():
        raise ContractError("logsumexp: entries must be finite or -inf")
    m = arr.max()
    if m == _NEG_INF:
        return _NEG_INF
    return float(m + math.log(np.exp(arr - m).sum()))


def softmax_rows(m) -> np.ndarray:
    """Row softmax of a [R, C] matrix, max-shifted per row."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("softmax_rows: expected a 2-D matrix")
    if not np.isfinite(arr).all():
        raise ContractError("softmax_rows: entries must be finite")
    shifted = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Parameters, optimizer, gradient checking


class ParamStore:
    """Named parameter tensors with a frozen subset.

    Frozen parameters are excluded from gradient maps and optimizer
    updates; they stay bit-identical across training steps. Single-writer
    during training; concurrent read-only use is safe.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.frozen_names: set[str] = set()

    def add(self, name: str, value, dtype=None) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(value, requires_grad=True, dtype=dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def freeze(self, *names: str) -> None:
        for name in names:
            if name not in self._params:
                raise ContractError(f"cannot freeze unknown parameter {name!r}")
            self.frozen_names.add(name)
            self._params[name].requires_grad = False

    def freeze_all(self) -> None:
        self.freeze(*self._params)

    def is_frozen(self, name: str) -> bool:
        return name in self.frozen_names

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if n not in self.frozen_names]


def backward(loss: Tensor, store: ParamStore) -> dict[str, Tensor]:
    """Gradients of a traced scalar loss for every reachable non-frozen
    parameter of ``store``. Frozen parameters get no entry."""
    if loss.size != 1:
        raise ContractError("backward: loss must be scalar")
    rec = loss._rec
    if rec is None:
        raise ContractError("backward: loss was not produced under an open trace")
    raw = rec.backward(loss)
    out: dict[str, Tensor] = {}
    for name, t in store.items():
        if name in store.frozen_names:
            continue
        g = raw.get(id(t))
        if g is not None:
            out[name] = Tensor(g)
    return out


class Adam:
    """Adaptive moment estimation over a ParamStore, in-place updates."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, grads: dict[str, Tensor]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for name, tensor in self.store.items():
            if name in self.store.frozen_names or name not in grads:
                continue
            g = grads[name].data
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                v = np.zeros_like(tensor.data)
                self._m[name] = m
                self._v[name] = v
            else:
                v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def finite_diff_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    eps: float,
    max_exact_coords: int = 10_000,
    sample_size: int = 2_000,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of ``f`` over the store's non-frozen coordinates.

    Error is measured per coordinate as |fd - an| / max(1, |fd|, |an|):
    relative above unit gradient magnitude, absolute below. Coordinates
    with (near-)zero gradients only see central-difference roundoff
    noise, so a pure per-coordinate ratio would saturate on them no
    matter how correct the backward pass is.

    ``f`` must be deterministic (checked by evaluating it twice) and must
    return a scalar Tensor built from traced operations on the store's
    parameters. Above ``max_exact_coords`` total coordinates, a seeded
    sample of coordinates is checked instead of all of them.
    """
    if eps <= 0.0:
        raise ContractError("finite_diff_check: eps must be positive")
    first = float(f().item())
    second = float(f().item())
    if first != second:
        raise ContractError("finite_diff_check: f is not deterministic")

    with trace():
        loss = f()
        grads = backward(loss, store)

    coords: list[tuple[str, int]] = []
    for name, t in store.trainable_items():
        coords.extend((name, i) for i in range(t.size))
    if len(coords) > max_exact_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=sample_size, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        p = store[name].data.reshape(-1)
        orig = p[i]
        p[i] = orig + eps
        hi = float(f().item())
        p[i] = orig - eps
        lo = float(f().item())
        p[i] = orig
        fd = (hi - lo) / (2.0 * eps)
        an = float(grads[name].data.reshape(-1)[i]) if name in grads else 0.0
        denom = max(1.0, abs(fd), abs(an))
        worst = max(worst, abs(fd - an) / denom)
    return worst
