"""Dense float64 tensors with tape-based reverse-mode autodiff, AdamW and checkpoints.

Every op validates shapes and refuses silent broadcasting.  The one exception
is :func:`add_bias`, which broadcasts a parameter over the leading axes of its
input (the usual bias / positional-embedding add).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float64 array that records how it was produced.

    Attributes:
        data: row-major float64 payload.
        grad: gradient buffer of identical shape, populated by :func:`backward`.
        requires_grad: whether gradients flow into this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        arr = np.array(data, dtype=_DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

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
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these go through the checked functions below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable tensor with a unique name and AdamW moment buffers."""

    __slots__ = ("name", "first_moment", "second_moment")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_DTYPE), requires_grad=True)
        self.name = name
        self.first_moment: np.ndarray | None = None
        self.second_moment: np.ndarray | None = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        return g, g
    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(g):
        return g, -g
    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, g * ad
    return _node(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        return (g * c,)
    return _node(a.data * c, (a,), bw)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        return (2.0 * g * ad,)
    return _node(ad * ad, (a,), bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x``.

    This is the only broadcasting op: ``b`` of shape ``x.shape[-k:]`` is
    added to every leading slice (bias vectors, positional embeddings).
    """
    k = b.ndim
    if k == 0 or k > x.ndim or x.shape[-k:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - k))

    def bw(g):
        return g, g.sum(axis=lead) if lead else g
    return _node(x.data + b.data, (x, b), bw)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * xd ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)
    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)
    return _node(np.array(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _node(x.data.sum(axis=axis), (x,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape

    def bw(g):
        return (g.reshape(src),)
    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def roll(x: Tensor, shift: int | Sequence[int], axis: int | Sequence[int]) -> Tensor:
    """Cyclic shift, ``out[i] = x[i - shift]`` along each axis."""
    def bw(g):
        neg = -shift if np.isscalar(shift) else tuple(-s for s in shift)
        return (np.roll(g, neg, axis=axis),)
    return _node(np.roll(x.data, shift, axis=axis), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))
    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch row selection: ``out[n, i] = x[n, index[n, i]]`` for ``x`` of shape (N, T, D)."""
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ShapeError("gather_rows: index out of range")
    batch = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (batch, index), g)
        return (out,)
    return _node(x.data[batch, index], (x,), bw)


def broadcast_rows(v: Tensor, lead: Sequence[int]) -> Tensor:
    """Tile a vector of shape (D,) into shape (*lead, D)."""
    if v.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got {v.shape}")
    lead = tuple(int(s) for s in lead)
    axes = tuple(range(len(lead)))

    def bw(g):
        return (g.sum(axis=axes),)
    return _node(np.broadcast_to(v.data, lead + v.shape).copy(), (v,), bw)


def masked_select(x: Tensor, fill: Tensor, mask: np.ndarray) -> Tensor:
    """Replace rows of ``x`` (..., T, D) by the vector ``fill`` (D,) where ``mask`` (..., T) is set."""
    mask = np.asarray(mask, dtype=bool)
    if fill.ndim != 1 or x.shape[-1] != fill.shape[0] or mask.shape != x.shape[:-1]:
        raise ShapeError(f"masked_select: x {x.shape}, fill {fill.shape}, mask {mask.shape}")
    keep = (~mask)[..., None]

    def bw(g):
        return g * keep, g[mask].sum(axis=0)
    return _node(np.where(keep, x.data, fill.data), (x, fill), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched product with identical leading axes."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return _node(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` applied to the last axis of ``x`` for any leading shape."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(xshape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(xshape[:-1] + (w.shape[1],)), parents, bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: empty last axis in {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax_lastdim: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return _node(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Leaf tensors (no recorded parents) accumulate across calls; intermediate
    tensors receive fresh gradients each call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(node.shape)
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        problems = []
        if not self.learning_rate > 0:
            problems.append("learning_rate must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay must be non-negative")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 < v < 1:
                problems.append(f"{name} must lie in (0, 1)")
        if not self.epsilon > 0:
            problems.append("epsilon must be positive")
        if self.step_count < 0:
            problems.append("step_count must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))


def adamw_step(params: Sequence[Parameter], cfg: OptimConfig) -> None:
    """One AdamW update with decoupled weight decay and bias correction."""
    cfg.step_count += 1
    t = cfg.step_count
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p in params:
        if p.grad is None:
            continue
        if p.first_moment is None:
            p.first_moment = np.zeros(p.shape)
            p.second_moment = np.zeros(p.shape)
        g = p.grad
        if cfg.weight_decay:
            p.data *= 1.0 - cfg.learning_rate * cfg.weight_decay
        p.first_moment *= cfg.beta1
        p.first_moment += (1.0 - cfg.beta1) * g
        p.second_moment *= cfg.beta2
        p.second_moment += (1.0 - cfg.beta2) * g * g
        mhat = p.first_moment / bc1
        vhat = p.second_moment / bc2
        p.data -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02,
                 bound: float = 2.0) -> np.ndarray:
    """Normal samples with ``|z| <= bound`` (in std units) by redrawing outliers."""
    z = rng.standard_normal(tuple(shape))
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AMCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_array(buf: bytearray, arr: np.ndarray) -> None:
    buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path: str | Path, params: Sequence[Parameter],
                    include_moments: bool = True) -> None:
    """Write parameters (and AdamW moments when present) in the AMCK format.

    Per parameter: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
    f64 LE data, then a u8 flag; flag 1 is followed by the first and second
    moments, each stored like the data.
    """
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names must be unique")
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for p in params:
        raw = p.name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", p.ndim)
        buf += struct.pack(f"<{p.ndim}I", *p.shape)
        _write_array(buf, p.data)
        has = include_moments and p.first_moment is not None
        buf += struct.pack("<B", 1 if has else 0)
        if has:
            _write_array(buf, p.first_moment)
            _write_array(buf, p.second_moment)
    Path(path).write_bytes(bytes(buf))


@dataclass
class CheckpointEntry:
    name: str
    data: np.ndarray
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None


def read_checkpoint(path: str | Path) -> list[CheckpointEntry]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out = []

    def take_array(shape):
        nonlocal pos
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos = end
        return arr

    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            entry = CheckpointEntry(name, take_array(shape))
            (flag,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            if flag:
                entry.first_moment = take_array(shape)
                entry.second_moment = take_array(shape)
            out.append(entry)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from exc
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


def load_checkpoint(path: str | Path, params: Sequence[Parameter]) -> None:
    """Load values (and moments when stored) into ``params`` by name."""
    entries = {e.name: e for e in read_checkpoint(path)}
    wanted = {p.name for p in params}
    missing = wanted - entries.keys()
    extra = entries.keys() - wanted
    if missing or extra:
        raise CheckpointError(f"{path}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for p in params:
        e = entries[p.name]
        if e.data.shape != p.shape:
            raise CheckpointError(f"{path}: {p.name} has shape {e.data.shape}, expected {p.shape}")
        p.data[...] = e.data
        if e.first_moment is not None:
            p.first_moment = e.first_moment.copy()
            p.second_moment = e.second_moment.copy()


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-6,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``target.data``.

    With ``indices`` (flat positions) only those entries are probed; the rest stay 0.
    """
    g = np.zeros(target.shape)
    flat = target.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``.

    The floor keeps structurally zero gradients (finite-difference noise near
    1e-10) from reading as large relative errors.
    """
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor))


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    Returns the relative error per input, keyed by parameter name (or position).
    ``max_coords`` limits each input to a random subset of its entries, which
    keeps whole-model checks quick.
    """
    if max_coords is not None and rng is None:
        rng = np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    backward(fn())
    report = {}
    for i, t in enumerate(inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        idx = None
        if max_coords is not None and t.size > max_coords:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numerical_grad(fn, t, h, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        key = getattr(t, "name", "") or f"input{i}"
        report[key] = relative_error(analytic, numeric)
    return report
