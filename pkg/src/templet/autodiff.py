"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`. Outside a tape
(or when no input needs a gradient) they are plain numpy calls, which is how
template preprocessing stays gradient-free.

    with Tape() as tape:
        loss = mse(linear(x, w), y)
    grads = backward(tape, loss)
    grads[w]
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Gradients", "ShapeError", "NonFiniteError",
    "tensor", "backward", "default_dtype",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "reshape", "transpose",
    "concat", "index", "broadcast_to", "softmax", "layernorm", "gelu",
    "mean", "sum", "mse", "conv2d", "linear",
    "KVBank", "LoRADelta", "attention", "attention_injected", "apply_lora",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()
_DTYPE = [np.float32]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are cast to (tests use float64)."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = prev


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """Immutable array wrapper. ``trainable`` marks a leaf that receives a gradient."""

    __slots__ = ("data", "trainable", "name", "_tracked")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DTYPE[0], copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.trainable = trainable
        self.name = name
        self._tracked = trainable

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE[0])
        arr.flags.writeable = False
        t.data = arr
        t.trainable = False
        t.name = None
        t._tracked = tracked
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(x) -> Tensor:
    """Coerce arrays and scalars to a (non-trainable) Tensor; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(_DTYPE[0])
    return Tensor._wrap(arr.copy() if arr.flags.writeable else arr)


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out, parents, fn):
        self.out = out
        self.parents = parents
        self.fn = fn


class Tape:
    """Single-writer record of operations, in creation (topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self, t: Tensor) -> bool:
        return id(t) in self._ids


def _record(out_arr: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    stack = _tape_stack()
    if stack and any(p._tracked for p in parents):
        out = Tensor._wrap(out_arr, tracked=True)
        tape = stack[-1]
        tape.nodes.append(_Node(out, tuple(parents), fn))
        tape._ids.add(id(out))
        return out
    return Tensor._wrap(out_arr)


class Gradients:
    """Mapping from trainable leaf tensors to their gradient arrays."""

    def __init__(self):
        self._items: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._items[id(t)][1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._items

    def __len__(self) -> int:
        return len(self._items)

    def get(self, t: Tensor, default=None):
        item = self._items.get(id(t))
        return default if item is None else item[1]

    def items(self):
        return list(self._items.values())


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``loss``; each node is visited once."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    result = Gradients()
    if loss.trainable:
        result._items[id(loss)] = (loss, np.ones_like(loss.data))
        return result
    if not tape.records(loss):
        return result
    grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(p._tracked for p in node.parents)
        pgrads = node.fn(g, needs)
        for p, need, pg in zip(node.parents, needs, pgrads):
            if not need or pg is None:
                continue
            if p.trainable:
                prev = result._items.get(id(p))
                result._items[id(p)] = (p, pg if prev is None else prev[1] + pg)
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
    return result


# --------------------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g, n: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g, n: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def fn(g, n):
        return (_unbroadcast(g * bd, ad.shape) if n[0] else None,
                _unbroadcast(g * ad, bd.shape) if n[1] else None)

    return _record(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data

    def fn(g, n):
        return (_unbroadcast(g / bd, ad.shape) if n[0] else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if n[1] else None)

    return _record(ad / bd, (a, b), fn)


def neg(a) -> Tensor:
    a = tensor(a)
    return _record(-a.data, (a,), lambda g, n: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (kept weak so float32 stays float32)."""
    a = tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g, n: (g * c,))


# --------------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, batch dims broadcast."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def fn(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if n[1]:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record(out, (a,), lambda g, n: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g, n: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g, n):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, fn)


def index(a, key) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with add.at."""
    a = tensor(a)
    shape, dtype = a.shape, a.data.dtype
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=dtype)

    basic = _is_basic(key)

    def fn(g, n):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record(np.ascontiguousarray(out), (a,), fn)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice)) or k is Ellipsis or k is None for k in parts)


def broadcast_to(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g, n: (_unbroadcast(g, old),))


# --------------------------------------------------------------------------- nonlinearities

def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g, n):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), fn)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine."""
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm: input {x.shape} vs gain {gamma.shape} / bias {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def fn(g, n):
        gx = gg = gb = None
        if n[0]:
            gh = g * gd
            d = xd.shape[-1]
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        if n[1]:
            gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if n[2]:
            gb = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _record(xhat * gd + beta.data, (x, gamma, beta), fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation."""
    a = tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def fn(g, n):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(y, (a,), fn)


# --------------------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def fn(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(a, b) -> Tensor:
    """Mean squared error; raises on non-finite inputs."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    out = np.asarray((d * d).mean(), dtype=d.dtype)
    if not np.isfinite(out):
        raise NonFiniteError("mse: non-finite value")
    k = 2.0 / d.size

    def fn(g, n):
        gd = g * k * d
        return (gd if n[0] else None, -gd if n[1] else None)

    return _record(out, (a, b), fn)


def check_finite(a: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return a


# --------------------------------------------------------------------------- convolution

def _im2col_index(h: int, w: int, k: int, stride: int, pad: int):
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    rows = (np.arange(oh) * stride)[:, None, None, None] + np.arange(k)[None, None, :, None]
    cols = (np.arange(ow) * stride)[None, :, None, None] + np.arange(k)[None, None, None, :]
    return rows, cols, oh, ow


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution with weights shaped (k, k, c_in, c_out)."""
    x, w = tensor(x), tensor(w)
    k = w.shape[0]
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != k or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    xd = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    rows, cols, oh, ow = _im2col_index(x.shape[1], x.shape[2], k, stride, pad)
    patches = xd[:, rows, cols, :]  # (B, oh, ow, k, k, C)
    wd = w.data
    out = np.tensordot(patches, wd, axes=([3, 4, 5], [0, 1, 2]))
    parents = [x, w]
    if b is not None:
        b = tensor(b)
        out = out + b.data
        parents.append(b)
    xshape = x.shape

    def fn(g, n):
        gx = gw = gb = None
        if n[0]:
            gp = np.tensordot(g, wd, axes=([3], [3]))  # (B, oh, ow, k, k, C)
            full = np.zeros(xd.shape, dtype=g.dtype)
            np.add.at(full, (slice(None), rows, cols, slice(None)), gp)
            gx = full[:, pad:pad + xshape[1], pad:pad + xshape[2], :]
        if n[1]:
            gw = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))
        if len(n) > 2 and n[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _record(out, parents, fn)


# --------------------------------------------------------------------------- adapters

class LoRADelta:
    """Low-rank update ``(alpha / rank) * up @ down`` for one linear layer.

    ``down`` is (rank, d_in) and ``up`` is (d_out, rank); either may carry a
    leading batch axis when a template emits per-sample factors.
    """

    __slots__ = ("target_id", "down", "up", "alpha")

    def __init__(self, target_id: str, down, up, alpha: float | None = None):
        down, up = tensor(down), tensor(up)
        if down.ndim < 2 or up.ndim < 2 or down.shape[-2] != up.shape[-1] or down.shape[-2] < 1:
            raise ShapeError(f"LoRA {target_id}: down {down.shape} and up {up.shape} disagree on rank")
        self.target_id = target_id
        self.down = down
        self.up = up
        self.alpha = float(self.rank if alpha is None else alpha)

    @property
    def rank(self) -> int:
        return self.down.shape[-2]

    @property
    def d_in(self) -> int:
        return self.down.shape[-1]

    @property
    def d_out(self) -> int:
        return self.up.shape[-2]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def dense(self) -> Tensor:
        return scale(matmul(self.up, self.down), self.scale)

    def __repr__(self) -> str:
        return f"LoRADelta({self.target_id!r}, rank={self.rank}, alpha={self.alpha})"


def apply_lora(weight, deltas: Iterable[LoRADelta], strength: float = 1.0) -> Tensor:
    """``weight + strength * sum(alpha_i / r_i * up_i @ down_i)``."""
    weight = tensor(weight)
    deltas = list(deltas)
    for d in deltas:
        if (d.d_out, d.d_in) != weight.shape[-2:]:
            raise ShapeError(f"apply_lora: delta {d.target_id} is {(d.d_out, d.d_in)}, weight is {weight.shape}")
    if strength == 0 or not deltas:
        return weight
    total = deltas[0].dense()
    for d in deltas[1:]:
        total = add(total, d.dense())
    return add(weight, scale(total, strength))


def linear(x, weight, bias=None, lora: Sequence[LoRADelta] = ()) -> Tensor:
    """``x @ W.T + b`` plus low-rank paths, evaluated without densifying the delta."""
    x, weight = tensor(x), tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    y = matmul(x, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    for d in lora:
        if (d.d_out, d.d_in) != weight.shape:
            raise ShapeError(f"linear: LoRA {d.target_id} is {(d.d_out, d.d_in)}, weight is {weight.shape}")
        low = matmul(x, _swap_last(d.down))
        y = add(y, scale(matmul(low, _swap_last(d.up)), d.scale))
    return y


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


# --------------------------------------------------------------------------- attention

class KVBank:
    """Injected key/value tokens for one attention layer, already projected.

    ``keys``/``values`` are (n_tokens, d_model) or (batch, n_tokens, d_model).
    """

    __slots__ = ("layer_id", "keys", "values")

    def __init__(self, layer_id: int, keys, values):
        keys, values = tensor(keys), tensor(values)
        if keys.shape != values.shape:
            raise ShapeError(f"KV bank layer {layer_id}: keys {keys.shape} vs values {values.shape}")
        if keys.ndim not in (2, 3):
            raise ShapeError(f"KV bank layer {layer_id}: expected 2 or 3 dims, got {keys.shape}")
        self.layer_id = int(layer_id)
        self.keys = keys
        self.values = values

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[-2]

    @property
    def d_model(self) -> int:
        return self.keys.shape[-1]

    def __repr__(self) -> str:
        return f"KVBank(layer={self.layer_id}, tokens={self.n_tokens}, d={self.d_model})"


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, d = t.shape
    return transpose(reshape(t, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(q, k, v, n_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention on (batch, tokens, d_model) inputs."""
    return attention_injected(q, k, v, None, n_heads)


def attention_injected(q, k, v, injected: KVBank | None, n_heads: int = 1) -> Tensor:
    """Attention whose keys/values are ``[injected ; k]`` and ``[injected ; v]``.

    Injected tokens are prepended and get no positional treatment; the query
    side is untouched, so the output has the same length as ``q``.
    """
    q, k, v = tensor(q), tensor(k), tensor(v)
    if q.ndim != 3 or k.shape != v.shape or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    b, n, d = q.shape
    if d % n_heads:
        raise ShapeError(f"attention: d_model {d} not divisible by {n_heads} heads")
    if injected is not None and injected.n_tokens > 0:
        if injected.d_model != d:
            raise ShapeError(
                f"attention: injected bank for layer {injected.layer_id} has width "
                f"{injected.d_model}, layer expects {d}")
        ik, iv = injected.keys, injected.values
        if ik.ndim == 2:
            ik, iv = reshape(ik, (1,) + ik.shape), reshape(iv, (1,) + iv.shape)
        if ik.shape[0] != b:
            if ik.shape[0] != 1:
                raise ShapeError(f"attention: injected batch {ik.shape[0]} vs query batch {b}")
            ik = broadcast_to(ik, (b,) + ik.shape[1:])
            iv = broadcast_to(iv, (b,) + iv.shape[1:])
        k = concat([ik, k], axis=1)
        v = concat([iv, v], axis=1)
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d // n_heads))
    out = matmul(softmax(scores, axis=-1), vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
