"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy float64 array. Primitives record local
gradient closures on the result node; ``backward`` replays them in reverse
topological order. The graph is single-use: a second backward through the
same nodes raises ``TapeConsumedError``.

Checked mode (default on) rejects NaN/inf inputs to primitives with
``DataError`` instead of propagating them silently.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    MissingGradError,
    NotScalarError,
    ParameterError,
    ShapeError,
    TapeConsumedError,
)

_CHECK_FINITE = True


def set_checked_mode(flag: bool) -> bool:
    """Toggle NaN/inf input checking; returns the previous setting."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = bool(flag)
    return old


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if _CHECK_FINITE and np.isnan(arr).any():
        raise DataError("NaN values in primitive input")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _CHECK_FINITE and np.isnan(data).any():
        raise DataError("NaN produced by a primitive")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._consumed = False
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives (numpy broadcasting supported)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    data = a.data ** exponent

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _node(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    root = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / root)

    return _node(root, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * e)

    return _node(e, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(a.data * mask, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * s * (1.0 - s))

    return _node(s, (a,), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - t * t))

    return _node(t, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed stably; gradient is sigmoid(x)."""
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        _accumulate(a, g / (1.0 + np.exp(-x)))

    return _node(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - dot))

    return _node(s, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra / shape primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(data, (a, b), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, sz in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + sz)
            _accumulate(p, g[tuple(sl)])
            offset += sz

    return _node(data, tuple(parts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _wrap(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            _accumulate(a, full)

    return _node(a.data[sl].copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _node(a.data.reshape(shape).copy(), (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / count, a.data.shape).copy())

    return _node(data, (a,), backward)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first maximal index on ties."""
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)
    arg = a.data.argmax(axis=axis)  # argmax returns the first maximum

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            gg = g if keepdims else np.expand_dims(g, axis)
            idx = list(np.indices(arg.shape))
            idx.insert(axis if axis >= 0 else a.data.ndim + axis, arg)
            full[tuple(idx)] = np.squeeze(gg, axis=axis)
            _accumulate(a, full)

    return _node(data, (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Row lookup (embedding gather); gradient scatter-adds into the table."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-d index array")
    if a.data.ndim < 1:
        raise ShapeError("gather_rows source must have rows")
    data = a.data[idx].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _node(data, (a,), backward)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows into segments; the reverse of gather_rows."""
    a = _wrap(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.data.shape[0]:
        raise ShapeError("segment ids must match row count")
    data = np.zeros((num_segments,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(data, seg, a.data)

    def backward(g):
        _accumulate(a, g[seg])

    return _node(data, (a,), backward)


def segment_mean(a, segment_ids, num_segments: int) -> Tensor:
    a = _wrap(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    total = segment_sum(a, seg, num_segments)
    return div(total, Tensor(counts.reshape((-1,) + (1,) * (a.data.ndim - 1))))


def segment_max(a, segment_ids, num_segments: int) -> Tensor:
    """Per-segment max; gradient routes to the first maximal row on ties."""
    a = _wrap(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    data = np.full((num_segments,) + a.data.shape[1:], -np.inf, dtype=np.float64)
    np.maximum.at(data, seg, a.data)
    # first row achieving the max, per segment and column
    winner = np.full(data.shape, -1, dtype=np.int64)
    for row in range(a.data.shape[0] - 1, -1, -1):
        s = seg[row]
        hit = a.data[row] == data[s]
        winner[s][hit] = row

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            cols = np.indices(winner.shape)[1] if winner.ndim == 2 else None
            if winner.ndim == 2:
                np.add.at(full, (winner.reshape(-1), cols.reshape(-1)), g.reshape(-1))
            else:
                np.add.at(full, winner.reshape(-1), g.reshape(-1))
            _accumulate(a, full)

    return _node(data, (a,), backward)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is treated as a constant."""
    a = _wrap(a)
    if not 0.0 <= rate < 1.0:
        raise ParameterError("dropout rate must be in [0, 1)")
    if rate == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, leaves=None):
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    ``leaves``, when given, additionally receive zero gradients if they were
    not on the path. The graph is consumed; calling backward twice raises.
    """
    if loss.size != 1:
        raise NotScalarError(f"backward needs a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise TapeConsumedError("backward already ran through this graph")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise TapeConsumedError("graph node already consumed")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        # leaves stay reusable; only interior nodes are consumed
        if node._backward is not None:
            node._consumed = True
            if node.grad is not None:
                node._backward(node.grad)
            node._backward = None
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    name: str = ""


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class AdamW:
    """Decoupled weight decay followed by bias-corrected Adam moments."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = [
            OptimizerState(
                m=[np.zeros_like(p.data) for p in grp.params],
                v=[np.zeros_like(p.data) for p in grp.params],
            )
            for grp in groups
        ]
        self.step_count = 0

    def zero_grad(self):
        for grp in self.groups:
            for p in grp.params:
                p.grad = None

    def step(self, lr_scale: float = 1.0):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for grp, st in zip(self.groups, self.state):
            lr = grp.lr * lr_scale
            if lr == 0.0:
                continue
            for k, p in enumerate(grp.params):
                if p.grad is None:
                    raise MissingGradError(
                        f"parameter {k} in group {grp.name!r} has no gradient")
                g = p.grad
                if grp.weight_decay:
                    p.data -= lr * grp.weight_decay * p.data
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * (g * g)
                mhat = st.m[k] / bc1
                vhat = st.v[k] / bc2
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            st.step = t


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total <= 0 or not 0 <= step <= total:
        raise ParameterError(f"need 0 <= step <= total, total > 0; got {step}/{total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# NDCK1 checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"NDCK1\x00"


def save_checkpoint(path, arrays: dict[str, np.ndarray], manifest: dict | None = None):
    """Versioned binary container: named float64 arrays plus a JSON manifest."""
    names = sorted(arrays)
    index = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    header = json.dumps(
        {"arrays": index, "meta": manifest or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ShapeError("not an NDCK1 checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]
