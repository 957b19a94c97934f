"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation returns a `Tensor` holding the
forward value plus a closure that pushes gradients back to its parents. The
op set is exactly what the scoring network and the clipped policy objective
need; there is no broadcasting beyond bias-add, no views, no GPU. Sized for
networks of a few thousand parameters where finite-difference verification
of every gradient is feasible.
"""
from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested before a forward pass exists."""


class Tensor:
    """A node in the computation graph: value, gradient, and parent links."""

    __slots__ = ("data", "grad", "_parents", "_push", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._push: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"


def constant(data, name: str = "") -> Tensor:
    return Tensor(data, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            push: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out._parents = parents
    out._push = push
    return out


def _as2d(x: Tensor, op: str) -> np.ndarray:
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D operand, got shape {x.data.shape}")
    return x.data


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _as2d(a, "matmul"), _as2d(b, "matmul")
    if da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {da.shape} by {db.shape}")
    out = da @ db

    def push(g: np.ndarray) -> None:
        a._accumulate(g @ db.T)
        b._accumulate(da.T @ g)

    return _result(out, (a, b), push)


def transpose(a: Tensor) -> Tensor:
    _as2d(a, "transpose")
    return _result(a.data.T.copy(), (a,), lambda g: a._accumulate(g.T))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias against a 2-D left operand."""
    bias = a.data.ndim == 2 and b.data.ndim == 1
    if not bias and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")
    if bias and a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add: bias length {b.data.shape[0]} does not match "
                         f"columns of {a.data.shape}")
    out = a.data + b.data

    def push(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(g.sum(axis=0) if bias else g)

    return _result(out, (a, b), push)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")

    def push(g: np.ndarray) -> None:
        a._accumulate(g)
        b._accumulate(-g)

    return _result(a.data - b.data, (a, b), push)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: a._accumulate(g * c))


def cmul(a: Tensor, weights: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of identical shape."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.data.shape:
        raise ShapeError(f"cmul: weight shape {w.shape} does not match {a.data.shape}")
    return _result(a.data * w, (a,), lambda g: a._accumulate(g * w))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log: operand has non-positive entries")
    return _result(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data))


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_push(a: Tensor, s: np.ndarray) -> Callable[[np.ndarray], None]:
    def push(g: np.ndarray) -> None:
        a._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return push


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over each row of a 2-D operand (attention weights)."""
    _as2d(a, "row_softmax")
    s = _softmax_last(a.data)
    return _result(s, (a,), _softmax_push(a, s))


def channel_softmax(a: Tensor) -> Tensor:
    """Softmax along the trailing channel axis of per-item logits."""
    _as2d(a, "channel_softmax")
    s = _softmax_last(a.data)
    return _result(s, (a,), _softmax_push(a, s))


def softmax_vector(v: np.ndarray) -> np.ndarray:
    """Plain (non-graph) stable softmax of a 1-D vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError(f"softmax_vector: expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_vector: entries must be finite")
    return _softmax_last(v)


def mean_pool_groups(a: Tensor, group_size: int) -> Tensor:
    """Mean over consecutive row groups: (n, d) -> (n/group_size, d)."""
    da = _as2d(a, "mean_pool_groups")
    n, d = da.shape
    if group_size < 1 or n % group_size != 0:
        raise ShapeError(f"mean_pool_groups: {n} rows are not divisible into "
                         f"groups of {group_size}")
    groups = n // group_size
    out = da.reshape(groups, group_size, d).mean(axis=1)

    def push(g: np.ndarray) -> None:
        a._accumulate(np.repeat(g / group_size, group_size, axis=0))

    return _result(out, (a,), push)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    da, db = _as2d(a, "concat_rows"), _as2d(b, "concat_rows")
    if da.shape[1] != db.shape[1]:
        raise ShapeError(f"concat_rows: column counts {da.shape[1]} and "
                         f"{db.shape[1]} differ")
    na = da.shape[0]

    def push(g: np.ndarray) -> None:
        a._accumulate(g[:na])
        b._accumulate(g[na:])

    return _result(np.vstack([da, db]), (a, b), push)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    da = _as2d(a, "slice_rows")
    if not (0 <= start <= stop <= da.shape[0]):
        raise ShapeError(f"slice_rows: range [{start}, {stop}) out of bounds "
                         f"for {da.shape[0]} rows")

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(da)
        full[start:stop] = g
        a._accumulate(full)

    return _result(da[start:stop].copy(), (a,), push)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    da = _as2d(a, "gather_rows")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= da.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {da.shape[0]} rows")

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(da)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _result(da[idx].copy(), (a,), push)


def gather_channel(a: Tensor, channels: np.ndarray) -> Tensor:
    """Pick one channel per row: (n, c), (n,) ints -> (n,)."""
    da = _as2d(a, "gather_channel")
    ch = np.asarray(channels, dtype=np.intp)
    if ch.shape != (da.shape[0],):
        raise ShapeError(f"gather_channel: need one channel per row, got {ch.shape} "
                         f"for {da.shape}")
    if ch.size and (ch.min() < 0 or ch.max() >= da.shape[1]):
        raise ShapeError(f"gather_channel: channel out of range for {da.shape[1]}")
    rows = np.arange(da.shape[0])

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(da)
        full[rows, ch] = g
        a._accumulate(full)

    return _result(da[rows, ch].copy(), (a,), push)


def select_by_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-broadcast channel pick: (n, 2) probs, (g, n) bool -> (g, n).

    out[i, j] = a[j, 1] where mask[i, j] else a[j, 0].
    """
    da = _as2d(a, "select_by_mask")
    m = np.asarray(mask, dtype=bool)
    if da.shape[1] != 2 or m.ndim != 2 or m.shape[1] != da.shape[0]:
        raise ShapeError(f"select_by_mask: mask {m.shape} incompatible with {da.shape}")
    out = np.where(m, da[:, 1][None, :], da[:, 0][None, :])

    def push(g: np.ndarray) -> None:
        full = np.zeros_like(da)
        full[:, 1] = (g * m).sum(axis=0)
        full[:, 0] = (g * ~m).sum(axis=0)
        a._accumulate(full)

    return _result(out, (a,), push)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise ValueError(f"clip: lower bound {lo} exceeds upper bound {hi}")
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _result(out, (a,), lambda g: a._accumulate(g * inside))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"minimum: shapes {a.data.shape} and {b.data.shape} differ")
    take_a = a.data <= b.data

    def push(g: np.ndarray) -> None:
        a._accumulate(g * take_a)
        b._accumulate(g * ~take_a)

    return _result(np.minimum(a.data, b.data), (a, b), push)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-D tensor."""
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: a._accumulate(np.full_like(a.data, float(g))))


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(root: Tensor, seed: np.ndarray | float | None = None) -> None:
    """Accumulate d(root)/d(node) into every node reachable from `root`."""
    if seed is None:
        seed = np.ones_like(root.data)
    g = np.asarray(seed, dtype=np.float64)
    if g.shape != root.data.shape:
        raise ShapeError(f"backward: seed shape {g.shape} does not match output "
                         f"shape {root.data.shape}")
    root._accumulate(g)
    for node in reversed(_topo_order(root)):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)


class Graph:
    """A reusable forward/backward pair over named parameter arrays.

    `build(params, inputs)` re-traces the graph on every forward call;
    `backward` seeds the most recent output and returns one gradient array
    per parameter.
    """

    def __init__(self, build: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Tensor],
                 params: Mapping[str, np.ndarray]):
        self._build = build
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._param_tensors: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, **inputs: np.ndarray) -> np.ndarray:
        self._param_tensors = {k: Tensor(v, name=k) for k, v in self.params.items()}
        wrapped = {k: constant(v, name=k) for k, v in inputs.items()}
        self._output = self._build(self._param_tensors, wrapped)
        return np.array(self._output.data, copy=True)

    def backward(self, seed: np.ndarray | float | None = None) -> dict[str, np.ndarray]:
        if self._output is None or self._param_tensors is None:
            raise GraphStateError("backward called before forward")
        backward(self._output, seed)
        return {
            k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._param_tensors.items()
        }


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(fn: Callable[[Mapping[str, Tensor]], Tensor],
                   params: Mapping[str, np.ndarray],
                   step: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps parameter tensors to a scalar output and must be deterministic.
    The relative error per entry is |a - f| / max(|a|, |f|, floor).
    """
    arrays = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    tensors = {k: Tensor(v, name=k) for k, v in arrays.items()}
    out = fn(tensors)
    if out.data.shape != ():
        raise ShapeError("gradient_check: fn must return a scalar tensor")
    backward(out, 1.0)
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in tensors.items()
    }

    def value_at(current: Mapping[str, np.ndarray]) -> float:
        return float(fn({k: Tensor(v) for k, v in current.items()}).data)

    worst = 0.0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = value_at(arrays)
            flat[i] = orig - step
            lo = value_at(arrays)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoint format

_MAGIC = b"TCKPT\x00"
_VERSION = 1


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays; round-trips bit-exactly via load_arrays."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
            fh.write(data.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ValueError("checkpoint: bad magic string")
    off = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _VERSION:
        raise ValueError(f"checkpoint: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}q", blob, off)
        off += 8 * ndim
        size = int(math.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    return out
