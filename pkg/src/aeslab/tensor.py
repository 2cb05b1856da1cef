"""Dense float64 tensors on a reverse-mode tape.

Everything trainable in this package runs on these primitives. Values are
row-major float64 throughout; a Graph records ops in execution order, and
backward() replays the tape once, accumulating gradients into leaf tensors.
There is no broadcasting beyond numpy-compatible elementwise ops, no views
(every op copies), and no higher-order derivatives.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError

__all__ = [
    "Tensor",
    "Graph",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_axis",
    "flip0",
    "gather_rows",
    "tanh",
    "sigmoid",
    "relu",
    "hinge",
    "softmax",
    "logsumexp",
    "dropout",
    "tsum",
    "tmean",
    "backward",
    "finite_difference_gradient",
    "derive_rng",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

_state = threading.local()


def _active_graph():
    return getattr(_state, "graph", None)


class Tensor:
    """A shaped float64 array, optionally a node on the active Graph.

    Tensors without a tape binding are plain immutable-by-convention values
    and may be shared freely; `grad` is populated by `backward` for leaves.
    """

    __slots__ = ("data", "grad", "_node")

    def __init__(self, data, grad=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = grad
        self._node = None  # (graph, node_id) while bound to a live tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    @property
    def node_id(self):
        g = _active_graph()
        if g is not None and self._node is not None and self._node[0] is g:
            return self._node[1]
        return None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # tape bindings reference live graphs and never survive pickling
    def __getstate__(self):
        return (self.data, self.grad)

    def __setstate__(self, state):
        self.data, self.grad = state
        self._node = None

    # operator sugar; constants are wrapped, never recorded as leaves
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "bwd")

    def __init__(self, inputs, bwd):
        self.inputs = inputs
        self.bwd = bwd


class Graph:
    """Append-only tape; insertion order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        _state.graph = self
        return self

    def __exit__(self, *exc):
        stack = _state.stack
        stack.pop()
        _state.graph = stack[-1] if stack else None
        return False

    def _bind_leaf(self, t: Tensor) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node((), None))
        self.leaves[nid] = t
        t._node = (self, nid)
        return nid

    def _ensure(self, t: Tensor) -> int:
        if t._node is not None and t._node[0] is self:
            return t._node[1]
        return self._bind_leaf(t)

    def _record(self, out: Tensor, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
        ids = tuple(self._ensure(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(_Node(ids, bwd))
        out._node = (self, nid)
        return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _is_const(t: Tensor) -> bool:
    # constants created inline never become leaves; callers keep references
    # to anything they want gradients for
    return False


def _emit(out_data: np.ndarray, inputs, bwd) -> Tensor:
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None:
        g._record(out, inputs, bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError("add", a.shape, b.shape) from None
    ash, bsh = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError("sub", a.shape, b.shape) from None
    ash, bsh = a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError("mul", a.shape, b.shape) from None
    ad, bd, ash, bsh = a.data, b.data, a.shape, b.shape
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", a.shape, shape) from None
    return _emit(out.copy(), (a,), lambda g: (g.reshape(old),))


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ContractError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError("concat", *[t.shape for t in ts]) from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit(out, ts, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError("slice", a.shape, (start, stop))
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    ash = a.shape

    def bwd(g):
        full = np.zeros(ash)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx].copy(), (a,), bwd)


def flip0(a) -> Tensor:
    """Reverse along the first axis."""
    a = _as_tensor(a)
    return _emit(a.data[::-1].copy(), (a,), lambda g: (g[::-1].copy(),))


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatters back (duplicates add)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("gather_rows", a.shape)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"gather_rows: index out of range for {a.shape[0]} rows")
    ash = a.shape

    def bwd(g):
        full = np.zeros(ash)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx].copy(), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def hinge(a) -> Tensor:
    """max(0, x); identical to relu, named for loss-building call sites."""
    return relu(a)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (a,), bwd)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        gk = np.expand_dims(g, axis) if not keepdims else g
        return (soft * gk,)

    return _emit(out, (a,), bwd)


def dropout(a, mask: np.ndarray, keep_p: float) -> Tensor:
    """Inverted dropout: zero where mask is 0 and scale kept units by 1/keep_p."""
    a = _as_tensor(a)
    if not 0.0 < keep_p <= 1.0:
        raise ContractError(f"dropout: keep_p {keep_p} outside (0, 1]")
    if mask.shape != a.shape:
        raise DimensionError("dropout", a.shape, mask.shape)
    scale = mask / keep_p
    return _emit(a.data * scale, (a,), lambda g: (g * scale,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, ash).copy(),)

    return _emit(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    ash = a.shape
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, ash).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk / n, ash).copy(),)

    return _emit(out, (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor's grad field."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None or loss._node[0] is not graph:
        raise ContractError("backward: loss is not a node of this graph")
    nodes = graph.nodes
    grads: list = [None] * len(nodes)
    grads[loss._node[1]] = np.ones_like(loss.data)
    for nid in range(len(nodes) - 1, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.bwd is None:
            continue
        for inp_id, ginp in zip(node.inputs, node.bwd(g)):
            if grads[inp_id] is None:
                grads[inp_id] = ginp.copy() if ginp.base is not None else ginp
            else:
                grads[inp_id] = grads[inp_id] + ginp
    for nid, leaf in graph.leaves.items():
        g = grads[nid]
        leaf.grad = g if g is not None else np.zeros_like(leaf.data)


def finite_difference_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued function at x.

    The independent check for every analytic gradient in this package: it
    only ever calls f forward, so it shares no code path with backward().
    """
    if eps <= 0:
        raise ContractError(f"finite differences need eps > 0, got {eps}")

    def scalar(v) -> float:
        return v.item() if isinstance(v, Tensor) else float(v)

    flat = x.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = scalar(f(x))
        flat[i] = orig - eps
        lo = scalar(f(x))
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return Tensor(out.reshape(x.shape))


# ---------------------------------------------------------------------------
# seeding

def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic per-(tag...) random stream derived from one run seed.

    Hash-based so that layer/step streams are independent of call order.
    """
    key = repr((int(seed),) + tags).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


def bernoulli_mask(rng: np.random.Generator, shape, keep_p: float) -> np.ndarray:
    return (rng.random(shape) < keep_p).astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then (name, shape, float64 LE payload)

_MAGIC = b"AESLABCK"
_VERSION = 1


def checkpoint_bytes(entries: "dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]") -> bytes:
    if isinstance(entries, dict):
        entries = entries.items()
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    body = []
    count = 0
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)  # asarray keeps 0-d shapes intact
        nbytes = name.encode("utf-8")
        body.append(struct.pack("<I", len(nbytes)))
        body.append(nbytes)
        body.append(struct.pack("<I", arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        body.append(arr.astype("<f8").tobytes(order="C"))
        count += 1
    chunks.append(struct.pack("<I", count))
    chunks.extend(body)
    return b"".join(chunks)


def save_checkpoint(path, entries) -> None:
    data = checkpoint_bytes(entries)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint_bytes(data: bytes) -> "dict[str, np.ndarray]":
    if data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("bad magic string")
    off = len(_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint")
        piece = data[off : off + n]
        off += n
        return piece

    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    if off != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def load_checkpoint(path) -> "dict[str, np.ndarray]":
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())


def meta_to_array(obj) -> np.ndarray:
    """Encode a JSON-serialisable object as a float64 byte array.

    Keeps model metadata (vocab, config) inside the single-format checkpoint:
    each byte of the canonical JSON becomes one float64 value.
    """
    import json

    data = json.dumps(obj, sort_keys=True, ensure_ascii=True).encode("ascii")
    return np.frombuffer(data, dtype=np.uint8).astype(np.float64)


def array_to_meta(arr: np.ndarray):
    import json

    return json.loads(bytes(arr.astype(np.uint8)).decode("ascii"))
