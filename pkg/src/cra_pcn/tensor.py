"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs is tracked (a leaf with ``requires_grad=True`` or the output of
a recorded operation). Outside a tape every operation is a plain numpy
evaluation, which is what finite-difference checks and inference use.

Broadcasting follows the trailing-dimension rule: shapes are aligned from
the right and every aligned pair must be equal or contain a 1. Anything else
raises :class:`ShapeError`.
"""
import struct

import numpy as np

from . import kernels
from .errors import ContractError, ParseError, ShapeError

_ACTIVE = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "backward", "shape")

    def __init__(self, parents, backward, shape):
        self.parents = parents
        self.backward = backward
        self.shape = shape


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. Nodes are appended in execution order, so parents always
    precede children.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}
        self._leaf_tensors = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _node_of(self, t):
        if not isinstance(t, Tensor) or not t.requires_grad:
            return None
        if t.tape is self:
            return t.node
        if t.node is None:  # leaf
            key = id(t)
            nid = self._leaves.get(key)
            if nid is None:
                nid = len(self.nodes)
                self.nodes.append(_Node((), None, t.shape))
                self._leaves[key] = nid
                self._leaf_tensors.append((nid, t))
            return nid
        return None  # recorded on another tape

    def watch(self, tensors):
        """Register leaves so they appear in the gradient map even if unused."""
        for t in tensors:
            self._node_of(t)

    def backward(self, loss):
        return backward(self, loss)


def backward(tape, loss):
    """Gradients of scalar ``loss`` with respect to every leaf seen by ``tape``.

    Returns a dict mapping leaf :class:`Tensor` objects to numpy arrays.
    Leaves that do not influence ``loss`` get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = [None] * len(tape.nodes)
    if loss.tape is tape:
        grads[loss.node] = np.ones(loss.shape)
    for nid in range(len(tape.nodes) - 1, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.backward is None:
            continue
        if nid != loss.node:
            grads[nid] = None  # free intermediates; leaves keep theirs below
        for pid, pg in zip(node.parents, node.backward(g)):
            if pid is None or pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    out = {}
    for nid, t in tape._leaf_tensors:
        g = grads[nid]
        out[t] = np.zeros(t.shape) if g is None else np.asarray(g).reshape(t.shape)
    return out


def _active():
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x):
    return x if type(x) is Tensor else Tensor(x)


def _wrap(data):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.node = None
    out.tape = None
    out.name = None
    return out


def _result(data, inputs, backward_fn):
    """Wrap ``data`` and record it when a tape tracks any input.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    if type(data) is not np.ndarray:
        data = np.asarray(data, dtype=np.float64)
    out = _wrap(data)
    if not _ACTIVE:
        return out
    tape = _ACTIVE[-1]
    parents = tuple(tape._node_of(t) for t in inputs)
    if all(p is None for p in parents):
        return out
    out.requires_grad = True
    out.tape = tape
    out.node = len(tape.nodes)
    tape.nodes.append(_Node(parents, backward_fn, data.shape))
    return out


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op, a, b):
    try:
        return op(a.data, b.data)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _result(_binary(np.add, a, b), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _result(_binary(np.subtract, a, b), (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(_binary(np.multiply, a, b), (a, b), back)


def matmul(a, b):
    """``a[..., K] @ b[K, M]``; leading dimensions of ``a`` are batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), back)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _result(y, (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if _broadcast_shape(x.shape, shape) != shape:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    old = x.shape
    return _result(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def gather(x, index):
    """Rows of ``x`` selected by an integer array; result shape ``index.shape + x.shape[1:]``.

    The backward pass scatters gradients additively, so repeated indices
    accumulate.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    old = x.data.shape
    try:
        y = x.data[index]
    except IndexError:
        raise ShapeError(f"gather index out of range for first dimension {old[0]}") from None

    def back(g):
        out = np.zeros(old)
        kernels.scatter_add_rows(out, index.reshape(-1), g.reshape(index.size, -1))
        return (out,)

    return _result(y, (x,), back)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    old = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, old),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x, axis):  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximiser."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    ax = axis % x.ndim
    y = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    old = x.shape

    def back(g):
        out = np.zeros(old)
        np.put_along_axis(out, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _result(y, (x,), back)


def softmax(x, axis):
    """Exponential normalisation along ``axis`` with max subtraction."""
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow to -inf only zeroes a weight
        z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), back)


def softmax_channelwise(logits):
    """Per point and channel, normalise an ``N x k x D`` block over the k axis."""
    logits = as_tensor(logits)
    if logits.ndim != 3:
        raise ShapeError(f"softmax_channelwise expects N x k x D, got {logits.shape}")
    return softmax(logits, axis=1)


def custom(data, inputs, backward_fn):
    """Record a fused operation whose gradient rule is supplied by the caller."""
    return _result(np.asarray(data, dtype=np.float64), tuple(as_tensor(t) for t in inputs), backward_fn)


# -- checkpoints ---------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic    8 bytes  b"CRAPCNCK"
#   version  1 byte   (currently 1)
#   count    uint32   number of records
#   record   uint16 name length, utf-8 name, uint8 ndim, ndim x uint32 dims,
#            prod(dims) x float64 values (row-major)
#   meta     uint32 length, utf-8 text (free-form, e.g. the model config)

MAGIC = b"CRAPCNCK"
VERSION = 1


def save_checkpoint(path, named, meta=""):
    """Write ``(name, array)`` pairs and an optional text block to ``path``."""
    named = list(named)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", VERSION, len(named)))
        for name, values in named:
            values = np.asarray(values, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", values.ndim))
            fh.write(struct.pack(f"<{values.ndim}I", *values.shape))
            fh.write(np.ascontiguousarray(values).tobytes())
        text = meta.encode("utf-8")
        fh.write(struct.pack("<I", len(text)) + text)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(list of (name, array), meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path=path)
    try:
        version, count = struct.unpack_from("<BI", blob, 8)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path=path)
        pos = 13
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(blob):
                raise ParseError(f"truncated record {name!r}", path=path)
            values = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
            records.append((name, values))
        (mlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + mlen != len(blob):
            raise ParseError("truncated or oversized config block", path=path)
        meta = blob[pos : pos + mlen].decode("utf-8")
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint ({exc})", path=path) from None
    return records, meta
