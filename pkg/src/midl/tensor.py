"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in
execution order; :meth:`Tape.backward` then sweeps the records in reverse.
Outside a tape every op is a plain numpy computation with no bookkeeping,
which is what inference paths use.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them is a single row (shape ``(n,)`` or ``(1, n)``) that is repeated over
the batch axis of a ``(b, n)`` operand.
"""
import threading

import numpy as np

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "matmul",
    "mean",
    "mul",
    "relu",
    "sigmoid",
    "softmax",
    "softmax_cross_entropy",
    "stable_sigmoid",
    "sub",
    "sum",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """Row-major float64 array with an optional gradient buffer.

    The shape is fixed at construction. ``data`` may be updated in place
    (optimizers do this) but never rebound to a differently shaped array.
    """

    __slots__ = ("_data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self._data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # Internal constructor: takes ownership of a freshly computed array.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t._data = arr if arr.flags.c_contiguous else arr.copy()
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._tape = None
        return t

    @property
    def data(self):
        return self._data

    @data.setter
    def data(self, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise DimensionError(
                f"cannot rebind tensor of shape {self._data.shape} to shape {arr.shape}"
            )
        self._data[...] = arr

    @property
    def shape(self):
        return self._data.shape

    @property
    def size(self):
        return self._data.size

    def numpy(self):
        return self._data

    def item(self):
        if self._data.size != 1:
            raise DimensionError(f"tensor of shape {self.shape} is not a scalar")
        return float(self._data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _stack():
    try:
        return _local.stack
    except AttributeError:
        _local.stack = []
        return _local.stack


def active_tape():
    """The innermost tape entered on this thread, or None."""
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside record themselves here.
    A tape can be swept once. Call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        s = _stack()
        if s and s[-1] is self:
            s.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output, inputs, backward_fn):
        """Register ``output = f(*inputs)``.

        ``backward_fn(g)`` receives dL/d(output) and returns one gradient (or
        None) per input, in the same order.
        """
        if self._consumed:
            raise RuntimeError("tape already swept; call reset() before recording")
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(output, inputs, backward_fn))
        return output

    def reset(self):
        for node in self.nodes:
            node.output._tape = None
        self.nodes = []
        self._consumed = False

    def backward(self, loss):
        if self._consumed:
            raise RuntimeError("backward already called on this tape; reset() first")
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward on an empty tape")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        self._consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise DimensionError(
                        f"backward rule produced shape {ig.shape} for input of shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp._tape is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss):
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss._tape is None:
        raise RuntimeError("loss is not attached to a tape")
    loss._tape.backward(loss)


def _recording(*inputs):
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        return tape
    return None


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    tape = _recording(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def _back(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
            return ga, gb

        tape.record(out, (a, b), _back)
    return out


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor._wrap(a.data.T)
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.T,))
    return out


# ---------------------------------------------------------------- elementwise


def _broadcast_shape(sa, sb):
    if sa == sb:
        return sa
    for row, full in ((sa, sb), (sb, sa)):
        if len(full) == 2:
            if row == (full[1],) or row == (1, full[1]):
                return full
    if sa == () or sb == ():
        return sa if sb == () else sb
    raise DimensionError(f"shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0).reshape(shape)


def _binary(a, b, fwd, back):
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape)
    out = Tensor._wrap(fwd(a.data, b.data))
    assert out.shape == shape
    tape = _recording(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def _back(g):
            ga, gb = back(g, ad, bd, a.requires_grad, b.requires_grad)
            return (
                _unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if gb is not None else None,
            )

        tape.record(out, (a, b), _back)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y, ra, rb: (g if ra else None, g if rb else None))


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y, ra, rb: (g if ra else None, -g if rb else None))


def mul(a, b):
    return _binary(
        a, b, np.multiply,
        lambda g, x, y, ra, rb: (g * y if ra else None, g * x if rb else None),
    )


def stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    s = stable_sigmoid(a.data)
    out = Tensor._wrap(s)
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    # np.maximum keeps NaN so divergence surfaces in the loss
    out = Tensor._wrap(np.maximum(a.data, 0.0))
    tape = _recording(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * active,))
    return out


# ---------------------------------------------------------------- reductions and losses


def sum(a):
    a = as_tensor(a)
    out = Tensor._wrap(np.asarray(a.data.sum()))
    tape = _recording(a)
    if tape is not None:
        shape = a.shape
        tape.record(out, (a,), lambda g: (np.full(shape, float(g)),))
    return out


def mean(a):
    a = as_tensor(a)
    n = a.size
    out = Tensor._wrap(np.asarray(a.data.mean()))
    tape = _recording(a)
    if tape is not None:
        shape = a.shape
        tape.record(out, (a,), lambda g: (np.full(shape, float(g) / n),))
    return out


def softmax(logits):
    """Row-wise softmax of a numpy array (no tape)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    nll = logsumexp - z[rows, labels]
    out = Tensor._wrap(np.asarray(nll.mean()))
    tape = _recording(logits)
    if tape is not None:

        def _back(g):
            p = np.exp(z - logsumexp[:, None])
            p[rows, labels] -= 1.0
            return (p * (float(g) / b),)

        tape.record(out, (logits,), _back)
    return out
