"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the active :class:`Tape`
when at least one of its inputs requires a gradient.  :func:`backward` walks
the tape in reverse execution order, accumulating gradients additively where a
tensor fans out to several consumers, and then clears the tape.

Only equal-shape elementwise arithmetic is supported; there is no general
broadcasting.  Network layers live in :mod:`trendmatch.ops`.
"""

import threading
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", axis="size", expected=1, got=self.data.size)
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # elementwise arithmetic; the other operand is a same-shape Tensor or a python scalar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed differentiable operations.

    Each thread has its own tape, so independent graphs can be built
    concurrently.
    """

    def __init__(self):
        self.nodes = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def record(self, out, parents, backward_fn):
        self.nodes.append(_Node(out, tuple(parents), backward_fn))

    def clear(self):
        self.nodes.clear()


_local = threading.local()


def get_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def is_grad_enabled():
    return get_tape().enabled


def make_result(data, parents, backward_fn):
    """Wrap ``data`` as the output of an op and record it if needed.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor(data, dtype=data.dtype)
    tape = get_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def backward(loss, tape=None):
    """Populate ``.grad`` on every leaf tensor that ``loss`` depends on.

    Leaf gradients accumulate into any existing ``.grad``.  The tape is
    cleared afterwards, so each forward pass supports exactly one backward.
    """
    tape = get_tape() if tape is None else tape
    if loss.data.size != 1:
        raise DimensionError("backward needs a scalar loss", axis="size", expected=1, got=loss.data.size)
    produced = {id(n.out) for n in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise DimensionError("gradient shape mismatch", axis="shape", expected=p.data.shape, got=pg.shape)
            pg = pg.astype(p.data.dtype, copy=False)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
            if key not in produced:
                leaves[key] = p
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


def _as_operand(x, like):
    if isinstance(x, Tensor):
        if x.shape != like.shape:
            raise DimensionError("elementwise operands must share a shape", axis="shape", expected=like.shape, got=x.shape)
        return x
    return None


def add(a, b):
    other = _as_operand(b, a)
    if other is None:
        return make_result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    return make_result(a.data + other.data, (a, other), lambda g: (g, g))


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    other = _as_operand(b, a)
    if other is None:
        s = a.data.dtype.type(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,))
    ad, bd = a.data, other.data
    return make_result(ad * bd, (a, other), lambda g: (g * bd, g * ad))


def tsum(a):
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def bw(g):
        return (np.full(a.shape, g, dtype=a.data.dtype),)

    return make_result(out, (a,), bw)


def tmean(a):
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return make_result(out, (a,), bw)


def exp(a):
    e = np.exp(a.data)
    return make_result(e, (a,), lambda g: (g * e,))


def log(a):
    d = a.data
    return make_result(np.log(d), (a,), lambda g: (g / d,))


def weighted_sum(terms, weights):
    """Return ``sum_i w_i * t_i`` over scalar tensors as one tape node."""
    terms = list(terms)
    ws = [float(w) for w in weights]
    dtype = np.result_type(*[t.data.dtype for t in terms])
    total = np.zeros((), dtype=np.float64)
    for t, w in zip(terms, ws):
        if t.data.size != 1:
            raise DimensionError("weighted_sum needs scalar terms", axis="size", expected=1, got=t.data.size)
        total += w * t.data.astype(np.float64).reshape(())
    out = total.astype(dtype)

    def bw(g):
        return tuple((g * w).astype(t.data.dtype).reshape(t.shape) for t, w in zip(terms, ws))

    return make_result(out, tuple(terms), bw)
