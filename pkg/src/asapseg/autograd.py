"""Dense tensors with reverse-mode autodiff over a recorded tape.

Layout convention is row-major NCHW. There is no implicit broadcasting:
elementwise ops require equal shapes, the only sanctioned broadcast is a
python scalar operand. Composite layers register a single tape node with a
hand-written backward (see layers.py).
"""

import numpy as np

from .errors import AxisError, ContractError, ShapeError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch the element type for newly created tensors ('float32'/'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported element type {dtype!r}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class GraphTape:
    """Append-only record of executed ops, in topological order."""

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = GraphTape()
_GRAD_ENABLED = True

# Observers notified by relu() with the smallest |input| seen; used by the
# finite-difference checker to exclude coordinates sitting on the kink.
_KINK_WATCHERS = []


def active_tape():
    return _TAPE


def clear_graph():
    _TAPE.clear()


class fresh_tape:
    """Swap in an empty tape for the duration of the context."""

    def __enter__(self):
        global _TAPE
        self._prev = _TAPE
        _TAPE = GraphTape()
        return _TAPE

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = self._prev
        return False


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.size == 0 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    # Operator sugar; b may be a Tensor of equal shape or a python scalar.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def record(op, inputs, out_data, backward_fn):
    """Wrap op output in a Tensor and register the node when grads are live."""
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def backward(root):
    """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

    Intermediate grads are reset per call, leaf grads accumulate across calls.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    produced = {id(n.output) for n in _TAPE.nodes}
    for node in _TAPE.nodes:
        node.output.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(_TAPE.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.shape != tensor.data.shape:
                raise ShapeError(
                    f"backward of {node.op} produced grad {g.shape} "
                    f"for input {tensor.data.shape}"
                )
            if tensor.grad is None:
                tensor.grad = g.copy() if id(tensor) not in produced else g
            else:
                tensor.grad = tensor.grad + g


def _as_operand(b):
    if isinstance(b, Tensor):
        return b, None
    return None, float(b)


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b):
    bt, s = _as_operand(b)
    if bt is None:
        return record("add", [a], a.data + s, lambda g: (g,))
    _check_same_shape("add", a, bt)
    return record("add", [a, bt], a.data + bt.data, lambda g: (g, g))


def sub(a, b):
    bt, s = _as_operand(b)
    if bt is None:
        return record("sub", [a], a.data - s, lambda g: (g,))
    _check_same_shape("sub", a, bt)
    return record("sub", [a, bt], a.data - bt.data, lambda g: (g, -g))


def mul(a, b):
    bt, s = _as_operand(b)
    if bt is None:
        return scale(a, s)
    _check_same_shape("mul", a, bt)
    ad, bd = a.data, bt.data
    return record("mul", [a, bt], ad * bd, lambda g: (g * bd, g * ad))


def scale(a, s):
    s = float(s)
    return record("scale", [a], a.data * s, lambda g: (g * s,))


def relu(a):
    x = a.data
    for watcher in _KINK_WATCHERS:
        watcher.observe(x)
    mask = x > 0  # subgradient at exactly 0 is 0
    return record("relu", [a], np.where(mask, x, 0.0), lambda g: (g * mask,))


def elementwise(op_kind, a, b=None):
    """Dispatch by name; the scalar-or-tensor rules of the named op apply."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}
    if op_kind not in table:
        raise ContractError(f"unknown elementwise op {op_kind!r}")
    fn = table[op_kind]
    if op_kind == "relu":
        if b is not None:
            raise ContractError("relu takes a single operand")
        return fn(a)
    return fn(a, b)


def matmul(a, b):
    """Matrix product, 2-D or stacked 3-D with equal leading batch dim."""
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
        raise ShapeError(f"matmul: rank {ad.ndim} x rank {bd.ndim} unsupported")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims {ad.shape} x {bd.shape}")
    if ad.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dims {ad.shape[0]} vs {bd.shape[0]}")
    out = np.matmul(ad, bd)

    def back(g):
        return (np.matmul(g, np.swapaxes(bd, -1, -2)),
                np.matmul(np.swapaxes(ad, -1, -2), g))

    return record("matmul", [a, b], out, back)


def _check_axes(x, axes):
    axes = tuple(axes)
    for ax in axes:
        if not (0 <= ax < x.data.ndim):
            raise AxisError(f"axis {ax} invalid for shape {x.data.shape}")
    if len(set(axes)) != len(axes):
        raise AxisError(f"duplicate axes {axes}")
    return axes


def reduce(stat, x, axes, keepdims=False):
    """Population mean/variance over an axis set; empty axes is the identity."""
    if stat not in ("mean", "var"):
        raise ContractError(f"unknown reduction {stat!r}")
    axes = _check_axes(x, axes)
    if not axes:
        return record("reduce_id", [x], x.data.copy(), lambda g: (g,))
    count = int(np.prod([x.data.shape[ax] for ax in axes]))
    xd = x.data

    def expand(g):
        if keepdims:
            return g
        return np.expand_dims(g, axes)

    if stat == "mean":
        out = xd.mean(axis=axes, keepdims=keepdims)
        back = lambda g: (np.broadcast_to(expand(g) / count, xd.shape).copy(),)
    else:
        mu = xd.mean(axis=axes, keepdims=True)
        out = np.mean((xd - mu) ** 2, axis=axes, keepdims=keepdims)
        back = lambda g: (expand(g) * 2.0 * (xd - mu) / count,)
    return record(f"reduce_{stat}", [x], out, back)


def tsum(x, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(x.data.ndim))
    axes = _check_axes(x, axes)
    if not axes:
        return record("sum_id", [x], x.data.copy(), lambda g: (g,))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", [x], out, back)


def tmean(x, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(x.data.ndim))
    return reduce("mean", x, axes, keepdims)


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape {x.data.shape} -> {shape}: element count differs")
    old = x.data.shape
    return record("reshape", [x], x.data.reshape(shape),
                  lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise AxisError(f"transpose axes {axes} invalid for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    return record("transpose", [x], np.transpose(x.data, axes).copy(),
                  lambda g: (np.transpose(g, inv).copy(),))


def concat_channels(tensors):
    """Concatenate 4-D tensors along the channel axis."""
    shapes = [t.data.shape for t in tensors]
    for s in shapes:
        if len(s) != 4 or s[0] != shapes[0][0] or s[2:] != shapes[0][2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return record("concat_channels", list(tensors), out, back)
