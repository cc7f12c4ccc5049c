"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to its tensors in topological
order.  The recorded graph can be replayed with new leaf values
(:func:`forward`) and differentiated (:func:`backward`).  Training loops record
a rollout once and replay it every epoch, which skips all Python-level model
code on the hot path.

Every public operation also accepts plain numbers / numpy arrays; when none of
its arguments is a :class:`Tensor` it simply evaluates with numpy.  Dynamics,
constraints and networks are therefore written once and used both for data
generation and for differentiable rollouts.

Broadcasting is limited to what numpy does for scalar/vector/matrix operands;
gradients are summed back over broadcast axes.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError, StateError, StructuralError

__all__ = [
    "Tape", "Tensor", "Primitive", "forward", "backward", "value_and_grad",
    "finite_difference_check", "is_tensor", "value_of",
    "add", "sub", "mul", "div", "neg", "matmul", "tanh", "softplus", "log",
    "exp", "sqrt", "arcsinh", "sin", "cos", "square", "reciprocal", "cross",
    "sum", "mean", "concat", "stack", "index", "reshape", "transpose",
]

_LEAF, _CONST, _OP = 0, 1, 2


class Primitive:
    """A differentiable operation: ``fwd(*values, **attrs)`` and a VJP.

    ``vjp(g, out, args, attrs, saved)`` returns one cotangent per argument
    (``None`` where there is nothing to propagate).  When ``saves`` is true,
    ``fwd`` returns ``(value, saved)`` and ``saved`` is kept per node for the
    backward pass.
    """

    __slots__ = ("name", "fwd", "vjp", "saves")

    def __init__(self, name, fwd, vjp, saves=False):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp
        self.saves = saves

    def __repr__(self):
        return f"Primitive({self.name})"

    def __call__(self, *args, **attrs):
        return _apply(self, args, attrs)


class Tape:
    """Ordered record of leaves, constants and operations.

    Use as a context manager to mark the recording as complete; a closed tape
    rejects new nodes.  Replays overwrite the cached values in place, so a
    single tape must not be replayed from two threads at once.
    """

    def __init__(self):
        self.kinds = []
        self.prims = []
        self.inputs = []
        self.attrs = []
        self.values = []
        self.saved = []
        self.names = []
        self.needs_grad = []
        self.leaves = []
        self._op_nodes = []
        self._closed = False
        self._evaluated = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._closed = True
        return False

    def __len__(self):
        return len(self.values)

    @property
    def closed(self):
        return self._closed

    def _push(self, kind, prim, inputs, attrs, value, saved, name, needs):
        if self._closed:
            raise StateError("tape is closed; cannot record new nodes")
        idx = len(self.values)
        self.kinds.append(kind)
        self.prims.append(prim)
        self.inputs.append(inputs)
        self.attrs.append(attrs)
        self.values.append(value)
        self.saved.append(saved)
        self.names.append(name)
        self.needs_grad.append(needs)
        if kind == _OP:
            self._op_nodes.append(idx)
        return Tensor(self, idx)

    def leaf(self, value, name=None):
        value = np.array(value, dtype=np.float64)
        t = self._push(_LEAF, None, (), None, value, None, name, True)
        self.leaves.append(t)
        return t

    def const(self, value):
        value = np.asarray(value, dtype=np.float64)
        return self._push(_CONST, None, (), None, value, None, None, False)

    def node_label(self, idx):
        kind = self.kinds[idx]
        if kind == _OP:
            what = self.prims[idx].name
        else:
            what = "leaf" if kind == _LEAF else "const"
        name = self.names[idx]
        return f"node {idx} ({what}{': ' + name if name else ''})"

    def invalidate(self):
        """Drop the evaluated flag; backward refuses until the next forward."""
        self._evaluated = False


class Tensor:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100.0

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return np.shape(self.tape.values[self.index])

    @property
    def ndim(self):
        return np.ndim(self.tape.values[self.index])

    @property
    def name(self):
        return self.tape.names[self.index]

    def __repr__(self):
        return f"Tensor({self.tape.node_label(self.index)}, shape={self.shape})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def is_tensor(x):
    return isinstance(x, Tensor)


def value_of(x):
    """Numeric value of a tensor, or the argument itself."""
    return x.value if isinstance(x, Tensor) else x


def _apply(prim, args, attrs):
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            tape = a.tape
            break
    if tape is None:
        out = prim.fwd(*args, **attrs)
        return out[0] if prim.saves else out

    idxs = []
    vals = []
    needs = False
    for a in args:
        if isinstance(a, Tensor):
            if a.tape is not tape:
                raise StructuralError(f"{prim.name}: operands live on different tapes")
            i = a.index
        else:
            i = tape.const(a).index
        idxs.append(i)
        vals.append(tape.values[i])
        needs = needs or tape.needs_grad[i]
    try:
        with np.errstate(all="ignore"):
            out = prim.fwd(*vals, **attrs)
    except ValueError as exc:
        raise StructuralError(f"{prim.name}: {exc}") from exc
    saved = None
    if prim.saves:
        out, saved = out
    out = np.asarray(out, dtype=np.float64)
    node = tape._push(_OP, prim, tuple(idxs), attrs, out, saved, None, needs)
    if not np.isfinite(out).all():
        raise DivergenceError(
            f"non-finite value at {tape.node_label(node.index)}", where=node.index
        )
    return node


def _resolve_leaf(tape, key):
    if isinstance(key, Tensor):
        if key.tape is not tape or tape.kinds[key.index] != _LEAF:
            raise StructuralError(f"binding key {key!r} is not a leaf of this tape")
        return key.index
    for leaf in tape.leaves:
        if tape.names[leaf.index] == key:
            return leaf.index
    raise StructuralError(f"no leaf named {key!r}")


def forward(tape, bindings=None, root=None, check_finite=True):
    """Replay ``tape`` with new leaf values and return the root value.

    Unbound leaves keep their previous values.  Raises ``StructuralError`` for a
    shape mismatch and, when the root comes out non-finite, ``DivergenceError``
    naming the first non-finite node.
    """
    values = tape.values
    if bindings:
        for key, val in bindings.items():
            i = _resolve_leaf(tape, key)
            val = np.array(val, dtype=np.float64)
            if val.shape != values[i].shape:
                raise StructuralError(
                    f"binding for {tape.node_label(i)} has shape {val.shape}, "
                    f"expected {values[i].shape}"
                )
            values[i] = val
    tape._evaluated = False
    prims, inputs, attrs, saved = tape.prims, tape.inputs, tape.attrs, tape.saved
    with np.errstate(all="ignore"):
        for i in tape._op_nodes:
            prim = prims[i]
            try:
                out = prim.fwd(*[values[j] for j in inputs[i]], **attrs[i])
            except ValueError as exc:
                raise StructuralError(f"{tape.node_label(i)}: {exc}") from exc
            if prim.saves:
                out, saved[i] = out
            values[i] = out
    if root is None:
        root = len(values) - 1
    elif isinstance(root, Tensor):
        root = root.index
    # checking every node costs as much as evaluating it; non-finite values
    # propagate, so look at the root and only then hunt for the first culprit
    if check_finite and not np.isfinite(values[root]).all():
        for i in tape._op_nodes:
            if not np.isfinite(values[i]).all():
                raise DivergenceError(f"non-finite value at {tape.node_label(i)}", where=i)
    tape._evaluated = True
    return values[root]


def backward(tape, seed=None, root=None):
    """Vector-Jacobian product of ``root`` with ``seed`` for every leaf.

    Returns a dict mapping each leaf :class:`Tensor` to its cotangent (zeros for
    leaves the root does not depend on).
    """
    if not tape._evaluated:
        raise StateError("backward called before a successful forward pass")
    if root is None:
        r = len(tape.values) - 1
    elif isinstance(root, Tensor):
        if root.tape is not tape:
            raise StructuralError("root belongs to a different tape")
        r = root.index
    else:
        r = int(root)
    values = tape.values
    root_val = values[r]
    if seed is None:
        seed = np.ones_like(root_val)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != np.shape(root_val):
            raise StructuralError(
                f"seed shape {seed.shape} does not match root shape {np.shape(root_val)}"
            )
    grads = [None] * (r + 1)
    grads[r] = seed
    kinds, prims, inputs, attrs = tape.kinds, tape.prims, tape.inputs, tape.attrs
    saved, needs = tape.saved, tape.needs_grad
    for i in range(r, -1, -1):
        g = grads[i]
        if g is None or kinds[i] != _OP or not needs[i]:
            continue
        ins = inputs[i]
        cots = prims[i].vjp(g, values[i], [values[j] for j in ins], attrs[i], saved[i])
        for j, c in zip(ins, cots):
            if c is None or not needs[j]:
                continue
            prev = grads[j]
            grads[j] = c if prev is None else prev + c
    out = {}
    for leaf in tape.leaves:
        i = leaf.index
        g = grads[i] if i <= r else None
        out[leaf] = np.zeros_like(values[i]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def value_and_grad(f, *arrays):
    """Record ``f`` on a fresh tape and return ``(value, [grads...])``."""
    with Tape() as tape:
        leaves = [tape.leaf(a) for a in arrays]
        y = f(*leaves)
    if not isinstance(y, Tensor):
        return np.asarray(y, dtype=np.float64), [np.zeros_like(l.value) for l in leaves]
    g = backward(tape, root=y)
    return y.value, [g[l] for l in leaves]


def finite_difference_check(f, x, h=1e-5):
    """Max over coordinates of ``|central difference - backward| / (|backward| + 1e-12)``.

    ``f`` maps a tensor to a scalar tensor.  Central differences are computed by
    replaying the recorded tape, so a non-finite evaluation raises
    ``DivergenceError``.
    """
    x = np.array(x, dtype=np.float64)
    with Tape() as tape:
        xl = tape.leaf(x, name="x")
        y = f(xl)
    if not isinstance(y, Tensor):
        return 0.0
    if np.size(y.value) != 1:
        raise StructuralError("finite_difference_check needs a scalar-valued f")
    grad = backward(tape, root=y)[xl].ravel()
    fd = np.empty_like(grad)
    flat = x.ravel()
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        fp = float(forward(tape, {xl: xp.reshape(x.shape)}, root=y))
        xm = flat.copy()
        xm[i] -= h
        fm = float(forward(tape, {xl: xm.reshape(x.shape)}, root=y))
        fd[i] = (fp - fm) / (2.0 * h)
    forward(tape, {xl: x}, root=y)
    return float(np.max(np.abs(fd - grad) / (np.abs(grad) + 1e-12)))


# --- primitives -------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = len(shape)
    while g.ndim > nd:
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(a):
    try:
        return a.shape
    except AttributeError:
        return np.shape(a)


def _vjp_add(g, out, args, attrs, saved):
    a, b = args
    return _unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))


def _vjp_sub(g, out, args, attrs, saved):
    a, b = args
    return _unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))


def _vjp_mul(g, out, args, attrs, saved):
    a, b = args
    return _unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))


def _vjp_div(g, out, args, attrs, saved):
    a, b = args
    ga = g / b
    return _unbroadcast(ga, _shape(a)), _unbroadcast(-ga * out, _shape(b))


def _vjp_matmul(g, out, args, attrs, saved):
    a, b = args
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_cross(a, b):
    return np.cross(a, b)


def _vjp_cross(g, out, args, attrs, saved):
    a, b = args
    return _unbroadcast(np.cross(b, g), _shape(a)), _unbroadcast(np.cross(g, a), _shape(b))


def _fwd_sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _vjp_sum(g, out, args, attrs, saved):
    (a,) = args
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, _shape(a)).copy(),)


def _fwd_mean(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _vjp_mean(g, out, args, attrs, saved):
    (a,) = args
    axis = attrs.get("axis")
    n = np.size(a) // max(np.size(out), 1)
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, _shape(a)).copy(),)


def _fwd_concat(*arrs, axis=0):
    return np.concatenate([np.atleast_1d(a) for a in arrs], axis=axis)


def _vjp_concat(g, out, args, attrs, saved):
    axis = attrs.get("axis", 0)
    sizes = [np.atleast_1d(a).shape[axis] for a in args]
    parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return tuple(p.reshape(_shape(a)) for p, a in zip(parts, args))


def _fwd_stack(*arrs, axis=-1):
    shape0 = np.shape(arrs[0])
    for a in arrs:
        if np.shape(a) != shape0:
            return np.stack(np.broadcast_arrays(*arrs), axis=axis)
    return np.stack(arrs, axis=axis)


def _vjp_stack(g, out, args, attrs, saved):
    axis = attrs.get("axis", -1)
    return tuple(
        _unbroadcast(np.take(g, i, axis=axis), _shape(a)) for i, a in enumerate(args)
    )


def _fwd_index(a, idx=None):
    return np.array(a[idx], dtype=np.float64)


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) for p in parts)


def _vjp_index(g, out, args, attrs, saved):
    (a,) = args
    z = np.zeros(_shape(a))
    idx = attrs["idx"]
    if _is_basic(idx):
        # basic indexing never repeats an element
        z[idx] = g
    else:
        np.add.at(z, idx, g)
    return (z,)


def _fwd_reshape(a, shape=None):
    return np.reshape(a, shape)


def _vjp_reshape(g, out, args, attrs, saved):
    return (np.reshape(g, _shape(args[0])),)


def _fwd_transpose(a):
    return np.transpose(a)


def _vjp_transpose(g, out, args, attrs, saved):
    return (np.transpose(g),)


def _unary(name, fwd, dfdx):
    def vjp(g, out, args, attrs, saved):
        return (g * dfdx(args[0], out),)

    return Primitive(name, fwd, vjp)


P_ADD = Primitive("add", np.add, _vjp_add)
P_SUB = Primitive("sub", np.subtract, _vjp_sub)
P_MUL = Primitive("mul", np.multiply, _vjp_mul)
P_DIV = Primitive("div", np.divide, _vjp_div)
P_NEG = _unary("neg", np.negative, lambda x, y: -1.0)
P_MATMUL = Primitive("matmul", np.matmul, _vjp_matmul)
P_TANH = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
P_SOFTPLUS = _unary("softplus", _softplus, lambda x, y: _sigmoid(x))
P_LOG = _unary("log", np.log, lambda x, y: 1.0 / x)
P_EXP = _unary("exp", np.exp, lambda x, y: y)
P_SQRT = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
P_ARCSINH = _unary("arcsinh", np.arcsinh, lambda x, y: 1.0 / np.sqrt(1.0 + x * x))
P_SIN = _unary("sin", np.sin, lambda x, y: np.cos(x))
P_COS = _unary("cos", np.cos, lambda x, y: -np.sin(x))
P_SQUARE = _unary("square", np.square, lambda x, y: 2.0 * x)
P_RECIPROCAL = _unary("reciprocal", np.reciprocal, lambda x, y: -y * y)
P_CROSS = Primitive("cross", _fwd_cross, _vjp_cross)
P_SUM = Primitive("sum", _fwd_sum, _vjp_sum)
P_MEAN = Primitive("mean", _fwd_mean, _vjp_mean)
P_CONCAT = Primitive("concat", _fwd_concat, _vjp_concat)
P_STACK = Primitive("stack", _fwd_stack, _vjp_stack)
P_INDEX = Primitive("index", _fwd_index, _vjp_index)
P_RESHAPE = Primitive("reshape", _fwd_reshape, _vjp_reshape)
P_TRANSPOSE = Primitive("transpose", _fwd_transpose, _vjp_transpose)


def add(a, b):
    return _apply(P_ADD, (a, b), {})


def sub(a, b):
    return _apply(P_SUB, (a, b), {})


def mul(a, b):
    return _apply(P_MUL, (a, b), {})


def div(a, b):
    return _apply(P_DIV, (a, b), {})


def neg(a):
    return _apply(P_NEG, (a,), {})


def matmul(a, b):
    return _apply(P_MATMUL, (a, b), {})


def tanh(a):
    return _apply(P_TANH, (a,), {})


def softplus(a):
    return _apply(P_SOFTPLUS, (a,), {})


def log(a):
    return _apply(P_LOG, (a,), {})


def exp(a):
    return _apply(P_EXP, (a,), {})


def sqrt(a):
    return _apply(P_SQRT, (a,), {})


def arcsinh(a):
    return _apply(P_ARCSINH, (a,), {})


def sin(a):
    return _apply(P_SIN, (a,), {})


def cos(a):
    return _apply(P_COS, (a,), {})


def square(a):
    return _apply(P_SQUARE, (a,), {})


def reciprocal(a):
    return _apply(P_RECIPROCAL, (a,), {})


def cross(a, b):
    return _apply(P_CROSS, (a, b), {})


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply(P_SUM, (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return _apply(P_MEAN, (a,), {"axis": axis, "keepdims": keepdims})


def concat(arrays, axis=0):
    return _apply(P_CONCAT, tuple(arrays), {"axis": axis})


def stack(arrays, axis=-1):
    return _apply(P_STACK, tuple(arrays), {"axis": axis})


def index(a, idx):
    return _apply(P_INDEX, (a,), {"idx": idx})


def reshape(a, shape):
    return _apply(P_RESHAPE, (a,), {"shape": shape})


def transpose(a):
    return _apply(P_TRANSPOSE, (a,), {})
