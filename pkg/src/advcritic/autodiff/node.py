"""Graph nodes, op registry and reverse-mode differentiation.

Every backward rule is written in terms of registered ops, so the gradient
returned by :func:`gradient` is an ordinary node that can be differentiated
again.
"""

import contextlib
import itertools

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_graph_stack = []
_record = [True]
_check_finite = [True]

OPS = {}


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class UnboundPlaceholderError(AutodiffError, KeyError):
    pass


class Op:
    """Forward/backward pair for one op tag.

    ``backward(node, g)`` returns one gradient node (or None) per parent.
    Ops with ``differentiable=False`` produce nodes that never require grad.
    """

    __slots__ = ("name", "forward", "backward", "differentiable")

    def __init__(self, name, forward, backward=None, differentiable=True):
        self.name = name
        self.forward = forward
        self.backward = backward
        self.differentiable = differentiable


def register(name, forward, backward=None, differentiable=True):
    OPS[name] = Op(name, forward, backward, differentiable)
    return OPS[name]


@contextlib.contextmanager
def no_grad():
    """Build nodes without recording parents; outputs never require grad."""
    _record.append(False)
    try:
        yield
    finally:
        _record.pop()


@contextlib.contextmanager
def finite_checks(enabled):
    _check_finite.append(bool(enabled))
    try:
        yield
    finally:
        _check_finite.pop()


def grad_enabled():
    return _record[-1]


class Node:
    """A value in the computation graph.

    ``value`` is always a float64 ndarray (0-d for scalars). Leaves carry
    op ``"constant"``, ``"parameter"`` or ``"placeholder"``.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "attrs")
    __array_ufunc__ = None  # make ndarray <op> Node dispatch to Node

    def __init__(self, op, parents, value, requires_grad, attrs=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self.attrs = attrs or {}
        if _graph_stack:
            _graph_stack[-1]._add(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # arithmetic sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    @property
    def T(self):
        return _ops().transpose(self)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from advcritic.autodiff import ops

    return ops


def _as_array(value):
    arr = np.asarray(value, dtype=DTYPE)
    if not arr.flags.writeable:
        arr = arr.copy()
    return arr


def _check(value, op):
    if not _check_finite[-1]:
        return
    # one reduction is much cheaper than isfinite; overflow of the sum only
    # triggers the exact check
    with np.errstate(all="ignore"):
        total = np.add.reduce(value, axis=None)
    if not np.isfinite(total) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by op {op!r}")


def constant(value):
    value = _as_array(value)
    _check(value, "constant")
    return Node("constant", (), value, False)


def parameter(value):
    """A leaf that requires grad (model weights, attack inputs)."""
    value = _as_array(value).copy()
    _check(value, "parameter")
    return Node("parameter", (), value, True)


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


def apply(name, *parents, **attrs):
    op = OPS[name]
    parents = tuple(as_node(p) for p in parents)
    with np.errstate(all="ignore"):
        value = np.asarray(op.forward(*(p.value for p in parents), **attrs), dtype=DTYPE)
    _check(value, name)
    requires = (
        op.differentiable and _record[-1] and any(p.requires_grad for p in parents)
    )
    if not _record[-1]:
        return Node(name, (), value, False, attrs)
    return Node(name, parents, value, requires, attrs)


class Graph:
    """Records every node created inside ``with graph:`` for later replay."""

    def __init__(self):
        self.nodes = []
        self._placeholders = {}

    def __enter__(self):
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack.pop()

    def _add(self, node):
        self.nodes.append(node)

    def placeholder(self, name, value, requires_grad=False):
        """Create a named input; ``value`` seeds eager evaluation."""
        if name in self._placeholders:
            raise ValueError(f"duplicate placeholder {name!r}")
        _graph_stack.append(self)
        try:
            node = Node("placeholder", (), _as_array(value), requires_grad, {"name": name})
        finally:
            _graph_stack.pop()
        self._placeholders[name] = node
        return node


def forward(graph, bindings, outputs, seed=None):
    """Re-evaluate ``outputs`` of ``graph`` with placeholders bound to new values.

    Returns a dict mapping each requested node to its ndarray value. Noise
    nodes draw from a generator seeded by ``seed``.
    """
    outputs = list(outputs)
    needed = _ancestors(outputs)
    rng = np.random.default_rng(seed)
    values = {}
    for node in graph.nodes:
        if node.id not in needed:
            continue
        if node.op == "placeholder":
            name = node.attrs["name"]
            if name not in bindings:
                raise UnboundPlaceholderError(name)
            v = _as_array(bindings[name])
            if v.shape != node.value.shape:
                raise ShapeError(
                    f"placeholder {name!r} expects shape {node.value.shape}, got {v.shape}"
                )
            values[node.id] = v
        elif node.op in ("constant", "parameter"):
            values[node.id] = node.value
        else:
            args = [values.get(p.id, p.value) for p in node.parents]
            attrs = dict(node.attrs)
            if "rng" in attrs:
                attrs["rng"] = rng
            with np.errstate(all="ignore"):
                v = np.asarray(OPS[node.op].forward(*args, **attrs), dtype=DTYPE)
            _check(v, node.op)
            values[node.id] = v
    result = {}
    for out in outputs:
        result[out] = values.get(out.id, out.value)
    return result


def _ancestors(outputs):
    seen = set()
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen.add(n.id)
        stack.extend(n.parents)
    return seen


def _topo_order(root, targets):
    """Nodes on some path root -> target (through requires_grad edges), root first."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    # order is post-order (parents before children): mark nodes leading to a target
    leads = set()
    for node in order:
        if node.id in targets or any(p.id in leads for p in node.parents):
            leads.add(node.id)
    order.reverse()
    return [n for n in order if n.id in leads], leads


_needed = [None]


def wants(node):
    """Whether a backward rule should produce a gradient for ``node``."""
    if not node.requires_grad:
        return False
    needed = _needed[-1]
    return needed is None or node.id in needed


class GradientMap(dict):
    """Node id -> gradient node. Indexable by node or id.

    ``unreachable`` holds ids of ``wrt`` nodes with no path from the scalar;
    their entries are zero constants.
    """

    def __init__(self):
        super().__init__()
        self.unreachable = set()

    def __getitem__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Node):
            key = key.id
        return super().__contains__(key)


def gradient(scalar, wrt, create_graph=True):
    """Reverse-mode gradient of a 0-d node with respect to ``wrt``.

    With ``create_graph`` the returned nodes carry their own history and can
    be differentiated again.
    """
    if isinstance(wrt, Node):
        wrt = [wrt]
    if scalar.value.ndim != 0:
        raise ShapeError(f"gradient needs a 0-d output, got shape {scalar.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise AutodiffError(f"{w!r} does not require grad")
    targets = {w.id for w in wrt}
    result = GradientMap()
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        grads = {}
        if scalar.requires_grad:
            order, leads = _topo_order(scalar, targets)
            grads[scalar.id] = constant(np.ones((), dtype=DTYPE))
            _needed.append(leads)
            try:
                for node in order:
                    g = grads.get(node.id)
                    if g is None:
                        continue
                    if node.id not in targets:
                        del grads[node.id]
                    if not node.parents:
                        continue
                    pgs = OPS[node.op].backward(node, g)
                    for p, pg in zip(node.parents, pgs):
                        if pg is None or p.id not in leads:
                            continue
                        prev = grads.get(p.id)
                        grads[p.id] = pg if prev is None else prev + pg
            finally:
                _needed.pop()
        for w in wrt:
            g = grads.get(w.id)
            if g is None:
                g = constant(np.zeros(w.shape, dtype=DTYPE))
                result.unreachable.add(w.id)
            elif g.shape != w.shape:
                raise ShapeError(f"gradient shape {g.shape} != {w.shape}")
            if not create_graph and g.requires_grad:
                g = constant(g.value)
            result[w.id] = g
    return result


def grad(scalar, x, create_graph=True):
    """Single-input shorthand for :func:`gradient`."""
    return gradient(scalar, [x], create_graph=create_graph)[x]


def second_gradient(scalar, first_wrt, second_wrt, probe=None):
    """Gradient of ``<probe, d scalar / d first_wrt>`` with respect to ``second_wrt``.

    With the default all-ones probe this is the row-summed mixed partial
    d^2 scalar / (d first_wrt d second_wrt).
    """
    g = grad(scalar, first_wrt, create_graph=True)
    if probe is None:
        contraction = _ops().sum(g)
    else:
        contraction = _ops().sum(g * as_node(probe))
    if not contraction.requires_grad:
        return constant(np.zeros(second_wrt.shape))
    return grad(contraction, second_wrt, create_graph=True)
