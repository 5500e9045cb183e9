"""Tape-based reverse-mode automatic differentiation.

Every differentiable operation appends an immutable :class:`Node` to a
:class:`Tape`. :func:`backward` sweeps the tape in reverse and returns plain
adjoint arrays. :func:`backward_with_graph` runs the same sweep but records each
adjoint computation back onto the tape, so the gradients it returns can be
differentiated a second time.

Both sweeps share one table of derivative rules (``VJP_RULES``). A rule is
written against a small backend: the numeric backend evaluates with
:mod:`pbnet.tensor_core`, the graph backend calls the ``record_*`` functions.
Because the arithmetic is identical, the two sweeps agree bit for bit.

Scalars are length-1 vectors. Gradients of unreachable nodes are absent from
the returned map, never zero-filled.
"""

import numpy as np

from . import tensor_core as tc
from .errors import ShapeError, UsageError


class Node:
    """One recorded value. Immutable once created."""

    __slots__ = ("tape", "id", "op", "parents", "value", "requires_grad", "aux")

    def __init__(self, tape, id, op, parents, value, requires_grad, aux=None):
        value.flags.writeable = False
        object.__setattr__(self, "tape", tape)
        object.__setattr__(self, "id", id)
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "requires_grad", requires_grad)
        object.__setattr__(self, "aux", aux)

    def __setattr__(self, name, value):
        raise AttributeError("Node is immutable")

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape}, parents={self.parents})"


class Tape:
    """Append-only list of nodes; ids are dense in append order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, parents, value, aux=None):
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), op, tuple(p.id for p in parents), value, requires_grad, aux)
        self.nodes.append(node)
        return node

    def replay(self):
        """Recompute every node value from the leaves and return the list."""
        values = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                ins = [values[i] for i in node.parents]
                values.append(_FORWARD[node.op](ins, node.aux))
        return values


def leaf(tape, value, requires_grad=False):
    value = tc.as_tensor(value)
    if not np.all(np.isfinite(value)):
        raise ValueError("leaf values must be finite")
    node = Node(tape, len(tape.nodes), "leaf", (), value, bool(requires_grad))
    tape.nodes.append(node)
    return node


def constant(tape, value):
    return leaf(tape, value, requires_grad=False)


def detach(node, tape=None, requires_grad=False):
    """Copy ``node``'s value into a fresh parentless leaf on ``tape``."""
    tape = node.tape if tape is None else tape
    return leaf(tape, node.value, requires_grad)


def _tape_of(*nodes):
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise UsageError("operands belong to different tapes")
    return tape


def _scalar(name, node):
    if node.shape != (1,):
        raise ShapeError(f"{name} must be a scalar (shape (1,)), got {node.shape}")


# Forward evaluators, keyed by op tag: f(parent_values, aux) -> value.
_FORWARD = {
    "add": lambda v, aux: tc.add(v[0], v[1]),
    "sub": lambda v, aux: tc.sub(v[0], v[1]),
    "mul": lambda v, aux: tc.mul(v[0], v[1]),
    "scale": lambda v, aux: tc.scale(v[1][0], v[0]),
    "scale_const": lambda v, aux: tc.scale(aux, v[0]),
    "matvec": lambda v, aux: tc.matvec(v[0], v[1]),
    "matvec_t": lambda v, aux: tc.matvec_t(v[0], v[1]),
    "outer": lambda v, aux: tc.outer(v[0], v[1]),
    "soft_threshold": lambda v, aux: tc.soft_threshold(v[0], v[1][0]),
    "soft_threshold_const": lambda v, aux: tc.soft_threshold(v[0], aux),
    "sum_squares": lambda v, aux: np.array([tc.sum_squares(v[0])]),
    "dot": lambda v, aux: np.array([tc.dot(v[0], v[1])]),
}


def _record(op, parents, aux=None):
    tape = _tape_of(*parents)
    value = _FORWARD[op]([p.value for p in parents], aux)
    return tape._append(op, parents, value, aux)


def record_add(a, b):
    return _record("add", (a, b))


def record_sub(a, b):
    return _record("sub", (a, b))


def record_mul(a, b):
    return _record("mul", (a, b))


def record_scale(x, s):
    """``s * x``; ``s`` is either a scalar node or a plain float constant."""
    if isinstance(s, Node):
        _scalar("scale factor", s)
        return _record("scale", (x, s))
    return _record("scale_const", (x,), float(s))


def record_matvec(A, x):
    return _record("matvec", (A, x))


def record_matvec_t(A, v):
    return _record("matvec_t", (A, v))


def record_outer(u, w):
    return _record("outer", (u, w))


def record_soft_threshold(z, tau):
    """Soft-threshold ``z`` by ``tau`` (a scalar node or a float constant)."""
    if isinstance(tau, Node):
        _scalar("threshold", tau)
        return _record("soft_threshold", (z, tau))
    return _record("soft_threshold_const", (z,), float(tau))


def record_sum_squares(x):
    return _record("sum_squares", (x,))


def record_dot(a, b):
    return _record("dot", (a, b))


class _NumericOps:
    """Backend that evaluates adjoint arithmetic directly."""

    @staticmethod
    def lift(node):
        return node.value

    def const(self, value):
        return value

    add = staticmethod(tc.add)
    mul = staticmethod(tc.mul)
    matvec = staticmethod(tc.matvec)
    matvec_t = staticmethod(tc.matvec_t)
    outer = staticmethod(tc.outer)

    @staticmethod
    def scale(x, s):
        return tc.scale(s if isinstance(s, float) else s[0], x)

    @staticmethod
    def dot(a, b):
        return np.array([tc.dot(a, b)])


class _GraphOps:
    """Backend that records adjoint arithmetic on the tape."""

    def __init__(self, tape):
        self.tape = tape

    @staticmethod
    def lift(node):
        return node

    def const(self, value):
        return constant(self.tape, value)

    add = staticmethod(record_add)
    mul = staticmethod(record_mul)
    matvec = staticmethod(record_matvec)
    matvec_t = staticmethod(record_matvec_t)
    outer = staticmethod(record_outer)
    scale = staticmethod(record_scale)
    dot = staticmethod(record_dot)


# Vector-Jacobian rules: rule(B, node, ins, g, needs) -> list of parent
# adjoints (None where needs[i] is False). ``ins`` are the parents lifted into
# backend B; ``node`` gives access to concrete values for piecewise masks.

def _vjp_add(B, node, ins, g, needs):
    return [g if needs[0] else None, g if needs[1] else None]


def _vjp_sub(B, node, ins, g, needs):
    return [g if needs[0] else None, B.scale(g, -1.0) if needs[1] else None]


def _vjp_mul(B, node, ins, g, needs):
    a, b = ins
    return [B.mul(g, b) if needs[0] else None, B.mul(g, a) if needs[1] else None]


def _vjp_scale(B, node, ins, g, needs):
    x, s = ins
    return [B.scale(g, s) if needs[0] else None, B.dot(g, x) if needs[1] else None]


def _vjp_scale_const(B, node, ins, g, needs):
    return [B.scale(g, node.aux)]


def _vjp_matvec(B, node, ins, g, needs):
    A, x = ins
    return [B.outer(g, x) if needs[0] else None, B.matvec_t(A, g) if needs[1] else None]


def _vjp_matvec_t(B, node, ins, g, needs):
    A, v = ins
    return [B.outer(v, g) if needs[0] else None, B.matvec(A, g) if needs[1] else None]


def _vjp_outer(B, node, ins, g, needs):
    u, w = ins
    return [B.matvec(g, w) if needs[0] else None, B.matvec_t(g, u) if needs[1] else None]


def _threshold_mask(node, tau):
    z = node.tape.nodes[node.parents[0]].value
    # Strict inequality: the kink |z| == tau gets derivative 0.
    return z, (np.abs(z) > tau).astype(np.float64)


def _vjp_soft_threshold(B, node, ins, g, needs):
    tau = node.tape.nodes[node.parents[1]].value[0]
    z, mask = _threshold_mask(node, tau)
    gz = B.mul(g, B.const(mask)) if needs[0] else None
    gtau = B.dot(g, B.const(-np.sign(z) * mask)) if needs[1] else None
    return [gz, gtau]


def _vjp_soft_threshold_const(B, node, ins, g, needs):
    _, mask = _threshold_mask(node, node.aux)
    return [B.mul(g, B.const(mask))]


def _vjp_sum_squares(B, node, ins, g, needs):
    (x,) = ins
    return [B.scale(B.scale(x, g), 2.0)]


def _vjp_dot(B, node, ins, g, needs):
    a, b = ins
    return [B.scale(b, g) if needs[0] else None, B.scale(a, g) if needs[1] else None]


VJP_RULES = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "scale_const": _vjp_scale_const,
    "matvec": _vjp_matvec,
    "matvec_t": _vjp_matvec_t,
    "outer": _vjp_outer,
    "soft_threshold": _vjp_soft_threshold,
    "soft_threshold_const": _vjp_soft_threshold_const,
    "sum_squares": _vjp_sum_squares,
    "dot": _vjp_dot,
}


def _check_loss(tape, loss):
    if loss.tape is not tape:
        raise UsageError("loss node is not on this tape")
    if loss.shape != (1,):
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")


def _sweep(B, tape, loss, relevant):
    nodes = tape.nodes
    adj = {loss.id: B.const(np.ones(1))}
    for i in range(loss.id, -1, -1):
        g = adj.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.op == "leaf":
            continue
        needs = [relevant(p) for p in node.parents]
        if not any(needs):
            continue
        ins = [B.lift(nodes[p]) for p in node.parents]
        grads = VJP_RULES[node.op](B, node, ins, g, needs)
        for p, need, gp in zip(node.parents, needs, grads):
            if not need:
                continue
            prev = adj.get(p)
            adj[p] = gp if prev is None else B.add(prev, gp)
    return adj


def backward(tape, loss):
    """Return ``{node id: adjoint}`` for every requires-grad node the loss depends on.

    Nothing is appended to the tape.
    """
    _check_loss(tape, loss)
    if not loss.requires_grad:
        return {}
    nodes = tape.nodes
    adj = _sweep(_NumericOps(), tape, loss, lambda i: nodes[i].requires_grad)
    return {i: g for i, g in adj.items() if nodes[i].requires_grad}


def backward_with_graph(tape, loss, wrt):
    """Differentiate ``loss`` w.r.t. each node in ``wrt``, recording the sweep.

    Returns one gradient node per entry of ``wrt`` (``None`` when the loss does
    not depend on it). The returned nodes live on ``tape`` and can be fed into
    further recorded operations and a second :func:`backward`.
    """
    _check_loss(tape, loss)
    wrt = list(wrt)
    for w in wrt:
        if w.tape is not tape:
            raise UsageError("wrt node is not on this tape")
    # Only nodes downstream of some wrt node can carry an adjoint we need.
    nodes = tape.nodes
    downstream = set(w.id for w in wrt)
    first = min(downstream) if downstream else len(nodes)
    for node in nodes[first:loss.id + 1]:
        if any(p in downstream for p in node.parents):
            downstream.add(node.id)
    if loss.id not in downstream:
        return [None] * len(wrt)
    adj = _sweep(_GraphOps(tape), tape, loss, downstream.__contains__)
    return [adj.get(w.id) for w in wrt]
