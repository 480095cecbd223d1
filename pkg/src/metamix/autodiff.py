"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every vector-Jacobian rule is written in terms of the same graph operations
it differentiates, so the adjoints produced by :func:`grad` with
``create_graph=True`` are ordinary nodes and can be differentiated again.
This is what the second-order MAML meta-gradient relies on.

Example
-------
>>> w = Node(2.0)
>>> (g,) = grad(w * w * w, [w], create_graph=True)
>>> float(grad(g, w).value)
12.0
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NondeterminismError",
    "Node",
    "constant",
    "no_grad",
    "enable_grad",
    "is_recording",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "exp",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
    "sum",
    "mean",
    "add_bias",
    "sum_to",
    "broadcast_to",
    "custom_op",
    "forward_op",
    "grad",
    "finite_diff_check",
]


class AutodiffError(RuntimeError):
    """Raised for misuse of the differentiation machinery."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


class NondeterminismError(AutodiffError):
    """Raised when a loss function returns different values for identical inputs."""


_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def _recording(flag: bool):
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    """Context manager: ops build value-only nodes with no parents."""
    return _recording(False)


def enable_grad():
    """Context manager that turns recording back on, e.g. for an inner loop run under :func:`no_grad`."""
    return _recording(True)


def _as_array(value: Any) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Node:
    """Immutable value in a computation graph.

    ``vjp(g, needs, out)`` maps the adjoint ``g`` of this node to a tuple of
    parent adjoints (``None`` where ``needs`` is false).
    """

    __slots__ = ("value", "parents", "vjp", "op", "higher_order")

    def __init__(
        self,
        value: Any,
        parents: tuple[Node, ...] = (),
        vjp: Callable | None = None,
        op: str = "constant",
        higher_order: bool = True,
    ):
        if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
            self.value = value
        else:
            self.value = _as_array(value)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.higher_order = higher_order

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Node:
        return transpose(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Node division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value: Any) -> Node:
    """Leaf node with zero parents."""
    return value if isinstance(value, Node) else Node(value)


_as_node = constant


def _make(op: str, value: np.ndarray, parents: tuple[Node, ...], vjp: Callable) -> Node:
    value = np.asarray(value, dtype=np.float64)
    value.flags.writeable = False
    if not is_recording():
        return Node(value, op=op)
    return Node(value, parents, vjp, op)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- shape plumbing ---------------------------------------------------------


def sum_to(x: Node, shape: tuple[int, ...]) -> Node:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = _as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = len(x.shape) - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    val = x.value.sum(axis=tuple(range(lead))) if lead else x.value
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and val.shape[i] != 1)
    if axes:
        val = val.sum(axis=axes, keepdims=True)
    if val.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")

    def vjp(g, needs, out):
        return (broadcast_to(g, x.shape),)

    return _make("sum_to", val, (x,), vjp)


def broadcast_to(x: Node, shape: tuple[int, ...]) -> Node:
    x = _as_node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        val = np.broadcast_to(x.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def vjp(g, needs, out):
        return (sum_to(g, x.shape),)

    return _make("broadcast_to", np.array(val), (x,), vjp)


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    x = _as_node(x)
    try:
        val = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def vjp(g, needs, out):
        return (reshape(g, x.shape),)

    return _make("reshape", val, (x,), vjp)


def transpose(x: Node) -> Node:
    x = _as_node(x)
    if len(x.shape) != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")

    def vjp(g, needs, out):
        return (transpose(g),)

    return _make("transpose", x.value.T, (x,), vjp)


# -- arithmetic ---------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)

    def vjp(g, needs, out):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make("add", a.value + b.value, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("subtract", a, b)

    def vjp(g, needs, out):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make("subtract", a.value - b.value, (a, b), vjp)


def neg(a: Node) -> Node:
    a = _as_node(a)

    def vjp(g, needs, out):
        return (neg(g),)

    return _make("negate", -a.value, (a,), vjp)


def scale(a: Node, c: float) -> Node:
    """Multiply by a Python scalar that is not itself differentiated."""
    a = _as_node(a)
    c = float(c)

    def vjp(g, needs, out):
        return (scale(g, c),)

    return _make("scalar-multiply", a.value * c, (a,), vjp)


def mul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("elementwise-multiply", a, b)

    def vjp(g, needs, out):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make("elementwise-multiply", a.value * b.value, (a, b), vjp)


def matmul(a: Node, b: Node) -> Node:
    a, b = _as_node(a), _as_node(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matrix-multiply: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g, needs, out):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _make("matrix-multiply", a.value @ b.value, (a, b), vjp)


def add_bias(x: Node, bias: Node) -> Node:
    """``x[batch, n] + bias[n]`` with the bias broadcast over rows."""
    x, bias = _as_node(x), _as_node(bias)
    if len(x.shape) != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"broadcast-add-bias: incompatible shapes {x.shape} and {bias.shape}")

    def vjp(g, needs, out):
        return (g if needs[0] else None, sum_to(g, bias.shape) if needs[1] else None)

    return _make("broadcast-add-bias", x.value + bias.value, (x, bias), vjp)


# -- nonlinearities -----------------------------------------------------------


def relu(x: Node) -> Node:
    x = _as_node(x)
    mask = x.value > 0

    def vjp(g, needs, out):
        # The step function has zero derivative almost everywhere, so the mask
        # enters the adjoint graph as a constant.
        return (mul(g, Node(mask.astype(np.float64))),)

    # np.maximum propagates NaN, so a poisoned input still surfaces downstream.
    return _make("relu", np.maximum(x.value, 0.0), (x,), vjp)


def exp(x: Node) -> Node:
    x = _as_node(x)

    def vjp(g, needs, out):
        return (mul(g, out),)

    return _make("exp", np.exp(x.value), (x,), vjp)


def _log_softmax_value(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(x: Node) -> Node:
    """Log-softmax over the last axis, stabilized by max subtraction."""
    x = _as_node(x)
    if len(x.shape) == 0:
        raise ShapeError("log-softmax: needs at least one axis, got a scalar")

    def vjp(g, needs, out):
        total = sum(g, axis=-1, keepdims=True)
        return (sub(g, mul(exp(out), total)),)

    return _make("log-softmax", _log_softmax_value(x.value), (x,), vjp)


def softmax(x: Node) -> Node:
    return exp(log_softmax(x))


def softmax_cross_entropy(logits: Node, targets: Any) -> Node:
    """Fused ``-mean_rows(sum(targets * log_softmax(logits)))``.

    ``targets`` may be soft (rows are probability vectors).  Rows are averaged,
    classes are summed.
    """
    logits, targets = _as_node(logits), _as_node(targets)
    if len(logits.shape) != 2 or logits.shape != targets.shape:
        raise ShapeError(f"cross-entropy: incompatible shapes {logits.shape} and {targets.shape}")
    batch = logits.shape[0]
    logp = _log_softmax_value(logits.value)
    value = -(targets.value * logp).sum() / batch

    def vjp(g, needs, out):
        d_logits = d_targets = None
        if needs[0]:
            d_logits = scale(mul(sub(softmax(logits), targets), g), 1.0 / batch)
        if needs[1]:
            d_targets = scale(mul(log_softmax(logits), g), -1.0 / batch)
        return (d_logits, d_targets)

    return _make("cross-entropy", value, (logits, targets), vjp)


# -- reductions ---------------------------------------------------------------


def sum(x: Node, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    x = _as_node(x)
    val = x.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, needs, out):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(out.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(x.shape))
        return (broadcast_to(g, x.shape),)

    return _make("sum", val, (x,), vjp)


def mean(x: Node, axis: int | None = None, keepdims: bool = False) -> Node:
    x = _as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- extension point ----------------------------------------------------------


def custom_op(name: str, fn: Callable, vjp_fn: Callable) -> Callable[..., Node]:
    """Wrap a numpy function with a first-order-only gradient rule.

    ``vjp_fn(g, *inputs)`` receives and returns plain arrays.  Nodes built
    this way cannot be differentiated twice; :func:`grad` raises if asked to
    with ``create_graph=True``.
    """

    def apply(*inputs: Any) -> Node:
        nodes = tuple(_as_node(i) for i in inputs)
        value = _as_array(fn(*(n.value for n in nodes)))

        def vjp(g, needs, out):
            grads = vjp_fn(g.value, *(n.value for n in nodes))
            return tuple(Node(gr) if need else None for gr, need in zip(grads, needs))

        if not is_recording():
            return Node(value, op=name)
        return Node(value, nodes, vjp, name, higher_order=False)

    apply.__name__ = name
    return apply


_FORWARD_OPS: dict[str, Callable[..., Node]] = {
    "add": add,
    "subtract": sub,
    "scalar-multiply": scale,
    "elementwise-multiply": mul,
    "matrix-multiply": matmul,
    "relu": relu,
    "log-softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "negate": neg,
    "broadcast-add-bias": add_bias,
    "exp": exp,
    "cross-entropy": softmax_cross_entropy,
}


def forward_op(kind: str, inputs: Sequence[Any], **attrs: Any) -> Node:
    """Dispatch an op by its kind name, e.g. ``forward_op("relu", [x])``."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **attrs)


# -- reverse accumulation -----------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Node, wrt, create_graph: bool = False):
    """Gradient of scalar ``output`` with respect to ``wrt``.

    ``wrt`` may be a single node, a sequence of nodes or a mapping of names
    to nodes; the result has the same structure.  Nodes that ``output`` does
    not depend on get a zero gradient.  With ``create_graph=True`` the
    returned gradients are live graph nodes.
    """
    if isinstance(wrt, Node):
        return grad(output, [wrt], create_graph)[0]
    if isinstance(wrt, Mapping):
        names = list(wrt)
        grads = grad(output, [wrt[k] for k in names], create_graph)
        return dict(zip(names, grads))

    targets = list(wrt)
    if output.value.size != 1:
        raise AutodiffError(f"grad: output must be a scalar, got shape {output.shape}")

    order = _toposort(output)
    target_ids = {id(t) for t in targets}
    needed: set[int] = set()
    for node in order:
        if id(node) in target_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    adjoints: dict[int, Node] = {}
    if id(output) in needed:
        adjoints[id(output)] = Node(np.ones_like(output.value))

    with _recording(create_graph):
        for node in reversed(order):
            if not node.parents or id(node) not in adjoints:
                continue
            if create_graph and not node.higher_order:
                raise AutodiffError(
                    f"grad: op {node.op!r} has no differentiable gradient rule; "
                    "create_graph=True is unsupported through it"
                )
            g = adjoints[id(node)] if id(node) in target_ids else adjoints.pop(id(node))
            needs = tuple(id(p) in needed for p in node.parents)
            parent_grads = node.vjp(g, needs, node)
            for p, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                key = id(p)
                adjoints[key] = add(adjoints[key], pg) if key in adjoints else pg

    result = []
    for t in targets:
        g = adjoints.get(id(t))
        result.append(g if g is not None else Node(np.zeros_like(t.value)))
    return result


def finite_diff_check(
    loss_fn: Callable[[dict[str, Node]], Any],
    params: Mapping[str, Any],
    step: float = 1e-5,
) -> dict[str, float]:
    """Worst relative error per parameter between :func:`grad` and central differences.

    ``loss_fn`` receives a dict of nodes and must be deterministic.  The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays: Mapping[str, np.ndarray]) -> float:
        # Recording stays on: loss_fn may itself take gradients (an inner loop).
        out = loss_fn({k: Node(v) for k, v in arrays.items()})
        return float(out.value if isinstance(out, Node) else out)

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise NondeterminismError(f"loss_fn returned {first!r} then {second!r} for identical parameters")

    leaves = {k: Node(v) for k, v in base.items()}
    analytic = {k: g.value for k, g in grad(loss_fn(leaves), leaves).items()}

    errors: dict[str, float] = {}
    for name, arr in base.items():
        numeric = np.empty_like(arr)
        flat = numeric.reshape(-1)
        for i in range(arr.size):
            shifted = dict(base)
            plus = arr.copy().reshape(-1)
            plus[i] += step
            shifted[name] = plus.reshape(arr.shape)
            up = evaluate(shifted)
            minus = arr.copy().reshape(-1)
            minus[i] -= step
            shifted[name] = minus.reshape(arr.shape)
            down = evaluate(shifted)
            flat[i] = (up - down) / (2.0 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if arr.size else 0.0
    return errors
