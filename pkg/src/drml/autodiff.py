"""Minimal reverse-mode autodiff over dense float64 numpy tensors.

Graphs are built define-by-run: every op evaluates eagerly and records
enough structure for a single reverse sweep.  The op vocabulary is small
and closed; anything a model needs beyond it is an engine change, not a
call-site hack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Node",
    "parameter",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "scalar_mul",
    "relu",
    "concat",
    "gather_rows",
    "slice_cols",
    "row_norm",
    "normalize_rows",
    "softmax_rows",
    "exp",
    "log",
    "log1p_sum_exp",
    "mse",
    "reduce_sum",
    "reduce_mean",
    "stop_gradient",
    "backward",
    "parameter_grads",
    "grad_check",
    "GradCheckReport",
    "GraphError",
]


class GraphError(ValueError):
    """Shape mismatch or other structural problem while building a graph."""


class Node:
    """One value in the computation graph.

    ``value`` is a float64 ndarray, fixed once the node is created.
    ``grad`` accumulates d(loss)/d(value) during the reverse sweep.
    """

    __slots__ = ("op", "inputs", "value", "grad", "name", "_vjp")

    def __init__(self, op, inputs, value, name=None, vjp=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self._vjp = vjp

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, name={self.name!r})"


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise GraphError(f"non-finite value produced by op {op!r}")
    return value


def parameter(name: str, value) -> Node:
    value = _as_array(value)
    return Node("parameter", (), value, name=name)


def constant(value) -> Node:
    return Node("constant", (), _as_array(value))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise GraphError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
        )
    value = _check_finite("matmul", a.value @ b.value)

    def vjp(g):
        return (g @ b.value.T, a.value.T @ g)

    return Node("matmul", (a, b), value, vjp=vjp)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise GraphError("transpose expects a 2-D operand")
    return Node("transpose", (a,), a.value.T.copy(), vjp=lambda g: (g.T,))


def _binary(op, a, b, fn, vjp_fn):
    try:
        value = fn(a.value, b.value)
    except ValueError as err:
        raise GraphError(f"{op} shape mismatch: {a.value.shape} vs {b.value.shape}") from err
    _check_finite(op, value)

    def vjp(g):
        ga, gb = vjp_fn(g)
        return (_unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape))

    return Node(op, (a, b), value, vjp=vjp)


def add(a: Node, b: Node) -> Node:
    return _binary("add", a, b, np.add, lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    return _binary("sub", a, b, np.subtract, lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    return _binary("mul", a, b, np.multiply, lambda g: (g * b.value, g * a.value))


def div(a: Node, b: Node) -> Node:
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g: (g / b.value, -g * a.value / (b.value * b.value)),
    )


def scalar_mul(c: float, a: Node) -> Node:
    c = float(c)
    return Node("scalar-mul", (a,), _check_finite("scalar-mul", c * a.value),
                vjp=lambda g: (c * g,))


def relu(a: Node) -> Node:
    # subgradient at exactly 0 is 0
    mask = a.value > 0.0
    return Node("relu", (a,), np.where(mask, a.value, 0.0),
                vjp=lambda g: (np.where(mask, g, 0.0),))


def concat(nodes, axis: int = 1) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise GraphError("concat of zero nodes")
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node("concat", nodes, value, vjp=vjp)


def gather_rows(a: Node, index) -> Node:
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise GraphError("gather_rows expects a 1-D index")
    if index.size and (index.min() < 0 or index.max() >= a.value.shape[0]):
        raise GraphError("gather_rows index out of range")
    value = a.value[index]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return Node("gather-rows", (a,), value, vjp=vjp)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if a.value.ndim != 2:
        raise GraphError("slice_cols expects a 2-D operand")
    value = a.value[:, start:stop].copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return Node("slice-cols", (a,), value, vjp=vjp)


def row_norm(a: Node) -> Node:
    """Euclidean norm of each row: [m, d] -> [m]."""
    if a.value.ndim != 2:
        raise GraphError("row_norm expects a 2-D operand")
    value = np.linalg.norm(a.value, axis=1)

    def vjp(g):
        safe = np.where(value > 0.0, value, 1.0)
        return (a.value * (g / safe)[:, None],)

    return Node("l2norm", (a,), value, vjp=vjp)


def normalize_rows(a: Node) -> Node:
    """Scale each row to unit Euclidean norm; zero rows are rejected."""
    if a.value.ndim != 2:
        raise GraphError("normalize_rows expects a 2-D operand")
    norms = np.linalg.norm(a.value, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise GraphError(f"normalize_rows: zero-norm row at index {int(bad[0])}")
    value = a.value / norms[:, None]

    def vjp(g):
        dot = np.sum(g * value, axis=1, keepdims=True)
        return ((g - value * dot) / norms[:, None],)

    return Node("l2norm-rows", (a,), value, vjp=vjp)


def softmax_rows(a: Node) -> Node:
    if a.value.ndim != 2:
        raise GraphError("softmax_rows expects a 2-D operand")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * value, axis=1, keepdims=True)
        return (value * (g - dot),)

    return Node("softmax-row", (a,), value, vjp=vjp)


def exp(a: Node) -> Node:
    value = _check_finite("exp", np.exp(a.value))
    return Node("exp", (a,), value, vjp=lambda g: (g * value,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise GraphError("log of a non-positive value")
    return Node("log", (a,), np.log(a.value), vjp=lambda g: (g / a.value,))


def log1p_sum_exp(a: Node) -> Node:
    """log(1 + sum_i exp(a_i)) over a 1-D vector, computed stably."""
    x = a.value.ravel()
    hi = max(0.0, x.max()) if x.size else 0.0
    total = np.exp(-hi) + np.exp(x - hi).sum()
    value = np.asarray(hi + np.log(total))

    def vjp(g):
        soft = np.exp(x - hi) / total
        return (float(g) * soft.reshape(a.value.shape),)

    return Node("log1p-sum-exp", (a,), value, vjp=vjp)


def mse(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise GraphError(f"mse shape mismatch: {a.value.shape} vs {b.value.shape}")
    diff = a.value - b.value
    n = diff.size
    value = np.asarray(np.mean(diff * diff))

    def vjp(g):
        scaled = (2.0 * float(g) / n) * diff
        return (scaled, -scaled)

    return Node("mse", (a, b), value, vjp=vjp)


def reduce_sum(a: Node) -> Node:
    shape = a.value.shape
    return Node("sum", (a,), np.asarray(a.value.sum()),
                vjp=lambda g: (np.full(shape, float(g)),))


def reduce_mean(a: Node) -> Node:
    shape = a.value.shape
    n = a.value.size
    return Node("mean", (a,), np.asarray(a.value.mean()),
                vjp=lambda g: (np.full(shape, float(g) / n),))


def stop_gradient(a: Node) -> Node:
    """Value pass-through; the reverse sweep contributes exactly zero upstream."""
    return Node("stop-gradient", (a,), a.value, vjp=lambda g: (np.zeros(a.value.shape),))


def _topo_order(root: Node) -> list:
    order = []
    seen = set()
    stack = [(root, iter(root.inputs))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for child in it:
            if id(child) not in seen:
                seen.add(id(child))
                stack.append((child, iter(child.inputs)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Node) -> None:
    """Accumulate gradients of a scalar ``loss`` into every reachable node."""
    if loss.value.shape != ():
        raise GraphError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros(node.value.shape)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.op == "stop-gradient":
            # barrier: do not propagate anything upstream
            continue
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for child, g in zip(node.inputs, grads):
            child.grad = child.grad + g


def parameter_grads(loss: Node) -> dict:
    """Run the reverse sweep and collect gradients keyed by parameter name."""
    backward(loss)
    grads = {}
    for node in _topo_order(loss):
        if node.op == "parameter":
            if node.name in grads:
                grads[node.name] = grads[node.name] + node.grad
            else:
                grads[node.name] = node.grad
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    evaluations: int
    per_parameter: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def ok(self):
        return self.failure is None


def grad_check(loss_fn, params: dict, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` maps a name->ndarray dict to a scalar Node and must be
    deterministic.  Relative error per element is |a-f| / max(|a|, |f|, 1e-8);
    absolute differences below 1e-8 count as exact, since central differences
    of an O(1) loss carry ~1e-11 of cancellation noise even where the true
    gradient is identically zero.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    analytic = parameter_grads(loss_fn(params))
    evals = 1
    per_param = {}
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        fd = np.zeros_like(base)
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            probe = {k: (v.copy() if k == name else v) for k, v in params.items()}
            pflat = probe[name].ravel()
            try:
                pflat[i] = orig + step
                hi = float(loss_fn(probe).value)
                pflat[i] = orig - step
                lo = float(loss_fn(probe).value)
            except GraphError as err:
                return GradCheckReport(np.inf, evals, per_param,
                                       failure=f"probing {name!r}: {err}")
            evals += 2
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return GradCheckReport(np.inf, evals, per_param,
                                       failure=f"non-finite loss probing {name!r}")
            fd.ravel()[i] = (hi - lo) / (2.0 * step)
        a = analytic.get(name, np.zeros_like(base))
        diff = np.abs(a - fd)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
        err = float(np.max(np.where(diff <= 1e-8, 0.0, diff / denom))) if base.size else 0.0
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckReport(worst, evals, per_param)
