"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Node` wraps a numpy array plus the bookkeeping needed to backpropagate:
parent nodes, an op tag, and a closure computing parent gradients from the
output gradient. Graphs are built eagerly by the op functions below and are
acyclic by construction. Calling `backward` on a scalar root accumulates
gradients into every reachable node with `requires_grad`; repeated calls
without clearing accumulate further.

Conventions kept deliberately strict:
  - float64 everywhere; float32 exists only at checkpoint serialization.
  - broadcasting requires equal rank, each axis equal or 1 on one side
    (no implicit rank promotion).
  - no operator fusion, no graph rewriting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DomainError

_debug_checks = False


def set_debug(enabled: bool) -> None:
    """Enable finiteness validation of every op result (slow, for tests)."""
    global _debug_checks
    _debug_checks = enabled


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "_backward")

    def __init__(self, value, op="leaf", parents=(), backward=None, requires_grad=False):
        self.value = _as_value(value)
        if _debug_checks and not np.all(np.isfinite(self.value)):
            raise DomainError(f"non-finite values produced by op '{op}'")
        track = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self.requires_grad = track
        # parents/backward are only kept when gradients can flow; a forward
        # pass through frozen parameters therefore builds no graph.
        self.parents = tuple(parents) if track and backward is not None else ()
        self._backward = backward if track else None
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Node":
        return Node(self.value, op="detach")

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Node) else constant(other))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Node) else constant(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Node:
    return Node(x, op="const")


def param(x) -> Node:
    return Node(np.array(x, dtype=np.float64), op="param", requires_grad=True)


def _check_broadcast(sa: tuple, sb: tuple) -> None:
    if len(sa) != len(sb):
        raise ContractViolation(f"rank mismatch {sa} vs {sb} (no implicit rank promotion)")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ContractViolation(f"shapes {sa} and {sb} not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the output gradient back down to a broadcast input's shape."""
    axes = tuple(i for i, (d, gd) in enumerate(zip(shape, g.shape)) if d == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a.shape, b.shape)
    return Node(a.value + b.value, "add", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a.shape, b.shape)
    return Node(a.value - b.value, "sub", (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a.shape, b.shape)
    return Node(a.value * b.value, "mul", (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return Node(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(a: Node) -> Node:
    """tanh-approximate gelu: 0.5*x*(1 + tanh(k*(x + c*x^3)))."""
    x = a.value
    t = np.tanh(_GELU_K * (x + _GELU_C * x ** 3))

    def backward(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du),)

    return Node(0.5 * x * (1.0 + t), "gelu", (a,), backward)


def exp(a: Node) -> Node:
    e = np.exp(a.value)
    return Node(e, "exp", (a,), lambda g: (g * e,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return Node(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def square(a: Node) -> Node:
    return Node(a.value ** 2, "square", (a,), lambda g: (g * 2.0 * a.value,))


def sqrt(a: Node) -> Node:
    """Square root with subgradient 0 at x == 0 (used by L1 chamfer)."""
    if np.any(a.value < 0.0):
        raise DomainError("sqrt requires non-negative inputs")
    r = np.sqrt(a.value)

    def backward(g):
        safe = np.where(r > 0.0, r, 1.0)
        return (np.where(r > 0.0, g * 0.5 / safe, 0.0),)

    return Node(r, "sqrt", (a,), backward)


def _norm_axis(axis, rank):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % rank for ax in axis)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    axis = _norm_axis(axis, a.value.ndim)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, "sum", (a,), backward)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    axis = _norm_axis(axis, a.value.ndim)
    if axis is None:
        n = a.value.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_sorted(a: Node, axis: int, keepdims: bool = False) -> Node:
    """Mean along one axis, summing in sorted order so the value is exactly
    invariant to permutations along that axis; gradient is the usual 1/n."""
    ax = axis % a.value.ndim
    n = a.shape[ax]
    out = np.sort(a.value, axis=ax).mean(axis=ax, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Node(out, "mean_sorted", (a,), backward)


def max_(a: Node, axis: int, keepdims: bool = False) -> Node:
    """Max reduction along one axis; ties send the gradient to the lowest index."""
    ax = axis % a.value.ndim
    out = a.value.max(axis=ax, keepdims=keepdims)
    amax = np.argmax(a.value, axis=ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        mask = np.zeros_like(a.value)
        np.put_along_axis(mask, np.expand_dims(amax, ax), 1.0, axis=ax)
        return (mask * np.broadcast_to(g, a.shape),)

    return Node(out, "max", (a,), backward)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return Node(a.value @ b.value, "matmul", (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ContractViolation("transpose expects a 2-D operand")
    return Node(a.value.T.copy(), "transpose", (a,), lambda g: (g.T.copy(),))


def permute(a: Node, axes) -> Node:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ContractViolation(f"permute axes {axes} invalid for rank {a.value.ndim}")
    inverse = tuple(np.argsort(axes))
    return Node(np.ascontiguousarray(a.value.transpose(axes)), "permute", (a,),
                lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def bmm(a: Node, b: Node) -> Node:
    """Batched matrix product of (B, n, k) with (B, k, m)."""
    if a.value.ndim != 3 or b.value.ndim != 3:
        raise ContractViolation("bmm expects 3-D operands")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ContractViolation(f"bmm shapes incompatible: {a.shape} @ {b.shape}")
    return Node(np.matmul(a.value, b.value), "bmm", (a, b),
                lambda g: (np.matmul(g, b.value.transpose(0, 2, 1)),
                           np.matmul(a.value.transpose(0, 2, 1), g)))


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    old = a.shape
    return Node(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def gather_rows(a: Node, idx) -> Node:
    """Select rows a[idx]; repeated indices sum their gradients."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation("gather_rows expects a 1-D index list")

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Node(a.value[idx], "gather", (a,), backward)


def narrow(a: Node, axis: int, start: int, length: int) -> Node:
    """Contiguous slice [start, start+length) along one axis."""
    ax = axis % a.value.ndim
    if not (0 <= start and start + length <= a.shape[ax]):
        raise ContractViolation(f"narrow range [{start},{start + length}) outside axis of size {a.shape[ax]}")
    sl = tuple(slice(start, start + length) if i == ax else slice(None) for i in range(a.value.ndim))

    def backward(g):
        out = np.zeros_like(a.value)
        out[sl] = g
        return (out,)

    return Node(a.value[sl].copy(), "narrow", (a,), backward)


def concat(nodes, axis: int) -> Node:
    nodes = list(nodes)
    ranks = {n.value.ndim for n in nodes}
    if len(ranks) != 1:
        raise ContractViolation("concat operands must share rank")
    ax = axis % nodes[0].value.ndim
    sizes = [n.shape[ax] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for i, n in enumerate(nodes):
            sl = tuple(slice(offsets[i], offsets[i + 1]) if d == ax else slice(None)
                       for d in range(n.value.ndim))
            outs.append(g[sl])
        return tuple(outs)

    return Node(np.concatenate([n.value for n in nodes], axis=ax), "concat", tuple(nodes), backward)


def softmax(a: Node, axis: int = -1) -> Node:
    """Row-stable softmax; rows along `axis` sum to 1."""
    ax = axis % a.value.ndim
    shifted = a.value - a.value.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return Node(s, "softmax", (a,), backward)


def layernorm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Per-row normalization of an (n, C) matrix followed by affine gain/bias."""
    if eps <= 0:
        raise ContractViolation("layernorm eps must be positive")
    if x.value.ndim != 2:
        raise ContractViolation("layernorm expects an (n, C) operand")
    n, c = x.shape
    gv = gain.value.reshape(-1)
    bv = bias.value.reshape(-1)
    if gv.shape[0] != c or bv.shape[0] != c:
        raise ContractViolation("gain/bias length must equal the channel count")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gg = g * gv.reshape(1, c)
        dxhat_mean = gg.mean(axis=1, keepdims=True)
        dxhat_xhat_mean = (gg * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gg - dxhat_mean - xhat * dxhat_xhat_mean)
        dgain = (g * xhat).sum(axis=0).reshape(gain.shape)
        dbias = g.sum(axis=0).reshape(bias.shape)
        return (dx, dgain, dbias)

    return Node(xhat * gv.reshape(1, c) + bv.reshape(1, c), "layernorm", (x, gain, bias), backward)


def logsumexp(a: Node, axis: int = -1, keepdims: bool = False) -> Node:
    """Stable log-sum-exp built from primitives (detached max shift is exact)."""
    ax = axis % a.value.ndim
    m = a.value.max(axis=ax, keepdims=True)
    out = sum_(exp(sub(a, constant(m))), axis=ax, keepdims=True)
    out = add(log(out), constant(m))
    if not keepdims:
        out = reshape(out, tuple(d for i, d in enumerate(out.shape) if i != ax))
    return out


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into .grad for every reachable node."""
    if root.value.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # iterative post-order topological sort (graphs exceed recursion limits)
    topo: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # per-call gradient flow map; .grad records the running total so repeated
    # backward calls accumulate rather than re-propagating old seeds
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.accumulate(g)
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pid = id(parent)
            flowing[pid] = pg if pid not in flowing else flowing[pid] + pg


@dataclass
class GradCheckEntry:
    name: str
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.rel_err)


def grad_check(build, params: dict[str, np.ndarray], h: float = 1e-5,
               tol: float = 1e-4, max_entries: int = 0, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar `build(leaves)` against central differences.

    `build` receives a dict of fresh leaf Nodes keyed like `params` and must
    return a scalar Node. Relative error per checked entry is
    |g_a - g_n| / max(1, |g_n|); a parameter's reported error is the max over
    its checked entries (all entries, or `max_entries` sampled ones).
    """
    if h <= 0:
        raise ContractViolation("grad_check step h must be positive")

    leaves = {k: param(v) for k, v in params.items()}
    root = build(leaves)
    backward(root)
    analytic = {k: (np.zeros_like(params[k]) if leaves[k].grad is None else leaves[k].grad)
                for k in params}

    def eval_at(values: dict[str, np.ndarray]) -> float:
        consts = {k: Node(v) for k, v in values.items()}
        return float(build(consts).value.reshape(()))

    from .rng import Stream
    pick = Stream(seed, "grad-check")

    entries = []
    for name in params:
        flat = params[name].reshape(-1)
        n = flat.size
        if max_entries and n > max_entries:
            idxs = pick.sample_indices(n, max_entries)
        else:
            idxs = np.arange(n)
        worst = 0.0
        for i in idxs:
            values = {k: v.copy() for k, v in params.items()}
            values[name].reshape(-1)[i] = flat[i] + h
            f_plus = eval_at(values)
            values[name].reshape(-1)[i] = flat[i] - h
            f_minus = eval_at(values)
            g_num = (f_plus - f_minus) / (2.0 * h)
            g_ana = analytic[name].reshape(-1)[i]
            rel = abs(g_ana - g_num) / max(1.0, abs(g_num))
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst, worst <= tol))
    return GradCheckReport(entries, tol)
