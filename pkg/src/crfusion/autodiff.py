"""Reverse-mode automatic differentiation over small dense matrices.

Every value in a recorded computation is a 2-D numpy array wrapped in a
:class:`Node`. Operations build the graph eagerly; :func:`backward` walks it
once in reverse topological order and accumulates gradients into the
:class:`ParamTensor` leaves. Training runs in float32 while verification
oracles run in float64; all operations preserve the dtype of their inputs.

Subgraphs that cannot reach a trainable parameter carry
``requires_grad=False`` and are skipped during the backward sweep, so frozen
encoder outputs cost nothing beyond their forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_matrix(value, dtype=None) -> Array:
    """Coerce scalars / vectors / matrices to a 2-D array (row vectors)."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _check_finite(arr: Array, op: str) -> Array:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")
    return arr


class Node:
    """One value in the computation graph.

    ``vjps`` holds one callable per parent, mapping the adjoint of this node
    to the adjoint contribution for that parent (``None`` for parents that do
    not require gradients).
    """

    __slots__ = ("value", "parents", "vjps", "param", "requires_grad")

    def __init__(self, value: Array, parents=(), vjps=(), param=None,
                 requires_grad=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.param = param
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; all route through the module-level ops.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class ParamTensor:
    """A named, possibly trainable matrix with a gradient buffer."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = as_matrix(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


class ParamStore:
    """Insertion-ordered collection of uniquely named ParamTensors."""

    def __init__(self):
        self._params: dict[str, ParamTensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> ParamTensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} already registered")
        p = ParamTensor(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def trainable_params(self) -> list[ParamTensor]:
        return [p for p in self._params.values() if p.trainable]

    def set_trainable(self, names) -> None:
        """Mark exactly `names` trainable; every other parameter is frozen."""
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise UsageError(f"unknown parameters in trainable set: {sorted(unknown)}")
        for name, p in self._params.items():
            p.trainable = name in names


def leaf(param: ParamTensor) -> Node:
    """Graph entry point for a parameter; gradients flow into param.grad."""
    return Node(param.value, param=param, requires_grad=param.trainable)


def constant(value, dtype=None) -> Node:
    """Graph entry point for data that never receives gradients."""
    return Node(as_matrix(value, dtype=dtype), requires_grad=False)


def _to_node(x, dtype) -> Node:
    if isinstance(x, Node):
        return x
    return constant(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a = _to_node(a, getattr(b, "dtype", None))
    b = _to_node(b, a.dtype)
    av, bv = a.value, b.value
    return Node(av + bv, (a, b), (
        (lambda g: _unbroadcast(g, av.shape)) if a.requires_grad else None,
        (lambda g: _unbroadcast(g, bv.shape)) if b.requires_grad else None,
    ))


def sub(a, b) -> Node:
    a = _to_node(a, getattr(b, "dtype", None))
    b = _to_node(b, a.dtype)
    av, bv = a.value, b.value
    return Node(av - bv, (a, b), (
        (lambda g: _unbroadcast(g, av.shape)) if a.requires_grad else None,
        (lambda g: _unbroadcast(-g, bv.shape)) if b.requires_grad else None,
    ))


def mul(a, b) -> Node:
    a = _to_node(a, getattr(b, "dtype", None))
    b = _to_node(b, a.dtype)
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), (
        (lambda g: _unbroadcast(g * bv, av.shape)) if a.requires_grad else None,
        (lambda g: _unbroadcast(g * av, bv.shape)) if b.requires_grad else None,
    ))


def div(a, b) -> Node:
    a = _to_node(a, getattr(b, "dtype", None))
    b = _to_node(b, a.dtype)
    av, bv = a.value, b.value
    return Node(av / bv, (a, b), (
        (lambda g: _unbroadcast(g / bv, av.shape)) if a.requires_grad else None,
        (lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)) if b.requires_grad else None,
    ))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(out, (a,), ((lambda g: g * out) if a.requires_grad else None,))


def log(a: Node) -> Node:
    av = a.value
    return Node(np.log(av), (a,), ((lambda g: g / av) if a.requires_grad else None,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return Node(out, (a,), ((lambda g: g * (0.5 / out)) if a.requires_grad else None,))


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product; raises ShapeError naming both shapes on mismatch."""
    a = _to_node(a, None)
    b = _to_node(b, a.dtype)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")
    out = _check_finite(av @ bv, "matmul")
    return Node(out, (a, b), (
        (lambda g: g @ bv.T) if a.requires_grad else None,
        (lambda g: av.T @ g) if b.requires_grad else None,
    ))


def transpose(a: Node) -> Node:
    return Node(a.value.T, (a,), ((lambda g: g.T) if a.requires_grad else None,))


def sum_all(a: Node) -> Node:
    av = a.value
    out = np.array([[av.sum()]], dtype=av.dtype)
    return Node(out, (a,), (
        (lambda g: np.full_like(av, g[0, 0])) if a.requires_grad else None,))


def sum_rows(a: Node) -> Node:
    """Row sums, shape (L, 1)."""
    av = a.value
    return Node(av.sum(axis=1, keepdims=True), (a,), (
        (lambda g: np.broadcast_to(g, av.shape).copy()) if a.requires_grad else None,))


def sum_cols(a: Node) -> Node:
    """Column sums, shape (1, d)."""
    av = a.value
    return Node(av.sum(axis=0, keepdims=True), (a,), (
        (lambda g: np.broadcast_to(g, av.shape).copy()) if a.requires_grad else None,))


def mean_rows(a: Node) -> Node:
    """Row means, shape (L, 1)."""
    av = a.value
    inv = 1.0 / av.shape[1]
    return Node(av.mean(axis=1, keepdims=True), (a,), (
        (lambda g: np.broadcast_to(g * inv, av.shape).copy()) if a.requires_grad else None,))


def mean_all(a: Node) -> Node:
    av = a.value
    inv = 1.0 / av.size
    out = np.array([[av.mean()]], dtype=av.dtype)
    return Node(out, (a,), (
        (lambda g: np.full_like(av, g[0, 0] * inv)) if a.requires_grad else None,))


def concat_rows(nodes: Sequence[Node]) -> Node:
    nodes = list(nodes)
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in values])
    vjps = []
    for i, n in enumerate(nodes):
        if n.requires_grad:
            lo, hi = offsets[i], offsets[i + 1]
            vjps.append(lambda g, lo=lo, hi=hi: g[lo:hi])
        else:
            vjps.append(None)
    return Node(out, tuple(nodes), tuple(vjps))


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = list(nodes)
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=1)
    offsets = np.cumsum([0] + [v.shape[1] for v in values])
    vjps = []
    for i, n in enumerate(nodes):
        if n.requires_grad:
            lo, hi = offsets[i], offsets[i + 1]
            vjps.append(lambda g, lo=lo, hi=hi: g[:, lo:hi])
        else:
            vjps.append(None)
    return Node(out, tuple(nodes), tuple(vjps))


def slice_rows(a: Node, start: int, stop: int) -> Node:
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[start:stop] = g
        return out

    return Node(av[start:stop], (a,), (vjp if a.requires_grad else None,))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[:, start:stop] = g
        return out

    return Node(av[:, start:stop], (a,), (vjp if a.requires_grad else None,))


def take_rows(a: Node, indices) -> Node:
    """Gather rows by index; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return Node(av[idx], (a,), (vjp if a.requires_grad else None,))


def row_max_detached(a: Node) -> Node:
    """Per-row maximum as a constant (L, 1) node; safe logsumexp anchor."""
    return constant(a.value.max(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax_rows(a) -> Node:
    """Row-wise softmax with max subtraction; each output row sums to 1."""
    a = _to_node(a, None)
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    _check_finite(out, "softmax_rows")

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return Node(out, (a,), (vjp if a.requires_grad else None,))


def gelu(a) -> Node:
    """Exact GELU x * Phi(x) via the error function."""
    a = _to_node(a, None)
    av = a.value
    phi = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    out = _check_finite(av * phi, "gelu")

    def vjp(g):
        pdf = np.exp(-0.5 * av * av) * _INV_SQRT_2PI
        return g * (phi + av * pdf)

    return Node(out.astype(av.dtype, copy=False), (a,), (vjp if a.requires_grad else None,))


def layer_norm_rows(m, gain, bias, eps: float = 1e-5) -> Node:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    `gain` and `bias` are (1, d) rows matching m's column count.
    """
    m = _to_node(m, None)
    gain = _to_node(gain, m.dtype)
    bias = _to_node(bias, m.dtype)
    if gain.value.shape[1] != m.value.shape[1] or bias.value.shape[1] != m.value.shape[1]:
        raise ShapeError(
            f"layer_norm_rows: gain {gain.value.shape} / bias {bias.value.shape} "
            f"do not match input {m.value.shape}")
    mu = mean_rows(m)
    centered = sub(m, mu)
    var = mean_rows(mul(centered, centered))
    denom = sqrt(add(var, float(eps)))
    normed = div(centered, denom)
    out = add(mul(normed, gain), bias)
    _check_finite(out.value, "layer_norm_rows")
    return out


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Node) -> None:
    """Accumulate d(output)/d(param) into every reachable trainable param.

    `output` must be scalar-shaped (1, 1). Frozen parameters and constant
    subgraphs are skipped entirely.
    """
    if output.value.shape != (1, 1):
        raise UsageError(
            f"backward requires a scalar output, got shape {output.value.shape}")
    if not output.requires_grad:
        return
    order = _topo_order(output)
    adjoints: dict[int, Array] = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        adj = adjoints.pop(id(node), None)
        if adj is None:
            continue
        if node.param is not None and node.param.trainable:
            node.param.grad += adj
        for parent, vjp in zip(node.parents, node.vjps):
            if vjp is None or not parent.requires_grad:
                continue
            contrib = vjp(adj)
            pid = id(parent)
            prev = adjoints.get(pid)
            adjoints[pid] = contrib if prev is None else prev + contrib


def finite_difference_grad(loss_fn: Callable[[], float], store: ParamStore,
                           epsilon: float = 1e-3,
                           names: Sequence[str] | None = None) -> dict[str, Array]:
    """Central-difference gradient estimate per scalar parameter.

    `loss_fn` must be a deterministic function of the store's current values.
    Estimates are returned per parameter name; only trainable parameters are
    probed unless `names` is given.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    if names is None:
        params = store.trainable_params()
    else:
        params = [store[n] for n in names]
    grads: dict[str, Array] = {}
    for p in params:
        est = np.zeros_like(p.value)
        flat_v = p.value.ravel()
        flat_g = est.ravel()
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + epsilon
            up = loss_fn()
            flat_v[i] = orig - epsilon
            down = loss_fn()
            flat_v[i] = orig
            flat_g[i] = (up - down) / (2.0 * epsilon)
        grads[p.name] = est
    return grads


def truncated_normal(rng: np.random.Generator, rows: int, cols: int,
                     std: float, dtype=np.float32) -> Array:
    """Normal(0, std) samples redrawn until within two standard deviations."""
    out = rng.normal(0.0, std, size=(rows, cols))
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)
