"""Reverse-mode autodiff on a small array tape, plus ReLU feed-forward networks.

Every node holds a float64 array.  Networks are evaluated on a batch of
input rows at once and can also emit their input gradient as tape nodes, so
a loss containing ``|grad_z phi|^2`` is differentiated exactly with respect
to the weights (the ReLU masks are piecewise constant and carry no
derivative of their own).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared on the tape."""


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value on the tape.

    ``parents`` is a tuple of ``(node, vjp)`` pairs; ``vjp`` maps the
    cotangent of this node to the cotangent contribution of that parent.
    """

    __slots__ = ("value", "parents", "name", "requires_grad", "grad")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), name="leaf", requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple((p, f) for p, f in parents if p.requires_grad)
        self.name = name
        if requires_grad is None:
            requires_grad = bool(self.parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name}, shape={self.value.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_node(other)
        return Node(
            self.value + other.value,
            ((self, lambda g: _unbroadcast(g, self.shape)),
             (other, lambda g: _unbroadcast(g, other.shape))),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_node(other)
        return Node(
            self.value - other.value,
            ((self, lambda g: _unbroadcast(g, self.shape)),
             (other, lambda g: _unbroadcast(-g, other.shape))),
            "sub",
        )

    def __rsub__(self, other):
        return as_node(other) - self

    def __neg__(self):
        return Node(-self.value, ((self, lambda g: -g),), "neg")

    def __mul__(self, other):
        other = as_node(other)
        a, b = self.value, other.value
        return Node(
            a * b,
            ((self, lambda g: _unbroadcast(g * b, self.shape)),
             (other, lambda g: _unbroadcast(g * a, other.shape))),
            "mul",
        )

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_node(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim not in (1, 2):
            raise ShapeError(f"matmul expects 2-d @ 1/2-d, got {a.shape} @ {b.shape}")
        if b.ndim == 1:
            vjp_b = lambda g: a.T @ g
            vjp_a = lambda g: np.outer(g, b)
        else:
            vjp_b = lambda g: a.T @ g
            vjp_a = lambda g: g @ b.T
        return Node(a @ b, ((self, vjp_a), (other, vjp_b)), "matmul")

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            out[idx] = g
            return out

        return Node(self.value[idx], ((self, vjp),), "slice")

    @property
    def T(self):
        return Node(self.value.T, ((self, lambda g: g.T),), "transpose")

    def reshape(self, *shape):
        old = self.shape
        return Node(self.value.reshape(*shape), ((self, lambda g: g.reshape(old)),), "reshape")

    def sum(self, axis=None):
        shape = self.shape
        if axis is None:
            return Node(self.value.sum(), ((self, lambda g: np.broadcast_to(g, shape)),), "sum")

        def vjp(g):
            return np.broadcast_to(np.expand_dims(g, axis), shape)

        return Node(self.value.sum(axis=axis), ((self, vjp),), "sum")


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x, name="const", requires_grad=False)


def variable(value, name="param") -> Node:
    return Node(np.array(value, dtype=np.float64), name=name, requires_grad=True)


def exp(x: Node) -> Node:
    v = np.exp(x.value)
    return Node(v, ((x, lambda g: g * v),), "exp")


def softplus(x: Node) -> Node:
    v = np.logaddexp(0.0, x.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return Node(v, ((x, lambda g: g * sig),), "softplus")


def square(x: Node) -> Node:
    v = x.value
    return Node(v * v, ((x, lambda g: 2.0 * g * v),), "square")


def gate(x: Node, mask: np.ndarray, name="relu") -> Node:
    """Multiply by a constant 0/1 mask (ReLU with a frozen activation pattern)."""
    return Node(x.value * mask, ((x, lambda g: g * mask),), name)


def affine(h: Node, w: Node, b: Node, name="affine") -> Node:
    """Row-wise ``h @ w.T + b``."""
    hv, wv = h.value, w.value
    return Node(
        hv @ wv.T + b.value,
        ((h, lambda g: g @ wv),
         (w, lambda g: g.T @ hv),
         (b, lambda g: g.sum(axis=0))),
        name,
    )


def relu_affine(h: Node, w: Node, b: Node, name="relu") -> tuple[Node, np.ndarray]:
    """``max(h @ w.T + b, 0)`` and its activation mask (subgradient 0 at the kink)."""
    hv, wv = h.value, w.value
    pre = hv @ wv.T + b.value
    mask = pre > 0.0
    pre *= mask

    def masked(g):
        return g * mask

    return Node(
        pre,
        ((h, lambda g: masked(g) @ wv),
         (w, lambda g: masked(g).T @ hv),
         (b, lambda g: masked(g).sum(axis=0))),
        name,
    ), mask


def masked_matmul(v: Node, w: Node, mask: np.ndarray, name="masked_matmul") -> Node:
    """``(v @ w) * mask`` for a constant mask."""
    vv, wv = v.value, w.value
    out = vv @ wv
    out *= mask
    return Node(
        out,
        ((v, lambda g: (g * mask) @ wv.T),
         (w, lambda g: vv.T @ (g * mask))),
        name,
    )


def masked_rows(a: Node, mask: np.ndarray, name="masked_rows") -> Node:
    """Rows ``mask[k] * a`` for a constant ``(P, M)`` mask and vector ``a``."""
    return Node(mask * a.value, ((a, lambda g: (g * mask).sum(axis=0)),), name)


def stack_columns(cols: Sequence[Node]) -> Node:
    vals = [c.value for c in cols]
    parents = tuple((c, (lambda j: lambda g: g[:, j])(j)) for j, c in enumerate(cols))
    return Node(np.stack(vals, axis=1), parents, "stack")


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _sweep(order: list[Node], root: Node, check: bool) -> None:
    cot = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if check and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite cotangent at tape node {node.name!r}")
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            cot[key] = cot[key] + contrib if key in cot else contrib


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every leaf feeding ``root``.

    Finiteness is checked on the root and on the leaf gradients; on failure
    the tape is re-scanned to name the first offending node.
    """
    order = _topological(root)
    if not np.isfinite(root.value).all():
        for node in order:
            if not np.isfinite(node.value).all():
                raise NonFiniteError(f"non-finite value at tape node {node.name!r}")
        raise NonFiniteError("non-finite loss value")
    leaves = [n for n in order if not n.parents]
    saved = [n.grad for n in leaves]
    _sweep(order, root, check=False)
    if all(n.grad is None or np.isfinite(n.grad).all() for n in leaves):
        return
    for n, g in zip(leaves, saved):
        n.grad = g
    _sweep(order, root, check=True)


# ---------------------------------------------------------------------------
# feed-forward ReLU networks


@dataclass(frozen=True)
class FnnShape:
    depth: int
    width: int
    input_dim: int

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.input_dim < 2:
            raise ShapeError(f"invalid network shape {self}")

    def layer_shapes(self) -> list[tuple[tuple[int, int], int]]:
        dims = [self.input_dim] + [self.width] * self.depth
        return [((dims[i + 1], dims[i]), dims[i + 1]) for i in range(self.depth)]

    @property
    def size(self) -> int:
        total = self.width
        for (rows, cols), nb in self.layer_shapes():
            total += rows * cols + nb
        return total


class FnnParams:
    """Flat parameter vector with views onto ``W_l``, ``b_l`` and ``a``.

    Layout: for each layer, ``W_l`` (row-major) then ``b_l``; the output
    vector ``a`` comes last.
    """

    def __init__(self, shape: FnnShape, flat=None):
        self.shape = shape
        if flat is None:
            flat = np.zeros(shape.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (shape.size,):
            raise ShapeError(f"expected {shape.size} parameters, got {flat.shape}")
        self.flat = flat

    def layers(self):
        return list(_split_layers(self.shape, self.flat))

    @property
    def output(self) -> np.ndarray:
        return self.flat[-self.shape.width:]

    def copy(self) -> "FnnParams":
        return FnnParams(self.shape, self.flat.copy())

    @classmethod
    def from_arrays(cls, weights, biases, a) -> "FnnParams":
        weights = [np.atleast_2d(np.asarray(w, dtype=float)) for w in weights]
        shape = FnnShape(len(weights), weights[0].shape[0], weights[0].shape[1])
        parts = []
        for w, b in zip(weights, biases):
            parts += [w.ravel(), np.asarray(b, dtype=float).ravel()]
        parts.append(np.asarray(a, dtype=float).ravel())
        return cls(shape, np.concatenate(parts))


def _split_layers(shape: FnnShape, flat):
    """Yield ``(W, b)`` pairs; ``flat`` may be an array or a tape node."""
    pos = 0
    for (rows, cols), nb in shape.layer_shapes():
        w = flat[pos:pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        b = flat[pos:pos + nb]
        pos += nb
        yield w, b


def fnn_graph(shape: FnnShape, flat: Node, z: np.ndarray, with_grad=True, tag="fnn"):
    """Build network output (and optionally input gradient) on the tape.

    ``z`` is a constant ``(P, input_dim)`` array of input rows.  Returns
    ``(out, grad)`` with ``out`` of shape ``(P,)`` and ``grad`` of shape
    ``(P, input_dim)`` (``None`` when ``with_grad`` is false).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != shape.input_dim:
        raise ShapeError(f"input rows must be (P, {shape.input_dim}), got {z.shape}")
    layers = list(_split_layers(shape, flat))
    a = flat[-shape.width:]
    h: Node = as_node(z)
    masks = []
    for i, (w, b) in enumerate(layers):
        h, mask = relu_affine(h, w, b, f"{tag}.layer{i + 1}")
        masks.append(mask)
    out = h @ a
    if not with_grad:
        return out, None
    # reverse sweep for d(out)/dz; masks are frozen so this stays linear in a
    v = masked_rows(a, masks[-1], f"{tag}.dz.layer{shape.depth}")
    for i in range(shape.depth - 1, 0, -1):
        v = masked_matmul(v, layers[i][0], masks[i - 1], f"{tag}.dz.layer{i}")
    grad = v @ layers[0][0]
    return out, grad


def _rows(params: FnnParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.shape.input_dim:
        raise ShapeError(f"input has dimension {z.shape[-1]}, network expects {params.shape.input_dim}")
    return z.reshape(-1, params.shape.input_dim)


def fnn_forward(params: FnnParams, z):
    """Network value at ``z`` (one point or a stack of points)."""
    z = np.asarray(z, dtype=np.float64)
    out, _ = fnn_graph(params.shape, as_node(params.flat), _rows(params, z), with_grad=False)
    return float(out.value[0]) if z.ndim == 1 else out.value.reshape(z.shape[:-1])


def fnn_grad_input(params: FnnParams, z) -> np.ndarray:
    """Gradient of the network with respect to its input; 0 is used at ReLU kinks."""
    z = np.asarray(z, dtype=np.float64)
    _, grad = fnn_graph(params.shape, as_node(params.flat), _rows(params, z))
    return grad.value[0] if z.ndim == 1 else grad.value.reshape(z.shape)


def loss_param_gradient(loss: Callable[[Node], Node], flat) -> tuple[float, np.ndarray]:
    """Value and gradient of ``loss(theta)`` with respect to the flat vector ``theta``.

    ``loss`` receives the parameter leaf and must return a scalar node.
    """
    theta = variable(np.asarray(flat, dtype=np.float64).copy(), name="theta")
    root = loss(theta)
    if root.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {root.shape}")
    backward(root)
    grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return float(root.value), grad
