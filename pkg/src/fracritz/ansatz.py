"""Network ansatz for the extended problem on Omega x (0, inf).

Special structure::

    phi(x, y) = phi1(x, y) h(x) exp(-g1 y) + y**(2s) phi2(x, y) h(x) exp(-g2 y)

with two ReLU networks ``phi1``, ``phi2`` and trainable decay rates
``g1, g2 > 0``.  The simple baseline keeps only ``phi1 h(x) exp(-y/2)``.
Both are built on the autodiff tape so the loss can be differentiated.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_ad import FnnParams, FnnShape, Node, ShapeError, as_node, exp, fnn_graph, softplus
from .domain import Hypercube, boundary_factor

KINDS = ("special", "simple")
INIT_DECAY = 0.5
SIMPLE_DECAY = 0.5


@dataclass(frozen=True)
class ProblemSpec:
    s: float
    domain: Hypercube
    rhs: str = "sine"

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"fraction s must lie in (0, 1), got {self.s}")

    @property
    def d(self) -> int:
        return self.domain.dim

    @property
    def alpha(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def d_s(self) -> float:
        s = self.s
        return math.exp((1.0 - 2.0 * s) * math.log(2.0) + math.lgamma(1.0 - s) - math.lgamma(s))

    def f(self, x: np.ndarray) -> np.ndarray:
        from .reference import rhs_function

        return rhs_function(self.rhs, self.s)(x)


def softplus_inverse(v: float) -> float:
    return math.log(math.expm1(v))


@dataclass
class SpecialNetParams:
    theta1: FnnParams
    theta2: FnnParams
    raw_gamma1: float = softplus_inverse(INIT_DECAY)
    raw_gamma2: float = softplus_inverse(INIT_DECAY)

    @property
    def gamma1(self) -> float:
        return float(np.logaddexp(0.0, self.raw_gamma1))

    @property
    def gamma2(self) -> float:
        return float(np.logaddexp(0.0, self.raw_gamma2))

    @property
    def shape(self) -> FnnShape:
        return self.theta1.shape

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.theta1.flat, self.theta2.flat, [self.raw_gamma1, self.raw_gamma2]])

    @classmethod
    def from_flat(cls, shape: FnnShape, flat) -> "SpecialNetParams":
        flat = np.asarray(flat, dtype=np.float64)
        n = shape.size
        if flat.shape != (2 * n + 2,):
            raise ShapeError(f"expected {2 * n + 2} parameters, got {flat.shape}")
        return cls(FnnParams(shape, flat[:n].copy()), FnnParams(shape, flat[n:2 * n].copy()),
                   float(flat[2 * n]), float(flat[2 * n + 1]))

    @classmethod
    def zeros(cls, shape: FnnShape) -> "SpecialNetParams":
        return cls(FnnParams(shape), FnnParams(shape))


def flat_size(kind: str, shape: FnnShape) -> int:
    if kind == "special":
        return 2 * shape.size + 2
    if kind == "simple":
        return shape.size
    raise ValueError(f"unknown ansatz kind {kind!r}")


def as_flat(params) -> tuple[str, FnnShape, np.ndarray]:
    if isinstance(params, SpecialNetParams):
        return "special", params.shape, params.to_flat()
    if isinstance(params, FnnParams):
        return "simple", params.shape, params.flat
    raise TypeError(f"not an ansatz parameter set: {type(params).__name__}")


def from_flat(kind: str, shape: FnnShape, flat):
    if kind == "special":
        return SpecialNetParams.from_flat(shape, flat)
    if kind == "simple":
        return FnnParams(shape, np.array(flat, dtype=np.float64))
    raise ValueError(f"unknown ansatz kind {kind!r}")


def _col(node: Node) -> Node:
    return node.reshape(-1, 1)


def ansatz_graph(kind: str, shape: FnnShape, theta: Node, spec: ProblemSpec, x, y, with_grad=True):
    """Build ``phi`` (and its (x, y)-gradient) on the tape for rows ``(x[k], y[k])``.

    Returns ``(value, grad_x, grad_y)``; the gradients are ``None`` when
    ``with_grad`` is false.  Rows with ``y == 0`` are allowed only without
    gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d or y.shape != (x.shape[0],):
        raise ShapeError(f"expected x of shape (P, {spec.d}) and y of shape (P,)")
    if shape.input_dim != spec.d + 1:
        raise ShapeError(f"network input_dim {shape.input_dim} does not match d+1={spec.d + 1}")
    if np.any(y < 0.0):
        raise ValueError("y must be nonnegative")
    if with_grad and np.any(y <= 0.0):
        raise ValueError("gradients need y > 0 (the singular factor is not differentiable at 0)")
    d = spec.d
    h, dh = boundary_factor(spec.domain, x)
    z = np.column_stack([x, y])
    n = shape.size

    if kind == "simple":
        theta1 = theta
        gamma1 = as_node(np.array([SIMPLE_DECAY]))
    elif kind == "special":
        theta1 = theta[:n]
        gamma1 = softplus(theta[2 * n:2 * n + 1])
    else:
        raise ValueError(f"unknown ansatz kind {kind!r}")

    out1, dz1 = fnn_graph(shape, theta1, z, with_grad, tag="phi1")
    e1 = exp(-(gamma1 * y)) * h
    value = out1 * e1
    singular = kind == "special" and np.any(y > 0.0)
    if singular:
        gamma2 = softplus(theta[2 * n + 1:2 * n + 2])
        out2, dz2 = fnn_graph(shape, theta[n:2 * n], z, with_grad, tag="phi2")
        ypow = np.zeros_like(y)
        pos = y > 0.0
        ypow[pos] = np.exp(2.0 * spec.s * np.log(y[pos]))
        e2 = exp(-(gamma2 * y)) * h
        value = value + out2 * e2 * ypow
    if not with_grad:
        return value, None, None

    # d/dx: (dphi/dx h + phi dh/dx) * decay
    decay1 = exp(-(gamma1 * y))
    grad_x = (dz1[:, :d] * _col(as_node(h)) + _col(out1) * dh) * _col(decay1)
    grad_y = (dz1[:, d] - gamma1 * out1) * e1
    if singular:
        dypow = 2.0 * spec.s * np.exp(-spec.alpha * np.log(y))
        decay2 = exp(-(gamma2 * y))
        grad_x = grad_x + (dz2[:, :d] * _col(as_node(h)) + _col(out2) * dh) * _col(decay2 * ypow)
        grad_y = grad_y + (out2 * dypow + (dz2[:, d] - gamma2 * out2) * ypow) * e2
    return value, grad_x, grad_y


def _eval(params, spec: ProblemSpec, x, y, with_grad):
    kind, shape, flat = as_flat(params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x.reshape(-1, spec.d)
    ys = np.broadcast_to(np.asarray(y, dtype=np.float64), xs.shape[:1]).copy()
    value, gx, gy = ansatz_graph(kind, shape, as_node(flat), spec, xs, ys, with_grad)
    return single, value, gx, gy


def special_forward(p: SpecialNetParams, spec: ProblemSpec, x, y):
    """Value of the special ansatz at ``(x, y)``; ``x`` may be a stack of points."""
    single, value, _, _ = _eval(p, spec, x, y, False)
    return float(value.value[0]) if single else value.value


def special_grad(p: SpecialNetParams, spec: ProblemSpec, x, y) -> np.ndarray:
    """Gradient in ``(x, y)``; requires ``y > 0``."""
    single, _, gx, gy = _eval(p, spec, x, y, True)
    g = np.column_stack([gx.value, gy.value])
    return g[0] if single else g


def trace_eval(p, spec: ProblemSpec, x):
    """Trace ``phi(x, 0)`` of either ansatz kind."""
    single, value, _, _ = _eval(p, spec, x, 0.0, False)
    return float(value.value[0]) if single else value.value


def simple_forward(p: FnnParams, spec: ProblemSpec, x, y):
    single, value, _, _ = _eval(p, spec, x, y, False)
    return float(value.value[0]) if single else value.value


def simple_grad(p: FnnParams, spec: ProblemSpec, x, y) -> np.ndarray:
    single, _, gx, gy = _eval(p, spec, x, y, True)
    g = np.column_stack([gx.value, gy.value])
    return g[0] if single else g


# ---------------------------------------------------------------------------
# checkpoint files
#
# Little-endian layout:
#   bytes 0-7    magic b"FRCKPT01"
#   uint32       kind (0 = special, 1 = simple)
#   uint32       depth L
#   uint32       width M
#   uint32       input_dim (d + 1)
#   uint64       parameter count K
#   K x float64  flat parameter vector

MAGIC = b"FRCKPT01"
_HEADER = struct.Struct("<8sIIIIQ")


def write_checkpoint(path, params) -> None:
    kind, shape, flat = as_flat(params)
    header = _HEADER.pack(MAGIC, KINDS.index(kind), shape.depth, shape.width, shape.input_dim, flat.size)
    Path(path).write_bytes(header + np.asarray(flat, dtype="<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, kind, depth, width, input_dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if kind >= len(KINDS):
        raise ValueError(f"{path}: unknown ansatz kind code {kind}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} parameters, found {len(body) // 8}")
    shape = FnnShape(depth, width, input_dim)
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return from_flat(KINDS[kind], shape, flat)
