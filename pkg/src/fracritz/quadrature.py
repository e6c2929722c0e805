"""Sinc quadrature in y, quasi-Monte Carlo in x, and the discrete Ritz energy.

The discrete energy of an ansatz ``phi`` on points ``x_1..x_N`` is::

    |Omega|/N * ( 1/2 * sum_m w_m sum_n |grad phi(x_n, y_m)|^2
                  - d_s * sum_n f(x_n) phi(x_n, 0) )

with sinc nodes ``y_m = exp(m h)`` and weights ``w_m = h exp((alpha+1) m h)``.
Totals are reduced with ``math.fsum`` so they do not depend on point order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ansatz import ProblemSpec, ansatz_graph, as_flat, from_flat
from .core_ad import FnnShape, NonFiniteError, as_node, loss_param_gradient, square
from .domain import McSample

DEFAULT_CHUNK_ROWS = 20_000


@dataclass(frozen=True)
class SincScheme:
    s: float
    h: float
    n_minus: int
    n_plus: int

    @property
    def alpha(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.n_minus, self.n_plus + 1)

    @property
    def mu(self) -> np.ndarray:
        return self.indices * self.h

    @property
    def nodes(self) -> np.ndarray:
        return np.exp(self.mu)

    def weights(self, alpha: float | None = None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        return self.h * np.exp((a + 1.0) * self.mu)

    def __len__(self) -> int:
        return self.n_minus + self.n_plus + 1


def sinc_scheme(s: float, h: float) -> SincScheme:
    if not 0.0 < s < 1.0:
        raise ValueError(f"s must lie in (0, 1), got {s}")
    if h <= 0.0:
        raise ValueError(f"sinc step must be positive, got {h}")
    n_plus = math.ceil(math.pi ** 2 / (4.0 * s * h * h))
    n_minus = math.ceil(math.pi ** 2 / (4.0 * (1.0 - s) * h * h))
    return SincScheme(s, h, n_minus, n_plus)


def sinc_integrate(g: Callable, scheme: SincScheme, alpha: float | None = None) -> float:
    """Approximate the integral of ``y**alpha * g(y)`` over (0, inf)."""
    y = scheme.nodes
    vals = np.asarray(g(y), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        m = scheme.indices[bad[0]]
        raise NonFiniteError(f"integrand is not finite at sinc node m={m} (y={y[bad[0]]:.6g})")
    return math.fsum(scheme.weights(alpha) * vals)


def mc_integrate(f: Callable, sample, volume: float) -> float:
    """|Omega|/N * sum f(x_n) over the sample points."""
    pts = sample.points if isinstance(sample, McSample) else np.asarray(sample)
    if len(pts) == 0:
        raise ValueError("empty sample")
    vals = np.asarray(f(pts), dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteError(f"integrand is not finite at sample point {bad[0]}: {pts[bad[0]]}")
    return volume / len(pts) * math.fsum(vals)


def _points(batch) -> np.ndarray:
    pts = batch.points if isinstance(batch, McSample) else np.asarray(batch, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("empty batch")
    return pts


def _check_scheme(spec: ProblemSpec, scheme: SincScheme) -> None:
    if scheme.s != spec.s:
        raise ValueError(f"sinc scheme built for s={scheme.s}, problem has s={spec.s}")


def active_nodes(kind: str, shape: FnnShape, flat: np.ndarray, scheme: SincScheme) -> np.ndarray:
    """Indices of sinc nodes whose decay factors are not exactly zero.

    At the dropped nodes every term of the gradient is multiplied by an
    underflowed ``exp(-gamma y) == 0.0``, so they add exactly nothing.
    """
    y = scheme.nodes
    if kind == "simple":
        gammas = [0.5]
    else:
        n = shape.size
        gammas = list(np.logaddexp(0.0, flat[2 * n:2 * n + 2]))
    alive = np.zeros(y.shape, dtype=bool)
    for g in gammas:
        alive |= np.exp(-g * y) != 0.0
    return np.flatnonzero(alive)


def _chunks(idx: np.ndarray, n_points: int, chunk_rows: int):
    step = max(1, chunk_rows // n_points)
    for start in range(0, len(idx), step):
        yield idx[start:start + step]


def loss_and_grad(params, spec: ProblemSpec, batch, scheme: SincScheme,
                  chunk_rows: int = DEFAULT_CHUNK_ROWS, flat=None, kind=None, shape=None,
                  need_grad: bool = True):
    """Discrete energy of the ansatz and its gradient with respect to the flat parameters.

    Either pass ``params`` (SpecialNetParams / FnnParams) or ``kind``,
    ``shape`` and ``flat`` directly.  Returns ``(value, grad)``; ``grad`` is
    ``None`` when ``need_grad`` is false.
    """
    if params is not None:
        kind, shape, flat = as_flat(params)
    flat = np.asarray(flat, dtype=np.float64)
    _check_scheme(spec, scheme)
    x = _points(batch)
    n = len(x)
    scale = spec.domain.volume / n
    y_all = scheme.nodes
    w_all = scheme.weights()

    pieces: list[np.ndarray] = []
    grad = np.zeros_like(flat) if need_grad else None

    def run(build):
        if need_grad:
            _, g = loss_param_gradient(build, flat)
            grad[:] += g
        else:
            build(as_node(flat))

    # Dirichlet term, m-major
    for chunk in _chunks(active_nodes(kind, shape, flat, scheme), n, chunk_rows):
        xs = np.tile(x, (len(chunk), 1))
        ys = np.repeat(y_all[chunk], n)
        ws = np.repeat(0.5 * scale * w_all[chunk], n)

        def build(theta, xs=xs, ys=ys, ws=ws):
            _, gx, gy = ansatz_graph(kind, shape, theta, spec, xs, ys, with_grad=True)
            rows = (square(gx).sum(axis=1) + square(gy)) * ws
            pieces.append(rows.value)
            return rows.sum()

        run(build)

    # source term at y = 0
    src = -spec.d_s * scale * np.asarray(spec.f(x), dtype=np.float64)

    def build_src(theta):
        value, _, _ = ansatz_graph(kind, shape, theta, spec, x, np.zeros(n), with_grad=False)
        rows = value * src
        pieces.append(rows.value)
        return rows.sum()

    run(build_src)
    total = math.fsum(np.concatenate(pieces))
    if not math.isfinite(total):
        raise NonFiniteError("discrete energy is not finite")
    return total, grad


def assemble_loss(params, spec: ProblemSpec, batch, scheme: SincScheme,
                  chunk_rows: int = DEFAULT_CHUNK_ROWS) -> float:
    value, _ = loss_and_grad(params, spec, batch, scheme, chunk_rows, need_grad=False)
    return value


def energy_from_fields(grad_fn: Callable, trace_fn: Callable, spec: ProblemSpec, batch,
                       scheme: SincScheme) -> float:
    """Discrete energy of an arbitrary field given by plain callables.

    ``grad_fn(x, y)`` returns the ``(N, d+1)`` gradient at points ``x`` and
    scalar height ``y``; ``trace_fn(x)`` returns the ``(N,)`` trace values.
    """
    _check_scheme(spec, scheme)
    x = _points(batch)
    scale = spec.domain.volume / len(x)
    pieces = []
    for y, w in zip(scheme.nodes, scheme.weights()):
        g = np.asarray(grad_fn(x, y), dtype=np.float64)
        pieces.append(0.5 * scale * w * np.einsum("ij,ij->i", g, g))
    pieces.append(-spec.d_s * scale * np.asarray(spec.f(x)) * np.asarray(trace_fn(x)))
    total = math.fsum(np.concatenate(pieces))
    if not math.isfinite(total):
        raise NonFiniteError("discrete energy is not finite")
    return total


def activation_pattern(kind: str, shape: FnnShape, flat, batch, scheme: SincScheme) -> np.ndarray:
    """On/off state of every hidden ReLU over all (point, sinc node) rows.

    The discrete loss is smooth in the parameters only while this pattern
    stays fixed; difference quotients across a change are meaningless.
    """
    params = from_flat(kind, shape, np.asarray(flat, dtype=np.float64))
    nets = [params] if kind == "simple" else [params.theta1, params.theta2]
    x = _points(batch)
    z = np.column_stack([np.tile(x, (len(scheme.nodes), 1)), np.repeat(scheme.nodes, len(x))])
    states = []
    for net in nets:
        h = z
        for w, b in net.layers():
            pre = h @ w.T + b
            states.append((pre > 0).ravel())
            h = np.maximum(pre, 0.0)
    return np.concatenate(states)
