"""Closed-form model problem, extension oracle, error metrics and energy checks.

Model problem on (-1, 1)^d::

    U(x) = prod_i sin(pi x_i),   f(x) = (d pi^2)^s U(x)

``U`` is the first Dirichlet eigenfunction with eigenvalue ``d pi^2``, so the
extended solution separates as ``U(x) psi_s(sqrt(lambda) y)`` where
``psi_s`` solves ``psi'' + (alpha/t) psi' = psi``, ``psi(0) = 1``,
``psi(inf) = 0``.  For s = 1/2 this is ``exp(-t)``; other s go through the
tabulated ODE solution in :class:`PsiTable`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .domain import Hypercube
from .quadrature import SincScheme


@dataclass(frozen=True)
class ModelProblem:
    d: int
    s: float

    @property
    def domain(self) -> Hypercube:
        return Hypercube.cube(self.d)

    @property
    def eigenvalue(self) -> float:
        return self.d * math.pi ** 2

    def exact_trace(self, x) -> np.ndarray:
        return np.prod(np.sin(np.pi * np.asarray(x, dtype=np.float64)), axis=-1)

    def rhs(self, x) -> np.ndarray:
        return self.eigenvalue ** self.s * self.exact_trace(x)


def exact_trace(mp: ModelProblem, x):
    return mp.exact_trace(x)


def rhs(mp: ModelProblem, x):
    return mp.rhs(x)


def rhs_function(name: str, s: float) -> Callable:
    """Right-hand side by identifier; the dimension is read off the points."""
    if name == "sine":
        return lambda x: ModelProblem(np.asarray(x).shape[-1], s).rhs(x)
    raise KeyError(f"unknown right-hand side {name!r}")


# ---------------------------------------------------------------------------
# one-dimensional extension profile psi_s


def _series(t, alpha: float, regular: bool, terms: int = 30):
    """Frobenius series for psi'' + (alpha/t) psi' = psi and its derivative.

    Regular branch starts at 1, singular branch at t**(1 - alpha).
    """
    r = 0.0 if regular else 1.0 - alpha
    t = np.asarray(t, dtype=np.float64)
    c = 1.0
    val = np.zeros_like(t)
    der = np.zeros_like(t)
    for k in range(0, 2 * terms, 2):
        if k > 0:
            c /= (k + r) * (k + r - 1.0 + alpha)
        val += c * t ** (k + r)
        if k + r != 0.0:
            der += c * (k + r) * t ** (k + r - 1.0)
    return val, der


@dataclass
class PsiTable:
    """Tabulated ``psi_s`` on a logarithmic grid.

    Built by integrating the decaying far-field solution inward and matching
    it to the two Frobenius branches near ``t = 0``.  ``singular_coeff`` is
    the coefficient ``B`` of ``t**(2s)`` in ``psi = 1 + B t**(2s) + ...``;
    the Neumann condition of the extension requires ``B = -d_s / (2s)``.
    """

    s: float
    t: np.ndarray
    psi: np.ndarray
    singular_coeff: float = float("nan")
    _spline: CubicSpline = field(init=False, repr=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self._spline = CubicSpline(np.log(self.t), np.log(self.psi))

    @property
    def alpha(self) -> float:
        return 1.0 - 2.0 * self.s

    @classmethod
    def build(cls, s: float, t_min: float = 1e-6, t_max: float = 40.0, t_match: float = 0.2,
              points: int = 400) -> "PsiTable":
        alpha = 1.0 - 2.0 * s

        def rhs_ode(t, u):
            return [u[1], u[0] - alpha / t * u[1]]

        # far field: psi ~ t**(-alpha/2) exp(-t) (1 + O(1/t))
        a = -alpha / 2.0
        # two-term asymptotic correction of the modified-Bessel-type decay
        corr = (a * (a - 1.0) + alpha * a) / 2.0
        u_far = t_max ** a * math.exp(-t_max) * (1.0 - corr / t_max)
        du_far = u_far * (a / t_max - 1.0) + t_max ** a * math.exp(-t_max) * corr / t_max ** 2
        grid = np.exp(np.linspace(math.log(t_max), math.log(t_match), points))
        sol = solve_ivp(rhs_ode, (t_max, t_match), [u_far, du_far], method="DOP853",
                        t_eval=grid, rtol=1e-13, atol=1e-300)
        if not sol.success:
            raise RuntimeError(f"psi_s shooting failed: {sol.message}")
        p0, dp0 = sol.y[0, -1], sol.y[1, -1]
        r0, dr0 = _series(t_match, alpha, True)
        q0, dq0 = _series(t_match, alpha, False)
        A, B = np.linalg.solve(np.array([[r0, q0], [dr0, dq0]]), np.array([p0, dp0]))
        outer_t = sol.t[::-1]
        outer = sol.y[0, ::-1] / A
        inner_t = np.exp(np.linspace(math.log(t_min), math.log(t_match), points // 2))[:-1]
        r, _ = _series(inner_t, alpha, True)
        q, _ = _series(inner_t, alpha, False)
        inner = r + (B / A) * q
        return cls(s, np.concatenate([inner_t, outer_t]), np.concatenate([inner, outer]), float(B / A))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        out = np.empty_like(t)
        lo = t < self.t[0]
        hi = t > self.t[-1]
        mid = ~(lo | hi)
        out[mid] = np.exp(self._spline(np.log(t[mid])))
        if np.any(lo):
            r, _ = _series(t[lo], self.alpha, True)
            q, _ = _series(t[lo], self.alpha, False)
            out[lo] = r + self.singular_coeff * q
        out[hi] = 0.0
        return out

    def save(self, path) -> None:
        header = (f"psi_s table\ns = {float(self.s)!r}\nsingular_coeff = {float(self.singular_coeff)!r}\n"
                  f"grid = log, {len(self.t)} points on [{float(self.t[0])!r}, {float(self.t[-1])!r}]\n"
                  "columns: t psi")
        np.savetxt(path, np.column_stack([self.t, self.psi]), header=header, fmt="%.17e")

    @classmethod
    def load(cls, path) -> "PsiTable":
        meta = {}
        for line in Path(path).read_text().splitlines():
            if not line.startswith("#"):
                break
            key, sep, val = line[1:].partition("=")
            if sep:
                meta[key.strip()] = val.strip()
        if "s" not in meta:
            raise ValueError(f"{path}: missing 's' in table header")
        data = np.loadtxt(path)
        return cls(float(meta["s"]), data[:, 0], data[:, 1], float(meta.get("singular_coeff", "nan")))


def exact_extension(mp: ModelProblem, x, y, table: PsiTable | None = None) -> np.ndarray:
    """Extended solution ``U(x) psi_s(sqrt(lambda) y)``."""
    u = mp.exact_trace(x)
    t = math.sqrt(mp.eigenvalue) * np.asarray(y, dtype=np.float64)
    if mp.s == 0.5:
        return u * np.exp(-t)
    if table is None:
        raise ValueError(f"s={mp.s} needs a precomputed PsiTable")
    if table.s != mp.s:
        raise ValueError(f"table is for s={table.s}, problem has s={mp.s}")
    return u * table(t)


def exact_extension_grad(mp: ModelProblem, x, y) -> np.ndarray:
    """(x, y)-gradient of the s = 1/2 extended solution."""
    if mp.s != 0.5:
        raise ValueError("closed-form gradient only for s = 0.5")
    x = np.asarray(x, dtype=np.float64)
    k = math.sqrt(mp.eigenvalue)
    sin, cos = np.sin(np.pi * x), np.cos(np.pi * x)
    decay = np.exp(-k * np.asarray(y, dtype=np.float64))
    gx = np.empty_like(x)
    for i in range(x.shape[-1]):
        gx[..., i] = np.pi * cos[..., i] * np.prod(np.delete(sin, i, axis=-1), axis=-1)
    u = np.prod(sin, axis=-1)
    decay = np.broadcast_to(decay, u.shape)
    return np.concatenate([gx * decay[..., None], (-k * u * decay)[..., None]], axis=-1)


def energy_identity_value(mp: ModelProblem) -> float:
    """Continuous energy of the exact minimizer: -1/2 d_s (f, U) on (-1,1)^d.

    ``(f, U) = lambda^s * prod_i int sin^2 = lambda^s`` on the cube.
    """
    s = mp.s
    d_s = math.exp((1 - 2 * s) * math.log(2) + math.lgamma(1 - s) - math.lgamma(s))
    return -0.5 * d_s * mp.eigenvalue ** s


# ---------------------------------------------------------------------------
# error metrics


def relative_l2_error(approx, exact) -> float:
    """(sum |approx - exact|^2 / sum |exact|^2)^(1/2)."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    den = math.fsum(exact * exact)
    if den == 0.0:
        raise ZeroDivisionError("exact solution vanishes on the whole test set")
    diff = approx - exact
    return math.sqrt(math.fsum(diff * diff) / den)


def solution_error(trace_fn: Callable, mp: ModelProblem, points) -> float:
    """Relative l2 error of ``trace_fn`` (x -> phi(x, 0)) against the exact trace."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("empty test set")
    return relative_l2_error(trace_fn(points), mp.exact_trace(points))


def convergence_order(errors: Sequence[float], widths: Sequence[float]) -> list[float]:
    """Observed orders ``ln(e_{i+1}/e_i) / ln(M_{i+1}/M_i)``."""
    if len(errors) != len(widths) or len(errors) < 2:
        raise ValueError("need matching error and width lists of length >= 2")
    if any(e <= 0 for e in errors):
        raise ValueError("errors must be positive")
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ValueError("widths must be increasing")
    return [math.log(errors[i + 1] / errors[i]) / math.log(widths[i + 1] / widths[i])
            for i in range(len(errors) - 1)]


# ---------------------------------------------------------------------------
# stationarity of the exact minimizer


@dataclass
class StationarityReport:
    taus: np.ndarray
    values: np.ndarray  # rows: directions, columns: taus
    slopes: np.ndarray
    curvatures: np.ndarray
    minimal: np.ndarray

    @property
    def all_minimal(self) -> bool:
        return bool(np.all(self.minimal))


def stationarity_check(u_grad: Callable, u_trace: Callable, directions: Sequence,
                       tau: float, spec, batch, scheme: SincScheme) -> StationarityReport:
    """Evaluate ``g(t) = I_discrete[u + t w]`` at ``t = -tau, 0, tau`` for each ``w``.

    ``directions`` holds ``(w_grad, w_trace)`` callable pairs with the same
    signatures as ``u_grad(x, y)`` and ``u_trace(x)``.  Reports the central
    slope ``(g(tau) - g(-tau)) / (2 tau)``, the curvature term
    ``(g(tau) - 2 g(0) + g(-tau)) / tau`` and whether ``g(0) <= g(+-tau)``.
    """
    taus = np.array([-tau, 0.0, tau])
    x = np.asarray(getattr(batch, "points", batch), dtype=np.float64)
    scale = spec.domain.volume / len(x)
    source = -spec.d_s * scale * np.asarray(spec.f(x))
    u0 = np.asarray(u_trace(x), dtype=np.float64)
    rows = []
    for w_grad, w_trace in directions:
        # one field evaluation per node serves all three perturbation sizes
        pieces = [[] for _ in taus]
        for y, wy in zip(scheme.nodes, scheme.weights()):
            gu = np.asarray(u_grad(x, y), dtype=np.float64)
            gw = np.asarray(w_grad(x, y), dtype=np.float64)
            for k, t in enumerate(taus):
                g = gu + t * gw
                pieces[k].append(0.5 * scale * wy * np.einsum("ij,ij->i", g, g))
        w0 = np.asarray(w_trace(x), dtype=np.float64)
        rows.append([math.fsum(np.concatenate(pieces[k] + [source * (u0 + t * w0)]))
                     for k, t in enumerate(taus)])
    values = np.array(rows).reshape(len(rows), 3)
    slopes = (values[:, 2] - values[:, 0]) / (2 * tau)
    curv = (values[:, 2] - 2 * values[:, 1] + values[:, 0]) / tau
    minimal = (values[:, 1] <= values[:, 0]) & (values[:, 1] <= values[:, 2])
    return StationarityReport(taus, values, slopes, curv, minimal)
