"""Multiscale market model and ergodic averages of the fast factor.

The risky asset has Sharpe ratio lam(y, z) and volatility sigma(y, z) driven
by a fast factor Y (mean-reverting at rate 1/epsilon) and a slow factor Z
(varying at rate delta):

    dY = (1/eps) b(Y) dt + (1/sqrt(eps)) a(Y) dW^Y
    dZ = delta c(Z) dt + sqrt(delta) g(Z) dW^Z

The default fast factor is Ornstein-Uhlenbeck, b(y) = m - y and
a(y) = nu sqrt(2), whose rescaled generator L0 = nu^2 d^2/dy^2 + (m - y) d/dy
has invariant law N(m, nu^2).  Averaging against that law produces the
z-indexed quantities the expansion needs:

    sharpe_rms(z)   = sqrt(<lam^2(., z)>)        (root-mean-square Sharpe)
    sharpe_mean(z)  = <lam(., z)>
    corrector       theta(., z) solving  L0 theta = lam^2 - sharpe_rms^2
    coupling(z)     = <lam(., z) a(.) theta_y(., z)>

The corrector gradient uses the stationary-flux integral form

    theta_y(y) = 2 / (a(y)^2 Phi(y)) * int_{-inf}^y source(u) Phi(u) du,

evaluated with Gauss-Legendre panels and switched to the complementary tail
integral for y above the mean to avoid cancellation.  theta itself is fixed
by the zero-average normalization <theta(., z)> = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import roots_legendre

from .merton import gauss_hermite

__all__ = [
    "OrnsteinUhlenbeckFactor",
    "MarketModel",
    "invariant_average",
    "PoissonSolution",
    "solve_poisson",
    "fast_coupling",
    "FactorAverages",
    "averaged_sharpe",
    "SHARPE_REGISTRY",
    "SIGMA_REGISTRY",
    "SLOW_DRIFT_REGISTRY",
    "SLOW_VOL_REGISTRY",
]

_GL_NODES = 200
_GL_WINDOW = 26.0  # integration window half-width, in units of nu
_CENTERING_TOL = 1e-10


@dataclass(frozen=True)
class OrnsteinUhlenbeckFactor:
    """Fast factor with drift b(y) = mean - y and noise a(y) = vol * sqrt(2).

    `vol` is the stationary standard deviation; vol = 0 degenerates to a
    point mass at `mean` (useful for limit checks).
    """

    mean: float = 0.0
    vol: float = 1.0

    def __post_init__(self):
        if self.vol < 0.0:
            raise ValueError(f"fast-factor vol must be nonnegative, got {self.vol}")

    def drift(self, y):
        return self.mean - np.asarray(y, dtype=float)

    def noise(self, y):
        return np.full(np.shape(y), self.vol * math.sqrt(2.0))

    def stationary_nodes(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes/weights integrating against N(mean, vol^2)."""
        if self.vol == 0.0:
            return np.array([self.mean]), np.array([1.0])
        s, w = gauss_hermite(n)
        return self.mean + self.vol * s, w

    def stationary_pdf(self, y):
        if self.vol == 0.0:
            raise ValueError("degenerate factor has no density")
        u = (np.asarray(y, dtype=float) - self.mean) / self.vol
        return np.exp(-0.5 * u**2) / (self.vol * math.sqrt(2.0 * math.pi))


def _correlation_determinant(rho1, rho2, rho12):
    return 1.0 + 2.0 * rho1 * rho2 * rho12 - rho1**2 - rho2**2 - rho12**2


@dataclass(frozen=True)
class MarketModel:
    """Coefficients, correlations and scales of the two-factor market.

    `sharpe` and `sigma` are callables (y, z) -> value supporting numpy
    broadcasting; `slow_drift` is c(z); `slow_vol`, `slow_vol_d1`,
    `slow_vol_d2` are g and its first two derivatives.  The model is
    immutable and validated on construction (positive scales, positive
    volatility on a sampled compact, positive-definite correlations).
    """

    sharpe: Callable
    sigma: Callable
    fast: OrnsteinUhlenbeckFactor = field(default_factory=OrnsteinUhlenbeckFactor)
    slow_drift: Callable = lambda z: np.zeros(np.shape(z))
    slow_vol: Callable = lambda z: np.zeros(np.shape(z))
    slow_vol_d1: Callable = lambda z: np.zeros(np.shape(z))
    slow_vol_d2: Callable = lambda z: np.zeros(np.shape(z))
    rho1: float = 0.0
    rho2: float = 0.0
    rho12: float = 0.0
    epsilon: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        for name, rho in (("rho1", self.rho1), ("rho2", self.rho2), ("rho12", self.rho12)):
            if not abs(rho) < 1.0:
                raise ValueError(f"{name} must lie in (-1, 1), got {rho}")
        det = _correlation_determinant(self.rho1, self.rho2, self.rho12)
        if not det > 0.0:
            raise ValueError(
                f"correlation matrix is not positive definite (determinant {det:.6g})"
            )
        if self.epsilon <= 0.0 or self.delta <= 0.0:
            raise ValueError("scales epsilon and delta must be strictly positive")
        y_grid = self.fast.mean + self.fast.vol * np.linspace(-4.0, 4.0, 9)
        z_grid = np.linspace(-2.0, 2.0, 9)
        sig = self.sigma(y_grid[:, None], z_grid[None, :])
        if not np.all(np.asarray(sig) > 0.0):
            raise ValueError("sigma(y, z) must be strictly positive on the sampled compact")

    def mu(self, y, z):
        """Asset drift mu = lam * sigma."""
        return self.sharpe(y, z) * self.sigma(y, z)

    def correlation_cholesky(self) -> np.ndarray:
        """Lower-triangular factor of the (W, W^Y, W^Z) correlation matrix."""
        corr = np.array(
            [
                [1.0, self.rho1, self.rho2],
                [self.rho1, 1.0, self.rho12],
                [self.rho2, self.rho12, 1.0],
            ]
        )
        return np.linalg.cholesky(corr)


def invariant_average(model: MarketModel, f, z: float, n_quad: int = 96) -> float:
    """<f(., z)> against the fast factor's invariant law (Gauss-Hermite)."""
    y, w = model.fast.stationary_nodes(n_quad)
    vals = np.asarray(f(y, z), dtype=float) * np.ones_like(y)
    if not np.all(np.isfinite(vals)):
        bad = y[~np.isfinite(vals)]
        raise RuntimeError(
            f"integrand not finite at quadrature nodes (first bad y={bad.flat[0]:.6g}, z={z})"
        )
    return float(w @ vals)


# ---------------------------------------------------------------------------
# Poisson corrector
# ---------------------------------------------------------------------------


class PoissonSolution:
    """Zero-average corrector theta(., z) with L0 theta = lam^2 - <lam^2>."""

    def __init__(self, model: MarketModel, z: float, n_quad: int = 96):
        fast = model.fast
        self.model = model
        self.z = float(z)
        self.mean_square = invariant_average(
            model, lambda y, zz: model.sharpe(y, zz) ** 2, z, n_quad
        )
        if self.mean_square < 0.0:
            raise RuntimeError("quadrature produced a negative mean-square Sharpe ratio")
        centering = invariant_average(model, self._source, z, n_quad)
        if abs(centering) > _CENTERING_TOL * (1.0 + self.mean_square):
            raise RuntimeError(
                f"corrector source is not centered (residual {centering:.3e})"
            )
        self._gl_x, self._gl_w = roots_legendre(_GL_NODES)
        width = _GL_WINDOW * fast.vol
        self._lo = fast.mean - width
        self._hi = fast.mean + width
        self._n_quad = n_quad
        self._offset = None  # lazy zero-average normalization

    def _source(self, y, z):
        return self.model.sharpe(y, z) ** 2 - self.mean_square

    def _flux(self, y):
        """int_{-inf}^{y} source(u) Phi(u) du via the shorter tail."""
        fast = self.model.fast
        y = np.atleast_1d(np.asarray(y, dtype=float))
        left = y <= fast.mean
        a = np.where(left, self._lo, y)
        b = np.where(left, y, self._hi)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        u = mid[..., None] + half[..., None] * self._gl_x
        vals = self._source(u, self.z) * fast.stationary_pdf(u)
        integral = half * (vals @ self._gl_w)
        # right of the mean: centered source makes the full integral vanish
        return np.where(left, integral, -integral)

    def gradient(self, y):
        """theta_y(y, z)."""
        fast = self.model.fast
        if fast.vol == 0.0:
            return np.zeros(np.shape(y))
        y_arr = np.atleast_1d(np.asarray(y, dtype=float))
        a2phi = fast.noise(y_arr) ** 2 * fast.stationary_pdf(y_arr)
        out = 2.0 * self._flux(y_arr) / a2phi
        return out if np.ndim(y) else float(out[0])

    def value(self, y):
        """theta(y, z), normalized to zero invariant average."""
        fast = self.model.fast
        if fast.vol == 0.0:
            return np.zeros(np.shape(y))
        if self._offset is None:
            nodes, w = fast.stationary_nodes(self._n_quad)
            self._offset = -float(w @ self._antiderivative(nodes))
        y_arr = np.atleast_1d(np.asarray(y, dtype=float))
        out = self._antiderivative(y_arr) + self._offset
        return out if np.ndim(y) else float(out[0])

    def _antiderivative(self, y):
        """int_mean^y theta_y(u) du by Gauss-Legendre."""
        fast = self.model.fast
        y = np.atleast_1d(np.asarray(y, dtype=float))
        mid = 0.5 * (fast.mean + y)
        half = 0.5 * (y - fast.mean)
        u = mid[..., None] + half[..., None] * self._gl_x
        grads = self.gradient(u.ravel()).reshape(u.shape)
        return half * (grads @ self._gl_w)


def solve_poisson(model: MarketModel, z: float, n_quad: int = 96) -> PoissonSolution:
    """Corrector for the centered squared-Sharpe source at slow level z."""
    return PoissonSolution(model, z, n_quad=n_quad)


def fast_coupling(model: MarketModel, z: float, n_quad: int = 96,
                  poisson: PoissonSolution | None = None) -> float:
    """Averaged coupling <lam a theta_y> feeding the fast-scale correction."""
    sol = poisson if poisson is not None else solve_poisson(model, z, n_quad)
    y, w = model.fast.stationary_nodes(n_quad)
    vals = model.sharpe(y, z) * model.fast.noise(y) * sol.gradient(y)
    return float(w @ np.asarray(vals, dtype=float))


# ---------------------------------------------------------------------------
# z-indexed averages
# ---------------------------------------------------------------------------


def _rms_sharpe_exact(model, z, n_quad):
    ms = invariant_average(model, lambda y, zz: model.sharpe(y, zz) ** 2, z, n_quad)
    if ms < 0.0:
        raise RuntimeError("quadrature produced a negative mean-square Sharpe ratio")
    return math.sqrt(ms)


def _richardson_slope(f, z, h):
    coarse = (f(z + h) - f(z - h)) / (2.0 * h)
    fine = (f(z + 0.5 * h) - f(z - 0.5 * h)) / h
    return (4.0 * fine - coarse) / 3.0


class FactorAverages:
    """z-indexed averaged quantities, exact or cached on a z-grid.

    With ``z_grid`` given, all quantities are precomputed at the grid nodes
    and interpolated with cubic splines (recomputing the quadratures inside a
    Monte Carlo step loop would dominate the runtime); without it every call
    performs the full quadrature.
    """

    def __init__(self, model: MarketModel, z_grid: np.ndarray | None = None,
                 n_quad: int = 96, slope_step: float = 1e-4):
        self.model = model
        self.n_quad = n_quad
        self.slope_step = slope_step
        self._poisson_cache: dict[float, PoissonSolution] = {}
        self._splines = None
        if z_grid is not None:
            z_grid = np.asarray(z_grid, dtype=float)
            if z_grid.size < 8:
                raise ValueError("z-grid needs at least 8 nodes for cubic interpolation")
            rms = np.array([_rms_sharpe_exact(model, z, n_quad) for z in z_grid])
            mean = np.array(
                [invariant_average(model, model.sharpe, z, n_quad) for z in z_grid]
            )
            slope = np.array([self._rms_slope_exact(z) for z in z_grid])
            coup = np.array([fast_coupling(model, z, n_quad) for z in z_grid])
            self._splines = {
                "rms": CubicSpline(z_grid, rms),
                "mean": CubicSpline(z_grid, mean),
                "slope": CubicSpline(z_grid, slope),
                "coupling": CubicSpline(z_grid, coup),
            }
            self.z_grid = z_grid

    # -- exact quadrature paths ---------------------------------------------

    def _rms_slope_exact(self, z):
        h = self.slope_step * max(1.0, abs(z))
        return _richardson_slope(
            lambda zz: _rms_sharpe_exact(self.model, zz, self.n_quad), z, h
        )

    def _poisson(self, z: float) -> PoissonSolution:
        key = float(z)
        if key not in self._poisson_cache:
            self._poisson_cache[key] = solve_poisson(self.model, key, self.n_quad)
        return self._poisson_cache[key]

    @staticmethod
    def _vectorize(fn, z):
        if np.ndim(z):
            return np.array([fn(float(zz)) for zz in np.ravel(z)]).reshape(np.shape(z))
        return fn(float(z))

    # -- public surface -------------------------------------------------------

    def sharpe_rms(self, z):
        """sqrt(<lam^2(., z)>), the Sharpe ratio the leading-order value sees."""
        if self._splines is not None:
            return self._splines["rms"](z)
        return self._vectorize(lambda zz: _rms_sharpe_exact(self.model, zz, self.n_quad), z)

    def sharpe_mean(self, z):
        """<lam(., z)>."""
        if self._splines is not None:
            return self._splines["mean"](z)
        return self._vectorize(
            lambda zz: invariant_average(self.model, self.model.sharpe, zz, self.n_quad), z
        )

    def sharpe_rms_slope(self, z):
        """d/dz of sharpe_rms, by Richardson-extrapolated central differences."""
        if self._splines is not None:
            return self._splines["slope"](z)
        return self._vectorize(self._rms_slope_exact, z)

    def coupling(self, z):
        """<lam a theta_y>(z)."""
        if self._splines is not None:
            return self._splines["coupling"](z)
        return self._vectorize(lambda zz: fast_coupling(self.model, zz, self.n_quad), z)

    def sharpe_mean_slope(self, z):
        if self._splines is not None:
            return self._splines["mean"](z, 1)

        def one(zz):
            h = self.slope_step * max(1.0, abs(zz))
            return _richardson_slope(lambda w: self.sharpe_mean(w), zz, h)

        return self._vectorize(one, z)

    def sharpe_rms_curve(self, z):
        """Second z-derivative of sharpe_rms."""
        if self._splines is not None:
            return self._splines["slope"](z, 1)

        def one(zz):
            h = 10.0 * self.slope_step * max(1.0, abs(zz))
            return _richardson_slope(lambda w: self.sharpe_rms_slope(w), zz, h)

        return self._vectorize(one, z)

    def coupling_slope(self, z):
        if self._splines is not None:
            return self._splines["coupling"](z, 1)

        def one(zz):
            h = self.slope_step * max(1.0, abs(zz))
            return _richardson_slope(lambda w: self.coupling(w), zz, h)

        return self._vectorize(one, z)

    def corrector(self, y, z: float):
        """theta(y, z), zero-average in y."""
        return self._poisson(z).value(y)

    def corrector_gradient(self, y, z: float):
        """theta_y(y, z)."""
        return self._poisson(z).gradient(y)


def averaged_sharpe(model: MarketModel, z_grid: np.ndarray | None = None,
                    n_quad: int = 96) -> FactorAverages:
    """Averaged-quantity surface for a model; cached when a z-grid is given."""
    return FactorAverages(model, z_grid=z_grid, n_quad=n_quad)


def z_cache_grid(center: float, halfwidth: float, n_nodes: int = 201,
                 pad: float = 0.2) -> np.ndarray:
    """Uniform z-grid around `center`, padded beyond the visited range."""
    hw = max(halfwidth, 1e-3) * (1.0 + pad)
    return np.linspace(center - hw, center + hw, n_nodes)


# ---------------------------------------------------------------------------
# coefficient registry (run-configuration surface)
# ---------------------------------------------------------------------------


def _need(params, n, name):
    if len(params) != n:
        raise ValueError(f"coefficient {name!r} expects {n} parameters, got {len(params)}")
    return params


SHARPE_REGISTRY = {
    # lam(y, z) = p0
    "const": lambda p: (lambda y, z: np.full(np.broadcast(y, z).shape, _need(p, 1, "const")[0])),
    # lam(y, z) = p0 + p1 z
    "affine_z": lambda p: (lambda y, z, q=_need(p, 2, "affine_z"): (q[0] + q[1] * np.asarray(z, dtype=float)) * np.ones(np.broadcast(y, z).shape)),
    # lam(y, z) = p0 + p1 z + p2 tanh(y): affine in z with a bounded fast perturbation
    "affine_z_tanh_y": lambda p: (lambda y, z, q=_need(p, 3, "affine_z_tanh_y"): q[0] + q[1] * np.asarray(z, dtype=float) + q[2] * np.tanh(np.asarray(y, dtype=float))),
    # lam(y, z) = p0 y
    "prop_y": lambda p: (lambda y, z, q=_need(p, 1, "prop_y"): q[0] * np.asarray(y, dtype=float) * np.ones(np.broadcast(y, z).shape)),
    # lam(y, z) = p0 z y
    "prop_yz": lambda p: (lambda y, z, q=_need(p, 1, "prop_yz"): q[0] * np.asarray(y, dtype=float) * np.asarray(z, dtype=float)),
}

SIGMA_REGISTRY = {
    "const": lambda p: (lambda y, z: np.full(np.broadcast(y, z).shape, _need(p, 1, "const")[0])),
    # sigma = p0 exp(p1 tanh(y)): positive, bounded away from zero
    "exp_tanh_y": lambda p: (lambda y, z, q=_need(p, 2, "exp_tanh_y"): q[0] * np.exp(q[1] * np.tanh(np.asarray(y, dtype=float))) * np.ones(np.broadcast(y, z).shape)),
}

SLOW_DRIFT_REGISTRY = {
    "zero": lambda p: (lambda z: np.zeros(np.shape(z))),
    # c(z) = p0 (p1 - z)
    "mean_revert": lambda p: (lambda z, q=_need(p, 2, "mean_revert"): q[0] * (q[1] - np.asarray(z, dtype=float))),
}


def _const_slow_vol(p):
    (g0,) = _need(p, 1, "const")
    return (
        lambda z: np.full(np.shape(z), g0),
        lambda z: np.zeros(np.shape(z)),
        lambda z: np.zeros(np.shape(z)),
    )


def _affine_slow_vol(p):
    g0, g1 = _need(p, 2, "affine")
    return (
        lambda z: g0 + g1 * np.asarray(z, dtype=float),
        lambda z: np.full(np.shape(z), g1),
        lambda z: np.zeros(np.shape(z)),
    )


SLOW_VOL_REGISTRY = {"const": _const_slow_vol, "affine": _affine_slow_vol}
