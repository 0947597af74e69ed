"""General utility functions on (0, inf) for terminal-wealth optimization.

Two admissible families, both strictly increasing, strictly concave, with
U(0+) = 0 and the Inada conditions satisfied by construction:

    power:          U(x) = x**g / g                    with 0 < g < 1
    power mixture:  U(x) = sum_i c_i * x**g_i / g_i    with c_i > 0, 0 < g_i < 1

The surface exposed per utility is U and its derivatives up to fourth order,
the risk tolerance R(x) = -U'(x)/U''(x), and the inverse marginal utility
I(y) = (U')^{-1}(y).  For a pure power I is closed form; mixtures are
inverted with a damped Newton iteration in log-log coordinates (U' is smooth,
strictly decreasing and log-log convex, so the iteration is globally safe
with a step clamp).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["UtilitySpec", "make_utility", "inverse_marginal"]

_NEWTON_MAX_ITER = 100
_NEWTON_REL_TOL = 1e-14  # on log marginal utility; well below the 1e-12 contract


@dataclass(frozen=True)
class UtilitySpec:
    """Weighted mixture of power utilities; a single component is a pure power.

    Attributes
    ----------
    weights : tuple of positive floats
    exponents : tuple of floats in the open interval (0, 1)
    """

    weights: tuple[float, ...]
    exponents: tuple[float, ...]

    @property
    def kind(self) -> str:
        return "power" if self.is_power else "power_mixture"

    @property
    def is_power(self) -> bool:
        return len(self.exponents) == 1

    @property
    def gamma(self) -> float:
        """Exponent of a pure power utility."""
        if not self.is_power:
            raise ValueError("gamma is only defined for a pure power utility")
        return self.exponents[0]

    @property
    def asymptotic_elasticity(self) -> float:
        """Limit of x U'(x)/U(x) as x -> inf; equals the largest exponent."""
        return max(self.exponents)

    # -- evaluation surface ------------------------------------------------

    def u(self, x):
        """U(x) for x >= 0 (U(0) = 0)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.shape(x))
        for c, g in zip(self.weights, self.exponents):
            out = out + (c / g) * np.power(x, g)
        return out if out.ndim else float(out)

    def du(self, x, k: int):
        """k-th derivative of U for k in {1, 2, 3, 4}."""
        if k not in (1, 2, 3, 4):
            raise ValueError(f"derivative order must be in 1..4, got {k}")
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.shape(x))
        for c, g in zip(self.weights, self.exponents):
            coef = c
            for j in range(1, k):
                coef *= g - j
            out = out + coef * np.power(x, g - k)
        return out if out.ndim else float(out)

    def risk_tolerance(self, x):
        """R(x) = -U'(x)/U''(x); strictly increasing with R(0+) = 0."""
        return -self.du(x, 1) / self.du(x, 2)

    def risk_tolerance_x(self, x):
        """dR/dx, from R = -U'/U''."""
        u1, u2, u3 = self.du(x, 1), self.du(x, 2), self.du(x, 3)
        return -1.0 + u1 * u3 / u2**2

    def risk_tolerance_xx(self, x):
        """d^2R/dx^2."""
        u1, u2, u3, u4 = (self.du(x, k) for k in (1, 2, 3, 4))
        return u3 / u2 + u1 * u4 / u2**2 - 2.0 * u1 * u3**2 / u2**3

    def inverse_marginal(self, y):
        """I(y) = (U')^{-1}(y) for y > 0, to relative tolerance 1e-12."""
        y_arr = np.asarray(y, dtype=float)
        if np.any(y_arr <= 0.0):
            raise ValueError("inverse marginal utility requires y > 0")
        if self.is_power:
            c, g = self.weights[0], self.exponents[0]
            out = np.power(y_arr / c, 1.0 / (g - 1.0))
            return out if out.ndim else float(out)
        out = self._invert_marginal_newton(y_arr)
        return out if out.ndim else float(out)

    # -- internals ---------------------------------------------------------

    def _invert_marginal_newton(self, y):
        # Solve log U'(e^t) = log y; d/dt log U'(e^t) = -x/R(x) in [-1/(1-gmin), -1/(1-gmax)].
        gmax = max(self.exponents)
        gmin = min(self.exponents)
        cmax = self.weights[self.exponents.index(gmax)]
        cmin = self.weights[self.exponents.index(gmin)]
        logy = np.log(y)
        # Seed from the dominant single power on each side of U'(1).
        up1 = sum(self.weights)
        t = np.where(
            y < up1,
            (logy - np.log(cmax)) / (gmax - 1.0),
            (logy - np.log(cmin)) / (gmin - 1.0),
        )
        for _ in range(_NEWTON_MAX_ITER):
            x = np.exp(t)
            u1 = self.du(x, 1)
            resid = np.log(u1) - logy
            if np.all(np.abs(resid) <= _NEWTON_REL_TOL):
                break
            slope = x * self.du(x, 2) / u1  # strictly negative
            step = np.clip(-resid / slope, -2.0, 2.0)
            t = t + step
        else:
            worst = float(np.max(np.abs(resid)))
            raise RuntimeError(
                f"marginal-utility inversion did not converge (max residual {worst:.3e})"
            )
        return np.exp(t)


def make_utility(kind: str, *, gamma=None, weights=None, exponents=None) -> UtilitySpec:
    """Build and validate a utility specification.

    Parameters
    ----------
    kind : "power" or "power_mixture"
    gamma : exponent in (0, 1), for kind="power"
    weights, exponents : sequences for kind="power_mixture"; weights strictly
        positive, exponents in the open interval (0, 1)
    """
    if kind == "power":
        if gamma is None:
            raise ValueError("power utility requires gamma")
        weights, exponents = (1.0,), (float(gamma),)
    elif kind == "power_mixture":
        if weights is None or exponents is None:
            raise ValueError("power mixture requires weights and exponents")
        weights = tuple(float(c) for c in weights)
        exponents = tuple(float(g) for g in exponents)
    else:
        raise ValueError(f"unknown utility kind {kind!r}")

    if len(weights) == 0 or len(exponents) == 0:
        raise ValueError("utility mixture must have at least one component")
    if len(weights) != len(exponents):
        raise ValueError("weights and exponents must have equal length")
    for c in weights:
        if not c > 0.0:
            raise ValueError(f"mixture weights must be strictly positive, got {c}")
    for g in exponents:
        if not 0.0 < g < 1.0:
            raise ValueError(f"exponents must lie in (0, 1), got {g}")
    return UtilitySpec(weights=weights, exponents=exponents)


def inverse_marginal(utility: UtilitySpec, y):
    """Module-level alias for :meth:`UtilitySpec.inverse_marginal`."""
    return utility.inverse_marginal(y)
