"""First-order expansion of the value process under fast/slow volatility.

Everything is expressed through the z-parameterized Merton surface evaluated
at the root-mean-square Sharpe ratio, v(t, x, z) = M(t, x; sharpe_rms(z)),
its risk tolerance R, and the wealth-differential operators D_k = R^k d^k/dx^k.
With tau = T - t:

    leading order        v
    fast correction      -(1/2) tau rho1 coupling(z) D1^2 v
    slow correction      (1/2) tau^2 rho2 mean rms rms' g(z) D1^2 v
    combined             Q = v + sqrt(eps) * fast + sqrt(delta) * slow

using the identity D1^2 v = R M_x (R_x - 1) (from R M_xx = -M_x) and the
Vega-Gamma relation v_z = tau rms rms' D1 v, which makes every correction a
closed form in quantities the Merton solver already provides.  The
second-order fast term -(1/2) theta(y, z) D1 v is exposed purely as an
expansion-quality diagnostic and never enters Q.

The zeroth-order strategy invests pi = (lam(y, z)/sigma(y, z)) R(t, x; rms(z)):
the local Sharpe-to-vol ratio sized by the averaged risk tolerance.
"""

from __future__ import annotations

import numpy as np

from .factors import FactorAverages, MarketModel
from .merton import MertonSolution, _DualCore, solve_merton
from .utility import UtilitySpec

__all__ = ["ExpansionBundle"]


class ExpansionBundle:
    """Evaluable expansion terms for one (model, utility, horizon) triple.

    Scalar calls accept floats; the vectorized paths accept arrays for x and
    z with a scalar t (the Monte Carlo engine's access pattern).  Per-z
    Merton solutions are cached lazily; for a pure power utility all
    evaluations are closed form.
    """

    def __init__(self, model: MarketModel, averages: FactorAverages,
                 utility: UtilitySpec, horizon: float, n_quad: int = 96):
        if horizon <= 0.0:
            raise ValueError("horizon must be positive")
        self.model = model
        self.averages = averages
        self.utility = utility
        self.horizon = float(horizon)
        self._dual = None if utility.is_power else _DualCore(utility, n_nodes=n_quad)
        self._merton_cache: dict[float, MertonSolution] = {}

    # -- Merton access ---------------------------------------------------------

    def merton_at(self, z: float) -> MertonSolution:
        """Merton solution at the averaged Sharpe ratio for slow level z."""
        key = float(z)
        if key not in self._merton_cache:
            lam = float(self.averages.sharpe_rms(key))
            self._merton_cache[key] = solve_merton(self.utility, lam, self.horizon)
        return self._merton_cache[key]

    def _surface(self, t, x, z, order=2):
        """Value/derivative pack at per-point averaged Sharpe; vectorized."""
        x_arr = np.asarray(x, dtype=float)
        lam = np.asarray(self.averages.sharpe_rms(z), dtype=float)
        tau = self.horizon - t
        u = self.utility
        if u.is_power:
            g = u.gamma
            growth = np.exp(0.5 * lam**2 * g / (1.0 - g) * tau)
            pack = {
                "m": u.u(x_arr) * growth,
                "m_x": u.du(x_arr, 1) * growth,
                "m_xx": u.du(x_arr, 2) * growth,
                "r": x_arr / (1.0 - g),
                "r_x": np.full(np.shape(x_arr), 1.0 / (1.0 - g)),
            }
            if order >= 4:
                pack["r_xx"] = np.zeros(np.shape(x_arr))
            return pack
        if tau <= 0.0:
            pack = {
                "m": u.u(x_arr),
                "m_x": u.du(x_arr, 1),
                "m_xx": u.du(x_arr, 2),
                "r": u.risk_tolerance(x_arr),
                "r_x": u.risk_tolerance_x(x_arr),
            }
            if order >= 4:
                pack["r_xx"] = u.risk_tolerance_xx(x_arr)
            return pack
        return self._dual.evaluate(lam, tau, x_arr, order=max(order, 3))

    # -- expansion terms --------------------------------------------------------

    def leading_order(self, t, x, z):
        """v(t, x, z) = Merton value at the averaged Sharpe ratio."""
        return self._surface(t, x, z)["m"]

    def value_x(self, t, x, z):
        return self._surface(t, x, z)["m_x"]

    def value_xx(self, t, x, z):
        return self._surface(t, x, z)["m_xx"]

    def risk_tolerance(self, t, x, z):
        if self.utility.is_power:
            return np.asarray(x, dtype=float) / (1.0 - self.utility.gamma)
        return self._surface(t, x, z)["r"]

    def d1(self, t, x, z, pack=None):
        """D1 v = R M_x."""
        p = pack if pack is not None else self._surface(t, x, z, order=3)
        return p["r"] * p["m_x"]

    def d1sq(self, t, x, z, pack=None):
        """D1^2 v = R M_x (R_x - 1)."""
        p = pack if pack is not None else self._surface(t, x, z, order=3)
        return p["r"] * p["m_x"] * (p["r_x"] - 1.0)

    def fast_correction(self, t, x, z):
        """First-order correction from the fast factor (vanishes at t = T)."""
        tau = self.horizon - t
        pref = -0.5 * tau * self.model.rho1 * np.asarray(self.averages.coupling(z))
        return pref * self.d1sq(t, x, z)

    def slow_correction(self, t, x, z):
        """First-order correction from the slow factor (vanishes at t = T)."""
        tau = self.horizon - t
        a = self.averages
        pref = (
            0.5
            * tau**2
            * self.model.rho2
            * np.asarray(a.sharpe_mean(z))
            * np.asarray(a.sharpe_rms(z))
            * np.asarray(a.sharpe_rms_slope(z))
            * np.asarray(self.model.slow_vol(z))
        )
        return pref * self.d1sq(t, x, z)

    def first_order_value(self, t, x, z, eps: float | None = None,
                          delta: float | None = None):
        """Q = v + sqrt(eps) fast + sqrt(delta) slow; Q(T, x, z) = U(x)."""
        eps = self.model.epsilon if eps is None else eps
        delta = self.model.delta if delta is None else delta
        tau = self.horizon - t
        p = self._surface(t, x, z, order=3)
        d1sq = self.d1sq(t, x, z, pack=p)
        a = self.averages
        fast = -0.5 * tau * self.model.rho1 * np.asarray(a.coupling(z)) * d1sq
        slow = (
            0.5 * tau**2 * self.model.rho2
            * np.asarray(a.sharpe_mean(z))
            * np.asarray(a.sharpe_rms(z))
            * np.asarray(a.sharpe_rms_slope(z))
            * np.asarray(self.model.slow_vol(z))
            * d1sq
        )
        return p["m"] + np.sqrt(eps) * fast + np.sqrt(delta) * slow

    def pi_zero(self, t, x, y, z):
        """Zeroth-order position: local Sharpe over vol, averaged risk tolerance."""
        x_arr = np.asarray(x, dtype=float)
        out = np.zeros(np.broadcast(x_arr, y, z).shape)
        pos = x_arr > 0.0
        if np.ndim(x_arr) == 0:
            if not pos:
                return 0.0
            ratio = self.model.sharpe(y, z) / self.model.sigma(y, z)
            return float(ratio * self.risk_tolerance(t, x_arr, z))
        if np.any(pos):
            y_b, z_b = np.broadcast_arrays(np.asarray(y, dtype=float) * np.ones_like(x_arr),
                                           np.asarray(z, dtype=float) * np.ones_like(x_arr))
            ratio = self.model.sharpe(y_b[pos], z_b[pos]) / self.model.sigma(y_b[pos], z_b[pos])
            out[pos] = ratio * self.risk_tolerance(t, x_arr[pos], z_b[pos])
        return out

    def second_order_fast_diag(self, t, x, y, z: float):
        """-(1/2) theta(y, z) D1 v: expansion-quality diagnostic, not part of Q."""
        theta = self.averages.corrector(y, z)
        return -0.5 * np.asarray(theta) * self.d1(t, x, z)

    def vega_gamma_check(self, t, x, z: float, h_z: float | None = None) -> float:
        """Normalized residual of v_z = tau rms rms' D1 v, with v_z by re-solving.

        The z-difference rebuilds the Merton solution at shifted averaged
        Sharpe ratios, so this exercises the solver's smoothness in the Sharpe
        parameter rather than differentiating a cached surface.
        """
        tau = self.horizon - t
        if h_z is None:
            h_z = 1e-4 * max(1.0, abs(z))
        a = self.averages

        def v_at(zz):
            lam = float(a.sharpe_rms(zz))
            return solve_merton(self.utility, lam, self.horizon).value(t, x)

        fd = (v_at(z + h_z) - v_at(z - h_z)) / (2.0 * h_z)
        v0 = self.leading_order(t, x, z)
        rhs = tau * float(a.sharpe_rms(z)) * float(a.sharpe_rms_slope(z)) * self.d1(t, x, z)
        return float(abs(fd - rhs) / (1.0 + abs(v0)))

    # -- gradients for the martingale control variate ---------------------------

    def q_gradients(self, t, x, z, eps=None, delta=None):
        """(d/dx Q, d/dz Q) sharing one derivative pack; feeds the control variate.

        The x-gradient is exact for every term (using d/dx D1^2 v).  In the
        z-gradient the leading term uses the exact Vega-Gamma identity; for
        the two correction terms the z-derivatives of the averaged prefactors
        come from the cached splines, and the z-derivative of D1^2 v itself
        is included exactly for power utilities (where D1^2 v is proportional
        to v) and omitted otherwise.  Both gradients only multiply Brownian
        increments inside the control variate, so truncations here affect
        variance, never the estimator's validity.
        """
        eps = self.model.epsilon if eps is None else eps
        delta = self.model.delta if delta is None else delta
        tau = self.horizon - t
        sqrt_eps, sqrt_delta = np.sqrt(eps), np.sqrt(delta)
        a = self.averages
        p = self._surface(t, x, z, order=4)
        rms = np.asarray(a.sharpe_rms(z))
        rms_p = np.asarray(a.sharpe_rms_slope(z))
        coup = np.asarray(a.coupling(z))
        mean = np.asarray(a.sharpe_mean(z))
        gz = np.asarray(self.model.slow_vol(z))
        fast_pref = -0.5 * tau * self.model.rho1 * coup
        slow_pref = 0.5 * tau**2 * self.model.rho2 * mean * rms * rms_p * gz

        # d/dx D1^2 v = M_x [ (R_x - 1)^2 + R R_xx ]
        d1sq_x = p["m_x"] * ((p["r_x"] - 1.0) ** 2 + p["r"] * p["r_xx"])
        q_x = p["m_x"] + (sqrt_eps * fast_pref + sqrt_delta * slow_pref) * d1sq_x

        d1 = p["r"] * p["m_x"]
        d1sq = d1 * (p["r_x"] - 1.0)
        v_z = tau * rms * rms_p * d1
        if self.utility.is_power:
            k1 = self.utility.gamma / (1.0 - self.utility.gamma)
            d1sq_z = k1**2 * v_z
        else:
            d1sq_z = 0.0
        coup_p = np.asarray(a.coupling_slope(z))
        fast_z = -0.5 * tau * self.model.rho1 * (coup_p * d1sq + coup * d1sq_z)
        mean_p = np.asarray(a.sharpe_mean_slope(z))
        rms_pp = np.asarray(a.sharpe_rms_curve(z))
        gz_p = np.asarray(self.model.slow_vol_d1(z))
        slow_pref_z = (
            mean_p * rms * rms_p * gz
            + mean * rms_p**2 * gz
            + mean * rms * rms_pp * gz
            + mean * rms * rms_p * gz_p
        )
        slow_z = 0.5 * tau**2 * self.model.rho2 * (slow_pref_z * d1sq + mean * rms * rms_p * gz * d1sq_z)
        q_z = v_z + sqrt_eps * fast_z + sqrt_delta * slow_z
        return q_x, q_z

    def q_gradient_x(self, t, x, z, eps=None, delta=None):
        """d/dx of Q; see :meth:`q_gradients`."""
        return self.q_gradients(t, x, z, eps=eps, delta=delta)[0]

    def q_gradient_z(self, t, x, z, eps=None, delta=None):
        """d/dz of Q; see :meth:`q_gradients`."""
        return self.q_gradients(t, x, z, eps=eps, delta=delta)[1]
