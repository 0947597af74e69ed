"""Monte Carlo engine for the coupled (S, Y, Z, X) system under plug-in strategies.

Discretization per step of size dt:

    Y   exact Gaussian transition of the Ornstein-Uhlenbeck factor at rate
        1/epsilon (Euler would dominate the bias at dt = epsilon/20)
    Z   Euler-Maruyama
    X   Euler-Maruyama, self-financing exactly: dX = pi (mu dt + sigma dW);
        wealth is floored at zero and absorbed there
    S   exact lognormal step given (Y, Z) frozen over the interval

Brownian increments are correlated through the lower-triangular Cholesky
factor of the (W, W^Y, W^Z) correlation matrix.  Paths are partitioned into
fixed-size chunks; each chunk owns a counter-based Philox substream keyed by
(master seed, chunk index) and partial results are combined in chunk order,
so ensembles are bit-identical for any worker count.

Variance reduction: antithetic pairing within chunks, and an optional
martingale control variate accumulating the Ito martingale part of the
first-order value approximation Q along each path,

    CV = sum_n  Q_x dX_mart + Q_z sqrt(delta) g dW^Z,

whose increments have exactly zero conditional mean, so subtracting CV from
the terminal utility never biases the estimator, for any strategy.

Two pathwise sign diagnostics accumulate the monotone drag terms of the
value comparison: the bump drag -(1/2)(eps^a b10 + delta^b b01)^2 sigma^2 |v_xx|
for perturbations of the zeroth-order strategy, and the mismatch drag
-(1/2)(pi - pi0)^2 sigma^2 |v_xx| for any other strategy.  Concavity makes
every increment nonpositive; the verdicts are exact sign tests.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .asymptotics import ExpansionBundle
from .factors import MarketModel

__all__ = [
    "SimConfig",
    "Strategy",
    "AllCash",
    "ZerothOrder",
    "Scaled",
    "Perturbed",
    "default_fast_bump",
    "default_slow_bump",
    "PathEnsemble",
    "ValueEstimate",
    "DragVerdict",
    "simulate_paths",
    "estimate_value",
    "run_ensembles",
    "bump_drag_diagnostic",
    "mismatch_drag_diagnostic",
    "wealth_step",
]

logger = logging.getLogger(__name__)

_STEP_DIVISOR = 20  # dt must resolve the fastest scale: dt <= min(eps, delta)/20


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


class Strategy:
    """Feedback strategy: dollar position as a function of (t, x, y, z)."""

    name = "strategy"

    def position(self, t, x, y, z):
        raise NotImplementedError


class AllCash(Strategy):
    """No risky investment; wealth stays constant."""

    name = "all_cash"

    def position(self, t, x, y, z):
        return np.zeros(np.shape(x))


class ZerothOrder(Strategy):
    """The candidate strategy: local Sharpe over vol times averaged risk tolerance."""

    name = "zeroth_order"

    def __init__(self, bundle: ExpansionBundle):
        self.bundle = bundle

    def position(self, t, x, y, z):
        return self.bundle.pi_zero(t, x, y, z)


class Scaled(Strategy):
    """A fixed multiple of a base strategy."""

    def __init__(self, base: Strategy, factor: float):
        self.base = base
        self.factor = float(factor)
        self.name = f"scaled_{factor:g}_{base.name}"

    def position(self, t, x, y, z):
        return self.factor * self.base.position(t, x, y, z)


class Perturbed(Strategy):
    """base + eps^alpha * fast_bump + delta^beta * slow_bump.

    Bumps are feedback functionals of the current state, hence adapted by
    construction.  alpha and beta are the perturbation powers; eps and delta
    are taken from the market model driving the run.
    """

    def __init__(self, base: Strategy, fast_bump, slow_bump,
                 alpha: float, beta: float, epsilon: float, delta: float):
        if alpha <= 0.0 or beta <= 0.0:
            raise ValueError("perturbation powers must be strictly positive")
        self.base = base
        self.fast_bump = fast_bump
        self.slow_bump = slow_bump
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.eps_pow = float(epsilon) ** alpha
        self.delta_pow = float(delta) ** beta
        self.name = f"perturbed_{base.name}"

    def bumps(self, t, x, y, z):
        return self.fast_bump(t, x, y, z), self.slow_bump(t, x, y, z)

    def position(self, t, x, y, z):
        b10, b01 = self.bumps(t, x, y, z)
        return self.base.position(t, x, y, z) + self.eps_pow * b10 + self.delta_pow * b01


def default_fast_bump(scale: float):
    """Bounded, wealth-capped bump c * min(1 + |y|, x); vanishes at zero wealth."""
    def bump(t, x, y, z):
        return scale * np.minimum(1.0 + np.abs(y), np.asarray(x, dtype=float))
    return bump


def default_slow_bump(scale: float, bundle: ExpansionBundle):
    """Bump proportional to the averaged risk tolerance c * R(t, x; rms(z))."""
    def bump(t, x, y, z):
        x_arr = np.asarray(x, dtype=float)
        out = np.zeros(np.shape(x_arr))
        pos = x_arr > 0.0
        if np.any(pos):
            z_b = (np.asarray(z, dtype=float) * np.ones_like(x_arr))[pos]
            out[pos] = scale * bundle.risk_tolerance(t, x_arr[pos], z_b)
        return out
    return bump


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo run parameters.

    `dt` is a target step; the engine uses T/n_steps with
    n_steps = ceil(T/dt), so the effective step never exceeds the target.
    """

    n_paths: int
    horizon: float
    dt: float
    x0: float = 1.0
    y0: float = 0.0
    z0: float = 0.0
    s0: float = 1.0
    seed: int = 0
    antithetic: bool = True
    control_variate: bool = False
    chunk_size: int = 16384
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if self.antithetic and (self.n_paths < 2 or self.n_paths % 2 or self.chunk_size % 2):
            raise ValueError("antithetic runs need even n_paths and even chunk_size")
        if self.horizon <= 0.0 or self.dt <= 0.0:
            raise ValueError("horizon and dt must be positive")
        if self.x0 < 0.0:
            raise ValueError("initial wealth must be nonnegative")
        if self.chunk_size < 1 or self.workers < 1:
            raise ValueError("chunk_size and workers must be positive")

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.horizon / self.dt - 1e-12))


def dt_for(model: MarketModel, divisor: int = _STEP_DIVISOR) -> float:
    """Step-size rule resolving the fastest time scale."""
    return min(model.epsilon, model.delta) / divisor


@dataclass
class PathEnsemble:
    """Per-path terminal records and streamed diagnostics for one strategy."""

    strategy_name: str
    n_paths: int
    n_steps: int
    dt: float
    antithetic: bool
    x_terminal: np.ndarray
    s_terminal: np.ndarray
    utility_terminal: np.ndarray
    control_variate: np.ndarray
    floor_hit: np.ndarray
    drag_kind: str | None = None          # "bump" | "mismatch" | None
    drag_max_increment: np.ndarray | None = None
    drag_active: np.ndarray | None = None  # any nonzero increment seen
    bump_moments: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ValueEstimate:
    """Terminal-utility estimate with its Monte Carlo standard error."""

    mean: float
    se: float
    n_paths: int
    n_effective: int
    floor_hit_rate: float
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DragVerdict:
    """Exact sign test on the accumulated monotone drag increments."""

    kind: str
    n_paths: int
    max_increment: float
    n_positive_paths: int
    passed: bool
    per_path_pass: np.ndarray


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------


def wealth_step(x, pi, mu, sigma, dt, dw):
    """Self-financing Euler update with an absorbing floor at zero wealth."""
    return np.maximum(x + pi * (mu * dt + sigma * dw), 0.0)


def _validate_step(model: MarketModel, cfg: SimConfig):
    limit = min(model.epsilon, model.delta) / _STEP_DIVISOR
    dt_eff = cfg.horizon / cfg.n_steps
    if dt_eff > limit * (1.0 + 1e-9):
        raise ValueError(
            f"dt={dt_eff:.6g} does not resolve the fast scale; need dt <= "
            f"min(eps, delta)/{_STEP_DIVISOR} = {limit:.6g}"
        )


def _chunk_bounds(n_paths: int, chunk_size: int):
    starts = range(0, n_paths, chunk_size)
    return [(s, min(s + chunk_size, n_paths)) for s in starts]


class _ChunkResult:
    __slots__ = ("x", "s", "u", "cv", "hit", "drag_max", "drag_active", "bump_sums")

    def __init__(self, n_strat, n):
        self.x = [np.empty(n) for _ in range(n_strat)]
        self.s = np.empty(n)
        self.u = [np.empty(n) for _ in range(n_strat)]
        self.cv = [np.zeros(n) for _ in range(n_strat)]
        self.hit = [np.zeros(n, dtype=bool) for _ in range(n_strat)]
        self.drag_max = [np.full(n, -np.inf) for _ in range(n_strat)]
        self.drag_active = [np.zeros(n, dtype=bool) for _ in range(n_strat)]
        self.bump_sums = [np.zeros((2, 4)) for _ in range(n_strat)]


def _simulate_chunk(model, strategies, bundle, cfg, chunk_index, n_chunk,
                    collect_drag):
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(chunk_index,)))
    )
    n_steps = cfg.n_steps
    dt = cfg.horizon / n_steps
    sqrt_dt = math.sqrt(dt)
    sqrt_delta = math.sqrt(model.delta)
    chol = model.correlation_cholesky()
    ou_decay = math.exp(-dt / model.epsilon)
    ou_std = model.fast.vol * math.sqrt(max(0.0, 1.0 - ou_decay**2))
    ou_mean = model.fast.mean

    n_strat = len(strategies)
    res = _ChunkResult(n_strat, n_chunk)
    n_draw = n_chunk // 2 if cfg.antithetic else n_chunk

    y = np.full(n_chunk, cfg.y0)
    z = np.full(n_chunk, cfg.z0)
    s = np.full(n_chunk, cfg.s0)
    xs = [np.full(n_chunk, cfg.x0) for _ in range(n_strat)]

    for step in range(n_steps):
        t = step * dt
        eta = rng.standard_normal((3, n_draw))
        if cfg.antithetic:
            eta = np.concatenate([eta, -eta], axis=1)
        w_std = eta[0]
        wy_std = chol[1, 0] * eta[0] + chol[1, 1] * eta[1]
        wz_std = chol[2, 0] * eta[0] + chol[2, 1] * eta[1] + chol[2, 2] * eta[2]
        dw = w_std * sqrt_dt
        dwz = wz_std * sqrt_dt

        lam = model.sharpe(y, z)
        sig = model.sigma(y, z)
        mu = lam * sig
        gz = model.slow_vol(z)

        for k, strat in enumerate(strategies):
            x = xs[k]
            pi = strat.position(t, x, y, z)
            alive = x > 0.0

            if cfg.control_variate and np.any(alive):
                qx = np.zeros(n_chunk)
                qz = np.zeros(n_chunk)
                qx[alive], qz[alive] = bundle.q_gradients(t, x[alive], z[alive])
                res.cv[k] += qx * pi * sig * dw + qz * sqrt_delta * gz * dwz

            if collect_drag:
                inc = np.zeros(n_chunk)
                if isinstance(strat, Perturbed):
                    b10, b01 = strat.bumps(t, x, y, z)
                    weight = (strat.eps_pow * b10 + strat.delta_pow * b01) ** 2
                    res.bump_sums[k] += np.array(
                        [
                            [np.sum(b), np.sum(b**2), np.sum(b**3), np.sum(b**4)]
                            for b in (b10, b01)
                        ]
                    )
                else:
                    weight = (pi - bundle.pi_zero(t, x, y, z)) ** 2
                sel = alive & (weight != 0.0)
                if np.any(sel):
                    vxx = bundle.value_xx(t, x[sel], z[sel])
                    inc[sel] = 0.5 * weight[sel] * sig[sel] ** 2 * vxx * dt
                np.maximum(res.drag_max[k], inc, out=res.drag_max[k])
                res.drag_active[k] |= inc != 0.0

            x_new = wealth_step(x, pi, mu, sig, dt, dw)
            res.hit[k] |= alive & (x_new <= 0.0)
            xs[k] = x_new

        s = s * np.exp((mu - 0.5 * sig**2) * dt + sig * dw)
        z = z + model.delta * model.slow_drift(z) * dt + sqrt_delta * gz * dwz
        y = ou_mean + (y - ou_mean) * ou_decay + ou_std * wy_std

    res.s[:] = s
    for k in range(n_strat):
        res.x[k][:] = xs[k]
        res.u[k][:] = bundle.utility.u(np.maximum(xs[k], 0.0))
    return res


def run_ensembles(model: MarketModel, strategies: list[Strategy],
                  bundle: ExpansionBundle, cfg: SimConfig,
                  collect_drag: bool = False) -> list[PathEnsemble]:
    """Simulate several strategies on shared noise (common random numbers).

    Strategy slot 0 is the reference used by the mismatch drag; results come
    back in roster order.  Identical (model, cfg, strategies) produce
    bit-identical ensembles for any worker count.
    """
    _validate_step(model, cfg)
    n_strat = len(strategies)
    bounds = _chunk_bounds(cfg.n_paths, cfg.chunk_size)
    if cfg.antithetic and any((b - a) % 2 for a, b in bounds):
        raise ValueError("antithetic pairing requires even chunk lengths")

    results: list[_ChunkResult | None] = [None] * len(bounds)

    def work(idx):
        a, b = bounds[idx]
        return idx, _simulate_chunk(model, strategies, bundle, cfg, idx, b - a, collect_drag)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for idx, res in pool.map(work, range(len(bounds))):
                results[idx] = res
    else:
        for idx in range(len(bounds)):
            results[idx] = work(idx)[1]

    ensembles = []
    n_steps = cfg.n_steps
    dt = cfg.horizon / n_steps
    for k, strat in enumerate(strategies):
        x_t = np.concatenate([r.x[k] for r in results])
        u_t = np.concatenate([r.u[k] for r in results])
        cv = np.concatenate([r.cv[k] for r in results])
        hit = np.concatenate([r.hit[k] for r in results])
        n_aborted = int(np.sum(~np.isfinite(x_t)))
        if n_aborted:
            logger.warning(
                "%d path(s) aborted with non-finite wealth under %s; "
                "they are excluded from estimates and counted in the report",
                n_aborted, strat.name,
            )
        ens = PathEnsemble(
            strategy_name=strat.name,
            n_paths=cfg.n_paths,
            n_steps=n_steps,
            dt=dt,
            antithetic=cfg.antithetic,
            x_terminal=x_t,
            s_terminal=np.concatenate([r.s for r in results]),
            utility_terminal=u_t,
            control_variate=cv,
            floor_hit=hit,
        )
        if collect_drag:
            ens.drag_kind = "bump" if isinstance(strat, Perturbed) else "mismatch"
            ens.drag_max_increment = np.concatenate([r.drag_max[k] for r in results])
            ens.drag_active = np.concatenate([r.drag_active[k] for r in results])
            if isinstance(strat, Perturbed):
                total = cfg.n_paths * n_steps
                sums = np.sum([r.bump_sums[k] for r in results], axis=0)
                ens.bump_moments = {
                    name: {f"order_{i+1}": float(sums[j, i] / total) for i in range(4)}
                    for j, name in enumerate(("fast_bump", "slow_bump"))
                }
                logger.info(
                    "bump empirical moments for %s: %s", strat.name, ens.bump_moments
                )
        ensembles.append(ens)
    return ensembles


def simulate_paths(model: MarketModel, strategy: Strategy, bundle: ExpansionBundle,
                   cfg: SimConfig, collect_drag: bool = True) -> PathEnsemble:
    """Simulate one strategy; drag diagnostics are streamed by default."""
    strategies = [strategy]
    if collect_drag and not isinstance(strategy, Perturbed):
        # mismatch drag references the zeroth-order strategy in slot 0
        strategies = [ZerothOrder(bundle), strategy]
        return run_ensembles(model, strategies, bundle, cfg, collect_drag=True)[1]
    return run_ensembles(model, strategies, bundle, cfg, collect_drag=collect_drag)[0]


def _pair_statistics(values: np.ndarray, antithetic: bool, chunk_size: int):
    if not antithetic:
        return values
    # pairs are (j, j + n_draw) within each chunk
    out = []
    n = values.shape[0]
    for a in range(0, n, chunk_size):
        b = min(a + chunk_size, n)
        half = (b - a) // 2
        block = values[a:b]
        out.append(0.5 * (block[:half] + block[half:]))
    return np.concatenate(out)


def summarize(ensemble: PathEnsemble, chunk_size: int,
              control_variate: bool) -> ValueEstimate:
    """Mean/SE of terminal utility, pairing antithetic partners.

    Aborted (non-finite) paths are excluded from the estimate — a pair is
    dropped if either member aborted — and reported in the diagnostics.
    """
    stat = ensemble.utility_terminal - ensemble.control_variate if control_variate \
        else ensemble.utility_terminal
    per_obs = _pair_statistics(stat, ensemble.antithetic, chunk_size)
    finite = np.isfinite(per_obs)
    n_aborted = int(np.sum(~np.isfinite(ensemble.utility_terminal)))
    per_obs = per_obs[finite]
    n_eff = per_obs.shape[0]
    if n_eff == 0:
        raise RuntimeError("every path aborted; nothing to estimate")
    mean = float(np.sum(per_obs) / n_eff)
    if n_eff > 1:
        se = float(np.std(per_obs, ddof=1) / math.sqrt(n_eff))
    else:
        se = 0.0
    cv = ensemble.control_variate[np.isfinite(ensemble.control_variate)]
    diagnostics = {
        "cv_mean": float(np.mean(cv)) if cv.size else 0.0,
        "aborted_paths": n_aborted,
        "bump_moments": ensemble.bump_moments,
    }
    if ensemble.drag_max_increment is not None:
        verdict = _drag_verdict(ensemble, ensemble.drag_kind)
        diagnostics["drag_sign_ok"] = verdict.passed
        diagnostics["drag_max_increment"] = verdict.max_increment
    return ValueEstimate(
        mean=mean,
        se=se,
        n_paths=ensemble.n_paths,
        n_effective=n_eff,
        floor_hit_rate=float(np.mean(ensemble.floor_hit)),
        diagnostics=diagnostics,
    )


def estimate_value(model: MarketModel, strategy: Strategy, bundle: ExpansionBundle,
                   cfg: SimConfig) -> ValueEstimate:
    """Monte Carlo estimate of E[U(X_T)] under one strategy."""
    ens = run_ensembles(model, [strategy], bundle, cfg, collect_drag=False)[0]
    return summarize(ens, cfg.chunk_size, cfg.control_variate)


# ---------------------------------------------------------------------------
# drag diagnostics
# ---------------------------------------------------------------------------


def _drag_verdict(ensemble: PathEnsemble, kind: str) -> DragVerdict:
    if ensemble.drag_max_increment is None:
        raise ValueError("ensemble was simulated without drag accumulation")
    inc = ensemble.drag_max_increment.copy()
    inc[~ensemble.drag_active] = 0.0  # paths with no nonzero increment
    per_path_pass = inc <= 0.0
    return DragVerdict(
        kind=kind,
        n_paths=ensemble.n_paths,
        max_increment=float(np.max(inc)),
        n_positive_paths=int(np.sum(~per_path_pass)),
        passed=bool(np.all(per_path_pass)),
        per_path_pass=per_path_pass,
    )


def bump_drag_diagnostic(ensemble: PathEnsemble) -> DragVerdict:
    """Sign test on the perturbation drag; requires a Perturbed strategy."""
    if ensemble.drag_kind != "bump":
        raise ValueError(
            "bump drag applies to perturbations of the zeroth-order strategy; "
            "use mismatch_drag_diagnostic for other strategies"
        )
    return _drag_verdict(ensemble, "bump")


def mismatch_drag_diagnostic(ensemble: PathEnsemble) -> DragVerdict:
    """Sign test on the strategy-mismatch drag (any strategy vs zeroth order)."""
    if ensemble.drag_kind != "mismatch":
        raise ValueError("ensemble does not carry mismatch drag accumulators")
    return _drag_verdict(ensemble, "mismatch")


def write_terminal_records(ensemble: PathEnsemble, fh) -> None:
    """Stream per-path terminal records as CSV with a fixed header."""
    fh.write("path,x_terminal,utility,floor_hit\n")
    for i in range(ensemble.n_paths):
        fh.write(
            f"{i},{float(ensemble.x_terminal[i])!r},"
            f"{float(ensemble.utility_terminal[i])!r},"
            f"{'true' if ensemble.floor_hit[i] else 'false'}\n"
        )
