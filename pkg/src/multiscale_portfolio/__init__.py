"""Portfolio optimization under fast/slow stochastic volatility.

Building blocks: general utilities (`utility`), constant-Sharpe Merton
solvers (`merton`), ergodic factor averaging (`factors`), first-order value
corrections and the zeroth-order strategy (`asymptotics`), a Monte Carlo
engine (`simulate`), and the verification harness behind the ``msport``
command (`experiments`).
"""

from .asymptotics import ExpansionBundle
from .factors import (
    FactorAverages,
    MarketModel,
    OrnsteinUhlenbeckFactor,
    averaged_sharpe,
    fast_coupling,
    invariant_average,
    solve_poisson,
)
from .merton import (
    MertonSolution,
    apply_dk,
    merton_strategy,
    residual_of_pde,
    risk_tolerance,
    solve_merton,
)
from .simulate import (
    AllCash,
    Perturbed,
    Scaled,
    SimConfig,
    ValueEstimate,
    ZerothOrder,
    bump_drag_diagnostic,
    estimate_value,
    mismatch_drag_diagnostic,
    simulate_paths,
)
from .utility import UtilitySpec, inverse_marginal, make_utility

__version__ = "0.1.0"

__all__ = [
    "AllCash",
    "ExpansionBundle",
    "FactorAverages",
    "MarketModel",
    "MertonSolution",
    "OrnsteinUhlenbeckFactor",
    "Perturbed",
    "Scaled",
    "SimConfig",
    "UtilitySpec",
    "ValueEstimate",
    "ZerothOrder",
    "apply_dk",
    "averaged_sharpe",
    "bump_drag_diagnostic",
    "estimate_value",
    "fast_coupling",
    "inverse_marginal",
    "invariant_average",
    "make_utility",
    "merton_strategy",
    "mismatch_drag_diagnostic",
    "residual_of_pde",
    "risk_tolerance",
    "simulate_paths",
    "solve_merton",
    "solve_poisson",
    "__version__",
]
