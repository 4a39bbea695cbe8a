"""Monte Carlo duality bounds and pathwise policies for investment-consumption
problems in incomplete diffusion-driven markets."""

from . import benchmarks, dual_bounds, market_model, path_engine, pathwise_solver
from .errors import (
    BracketTooNarrow,
    ConfigError,
    DualWealthMismatch,
    DualmcError,
    InvalidRiskAversion,
    MalformedGridFile,
    NonconvergedPolicyIteration,
    NonfinitePath,
    NonmonotoneInverse,
    RegularityRejection,
    SingularMarket,
    WealthDomain,
)

__version__ = "0.1.0"
