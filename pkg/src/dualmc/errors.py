"""Exception types shared across the package."""


class DualmcError(Exception):
    """Base class for all numerical / domain failures raised by dualmc."""


class SingularMarket(DualmcError):
    """Volatility matrix is (numerically) rank deficient at a factor state."""


class InvalidRiskAversion(DualmcError):
    """Risk aversion outside the supported range (R > 0, R != 1)."""


class NonmonotoneInverse(DualmcError):
    """Supplied parameters break strict monotonicity of an inverse marginal."""


class WealthDomain(DualmcError):
    """Utility evaluated outside its wealth / consumption domain."""


class NonfinitePath(DualmcError):
    """A simulated state became non-finite (coefficient blow-up or bad policy)."""


class BracketTooNarrow(DualmcError):
    """Scalar minimizer sits at a bracket endpoint; widen the bracket."""


class NonconvergedPolicyIteration(DualmcError):
    """Policy improvement did not converge within the iteration budget."""


class MalformedGridFile(DualmcError):
    """Quantizer grid file violates the expected format."""


class RegularityRejection(DualmcError):
    """Randomized market draws failed the regularity constraints."""


class ConfigError(DualmcError):
    """Experiment configuration is invalid; message names the field."""


class DualWealthMismatch(UserWarning):
    """Dual wealth and SDE-integrated wealth diverged along a trace."""
