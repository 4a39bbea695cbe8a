"""Market and preference primitives.

A market is a set of coefficient functions of the factor state (riskless
rate, drifts, volatilities) plus its dimensions.  Preferences are carried
through inverse marginal utilities and their convex duals, which is all the
dual bounds machinery ever evaluates.  All callables must accept numpy
arrays and broadcast: a factor state has shape (k,) or (batch, k), z / w / c
arguments are scalars or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    InvalidRiskAversion,
    NonmonotoneInverse,
    SingularMarket,
    WealthDomain,
)

# Relative singular-value cutoff below which sigma is treated as rank deficient.
EPS_RANK = 1e-10


@dataclass(frozen=True)
class MarketModel:
    """Diffusion market with n stocks, d Brownian drivers, k factor dimensions.

    r, mu, sigma, sigma_X, mu_X map a factor state x of shape (..., k) to
    arrays of shape (...,), (..., n), (..., n, d), (..., k, d), (..., k).
    Callables must be pure and safe to evaluate concurrently; instances are
    immutable after construction.  Set ``constant_coefficients`` when the
    maps do not depend on x so the path engine can evaluate them once.
    """

    n: int
    d: int
    k: int
    r: Callable
    mu: Callable
    sigma: Callable
    sigma_X: Callable
    mu_X: Callable
    constant_coefficients: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one stock (n >= 1)")
        if self.d < self.n:
            raise ValueError(f"market degenerate: d={self.d} < n={self.n}")
        if self.k < 0:
            raise ValueError("factor dimension k must be >= 0")


def constant_market(r: float, mu, sigma, k: int = 0) -> MarketModel:
    """Market with constant coefficients and an inert k-dimensional factor."""
    mu_c = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma_c = np.atleast_2d(np.asarray(sigma, dtype=float))
    n, d = sigma_c.shape
    if mu_c.shape != (n,):
        raise ValueError(f"mu has shape {mu_c.shape}, expected ({n},)")
    r_c = float(r)

    def _r(x):
        return np.full(np.shape(x)[:-1], r_c)

    def _mu(x):
        return np.broadcast_to(mu_c, np.shape(x)[:-1] + (n,))

    def _sigma(x):
        return np.broadcast_to(sigma_c, np.shape(x)[:-1] + (n, d))

    def _sigma_x(x):
        return np.zeros(np.shape(x)[:-1] + (k, d))

    def _mu_x(x):
        return np.zeros(np.shape(x)[:-1] + (k,))

    return MarketModel(n=n, d=d, k=k, r=_r, mu=_mu, sigma=_sigma,
                       sigma_X=_sigma_x, mu_X=_mu_x, constant_coefficients=True)


def kappa(model: MarketModel, x) -> np.ndarray:
    """Minimum-norm market price of risk solving sigma @ kappa = mu - r * 1.

    Computed through the SVD pseudo-inverse of sigma(x); works on a single
    state (k,) -> (d,) or a batch (..., k) -> (..., d).  Raises
    SingularMarket when the smallest singular value of sigma falls below
    EPS_RANK relative to the largest.
    """
    x = np.asarray(x, dtype=float)
    sig = np.asarray(model.sigma(x), dtype=float)
    rr = np.asarray(model.r(x), dtype=float)
    excess = np.asarray(model.mu(x), dtype=float) - rr[..., None]
    if not (np.all(np.isfinite(sig)) and np.all(np.isfinite(excess))):
        raise SingularMarket("non-finite market coefficients at evaluated state")
    u, s, vt = np.linalg.svd(sig, full_matrices=False)
    if np.any(s[..., -1] < EPS_RANK * s[..., 0]):
        raise SingularMarket(
            "volatility matrix numerically rank deficient "
            f"(min/max singular value {np.min(s[..., -1] / s[..., 0]):.3e})")
    y = np.einsum('...in,...i->...n', u, excess) / s
    return np.einsum('...nd,...n->...d', vt, y)


def excess_return_weights(model: MarketModel, x) -> np.ndarray:
    """(sigma sigma^T)^{-1} (mu - r 1) at state x, via the same SVD route."""
    x = np.asarray(x, dtype=float)
    sig = np.asarray(model.sigma(x), dtype=float)
    rr = np.asarray(model.r(x), dtype=float)
    excess = np.asarray(model.mu(x), dtype=float) - rr[..., None]
    u, s, vt = np.linalg.svd(sig, full_matrices=False)
    if np.any(s[..., -1] < EPS_RANK * s[..., 0]):
        raise SingularMarket("volatility matrix numerically rank deficient")
    y = np.einsum('...in,...i->...n', u, excess) / s ** 2
    return np.einsum('...in,...n->...i', u, y)


@dataclass(frozen=True)
class UtilitySpec:
    """Preferences expressed through inverse marginals and convex duals.

    inverse_marginal_running   I(t, z)      dual-optimal consumption rule
    inverse_marginal_terminal  I_phi(z)     inverse of terminal marginal
    dual_running               Utilde(t, z)
    dual_terminal              phitilde(z)
    dual_terminal_deriv        phitilde'(z) (= -I_phi by conjugacy)
    terminal_utility           phi(w)
    running_utility            U(t, c)
    growth_params              (alpha, A) with I(t, z) <= A (1 + z^-alpha)
    """

    inverse_marginal_running: Callable
    inverse_marginal_terminal: Callable
    dual_running: Callable
    dual_terminal: Callable
    dual_terminal_deriv: Callable
    terminal_utility: Callable
    running_utility: Callable
    growth_params: tuple[float, float]


def _crra_dual_coeff(R: float, weight: float) -> float:
    # coefficient of z^(1 - 1/R) in the convex dual of weight * u_R
    return R / (1.0 - R) * weight ** (1.0 / R)


def crra_utility_spec(R: float, rho: float = 0.0, a: float = 1.0,
                      terminal_weight: float = 1.0) -> UtilitySpec:
    """Discounted power utility a e^{-rho t} c^{1-R}/(1-R) with terminal
    weight A on wealth.  R must be positive and != 1 (log utility is out of
    scope).  Wealth must stay positive; terminal_utility raises WealthDomain
    otherwise instead of extending the power function.
    """
    if R <= 0.0 or R == 1.0:
        raise InvalidRiskAversion(f"R={R}: need R > 0 and R != 1")
    if a <= 0.0 or terminal_weight <= 0.0:
        raise InvalidRiskAversion("utility weights must be positive")
    A = float(terminal_weight)
    inv_R = 1.0 / R
    p = 1.0 - inv_R
    a_r = a ** inv_R
    A_r = A ** inv_R
    qa = _crra_dual_coeff(R, a)
    qA = _crra_dual_coeff(R, A)

    def inverse_marginal_running(t, z):
        return a_r * np.exp(-rho * np.asarray(t) * inv_R) * np.asarray(z) ** (-inv_R)

    def inverse_marginal_terminal(z):
        return A_r * np.asarray(z) ** (-inv_R)

    def dual_running(t, z):
        return qa * np.exp(-rho * np.asarray(t) * inv_R) * np.asarray(z) ** p

    def dual_terminal(z):
        return qA * np.asarray(z) ** p

    def dual_terminal_deriv(z):
        return -A_r * np.asarray(z) ** (-inv_R)

    def terminal_utility(w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0.0):
            raise WealthDomain(
                "power utility undefined at non-positive wealth "
                f"(min realized wealth {np.min(w):.6g})")
        return A * w ** (1.0 - R) / (1.0 - R)

    def running_utility(t, c):
        c = np.asarray(c, dtype=float)
        if np.any(c < 0.0):
            raise WealthDomain("consumption must be non-negative")
        disc = a * np.exp(-rho * np.asarray(t))
        with np.errstate(divide='ignore'):
            val = np.where(c > 0.0, c ** (1.0 - R), np.inf if R < 1 else -np.inf)
        out = disc * val / (1.0 - R)
        if R < 1:  # c=0 gives 0, not -inf, when the exponent is positive
            out = np.where(c > 0.0, out, 0.0)
        return out

    return UtilitySpec(
        inverse_marginal_running=inverse_marginal_running,
        inverse_marginal_terminal=inverse_marginal_terminal,
        dual_running=dual_running,
        dual_terminal=dual_terminal,
        dual_terminal_deriv=dual_terminal_deriv,
        terminal_utility=terminal_utility,
        running_utility=running_utility,
        growth_params=(inv_R, a_r),
    )


def mixture_crra_spec(R1: float, R2: float, a1: float, a2: float,
                      b1: float, b2: float, rho: float = 0.0) -> UtilitySpec:
    """Two-term power mixture: the inverse marginals are sums of two CRRA
    terms with risk aversions R1 > 1 > R2 > 0, so the agent behaves like a
    more risk averse power investor at low wealth and a less risk averse one
    at high wealth.

    Duals are the analytic sums of the corresponding CRRA dual terms
    (legitimate because the dual derivative is -I and I is additive); the
    primal utilities are recovered through Fenchel inversion of the inverse
    marginals (bisection), which tests exercise against a quadrature oracle.
    """
    if not (R1 > 1.0 > R2 > 0.0):
        raise InvalidRiskAversion(f"need R1 > 1 > R2 > 0, got R1={R1}, R2={R2}")
    weights = (a1, a2, b1, b2)
    if any(w < 0.0 for w in weights):
        raise NonmonotoneInverse("negative weights break monotonicity of I")
    if all(w == 0.0 for w in weights):
        raise NonmonotoneInverse("all utility weights are zero")

    iR1, iR2 = 1.0 / R1, 1.0 / R2
    p1, p2 = 1.0 - iR1, 1.0 - iR2
    a1_r, a2_r = a1 ** iR1, a2 ** iR2
    b1_r, b2_r = b1 ** iR1, b2 ** iR2
    q_a1, q_a2 = _crra_dual_coeff(R1, a1), _crra_dual_coeff(R2, a2)
    q_b1, q_b2 = _crra_dual_coeff(R1, b1), _crra_dual_coeff(R2, b2)

    def inverse_marginal_running(t, z):
        z = np.asarray(z)
        t = np.asarray(t)
        return (a1_r * np.exp(-rho * t * iR1) * z ** (-iR1)
                + a2_r * np.exp(-rho * t * iR2) * z ** (-iR2))

    def inverse_marginal_terminal(z):
        z = np.asarray(z)
        return b1_r * z ** (-iR1) + b2_r * z ** (-iR2)

    def dual_running(t, z):
        z = np.asarray(z)
        t = np.asarray(t)
        return (q_a1 * np.exp(-rho * t * iR1) * z ** p1
                + q_a2 * np.exp(-rho * t * iR2) * z ** p2)

    def dual_terminal(z):
        z = np.asarray(z)
        return q_b1 * z ** p1 + q_b2 * z ** p2

    def dual_terminal_deriv(z):
        return -inverse_marginal_terminal(z)

    def terminal_utility(w):
        if b1 == 0.0 and b2 == 0.0:
            return np.zeros(np.shape(w))
        z_star = invert_decreasing(inverse_marginal_terminal, w)
        return dual_terminal(z_star) + z_star * np.asarray(w)

    def running_utility(t, c):
        z_star = invert_decreasing(lambda z: inverse_marginal_running(t, z), c)
        return dual_running(t, z_star) + z_star * np.asarray(c)

    alpha = iR2 if (a2 > 0.0 or b2 > 0.0) else iR1
    growth_A = a1_r + a2_r

    return UtilitySpec(
        inverse_marginal_running=inverse_marginal_running,
        inverse_marginal_terminal=inverse_marginal_terminal,
        dual_running=dual_running,
        dual_terminal=dual_terminal,
        dual_terminal_deriv=dual_terminal_deriv,
        terminal_utility=terminal_utility,
        running_utility=running_utility,
        growth_params=(alpha, growth_A),
    )


def invert_decreasing(fn, y, lo: float = 1e-6, hi: float = 1e6,
                      expansions: int = 40, iters: int = 100) -> np.ndarray:
    """Solve fn(z) = y for a strictly decreasing fn on (0, inf).

    Vectorized geometric bisection; raises WealthDomain when y cannot be
    bracketed (target outside the range of fn).
    """
    y = np.asarray(y, dtype=float)
    lo_a = np.full(y.shape, lo, dtype=float)
    hi_a = np.full(y.shape, hi, dtype=float)
    for _ in range(expansions):
        need_lo = fn(lo_a) < y
        need_hi = fn(hi_a) > y
        if not (np.any(need_lo) or np.any(need_hi)):
            break
        lo_a = np.where(need_lo, lo_a * 1e-2, lo_a)
        hi_a = np.where(need_hi, hi_a * 1e2, hi_a)
    else:
        raise WealthDomain("target outside the range of the inverse marginal")
    for _ in range(iters):
        mid = np.sqrt(lo_a * hi_a)
        high_side = fn(mid) >= y
        lo_a = np.where(high_side, mid, lo_a)
        hi_a = np.where(high_side, hi_a, mid)
        if np.all(hi_a <= lo_a * (1.0 + 1e-15)):
            break
    return np.sqrt(lo_a * hi_a)


def zeta_for_wealth(utility: UtilitySpec, w: float) -> float:
    """z with I_phi(z) = w; the natural center for dual-start brackets."""
    return float(invert_decreasing(utility.inverse_marginal_terminal,
                                   np.asarray(float(w))))
