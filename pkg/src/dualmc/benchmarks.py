"""Independent benchmark solvers used as oracles for the Monte Carlo method.

Three routes that do not share code with the path estimators: the
constant-coefficient power-utility closed form, a one-dimensional
policy-improvement finite-difference solver for the dynamic programming
equation (Crank-Nicolson in time, tridiagonal in wealth), and a
deterministic evaluator that replaces path expectations by a weighted sum
over a Gaussian codebook in Karhunen-Loeve coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidRiskAversion,
    MalformedGridFile,
    NonconvergedPolicyIteration,
)
from .market_model import UtilitySpec

PDE_TOL = 1e-8
PDE_MAX_ITERS = 200


# ---------------------------------------------------------------------------
# closed form for constant coefficients and power utility
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MertonParams:
    r: float
    mu: np.ndarray          # (n,)
    sigma: np.ndarray       # (n, d)
    rho: float
    R: float
    a: float                # running utility weight
    A: float                # terminal utility weight
    T: float


@dataclass(frozen=True)
class MertonSolution:
    """Closed-form solution objects: V(t, w) = f(t) w^(1-R)/(1-R), constant
    investment proportions pi_M and consumption rate gamma(t)."""

    params: MertonParams
    f: Callable[[np.ndarray], np.ndarray]
    pi_M: np.ndarray
    gamma: Callable[[np.ndarray], np.ndarray]
    b: float
    kappa_sq: float

    def value(self, t, w):
        R = self.params.R
        return self.f(t) * np.asarray(w) ** (1.0 - R) / (1.0 - R)

    def value_w(self, t, w):
        return self.f(t) * np.asarray(w) ** (-self.params.R)

    def dual_value(self, t, zeta):
        """g(t, zeta) implied by V = f u and conjugacy."""
        R = self.params.R
        return (R / (1.0 - R)) * self.f(t) ** (1.0 / R) \
            * np.asarray(zeta) ** (1.0 - 1.0 / R)

    def zeta0(self, w0: float) -> float:
        return float(self.f(0.0) * w0 ** (-self.params.R))


def merton_closed_form(params: MertonParams) -> MertonSolution:
    R = params.R
    if R <= 0.0 or R == 1.0:
        raise InvalidRiskAversion(f"R={R}: need R > 0 and R != 1")
    mu = np.atleast_1d(np.asarray(params.mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(params.sigma, dtype=float))
    excess = mu - params.r
    gram = sigma @ sigma.T
    weights = np.linalg.solve(gram, excess)
    kappa_sq = float(excess @ weights)
    pi_M = weights / R
    b = (R - 1.0) * (params.r + kappa_sq / (2.0 * R)) / R
    x = b + params.rho / R
    a_r = params.a ** (1.0 / R)
    A_r = params.A ** (1.0 / R)
    T = params.T

    def F(t):
        t = np.asarray(t, dtype=float)
        tau = T - t
        if abs(x) < 1e-14:
            annuity = tau
        else:
            annuity = -np.expm1(-x * tau) / x
        return A_r * np.exp(-b * tau) + a_r * np.exp(-params.rho * t / R) * annuity

    def f(t):
        return F(t) ** R

    def gamma(t):
        t = np.asarray(t, dtype=float)
        return a_r * np.exp(-params.rho * t / R) / F(t)

    return MertonSolution(params=params, f=f, pi_M=pi_M, gamma=gamma, b=b,
                          kappa_sq=kappa_sq)


# ---------------------------------------------------------------------------
# policy improvement on the 1-D dynamic programming equation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PdeSolution:
    w_grid: np.ndarray
    t_grid: np.ndarray
    V: np.ndarray             # (n_times, n_nodes)
    c_policy: np.ndarray
    theta_policy: np.ndarray
    iterations: int
    improvement_floor: float  # min nodewise improvement over all iterations


def default_wealth_grid(w0: float, nodes: int = 400, span: float = 50.0) -> np.ndarray:
    return np.geomspace(w0 / span, w0 * span, nodes)


def _derivatives(V: np.ndarray, dp: np.ndarray, dm: np.ndarray):
    """Nonuniform central first and second differences on interior nodes."""
    v_w = (V[2:] - V[:-2]) / (dp + dm)
    v_ww = 2.0 * (dm * V[2:] - (dp + dm) * V[1:-1] + dp * V[:-2]) \
        / (dp * dm * (dp + dm))
    return v_w, v_ww


def _policy_objective(w, dp, dm, r, mu_excess, sigma, c, theta, u, V):
    """Discrete Hamiltonian L(c, theta) V + U(t, c) on interior nodes,
    evaluated with exactly the operator the linear solve will use."""
    lo, di, up = _operator_coeffs(w, dp, dm, r, mu_excess, sigma, c, theta)
    return lo * V[:-2] + di * V[1:-1] + up * V[2:] + u


RA_FLOOR = 0.01   # minimal implied local risk aversion for a control switch


def _improve(utility: UtilitySpec, t: float, V: np.ndarray, w: np.ndarray,
             dp: np.ndarray, dm: np.ndarray, r: float, mu_excess: float,
             sigma: float, theta_cap: float, incumbent,
             ra_floor: float = RA_FLOOR):
    """Improve-or-keep controls given a value iterate.

    Candidate controls come from the central and the two one-sided discrete
    derivatives (c = I(t, V_w), theta = -excess V_w / (sigma^2 V_ww));
    U(t, c) uses the conjugacy identity U(t, I(t, z)) = Utilde(t, z) + z
    I(t, z), so no root finding is needed.  A node switches control only
    when a candidate strictly increases the discrete Hamiltonian evaluated
    with the same upwinded operator the solve uses; everything else keeps
    the incumbent, so every sweep is monotone.  Candidates are suppressed
    where the curvature estimate implies a local risk aversion below
    ``ra_floor``: near-flat artifacts (boundary layers, stencil switches)
    would otherwise admit arbitrarily large positions whose discrete
    Hamiltonian pumps the value without bound.
    """
    span = dp + dm
    d0 = (V[2:] - V[:-2]) / span
    d_up = (V[2:] - V[1:-1]) / dp
    d_dn = (V[1:-1] - V[:-2]) / dm
    curv = 2.0 * (dm * V[2:] - span * V[1:-1] + dp * V[:-2]) / (dp * dm * span)
    w_in = w[1:-1]

    best_c, best_th, best_u = (arr.copy() for arr in incumbent)
    best_j = _policy_objective(w, dp, dm, r, mu_excess, sigma,
                               best_c, best_th, best_u, V)

    def consider(c, theta, u, usable):
        nonlocal best_c, best_th, best_u, best_j
        cand_j = np.where(
            usable,
            _policy_objective(w, dp, dm, r, mu_excess, sigma, c, theta, u, V),
            -np.inf)
        switch = cand_j > best_j + 1e-12 * (1.0 + np.abs(best_j))
        best_c = np.where(switch, c, best_c)
        best_th = np.where(switch, theta, best_th)
        best_u = np.where(switch, u, best_u)
        best_j = np.where(switch, cand_j, best_j)

    safe_curv = np.where(curv < 0.0, curv, -1.0)
    for deriv in (d0, d_up, d_dn):
        usable = (deriv > 0.0) & (curv * w_in < -ra_floor * deriv)
        z = np.where(deriv > 0.0, deriv, 1.0)
        c = np.asarray(utility.inverse_marginal_running(t, z), dtype=float)
        u = np.asarray(utility.dual_running(t, z), dtype=float) + z * c
        with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
            theta = -mu_excess * z / (sigma * sigma * safe_curv)
        theta = np.clip(theta, -theta_cap, theta_cap)
        consider(c, theta, u, usable)

    # zero-drift (kink) optimum: with one-sided convection the discrete
    # Hamiltonian has a concave kink at beta = rw + theta excess - c = 0
    # whose optimum is tied to a marginal z in the subgradient range
    # [d_up, d_dn]; solving I(t, z) + z excess^2/(sigma^2 curv) = r w by
    # bisection lets a sweep jump straight across the kink instead of
    # crawling through it node by node.
    lo = np.minimum(d_up, d_dn)
    hi = np.maximum(d_up, d_dn)
    ok = (lo > 0.0) & (curv * w_in < -ra_floor * lo)
    lo = np.where(ok, lo, 1.0)
    hi = np.where(ok, hi, 2.0)
    coeff = mu_excess * mu_excess / (sigma * sigma * safe_curv)

    def drift_gap(z):
        return (np.asarray(utility.inverse_marginal_running(t, z), dtype=float)
                + z * coeff - r * w_in)

    bracketed = ok & (drift_gap(lo) >= 0.0) & (drift_gap(hi) <= 0.0)
    if np.any(bracketed):
        z_lo, z_hi = lo.copy(), hi.copy()
        for _ in range(60):
            mid = 0.5 * (z_lo + z_hi)
            high = drift_gap(mid) >= 0.0
            z_lo = np.where(high, mid, z_lo)
            z_hi = np.where(high, z_hi, mid)
        z = 0.5 * (z_lo + z_hi)
        c = np.asarray(utility.inverse_marginal_running(t, z), dtype=float)
        u = np.asarray(utility.dual_running(t, z), dtype=float) + z * c
        theta = np.clip(-z * mu_excess / (sigma * sigma * safe_curv),
                        -theta_cap, theta_cap)
        consider(c, theta, u, bracketed)

    return best_c, best_th, best_u


def _base_controls(utility: UtilitySpec, t: float, V: np.ndarray,
                   dp: np.ndarray, dm: np.ndarray):
    """Safe starting controls at the terminal level: zero holdings and the
    consumption implied by any positive discrete slope."""
    span = dp + dm
    d0 = (V[2:] - V[:-2]) / span
    z = np.where(d0 > 0.0, d0, 1.0)
    c = np.asarray(utility.inverse_marginal_running(t, z), dtype=float)
    u = np.asarray(utility.dual_running(t, z), dtype=float) + z * c
    return c, np.zeros_like(c), u


def _operator_coeffs(w: np.ndarray, dp: np.ndarray, dm: np.ndarray, r: float,
                     mu_excess: float, sigma: float, c: np.ndarray,
                     theta: np.ndarray):
    """Tridiagonal coefficients of the drift-diffusion generator on interior
    nodes, by exponential fitting (exact for locally frozen drift and
    diffusion).

    The fitted coefficients reduce to central differences where diffusion
    dominates and to one-sided differences in the pure-convection limit,
    and the off-diagonal entries are non-negative for every control, which
    keeps the implicit matrix an M-matrix.  A hard central/one-sided switch
    would put a kink in the discrete Hamiltonian exactly at cell Peclet 1,
    where policy iteration then stalls on a traveling front.
    """
    beta = r * w[1:-1] + theta * mu_excess - c
    diff = 0.5 * theta * theta * sigma * sigma
    span = dp + dm

    # diffusion-dominated nodes: plain central differences (the fitted
    # formula is identical there but suffers cancellation)
    central = np.abs(beta) * span <= 1e-6 * diff
    pure_conv = diff <= 1e-300
    general = ~(central | pure_conv)

    up = np.empty_like(beta)
    lo = np.empty_like(beta)

    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        rho = np.where(general, beta / np.where(diff > 0.0, diff, 1.0), 0.0)
        e_up = -np.expm1(np.clip(-rho * dp, -700.0, 700.0))
        e_dn = np.expm1(np.clip(rho * dm, -700.0, 700.0))
        ratio = np.where(general, e_up / np.where(e_dn != 0.0, e_dn, 1.0), 0.0)
        denom = dp - dm * ratio
        up_g = beta / np.where(general, denom, 1.0)
        lo_g = up_g * ratio

    up[general] = up_g[general]
    lo[general] = lo_g[general]
    up[central] = (beta / span + 2.0 * diff / (dp * span))[central]
    lo[central] = (-beta / span + 2.0 * diff / (dm * span))[central]
    up[pure_conv] = (np.maximum(beta, 0.0) / dp)[pure_conv]
    lo[pure_conv] = (-np.minimum(beta, 0.0) / dm)[pure_conv]
    di = -(up + lo)
    return lo, di, up


def _thomas(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray,
            rhs: np.ndarray) -> np.ndarray:
    """Tridiagonal solve; lower[0] and upper[-1] are ignored."""
    n = diag.size
    cp = np.empty(n)
    dp_ = np.empty(n)
    cp[0] = upper[0] / diag[0]
    dp_[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / den
        dp_[i] = (rhs[i] - lower[i] * dp_[i - 1]) / den
    x = np.empty(n)
    x[-1] = dp_[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp_[i] - cp[i] * x[i + 1]
    return x


def policy_improvement_solve(market_1d, utility: UtilitySpec,
                             w_grid: np.ndarray, t_grid: np.ndarray,
                             boundary_lo: Callable, boundary_hi: Callable,
                             cn_weight: float = 0.5, tol: float = PDE_TOL,
                             max_iters: int = PDE_MAX_ITERS,
                             theta_cap: float = 1e6) -> PdeSolution:
    """Backward-in-time policy improvement with a Crank-Nicolson average.

    market_1d is (r, mu, sigma).  At each time level the frozen-control
    linear system is solved by the Thomas algorithm, controls are improved
    from the newest value iterate, and the pair is repeated until the value
    update falls below ``tol`` in max norm.  Boundary rows are pinned to the
    supplied functions of time (the two power-utility solutions the value
    resembles at the ends of the grid).
    """
    r, mu, sigma = (float(v) for v in market_1d)
    mu_excess = mu - r
    w = np.asarray(w_grid, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    if w.ndim != 1 or w.size < 10 or np.any(np.diff(w) <= 0):
        raise ValueError("wealth grid must be increasing with >= 10 nodes")
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    n_nodes = w.size
    n_times = t.size
    dp = w[2:] - w[1:-1]
    dm = w[1:-1] - w[:-2]
    alpha = float(cn_weight)

    V = np.empty((n_times, n_nodes))
    c_pol = np.zeros((n_times, n_nodes))
    th_pol = np.zeros((n_times, n_nodes))

    V[-1] = np.asarray(utility.terminal_utility(w), dtype=float)
    V[-1, 0] = boundary_lo(t[-1])
    V[-1, -1] = boundary_hi(t[-1])
    base = _base_controls(utility, t[-1], V[-1], dp, dm)
    c_prev, th_prev, u_prev = _improve(utility, t[-1], V[-1], w, dp, dm, r,
                                       mu_excess, sigma, theta_cap, base)
    c_pol[-1, 1:-1], th_pol[-1, 1:-1] = c_prev, th_prev
    c_pol[-1, 0], c_pol[-1, -1] = c_prev[0], c_prev[-1]
    th_pol[-1, 0], th_pol[-1, -1] = th_prev[0], th_prev[-1]

    total_iters = 0
    floor = np.inf

    for n in range(n_times - 2, -1, -1):
        dt = t[n + 1] - t[n]
        v_next = V[n + 1]
        # explicit Crank-Nicolson half with the converged next-level controls
        lo_x, di_x, up_x = _operator_coeffs(w, dp, dm, r, mu_excess, sigma,
                                            c_prev, th_prev)
        explicit = (lo_x * v_next[:-2] + di_x * v_next[1:-1] + up_x * v_next[2:]
                    + u_prev)

        # initial controls at this level: improve on the next value at t_n;
        # the incumbent utility values are rebased to t_n once per level
        u_rebased = np.asarray(utility.running_utility(t[n], c_prev), dtype=float)
        c_i, th_i, u_i = _improve(utility, t[n], v_next, w, dp, dm, r,
                                  mu_excess, sigma, theta_cap,
                                  (c_prev, th_prev, u_rebased))
        v_curr = v_next.copy()
        converged = False
        for sweep in range(max_iters):
            total_iters += 1
            lo_c, di_c, up_c = _operator_coeffs(w, dp, dm, r, mu_excess, sigma,
                                                c_i, th_i)
            lower = np.zeros(n_nodes)
            diag = np.empty(n_nodes)
            upper = np.zeros(n_nodes)
            rhs = np.empty(n_nodes)
            diag[0] = diag[-1] = 1.0
            rhs[0] = boundary_lo(t[n])
            rhs[-1] = boundary_hi(t[n])
            lower[1:-1] = -alpha * lo_c
            diag[1:-1] = 1.0 / dt - alpha * di_c
            upper[1:-1] = -alpha * up_c
            rhs[1:-1] = v_next[1:-1] / dt + alpha * u_i \
                + (1.0 - alpha) * explicit
            v_new = _thomas(lower, diag, upper, rhs)
            delta = v_new - v_curr
            if sweep > 0:  # first sweep compares against the next time level
                floor = min(floor, float(np.min(delta[1:-1])))
            resid = float(np.max(np.abs(delta)))
            v_curr = v_new
            c_i, th_i, u_i = _improve(utility, t[n], v_curr, w, dp, dm, r,
                                      mu_excess, sigma, theta_cap,
                                      (c_i, th_i, u_i))
            if resid <= tol:
                converged = True
                break
        if not converged:
            raise NonconvergedPolicyIteration(
                f"policy improvement stalled at t={t[n]:.6g}; "
                f"residual {resid:.3e} after {max_iters} iterations")
        V[n] = v_curr
        c_prev, th_prev, u_prev = c_i, th_i, u_i
        c_pol[n, 1:-1], th_pol[n, 1:-1] = c_i, th_i
        c_pol[n, 0], c_pol[n, -1] = c_i[0], c_i[-1]
        th_pol[n, 0], th_pol[n, -1] = th_i[0], th_i[-1]

    return PdeSolution(w_grid=w, t_grid=t, V=V, c_policy=c_pol,
                       theta_policy=th_pol, iterations=total_iters,
                       improvement_floor=floor)


def mixture_hjb_solution(market_1d, R1, R2, a1, a2, b1, b2, rho, T,
                         utility: Optional[UtilitySpec] = None,
                         w0: float = 2.0, nodes: int = 400, span: float = 50.0,
                         n_times: int = 100, **kwargs) -> PdeSolution:
    """Policy-improvement solve for the two-term power mixture, with the
    boundary rows pinned to the two limiting power-utility closed forms."""
    from .market_model import mixture_crra_spec

    r, mu, sigma = (float(v) for v in market_1d)
    if utility is None:
        utility = mixture_crra_spec(R1=R1, R2=R2, a1=a1, a2=a2, b1=b1, b2=b2,
                                    rho=rho)
    w_grid = default_wealth_grid(w0, nodes=nodes, span=span)
    t_grid = np.linspace(0.0, T, n_times + 1)

    def power_boundary(R, a_w, b_w, w_node):
        if a_w == 0.0 and b_w == 0.0:
            return lambda t: 0.0
        sol = merton_closed_form(MertonParams(
            r=r, mu=np.array([mu]), sigma=np.array([[sigma]]), rho=rho, R=R,
            a=a_w, A=b_w, T=T))
        return lambda t: float(sol.value(t, w_node))

    boundary_lo = power_boundary(R1, a1, b1, w_grid[0])
    boundary_hi = power_boundary(R2, a2, b2, w_grid[-1])
    return policy_improvement_solve((r, mu, sigma), utility, w_grid, t_grid,
                                    boundary_lo, boundary_hi, **kwargs)


def pde_interp(sol: PdeSolution, t: float, w: float,
               what: str = "V") -> float:
    """Linear interpolation in wealth at the nearest time level."""
    ti = int(np.argmin(np.abs(sol.t_grid - t)))
    table = {"V": sol.V, "c": sol.c_policy, "theta": sol.theta_policy}[what]
    return float(np.interp(w, sol.w_grid, table[ti]))


def pde_to_csv(sol: PdeSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "w", "V", "c", "theta"])
        for i, t in enumerate(sol.t_grid):
            for j, w in enumerate(sol.w_grid):
                writer.writerow([repr(float(t)), repr(float(w)),
                                 repr(float(sol.V[i, j])),
                                 repr(float(sol.c_policy[i, j])),
                                 repr(float(sol.theta_policy[i, j]))])


# ---------------------------------------------------------------------------
# Karhunen-Loeve basis and Gaussian codebook quantization
# ---------------------------------------------------------------------------

def kl_basis(T: float, dim: int):
    """Sine basis and eigenvalue sequence of the Brownian covariance on [0, T].

    Returns (e, lam): e(t) maps times of shape (...,) to basis values of
    shape (..., dim); lam is the (dim,) array of mode variances.
    """
    if dim < 1 or T <= 0.0:
        raise ValueError("need dim >= 1 and T > 0")
    n = np.arange(1, dim + 1)
    freq = np.pi * (n - 0.5) / T
    lam = (T / (np.pi * (n - 0.5))) ** 2

    def e(t):
        t = np.asarray(t, dtype=float)
        return np.sqrt(2.0 / T) * np.sin(t[..., None] * freq)

    return e, lam


@dataclass(frozen=True)
class Quantizer:
    """Weighted codebook for the product Gaussian N(0, diag(lam))."""

    dim: int
    n_points: int
    points: np.ndarray   # (n_points, dim)
    weights: np.ndarray  # (n_points,)
    source: str          # "loaded-file" or "lloyd-generated"


def _nearest_index(points: np.ndarray, X: np.ndarray,
                   sq_dist_out: Optional[np.ndarray] = None) -> np.ndarray:
    """Chunked nearest-codeword assignment for samples X."""
    n = points.shape[0]
    norms = np.einsum('nd,nd->n', points, points)
    rows = max(256, int(2.5e7 / max(n, 1)))
    idx = np.empty(X.shape[0], dtype=np.int64)
    for lo in range(0, X.shape[0], rows):
        hi = min(lo + rows, X.shape[0])
        d2 = norms[None, :] - 2.0 * (X[lo:hi] @ points.T)
        arg = np.argmin(d2, axis=1)
        idx[lo:hi] = arg
        if sq_dist_out is not None:
            x_sq = np.einsum('md,md->m', X[lo:hi], X[lo:hi])
            sq_dist_out[lo:hi] = x_sq + d2[np.arange(hi - lo), arg]
    return idx


def quantizer_build(dim: int, n_points: int, seed: int, T: float = 1.0,
                    variances=None, fit_samples: int = 200_000,
                    weight_samples: int = 1_000_000, tol: float = 1e-6,
                    max_iter: int = 500) -> Quantizer:
    """Fixed-point (Lloyd) codebook for N(0, diag(lam)) with cell-frequency
    weights.

    Centroids iterate on a fit sample until the largest centroid movement
    drops below ``tol`` (or ``max_iter``); weights are then estimated by
    cell counts over an independent sample of ``weight_samples`` draws.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if variances is None:
        _, variances = kl_basis(T, dim)
    scale = np.sqrt(np.asarray(variances, dtype=float))
    if scale.shape != (dim,):
        raise ValueError("variances must have length dim")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    fit = rng.standard_normal((int(fit_samples), dim)) * scale
    points = fit[rng.choice(fit.shape[0], n_points, replace=False)].copy()

    for _ in range(max_iter):
        assign = _nearest_index(points, fit)
        counts = np.bincount(assign, minlength=n_points)
        new_points = points.copy()
        occupied = counts > 0
        for d_i in range(dim):
            sums = np.bincount(assign, weights=fit[:, d_i], minlength=n_points)
            new_points[occupied, d_i] = sums[occupied] / counts[occupied]
        movement = float(np.max(np.linalg.norm(new_points - points, axis=1)))
        points = new_points
        if movement < tol:
            break

    counts = np.zeros(n_points, dtype=np.int64)
    block = 200_000
    remaining = int(weight_samples)
    while remaining > 0:
        take = min(block, remaining)
        draws = rng.standard_normal((take, dim)) * scale
        counts += np.bincount(_nearest_index(points, draws), minlength=n_points)
        remaining -= take
    weights = counts / float(weight_samples)
    return Quantizer(dim=dim, n_points=n_points, points=points,
                     weights=weights, source="lloyd-generated")


def quantizer_distortion(q: Quantizer, samples: np.ndarray) -> float:
    """Mean squared distance from samples to their nearest codeword."""
    d2 = np.empty(samples.shape[0])
    _nearest_index(q.points, samples, sq_dist_out=d2)
    return float(np.mean(np.maximum(d2, 0.0)))


def quantizer_save(q: Quantizer, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# gaussian codebook ({q.source})\n")
        fh.write(f"{q.n_points} {q.dim}\n")
        for p, w in zip(q.points, q.weights):
            coords = " ".join(f"{v:.17g}" for v in p)
            fh.write(f"{coords} {w:.17g}\n")


def quantizer_load(path) -> Quantizer:
    """Parse a codebook file: 'n d' header then n rows of d coordinates and
    a weight; '#' lines are comments.  Raises MalformedGridFile with the
    offending line number."""
    rows = []
    header = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if header is None:
                if len(parts) != 2:
                    raise MalformedGridFile(
                        f"line {lineno}: expected header 'n d'")
                try:
                    header = (int(parts[0]), int(parts[1]))
                except ValueError:
                    raise MalformedGridFile(
                        f"line {lineno}: header entries must be integers")
                if header[0] < 1 or header[1] < 1:
                    raise MalformedGridFile(
                        f"line {lineno}: header entries must be positive")
                continue
            if len(parts) != header[1] + 1:
                raise MalformedGridFile(
                    f"line {lineno}: expected {header[1] + 1} numbers, "
                    f"got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise MalformedGridFile(f"line {lineno}: non-numeric entry")
            if not all(np.isfinite(vals)):
                raise MalformedGridFile(f"line {lineno}: non-finite entry")
            if vals[-1] < 0.0:
                raise MalformedGridFile(f"line {lineno}: negative weight")
            rows.append((vals[:-1], vals[-1], lineno))
    if header is None:
        raise MalformedGridFile("line 1: empty file")
    n, d = header
    if len(rows) != n:
        raise MalformedGridFile(
            f"line {rows[-1][2] if rows else 2}: expected {n} rows, "
            f"got {len(rows)}")
    points = np.array([r[0] for r in rows])
    weights = np.array([r[1] for r in rows])
    if abs(float(np.sum(weights)) - 1.0) > 1e-12:
        raise MalformedGridFile(
            f"line {rows[-1][2]}: weights sum to {np.sum(weights)!r}, not 1")
    return Quantizer(dim=d, n_points=n, points=points, weights=weights,
                     source="loaded-file")


def quantized_expectation(q: Quantizer, basis_e, f, F, t_grid) -> float:
    """Deterministic stand-in for E[int_0^T f(t, W_t) dt + F(W_T)].

    The Brownian path is W_t = x . e(t) per codeword x; the time integral
    uses the left-endpoint rule on t_grid.  f(t, w_values) and F(w_values)
    must be vectorized over the codewords; pass f=None or F=None to drop a
    term.
    """
    t = np.asarray(t_grid, dtype=float)
    W = q.points @ basis_e(t).T      # (n_points, len(t))
    total = np.zeros(q.n_points)
    if f is not None:
        dts = np.diff(t)
        for j in range(t.size - 1):
            total += np.asarray(f(t[j], W[:, j]), dtype=float) * dts[j]
    if F is not None:
        total += np.asarray(F(W[:, -1]), dtype=float)
    return float(q.weights @ total)


def quantized_dual_value(q: Quantizer, utility: UtilitySpec, kappa: float,
                         r: float, T: float, zeta: float, t0: float = 0.0,
                         n_steps: int = 200) -> float:
    """Dual value g(t0, zeta) in a complete one-asset constant market.

    Uses the closed-form state-price density as a functional of the path
    and evaluates it on the codebook.  A codebook built for horizon T is
    reused for the remaining horizon tau = T - t0 through Brownian scaling.
    """
    tau = T - t0
    if tau < 0.0:
        raise ValueError("t0 beyond the horizon")
    if tau == 0.0:
        return float(utility.dual_terminal(np.asarray(zeta)))
    _, lam = kl_basis(T, q.dim)
    e_T, _ = kl_basis(T, q.dim)
    # B_u = sqrt(tau/T) W_{u T / tau} matches the remaining-horizon law
    u_grid = np.linspace(0.0, tau, n_steps + 1)
    s_grid = u_grid * (T / tau)
    scale = np.sqrt(tau / T)
    W = scale * (q.points @ e_T(s_grid).T)    # (n_points, n_steps+1)
    drift = (r + 0.5 * kappa * kappa) * u_grid
    zpaths = zeta * np.exp(-kappa * W - drift[None, :])
    dts = np.diff(u_grid)
    running = np.zeros(q.n_points)
    for j in range(n_steps):
        running += np.asarray(
            utility.dual_running(t0 + u_grid[j], zpaths[:, j]), dtype=float) * dts[j]
    terminal = np.asarray(utility.dual_terminal(zpaths[:, -1]), dtype=float)
    return float(q.weights @ (running + terminal))
