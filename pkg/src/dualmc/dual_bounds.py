"""Monte Carlo two-sided bounds on the investment-consumption value.

estimate_g evaluates the dual value (expected discounted dual running
utility plus terminal dual), estimate_h the duality gap of an explicit
portfolio rule, find_zeta0 locates the optimal dual starting point by
golden-section search under common random numbers, and bounds() assembles
the sandwich

    g + w zeta0 - h  <=  V(t, w, x)  <=  g + w zeta0

together with the efficiency measure alpha = h / (zeta0 w), the fraction of
initial wealth the gap is worth.

Common random numbers are used everywhere a function of zeta is compared,
differentiated or optimized at fixed (t, x): the same seed reproduces the
same increments, which turns noisy comparisons into smooth ones.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil, log, sqrt
from typing import Callable, Optional

import numpy as np

from .errors import BracketTooNarrow, WealthDomain
from .market_model import MarketModel, UtilitySpec, zeta_for_wealth
from .path_engine import (
    SIGMA_Z_MAX,
    StartState,
    TimeGrid,
    derive_seed,
    evolve,
    sample_increments,
    sigma_z_raw,
)

ZETA_TOL = 1e-4          # relative bracket width at which the search stops
REL_STEP = 1e-3          # relative spacing for finite-difference partials
EPS_CONVEX = 1e-12       # positive floor on the estimated curvature of g
CHUNK = 4096             # fixed path chunk size (worker-count independent)
_INV_PHI = (sqrt(5.0) - 1.0) / 2.0
_INV_PHI2 = (3.0 - sqrt(5.0)) / 2.0


@dataclass(frozen=True)
class Problem:
    """Market, preferences and time grid evaluated together."""

    model: MarketModel
    utility: UtilitySpec
    grid: TimeGrid


@dataclass(frozen=True)
class DualEstimate:
    """Monte Carlo estimate with its standard error."""

    value: float
    std_error: float
    M: int
    N: int
    measure: str


@dataclass(frozen=True)
class GPartials:
    """Value and first two zeta-derivatives of g at one point."""

    g: float
    g_zeta: float
    g_zeta_zeta: float
    g_est: DualEstimate


@dataclass(frozen=True)
class ZetaSearch:
    """Result of the golden-section search over the dual start."""

    zeta0: float
    value: float                 # upper bound g(zeta0) + w * zeta0
    g_est: DualEstimate
    bracket: tuple[float, float]
    evaluations: int


@dataclass(frozen=True)
class BoundsReport:
    """Two-sided value bounds at one evaluation point."""

    zeta0: float
    lower: float
    upper: float
    alpha: float
    g_est: DualEstimate
    h_est: DualEstimate


def sigma_Z(kappa_val, zeta, utility: UtilitySpec,
            cap: float = SIGMA_Z_MAX) -> np.ndarray:
    """Importance-sampling volatility -kappa zeta phitilde'(zeta)/phitilde(zeta).

    Norm-capped at ``cap``; returns the zero vector where the dual is within
    numerical reach of a sign change (importance sampling disabled there).
    """
    return sigma_z_raw(kappa_val, zeta, utility, cap=cap)


def golden_section(f: Callable[[float], float], a: float, b: float,
                   tol: float) -> tuple[float, float, int]:
    """Minimize a unimodal f on [a, b]; returns (x_min, f_min, n_evals).

    Shrinks the interval until its width is at most ``tol`` and returns the
    best interior point probed.
    """
    a, b = (a, b) if a <= b else (b, a)
    h = b - a
    if h <= tol:
        x = 0.5 * (a + b)
        return x, f(x), 1
    n = int(ceil(log(tol / h) / log(_INV_PHI)))
    c = a + _INV_PHI2 * h
    d = a + _INV_PHI * h
    yc, yd = f(c), f(d)
    evals = 2
    for _ in range(n - 1):
        if yc < yd:
            b, d, yd = d, c, yc
            h *= _INV_PHI
            c = a + _INV_PHI2 * h
            yc = f(c)
        else:
            a, c, yc = c, d, yd
            h *= _INV_PHI
            d = a + _INV_PHI * h
            yd = f(d)
        evals += 1
    return (c, yc, evals) if yc < yd else (d, yd, evals)


def _chunks(M: int, chunk: int = CHUNK):
    return [(lo, min(lo + chunk, M)) for lo in range(0, M, chunk)]


def _sample_block(grid: TimeGrid, d: int, seed: int, lo: int, hi: int,
                  out: np.ndarray) -> None:
    for i in range(lo, hi):
        out[i] = sample_increments(grid, d, seed, i)


def _gather_increments(grid: TimeGrid, d: int, seed: int, M: int,
                       workers: int = 1) -> np.ndarray:
    out = np.empty((M, grid.n_steps, d))
    blocks = _chunks(M)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: _sample_block(grid, d, seed, *b, out), blocks))
    else:
        for b in blocks:
            _sample_block(grid, d, seed, *b, out)
    return out


def _map_chunks(fn, increments: np.ndarray, M: int, workers: int) -> np.ndarray:
    """Apply fn(inc_chunk) -> per-path values; fixed chunking keeps the
    assembled array identical for every worker count."""
    out = np.empty(M)
    blocks = _chunks(M)

    def run(block):
        lo, hi = block
        out[lo:hi] = fn(increments[lo:hi])

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, blocks))
    else:
        for b in blocks:
            run(b)
    return out


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    m = float(np.mean(values))
    if values.size < 2:
        return m, 0.0
    return m, float(np.std(values, ddof=1) / np.sqrt(values.size))


def _g_path_values(problem: Problem, t_index: int, zeta: float, x,
                   increments: np.ndarray, use_is: bool) -> np.ndarray:
    """Per-path discretized dual functional sum_k Z_k Utilde(t_k, zeta_k) dt_k
    + Z_N phitilde(zeta_N), left-endpoint rule from t_index."""
    grid = problem.grid
    utility = problem.utility
    N = grid.n_steps
    if t_index == N:
        base = float(utility.dual_terminal(np.asarray(zeta)))
        return np.full(increments.shape[0], base)
    start = StartState(t_index, x, zeta=zeta)
    bundle = evolve(problem.model, utility, grid, start, increments,
                    measure="Q" if use_is else "P")
    ts = grid.t[t_index:N]
    zs = bundle.zeta[:, t_index:N]
    Zs = bundle.Z[:, t_index:N]
    dts = grid.dt[t_index:N]
    running = np.sum(Zs * utility.dual_running(ts[None, :], zs) * dts[None, :], axis=1)
    terminal = bundle.Z[:, N] * utility.dual_terminal(bundle.zeta[:, N])
    return running + terminal


def estimate_g(problem: Problem, t_index: int, zeta: float, x, M: int,
               seed: int, use_is: bool = True, workers: int = 1) -> DualEstimate:
    """Monte Carlo estimate of the dual value g(t_index, zeta, x)."""
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    grid = problem.grid
    if t_index == grid.n_steps:  # empty integral: exact terminal dual
        return DualEstimate(
            value=float(problem.utility.dual_terminal(np.asarray(zeta))),
            std_error=0.0, M=M, N=0, measure="Q" if use_is else "P")
    inc = _gather_increments(grid, problem.model.d, seed, M, workers)
    vals = _map_chunks(
        lambda block: _g_path_values(problem, t_index, zeta, x, block, use_is),
        inc, M, workers)
    value, se = _mean_se(vals)
    return DualEstimate(value=value, std_error=se, M=M,
                        N=grid.n_steps - t_index,
                        measure="Q" if use_is else "P")


def _h_terminal_values(utility: UtilitySpec, zeta_T: np.ndarray,
                       w_T: np.ndarray, Z_T: np.ndarray) -> np.ndarray:
    """Per-path gap Z_T (phitilde(zeta_T) - phi(w_T) + zeta_T w_T).

    The bracket is a Fenchel-Young slack, so it is non-negative pathwise;
    a materially negative value indicates a numerical fault and raises.
    """
    try:
        phi_w = np.asarray(utility.terminal_utility(w_T), dtype=float)
    except WealthDomain as exc:
        raise WealthDomain(
            "policy failure: realized terminal wealth left the utility "
            f"domain ({exc})") from exc
    slack = np.asarray(utility.dual_terminal(zeta_T), dtype=float) \
        - phi_w + zeta_T * w_T
    floor = -1e-9 * (1.0 + np.abs(phi_w) + np.abs(zeta_T * w_T))
    if np.any(slack < floor):
        raise ArithmeticError("Fenchel-Young slack negative beyond tolerance; "
                              "dual and primal utilities are inconsistent")
    return Z_T * slack


def _h_path_values(problem: Problem, t_index: int, w: float, zeta: float, x,
                   theta_rule, increments: np.ndarray, use_is: bool) -> np.ndarray:
    start = StartState(t_index, x, zeta=zeta, w=w)
    bundle = evolve(problem.model, problem.utility, problem.grid, start,
                    increments, policy=theta_rule,
                    measure="Q" if use_is else "P")
    N = problem.grid.n_steps
    return _h_terminal_values(problem.utility, bundle.zeta[:, N],
                              bundle.w[:, N], bundle.Z[:, N])


def estimate_h(problem: Problem, t_index: int, w: float, zeta: float, x,
               theta_rule, M: int, seed: int, use_is: bool = True,
               workers: int = 1) -> DualEstimate:
    """Duality gap of the explicit portfolio rule theta_rule(t, w, x, zeta).

    The rule is evaluated along the same increments that drive zeta, with
    consumption fixed to the dual rule.  The per-path gap is non-negative,
    so the estimate is a one-sided distance between the bounds.
    """
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    grid = problem.grid
    inc = _gather_increments(grid, problem.model.d, seed, M, workers)
    vals = _map_chunks(
        lambda block: _h_path_values(problem, t_index, w, zeta, x, theta_rule,
                                     block, use_is),
        inc, M, workers)
    value, se = _mean_se(vals)
    return DualEstimate(value=value, std_error=se, M=M,
                        N=grid.n_steps - t_index,
                        measure="Q" if use_is else "P")


def _default_bracket(utility: UtilitySpec, w: float) -> tuple[float, float]:
    try:
        center = zeta_for_wealth(utility, w)
    except (WealthDomain, ValueError):
        center = 1.0
    return 1e-3 * center, 1e3 * center


def find_zeta0(problem: Problem, t_index: int, w: float, x, M: int, seed: int,
               bracket: Optional[tuple[float, float]] = None,
               zeta_tol: float = ZETA_TOL, use_is: bool = True,
               workers: int = 1, max_widenings: int = 3) -> ZetaSearch:
    """Golden-section search for the dual start minimizing g + w zeta.

    The objective is evaluated under common random numbers (one set of
    increments for every trial zeta).  A default bracket is centered at the
    zeta matching current wealth through the terminal inverse marginal and
    widened up to ``max_widenings`` times when the minimizer lands on an
    endpoint; an explicitly supplied bracket is never widened and raises
    BracketTooNarrow instead.
    """
    grid = problem.grid
    inc = _gather_increments(grid, problem.model.d, seed, M, workers)

    evals = 0

    def objective(zeta: float) -> float:
        nonlocal evals
        evals += 1
        vals = _map_chunks(
            lambda block: _g_path_values(problem, t_index, zeta, x, block, use_is),
            inc, M, workers)
        return float(np.mean(vals)) + w * zeta

    user_bracket = bracket is not None
    lo, hi = bracket if user_bracket else _default_bracket(problem.utility, w)
    if not (0.0 < lo < hi):
        raise ValueError("bracket must satisfy 0 < lo < hi")

    widenings = 0
    while True:
        u, fu, n = golden_section(lambda v: objective(np.exp(v)),
                                  np.log(lo), np.log(hi), tol=zeta_tol)
        at_edge = (u - np.log(lo) <= 2.0 * zeta_tol
                   or np.log(hi) - u <= 2.0 * zeta_tol)
        if not at_edge:
            break
        if user_bracket or widenings >= max_widenings:
            raise BracketTooNarrow(
                f"dual-start minimizer at bracket endpoint ({np.exp(u):.6g} in "
                f"[{lo:.6g}, {hi:.6g}]); widen the bracket")
        lo, hi = lo / 10.0, hi * 10.0
        widenings += 1

    zeta0 = float(np.exp(u))
    vals = _map_chunks(
        lambda block: _g_path_values(problem, t_index, zeta0, x, block, use_is),
        inc, M, workers)
    g_val, g_se = _mean_se(vals)
    evals += 1
    g_est = DualEstimate(value=g_val, std_error=g_se, M=M,
                         N=grid.n_steps - t_index,
                         measure="Q" if use_is else "P")
    return ZetaSearch(zeta0=zeta0, value=g_val + w * zeta0, g_est=g_est,
                      bracket=(lo, hi), evaluations=evals)


def g_partials(problem: Problem, t_index: int, zeta: float, x, M: int,
               seed: int, rel_step: float = REL_STEP, use_is: bool = True,
               workers: int = 1) -> GPartials:
    """g and its first two zeta-derivatives by central differences.

    The three evaluation points zeta (1 - delta), zeta, zeta (1 + delta)
    share one set of increments, so for scale-invariant utilities the
    Monte Carlo noise cancels exactly in the difference quotients.  The
    curvature is floored at EPS_CONVEX (g is convex in zeta).
    """
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    grid = problem.grid
    inc = _gather_increments(grid, problem.model.d, seed, M, workers)

    def value_at(z: float) -> tuple[float, float]:
        vals = _map_chunks(
            lambda block: _g_path_values(problem, t_index, z, x, block, use_is),
            inc, M, workers)
        return _mean_se(vals)

    h = rel_step * zeta
    g_lo, _ = value_at(zeta - h)
    g_mid, se = value_at(zeta)
    g_hi, _ = value_at(zeta + h)
    g_z = (g_hi - g_lo) / (2.0 * h)
    g_zz = max((g_hi - 2.0 * g_mid + g_lo) / (h * h), EPS_CONVEX)
    est = DualEstimate(value=g_mid, std_error=se, M=M,
                       N=grid.n_steps - t_index,
                       measure="Q" if use_is else "P")
    return GPartials(g=g_mid, g_zeta=g_z, g_zeta_zeta=g_zz, g_est=est)


def bounds(problem: Problem, t_index: int, w: float, x, theta_rule, M: int,
           seed: int, bracket: Optional[tuple[float, float]] = None,
           zeta_tol: float = ZETA_TOL, use_is: bool = True,
           workers: int = 1) -> BoundsReport:
    """Two-sided value bounds and efficiency measure for a portfolio rule.

    Runs the dual-start search, then estimates the duality gap of
    ``theta_rule`` at the optimum (independent increments, derived seed).
    """
    search = find_zeta0(problem, t_index, w, x, M, seed, bracket=bracket,
                        zeta_tol=zeta_tol, use_is=use_is, workers=workers)
    h_est = estimate_h(problem, t_index, w, search.zeta0, x, theta_rule, M,
                       derive_seed(seed, 0x6A9), use_is=use_is, workers=workers)
    upper = search.value
    lower = upper - h_est.value
    alpha = h_est.value / (search.zeta0 * w)
    return BoundsReport(zeta0=search.zeta0, lower=lower, upper=upper,
                        alpha=alpha, g_est=search.g_est, h_est=h_est)


# ---------------------------------------------------------------------------
# CSV serialization (one row per evaluation point)
# ---------------------------------------------------------------------------

def bounds_csv_header(k: int) -> list[str]:
    return (["t", "w"] + [f"x{i + 1}" for i in range(k)]
            + ["zeta0", "g", "se_g", "h", "se_h", "lower", "upper", "alpha",
               "M", "N", "seed"])


def bounds_csv_row(report: BoundsReport, t: float, w: float, x,
                   seed: int) -> list[str]:
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    return ([repr(float(t)), repr(float(w))]
            + [repr(float(v)) for v in xs]
            + [repr(float(report.zeta0)),
               repr(float(report.g_est.value)), repr(float(report.g_est.std_error)),
               repr(float(report.h_est.value)), repr(float(report.h_est.std_error)),
               repr(float(report.lower)), repr(float(report.upper)),
               repr(float(report.alpha)),
               str(report.g_est.M), str(report.g_est.N), str(seed)])


def write_bounds_csv(rows: list[list[str]], k: int, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(bounds_csv_header(k))
        writer.writerows(rows)
