"""Brownian increment sampling and joint state evolution on a time grid.

The state-price density and the change-of-measure martingale are stepped in
log space (exact for the per-step frozen-coefficient linear SDE), so both
stay strictly positive.  The factor process and wealth use the plain Euler
scheme.  Every path has its own generator derived from (seed, path_index),
which makes all results bit-reproducible regardless of call order, chunking
or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonfinitePath
from .market_model import MarketModel, UtilitySpec, kappa

SIGMA_Z_MAX = 10.0     # cap on the importance-sampling volatility norm
EPS_DUAL = 1e-12       # guard for the dual ratio near a sign change of phitilde


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times 0 = t_0 < t_1 < ... < t_N = T."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, 't', t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("time grid must be strictly increasing")

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1 or T <= 0.0:
            raise ValueError("need N >= 1 steps and T > 0")
        return cls(np.linspace(0.0, float(T), N + 1))

    @property
    def n_steps(self) -> int:
        return self.t.size - 1

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)


@dataclass(frozen=True)
class StartState:
    """Joint state at grid index t_index from which paths are evolved."""

    t_index: int
    x: np.ndarray
    zeta: float
    Z: float = 1.0
    w: Optional[float] = None


@dataclass(frozen=True)
class PathBundle:
    """Simulated joint paths on the full grid.

    Arrays carry a leading path axis: dW is (M, N, d), X is (M, N+1, k),
    zeta / Z / w are (M, N+1).  Entries before the start index repeat the
    start state.  ``dW`` stores the increments as supplied (under Q these
    are the drift-corrected Brownian increments).
    """

    grid: TimeGrid
    t_index: int
    measure: str
    dW: np.ndarray
    X: np.ndarray
    zeta: np.ndarray
    Z: np.ndarray
    w: Optional[np.ndarray]


def derive_seed(*parts: int) -> int:
    """64-bit child seed from a tuple of integers (stable across runs)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_increments(grid: TimeGrid, d: int, seed: int, path_index: int) -> np.ndarray:
    """Gaussian increments (N, d) with per-step std sqrt(dt).

    The generator is seeded by a hash of (seed, path_index), so the output
    is a pure function of (seed, path_index, grid, d).
    """
    ss = np.random.SeedSequence(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_index) & 0xFFFFFFFFFFFFFFFF])
    rng = np.random.Generator(np.random.PCG64(ss))
    z = rng.standard_normal((grid.n_steps, d))
    return z * np.sqrt(grid.dt)[:, None]


def sample_increments_batch(grid: TimeGrid, d: int, seed: int,
                            path_indices) -> np.ndarray:
    """Stack of per-path increments, shape (len(path_indices), N, d)."""
    idx = np.asarray(path_indices, dtype=np.int64)
    out = np.empty((idx.size, grid.n_steps, d))
    for i, p in enumerate(idx):
        out[i] = sample_increments(grid, d, seed, int(p))
    return out


def sigma_z_raw(kappa_val, zeta, utility: UtilitySpec,
                cap: float = SIGMA_Z_MAX, eps: float = EPS_DUAL) -> np.ndarray:
    """Variance-reducing measure-change volatility.

    -kappa * zeta * phitilde'(zeta) / phitilde(zeta), with the norm capped
    at ``cap`` and zeroed where the dual is too close to a sign change for
    the ratio to be stable.  kappa may be (d,) with scalar zeta or a batch
    (M, d) with zeta (M,); the result matches the kappa shape.
    """
    k = np.asarray(kappa_val, dtype=float)
    z = np.asarray(zeta, dtype=float)
    phi_t = np.asarray(utility.dual_terminal(z), dtype=float)
    z_phi_d = z * np.asarray(utility.dual_terminal_deriv(z), dtype=float)
    unstable = np.abs(phi_t) < eps * (1.0 + np.abs(z_phi_d))
    safe_phi = np.where(unstable, 1.0, phi_t)
    ratio = np.where(unstable, 0.0, z_phi_d / safe_phi)
    sz = -k * np.asarray(ratio)[..., None]
    norm = np.linalg.norm(sz, axis=-1)
    with np.errstate(invalid='ignore', divide='ignore'):
        scale = np.where(norm > cap, cap / np.where(norm > 0.0, norm, 1.0), 1.0)
    return sz * np.asarray(scale)[..., None]


def evolve(model: MarketModel, utility: UtilitySpec, grid: TimeGrid,
           start: StartState, increments, policy: Optional[Callable] = None,
           measure: str = "P", sigma_z_max: float = SIGMA_Z_MAX) -> PathBundle:
    """Evolve (X, zeta, Z, w) from the start index to the horizon.

    ``increments`` has shape (M, N, d) or (N, d); rows before start.t_index
    are ignored.  Under measure "Q" the increments are read as the
    drift-corrected Brownian motion and dW = dWbar + sigma_Z dt feeds every
    P-dynamic, while Z accumulates the Q-martingale weight so that
    E_Q[Z f(path)] = E_P[f(path)] step by step.  Wealth is evolved only when
    start.w is given; consumption is always the dual rule I(t, zeta) and
    ``policy(t, w, x, zeta)`` supplies the cash holdings (zero if None).
    """
    if measure not in ("P", "Q"):
        raise ValueError(f"measure must be 'P' or 'Q', got {measure!r}")
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 2:
        inc = inc[None]
    M = inc.shape[0]
    N = grid.n_steps
    if inc.shape[1] != N or inc.shape[2] != model.d:
        raise ValueError(f"increments shape {inc.shape} does not match "
                         f"(M, {N}, {model.d})")
    n0 = int(start.t_index)
    if not 0 <= n0 <= N:
        raise ValueError(f"start index {n0} outside grid")
    t = grid.t
    dt = grid.dt
    track_w = start.w is not None

    X = np.empty((M, N + 1, model.k))
    zeta = np.empty((M, N + 1))
    Z = np.ones((M, N + 1))
    w = np.empty((M, N + 1)) if track_w else None

    x_now = np.broadcast_to(
        np.asarray(start.x, dtype=float), (M, model.k)).copy()
    if np.any(np.asarray(start.zeta) <= 0.0):
        raise ValueError("zeta must start positive")
    log_zeta = np.broadcast_to(
        np.log(np.asarray(start.zeta, dtype=float)), (M,)).copy()
    log_Z = np.broadcast_to(
        np.log(np.asarray(start.Z, dtype=float)), (M,)).copy()
    w_now = (np.broadcast_to(np.asarray(start.w, dtype=float), (M,)).copy()
             if track_w else None)

    X[:, :n0 + 1] = x_now[:, None, :]
    zeta[:, :n0 + 1] = np.exp(log_zeta)[:, None]
    Z[:, :n0 + 1] = np.exp(log_Z)[:, None]
    if track_w:
        w[:, :n0 + 1] = w_now[:, None]

    const = model.constant_coefficients
    if const:
        x_ref = np.asarray(start.x, dtype=float).reshape(-1)[:model.k]
        r_c = float(model.r(x_ref))
        mu_c = np.asarray(model.mu(x_ref), dtype=float)
        sig_c = np.asarray(model.sigma(x_ref), dtype=float)
        kap_c = kappa(model, x_ref)
        kap_sq_c = float(kap_c @ kap_c)
        sigX_c = np.asarray(model.sigma_X(x_ref), dtype=float)
        muX_c = np.asarray(model.mu_X(x_ref), dtype=float)
        factor_moves = model.k > 0 and (np.any(sigX_c != 0.0) or np.any(muX_c != 0.0))
    else:
        factor_moves = model.k > 0

    for j in range(n0, N):
        dtj = dt[j]
        if const:
            r_j, mu_j, sig_j, kap_j = r_c, mu_c, sig_c, kap_c
        else:
            r_j = np.asarray(model.r(x_now), dtype=float)
            mu_j = np.asarray(model.mu(x_now), dtype=float)
            sig_j = np.asarray(model.sigma(x_now), dtype=float)
            kap_j = kappa(model, x_now)

        d_wbar = inc[:, j, :]
        if measure == "Q":
            sz = sigma_z_raw(kap_j, np.exp(log_zeta), utility, cap=sigma_z_max)
            if sz.ndim == 1:
                sz = np.broadcast_to(sz, (M, model.d))
            d_w = d_wbar + sz * dtj
            log_Z = log_Z - np.einsum('md,md->m', sz, d_wbar) \
                - 0.5 * np.einsum('md,md->m', sz, sz) * dtj
        else:
            d_w = d_wbar

        if const:
            kap_dw = d_w @ kap_j
            kap_sq = kap_sq_c
        else:
            kap_dw = np.einsum('md,md->m', kap_j, d_w)
            kap_sq = np.einsum('md,md->m', kap_j, kap_j)

        if track_w:
            zeta_now = np.exp(log_zeta)
            c_j = np.asarray(
                utility.inverse_marginal_running(t[j], zeta_now), dtype=float)
            if policy is not None:
                th = np.asarray(policy(t[j], w_now, x_now, zeta_now), dtype=float)
                if th.ndim == 1:
                    th = np.broadcast_to(th, (M, model.n))
                excess = np.broadcast_to(
                    mu_j - (r_c if const else r_j[..., None]), (M, model.n))
                gain = np.einsum('mn,mn->m', th, excess)
                sig_dw = (d_w @ sig_j.T if const
                          else np.einsum('mnd,md->mn', sig_j, d_w))
                noise = np.einsum('mn,mn->m', th, sig_dw)
            else:
                gain = 0.0
                noise = 0.0
            w_now = w_now + (r_j * w_now + gain - c_j) * dtj + noise
            w[:, j + 1] = w_now

        log_zeta = log_zeta - kap_dw - (r_j + 0.5 * kap_sq) * dtj
        zeta[:, j + 1] = np.exp(log_zeta)
        Z[:, j + 1] = np.exp(log_Z)

        if factor_moves:
            sigX_j = sigX_c if const else np.asarray(model.sigma_X(x_now), dtype=float)
            muX_j = muX_c if const else np.asarray(model.mu_X(x_now), dtype=float)
            if const:
                x_now = x_now + d_w @ sigX_j.T + muX_j * dtj
            else:
                x_now = x_now + np.einsum('mkd,md->mk', sigX_j, d_w) + muX_j * dtj
        X[:, j + 1] = x_now

    finite = np.all(np.isfinite(zeta)) and np.all(np.isfinite(Z)) \
        and np.all(np.isfinite(X)) and (not track_w or np.all(np.isfinite(w)))
    if not finite:
        raise NonfinitePath("simulated state became non-finite; "
                            "check coefficients and policy")
    return PathBundle(grid=grid, t_index=n0, measure=measure, dW=inc,
                      X=X, zeta=zeta, Z=Z, w=w)


def dump_bundle_csv(bundle: PathBundle, path, path_index: int = 0) -> None:
    """Write one path of a bundle as CSV rows (t, X_1..X_k, zeta, Z, w)."""
    import csv

    k = bundle.X.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i + 1}" for i in range(k)] + ["zeta", "Z", "w"])
        for j, tj in enumerate(bundle.grid.t):
            row = [repr(float(tj))]
            row += [repr(float(v)) for v in bundle.X[path_index, j]]
            row.append(repr(float(bundle.zeta[path_index, j])))
            row.append(repr(float(bundle.Z[path_index, j])))
            row.append(repr(float(bundle.w[path_index, j]))
                       if bundle.w is not None else "")
            writer.writerow(row)
