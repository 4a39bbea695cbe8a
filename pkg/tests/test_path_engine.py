import numpy as np
import pytest

from dualmc.errors import NonfinitePath
from dualmc.market_model import UtilitySpec, constant_market, crra_utility_spec
from dualmc.path_engine import (
    PathBundle,
    StartState,
    TimeGrid,
    derive_seed,
    evolve,
    sample_increments,
    sample_increments_batch,
    sigma_z_raw,
)


def zero_consumption_spec():
    """Utility stub with no consumption; only dual fields that tests touch."""
    crra = crra_utility_spec(R=3.0)
    return UtilitySpec(
        inverse_marginal_running=lambda t, z: np.zeros(np.shape(z)),
        inverse_marginal_terminal=crra.inverse_marginal_terminal,
        dual_running=lambda t, z: np.zeros(np.shape(z)),
        dual_terminal=crra.dual_terminal,
        dual_terminal_deriv=crra.dual_terminal_deriv,
        terminal_utility=crra.terminal_utility,
        running_utility=lambda t, c: np.zeros(np.shape(c)),
        growth_params=(1.0, 1.0),
    )


MARKET_1D = constant_market(r=0.05, mu=[0.10], sigma=[[0.20]])
CRRA = crra_utility_spec(R=3.0, rho=0.03)


# ---------------------------------------------------------------------------
# TimeGrid
# ---------------------------------------------------------------------------

def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 0.5]))
    g = TimeGrid.uniform(5.0, 100)
    assert g.n_steps == 100
    assert g.horizon == 5.0
    assert g.t[-1] == 5.0
    assert np.allclose(g.dt, 0.05)


# ---------------------------------------------------------------------------
# increment sampling
# ---------------------------------------------------------------------------

def test_increments_deterministic_in_seed_and_path():
    grid = TimeGrid.uniform(1.0, 20)
    a = sample_increments(grid, 3, seed=42, path_index=7)
    b = sample_increments(grid, 3, seed=42, path_index=7)
    assert np.array_equal(a, b)
    c = sample_increments(grid, 3, seed=42, path_index=8)
    assert not np.array_equal(a, c)
    d = sample_increments(grid, 3, seed=43, path_index=7)
    assert not np.array_equal(a, d)


def test_increments_batch_matches_single_calls():
    grid = TimeGrid.uniform(1.0, 10)
    batch = sample_increments_batch(grid, 2, seed=5, path_indices=range(4))
    for i in range(4):
        assert np.array_equal(batch[i], sample_increments(grid, 2, 5, i))


def test_increment_moments_match_grid_spacing():
    grid = TimeGrid.uniform(0.05, 1)
    M = 100_000
    draws = sample_increments_batch(grid, 1, seed=9, path_indices=range(M))[:, 0, 0]
    assert abs(np.mean(draws)) <= 4.0 * np.sqrt(0.05 / M)
    assert abs(np.var(draws) / 0.05 - 1.0) <= 0.03


def test_increments_across_paths_uncorrelated():
    grid = TimeGrid.uniform(1.0, 2)
    M = 10_000
    draws = sample_increments_batch(grid, 1, seed=3, path_indices=range(M))
    a = draws[:, 0, 0]
    b = draws[:, 1, 0]
    # correlation between neighbouring path indices, first step
    shifted = np.roll(a, 1)
    assert abs(np.corrcoef(a, shifted)[0, 1]) < 0.05
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def test_zero_kappa_gives_deterministic_discounted_zeta():
    model = constant_market(r=0.05, mu=[0.05], sigma=[[0.20]])  # zero excess
    grid = TimeGrid.uniform(1.0, 50)
    inc = sample_increments_batch(grid, 1, seed=1, path_indices=range(8))
    bundle = evolve(model, zero_consumption_spec(), grid,
                    StartState(0, np.zeros(0), zeta=2.0), inc)
    expected = 2.0 * np.exp(-0.05 * grid.t)
    assert np.allclose(bundle.zeta, expected[None, :], rtol=1e-12)


def test_zero_increments_and_drifts_keep_state_constant():
    model = constant_market(r=0.0, mu=[0.0], sigma=[[0.30]], k=2)
    grid = TimeGrid.uniform(1.0, 10)
    inc = np.zeros((3, 10, 1))
    bundle = evolve(model, zero_consumption_spec(), grid,
                    StartState(0, np.array([0.5, -0.2]), zeta=1.5, w=2.0), inc)
    assert np.all(bundle.zeta == 1.5)
    assert np.all(bundle.w == 2.0)
    assert np.all(bundle.X[:, :, 0] == 0.5)
    assert np.all(bundle.X[:, :, 1] == -0.2)


def test_zeta_terminal_mean_matches_lognormal_moment():
    grid = TimeGrid.uniform(1.0, 100)
    M = 100_000
    inc = sample_increments_batch(grid, 1, seed=11, path_indices=range(M))
    bundle = evolve(MARKET_1D, CRRA, grid, StartState(0, np.zeros(0), zeta=1.0), inc)
    zT = bundle.zeta[:, -1]
    target = np.exp(-0.05 * 1.0)
    se = np.std(zT, ddof=1) / np.sqrt(M)
    assert abs(np.mean(zT) - target) <= 3.0 * se


def test_zeta_and_weight_stay_positive():
    grid = TimeGrid.uniform(1.0, 60)
    inc = sample_increments_batch(grid, 1, seed=2, path_indices=range(200)) * 3.0
    bundle = evolve(MARKET_1D, CRRA, grid, StartState(0, np.zeros(0), zeta=1.0),
                    inc, measure="Q")
    assert np.all(bundle.zeta > 0.0)
    assert np.all(bundle.Z > 0.0)


def test_martingale_identity_with_bounded_policy():
    # E[zeta_T w_T + sum zeta c dt] = zeta_0 w_0 for any bounded holdings
    grid = TimeGrid.uniform(1.0, 100)
    M = 10_000
    inc = sample_increments_batch(grid, 1, seed=21, path_indices=range(M))

    def policy(t, w, x, zeta):
        return np.full((np.shape(w)[0], 1), 0.7)

    zeta0, w0 = 1.3, 1.0
    bundle = evolve(MARKET_1D, CRRA, grid,
                    StartState(0, np.zeros(0), zeta=zeta0, w=w0), inc, policy=policy)
    c = CRRA.inverse_marginal_running(grid.t[None, :-1], bundle.zeta[:, :-1])
    acc = bundle.zeta[:, -1] * bundle.w[:, -1] \
        + np.sum(bundle.zeta[:, :-1] * c * grid.dt[None, :], axis=1)
    se = np.std(acc, ddof=1) / np.sqrt(M)
    assert abs(np.mean(acc) - zeta0 * w0) <= 3.0 * se


def test_q_measure_consistent_with_p_measure():
    grid = TimeGrid.uniform(1.0, 50)
    M = 10_000
    inc = sample_increments_batch(grid, 1, seed=31, path_indices=range(M))
    start = StartState(0, np.zeros(0), zeta=1.0)
    p = evolve(MARKET_1D, CRRA, grid, start, inc, measure="P")
    q = evolve(MARKET_1D, CRRA, grid, start, inc, measure="Q")
    for f in (lambda z: z, CRRA.dual_terminal):
        vp = f(p.zeta[:, -1])
        vq = q.Z[:, -1] * f(q.zeta[:, -1])
        se = np.sqrt(np.var(vp, ddof=1) / M + np.var(vq, ddof=1) / M)
        assert abs(np.mean(vp) - np.mean(vq)) <= 3.0 * max(se, 1e-14)


def test_bundle_is_pure_function_of_inputs():
    grid = TimeGrid.uniform(1.0, 30)
    inc = sample_increments_batch(grid, 1, seed=4, path_indices=range(16))
    start = StartState(0, np.zeros(0), zeta=1.0, w=1.0)
    a = evolve(MARKET_1D, CRRA, grid, start, inc)
    b = evolve(MARKET_1D, CRRA, grid, start, inc)
    assert np.array_equal(a.zeta, b.zeta)
    assert np.array_equal(a.w, b.w)


def test_chunked_evolution_bitwise_equal_to_full_batch():
    grid = TimeGrid.uniform(1.0, 30)
    inc = sample_increments_batch(grid, 1, seed=8, path_indices=range(64))
    start = StartState(0, np.zeros(0), zeta=1.0)
    full = evolve(MARKET_1D, CRRA, grid, start, inc)
    parts = [evolve(MARKET_1D, CRRA, grid, start, inc[lo:lo + 16]).zeta
             for lo in range(0, 64, 16)]
    assert np.array_equal(full.zeta, np.concatenate(parts, axis=0))


def test_nonfinite_policy_raises():
    grid = TimeGrid.uniform(1.0, 5)
    inc = np.zeros((2, 5, 1))

    def policy(t, w, x, zeta):
        return np.full((np.shape(w)[0], 1), np.nan)

    with pytest.raises(NonfinitePath):
        evolve(MARKET_1D, CRRA, grid,
               StartState(0, np.zeros(0), zeta=1.0, w=1.0), inc, policy=policy)


def test_mid_grid_start_keeps_head_constant():
    grid = TimeGrid.uniform(1.0, 10)
    inc = sample_increments_batch(grid, 1, seed=6, path_indices=range(4))
    bundle = evolve(MARKET_1D, CRRA, grid, StartState(4, np.zeros(0), zeta=2.0), inc)
    assert np.all(bundle.zeta[:, :5] == 2.0)
    assert not np.allclose(bundle.zeta[:, 5], 2.0)


def test_dump_bundle_csv(tmp_path):
    grid = TimeGrid.uniform(1.0, 4)
    inc = sample_increments_batch(grid, 1, seed=6, path_indices=[0])
    bundle = evolve(MARKET_1D, CRRA, grid,
                    StartState(0, np.zeros(0), zeta=1.0, w=1.0), inc)
    out = tmp_path / "paths.csv"
    from dualmc.path_engine import dump_bundle_csv
    dump_bundle_csv(bundle, out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "t,zeta,Z,w"
    assert len(lines) == 6
