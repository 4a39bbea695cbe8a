import numpy as np
import pytest
from hypothesis import settings

from dualmc.benchmarks import MertonParams, merton_closed_form
from dualmc.dual_bounds import Problem
from dualmc.market_model import constant_market, crra_utility_spec, mixture_crra_spec
from dualmc.path_engine import TimeGrid

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")

# 1-D reference market: mu=0.10, sigma=0.20, r=0.05, rho=0.03, R=3
MARKET_1D = dict(r=0.05, mu=0.10, sigma=0.20, rho=0.03, R=3.0)

# 3-D market with the fixed volatility matrix used for the multi-asset runs
MU_3D = np.array([0.07, 0.25, 0.15])
SIGMA_3D = np.array([
    [0.12, 0.01, 0.03],
    [0.01, 0.50, 0.01],
    [0.03, 0.01, 0.27],
])

MIXTURE = dict(R1=3.0, R2=0.5, a1=10.0, a2=20.0, b1=30.0, b2=10.0, rho=0.03)


@pytest.fixture(scope="session")
def problem_1d():
    """1-D constant market, single power utility, T=1, N=100."""
    model = constant_market(r=0.05, mu=[0.10], sigma=[[0.20]])
    utility = crra_utility_spec(R=3.0, rho=0.03, a=1.0, terminal_weight=1.0)
    return Problem(model=model, utility=utility, grid=TimeGrid.uniform(1.0, 100))


@pytest.fixture(scope="session")
def merton_1d():
    return merton_closed_form(MertonParams(
        r=0.05, mu=np.array([0.10]), sigma=np.array([[0.20]]), rho=0.03,
        R=3.0, a=1.0, A=1.0, T=1.0))


@pytest.fixture(scope="session")
def problem_3d():
    """3-D constant market with a=1, A=2, T=5, N=100 (dt=0.05)."""
    model = constant_market(r=0.05, mu=MU_3D, sigma=SIGMA_3D)
    utility = crra_utility_spec(R=3.0, rho=0.03, a=1.0, terminal_weight=2.0)
    return Problem(model=model, utility=utility, grid=TimeGrid.uniform(5.0, 100))


@pytest.fixture(scope="session")
def merton_3d():
    return merton_closed_form(MertonParams(
        r=0.05, mu=MU_3D, sigma=SIGMA_3D, rho=0.03, R=3.0, a=1.0, A=2.0, T=5.0))


@pytest.fixture(scope="session")
def problem_mixture():
    """1-D market with the two-term power mixture, T=1, N=100, w0=2."""
    model = constant_market(r=0.05, mu=[0.10], sigma=[[0.20]])
    return Problem(model=model, utility=mixture_crra_spec(**MIXTURE),
                   grid=TimeGrid.uniform(1.0, 100))
