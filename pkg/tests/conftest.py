"""共享夹具"""

import pytest

from src.instances import make_random_linear_mdp, make_two_state_mdp
from src.oracle import solve_optimal


@pytest.fixture
def two_state():
    """γ = 0.5 的两状态实例：v* = (1, 2)"""
    return make_two_state_mdp(0.5)


@pytest.fixture(scope="session")
def small_anchored():
    """小规模带锚点实例 S=20, A=3, K=4, γ=0.7"""
    return make_random_linear_mdp(20, 3, 4, 0.7, seed=11)


@pytest.fixture(scope="session")
def small_solution(small_anchored):
    lm, _ = small_anchored
    return solve_optimal(lm.mdp, 1e-10)
