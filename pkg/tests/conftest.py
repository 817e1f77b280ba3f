import functools

import numpy as np
import pytest

from tvsource.experiment import build_benchmark_problem
from tvsource.pde_solvers import DiscreteProblem


@functools.lru_cache(maxsize=None)
def benchmark_dp(level: int, gamma_case: str = "bottom",
                 cg_tol: float = 1e-12):
    """Assembled benchmark problem, cached across tests (treated read-only)."""
    prob, f_truth = build_benchmark_problem(level, gamma_case)
    dp = DiscreteProblem(prob, cg_tol=cg_tol)
    return dp, f_truth


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
