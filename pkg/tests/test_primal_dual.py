import math

import numpy as np
import pytest

from tvsource.experiment import (build_benchmark_problem, compatible_start,
                                 synthesize_observation)
from tvsource.fem_assembly import div_adjoint, elem_gradient
from tvsource.pde_solvers import DiscreteProblem
from tvsource.primal_dual import (MultilevelError, PdDriver, PdParams,
                                  certify_steps, certify_steps_empirical,
                                  coercivity_c1, extrapolate, multilevel_run,
                                  params_for_level, run, trace_constant)

from conftest import benchmark_dp


class TestConstants:
    def test_coercivity_reference_value(self):
        assert abs(coercivity_c1(0.1, 2, 4.0) - 0.025) <= 1e-12

    def test_coercivity_linear_in_lower_bound(self):
        assert abs(coercivity_c1(0.2, 2, 4.0) - 0.05) <= 1e-12

    def test_coercivity_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            coercivity_c1(0.0, 2, 4.0)
        with pytest.raises(ValueError):
            coercivity_c1(0.1, 2, -1.0)

    def test_trace_constant_reference_values(self):
        assert abs(trace_constant(((-1, 1), (-1, 1))) - math.sqrt(3.0)) <= 1e-12
        assert abs(trace_constant(((-2, 2), (-2, 2))) - math.sqrt(3.0)) <= 1e-12

    def test_trace_constant_requires_zero_inside(self):
        with pytest.raises(ValueError):
            trace_constant(((0.5, 1.0), (-1.0, 1.0)))


class TestCertificate:
    def test_reference_arithmetic(self):
        params = PdParams(rho=8.409e-4, tau=2e-4, theta=5e-2)
        cert = certify_steps(params, build_structured_cached(4), 0.1)
        assert cert.c1 == pytest.approx(0.025, abs=1e-12)
        assert cert.c_gamma == pytest.approx(math.sqrt(3.0), abs=1e-12)
        assert cert.lhs == pytest.approx(50000.0, rel=1e-12)
        assert cert.rhs < cert.lhs
        assert cert.valid

    def test_too_large_tau_invalid(self):
        params = PdParams(rho=8.409e-4, tau=1.0, theta=5e-2)
        cert = certify_steps(params, build_structured_cached(4), 0.1)
        assert cert.lhs < 0 and not cert.valid

    def test_empirical_bound_is_much_sharper(self):
        dp, _ = benchmark_dp(4)
        params = PdParams(rho=8.409e-4, tau=5.0, theta=5e-2)
        cert = certify_steps_empirical(params, dp)
        assert cert.smooth_bound < 1.0  # analytic bound is 4800
        assert cert.valid

    def test_driver_refuses_invalid_certificate(self):
        dp, _ = benchmark_dp(4)
        params = PdParams(rho=8.409e-4, tau=1.0, theta=5e-2)
        with pytest.raises(ValueError, match="step-size"):
            PdDriver(dp, params)
        PdDriver(dp, params, allow_uncertified=True)  # explicit override


_mesh_cache = {}


def build_structured_cached(level):
    from tvsource.mesh import build_structured
    if level not in _mesh_cache:
        _mesh_cache[level] = build_structured(level)
    return _mesh_cache[level]


def test_params_validation():
    with pytest.raises(ValueError):
        PdParams(rho=0.0)
    with pytest.raises(ValueError):
        PdParams(rho=1.0)
    with pytest.raises(ValueError):
        PdParams(rho=0.5, tau=-1.0)
    with pytest.raises(ValueError):
        PdParams(rho=0.5, max_iter=0)


def test_stopping_offsets_reference_values():
    params = PdParams(rho=0.5)
    h4 = math.sqrt(8.0) / 4.0
    t1, t2 = params.stopping_offsets(h4)
    assert t1 == pytest.approx(8.409e-6, rel=1e-4)
    assert t2 == pytest.approx(8.409e-5, rel=1e-4)


def test_extrapolate(rng):
    f_old = rng.standard_normal(10)
    assert np.array_equal(extrapolate(f_old, f_old), f_old)
    assert np.array_equal(extrapolate(np.ones(3), np.zeros(3)), 2.0 * np.ones(3))
    f_new = rng.standard_normal(10)
    assert np.allclose(extrapolate(f_new, f_old), 2 * f_new - f_old)


@pytest.fixture(scope="module")
def driver2():
    """Small driver on the level-2 benchmark problem."""
    prob, _ = build_benchmark_problem(2)
    dp = DiscreteProblem(prob, cg_tol=1e-13)
    params = PdParams(rho=1e-3, tau=0.7, theta=5e-2)
    cert = certify_steps_empirical(params, dp)
    return PdDriver(dp, params, certificate=cert)


def _quadratic_argmin_on_interval(obj, lo, hi):
    """Exact minimizer of a 1d quadratic over [lo, hi], via interpolation."""
    samples = np.array([lo, 0.5 * (lo + hi), hi])
    coef = np.polyfit(samples, [obj(s) for s in samples], 2)
    candidates = [lo, hi]
    if coef[0] > 0:
        candidates.append(float(np.clip(-coef[1] / (2 * coef[0]), lo, hi)))
    return min((obj(c), c) for c in candidates)[1]


def test_primal_step_matches_separable_oracle(driver2, rng):
    dp, params = driver2.dp, driver2.params
    lo, hi = driver2.box
    for _ in range(5):
        f = rng.uniform(lo, hi, dp.mesh.n_vertices)
        p = rng.uniform(-1, 1, (dp.mesh.n_triangles, 2))
        u_a = 0.1 * rng.standard_normal(dp.mesh.n_vertices)
        step = driver2.primal_step(f, p, u_a)
        d = div_adjoint(dp.mesh, p)
        for i in range(dp.mesh.n_vertices):
            def node_obj(v):
                return (dp.w[i] * u_a[i] * v + params.rho * d[i] * v
                        + dp.w[i] / (2 * params.tau) * (v - f[i]) ** 2)
            best = _quadratic_argmin_on_interval(node_obj, lo, hi)
            assert abs(step[i] - best) <= 1e-10


def test_dual_step_matches_separable_oracle(driver2, rng):
    dp, params = driver2.dp, driver2.params
    for _ in range(5):
        f_tilde = rng.standard_normal(dp.mesh.n_vertices)
        p = rng.uniform(-1, 1, (dp.mesh.n_triangles, 2))
        step = driver2.dual_step(p, f_tilde)
        g = elem_gradient(dp.mesh, f_tilde)
        for t in range(dp.mesh.n_triangles):
            for j in (0, 1):
                def comp_obj(q):  # negated concave objective
                    return -(params.rho * dp.mesh.areas[t] * g[t, j] * q
                             - params.theta / (2 * params.tau)
                             * dp.mesh.areas[t] * (q - p[t, j]) ** 2)
                best = _quadratic_argmin_on_interval(comp_obj, -1.0, 1.0)
                assert abs(step[t, j] - best) <= 1e-10


def test_projected_gradient_zero_at_fixed_point(driver2, rng):
    dp = driver2.dp
    lo, hi = driver2.box
    f = rng.uniform(lo + 0.2, hi - 0.2, dp.mesh.n_vertices)
    p = rng.uniform(-1, 1, (dp.mesh.n_triangles, 2))
    u_a = driver2.params.rho * driver2.div_rep(p)  # balances the dual pull
    g = driver2.projected_gradient(f, p, u_a)
    assert np.max(np.abs(g)) <= 1e-12
    assert driver2.tolerance(f, p, u_a, g0_norm=1.0) < 0.0


class TestBNorm:
    def test_zero_difference(self, driver2):
        dp = driver2.dp
        assert driver2.b_norm_sq(np.zeros(dp.mesh.n_vertices),
                                 np.zeros((dp.mesh.n_triangles, 2))) == 0.0

    def test_pure_dual_block(self, driver2, rng):
        dp, params = driver2.dp, driver2.params
        delta_p = rng.standard_normal((dp.mesh.n_triangles, 2))
        expected = params.theta / params.tau * float(
            np.sum(dp.mesh.areas[:, None] * delta_p**2))
        value = driver2.b_norm_sq(np.zeros(dp.mesh.n_vertices), delta_p)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_positive_on_random_differences(self, driver2, rng):
        dp = driver2.dp
        for _ in range(20):
            df = rng.standard_normal(dp.mesh.n_vertices)
            dpv = rng.standard_normal((dp.mesh.n_triangles, 2))
            assert driver2.b_norm_sq(df, dpv) > 0.0


def _short_run(level=4, max_iter=60, tau=5.0, record=True):
    dp, f_truth = benchmark_dp(level)
    z = synthesize_observation(dp, f_truth, 0.0, 0)
    params = PdParams(rho=params_for_level(dp.mesh.mesh_size).rho, tau=tau,
                      theta=5e-2, max_iter=max_iter, record_b_norms=record)
    cert = certify_steps_empirical(params, dp)
    f0, p0 = compatible_start(dp, dp.prob.box)
    driver = PdDriver(dp, params, certificate=cert)
    return driver, driver.run(z, f0=f0, p0=p0), z, f0, p0


def test_run_descends_and_stays_feasible():
    driver, state, z, _, _ = _short_run()
    lo, hi = driver.box
    assert np.all(state.f >= lo) and np.all(state.f <= hi)
    assert np.max(np.abs(state.p)) <= 1.0
    assert state.history[0].tolerance > 0.0
    assert state.history[-1].objective <= state.history[0].objective
    assert len(state.history) == state.n + 1


def test_adjoint_identity_along_iterations(rng):
    # the gradient identity holds at every visited iterate
    dp, f_truth = benchmark_dp(4)
    z = synthesize_observation(dp, f_truth, 0.0, 0)
    params = PdParams(rho=params_for_level(dp.mesh.mesh_size).rho, tau=5.0,
                      theta=5e-2, max_iter=20)
    cert = certify_steps_empirical(params, dp)
    driver = PdDriver(dp, params, certificate=cert)
    zfull = z.embed(dp.mesh.n_vertices)
    xi = rng.standard_normal(dp.mesh.n_vertices)
    u_bar = dp.solve_source_part(xi)

    def check(n, f, p, u, u_a):
        lhs = float((u - zfull) @ (dp.M_gamma @ u_bar))
        rhs = dp.lumped_inner(xi, u_a)
        assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs), 1e-12)
        assert np.all(f >= driver.box[0]) and np.all(f <= driver.box[1])
        assert np.max(np.abs(p)) <= 1.0

    state = driver.run(z, on_iteration=check)
    assert state.n == 20


def test_run_b_norms_monotone():
    driver, state, z, f0, p0 = _short_run()
    bn = np.array([r.step_b_norm_sq for r in state.history
                   if r.step_b_norm_sq is not None])
    assert len(bn) >= 50
    assert np.all(bn[1:] <= bn[:-1] * (1.0 + 1e-8))
    # decay consistent with the summability estimate
    total = driver.b_norm_sq(state.f - f0, state.p - p0)
    assert bn.sum() <= 1.1 * total


def test_run_rejects_bad_rho():
    with pytest.raises(ValueError):
        PdParams(rho=0.0, tau=5.0)


def test_variational_inequality_at_stop(rng):
    # at the stopped iterate the box part of the first-order condition
    # holds up to the projected-gradient residual, uniformly over samples
    driver, state, z, _, _ = _short_run(max_iter=400, tau=12.0, record=False)
    dp, params = driver.dp, driver.params
    u = dp.solve_state(state.f)
    u_a = dp.solve_adjoint(u, z)
    g_res = driver.projected_gradient(state.f, state.p, u_a)
    g_norm = dp.lumped_norm(g_res)
    d = div_adjoint(dp.mesh, state.p)
    lo, hi = driver.box
    for _ in range(200):
        g_test = rng.uniform(lo, hi, dp.mesh.n_vertices)
        diff = g_test - state.f
        value = (dp.lumped_inner(diff, u_a) + params.rho * float(d @ diff))
        slack = g_norm * (dp.lumped_norm(diff) + params.tau * g_norm) * 1.01
        assert value >= -slack - 1e-12

    # dual side: feasible fields pair with the gradient below the value
    # attained by the current dual variable, up to one further dual step
    def p0_norm(q):
        return math.sqrt(float(np.sum(dp.mesh.areas[:, None] * q**2)))

    p_next = driver.dual_step(state.p, state.f)
    delta = p0_norm(p_next - state.p)
    grad_f = elem_gradient(dp.mesh, state.f)
    grad_norm = p0_norm(grad_f)
    for _ in range(200):
        q = rng.uniform(-1.0, 1.0, (dp.mesh.n_triangles, 2))
        pairing = float(np.sum(dp.mesh.areas[:, None] * grad_f
                               * (q - state.p)))
        slack = delta * (params.theta / (params.tau * params.rho)
                         * p0_norm(q - p_next) + grad_norm) * 1.01
        assert pairing <= slack + 1e-12


class TestMultilevel:
    @staticmethod
    def _make_level(level):
        dp, f_truth = benchmark_dp(level)
        z = synthesize_observation(dp, f_truth, 0.0, [0, level])
        params = PdParams(rho=params_for_level(dp.mesh.mesh_size).rho,
                          tau=5.0, theta=5e-2, max_iter=25)
        return dp, z, params

    def test_levels_must_double_from_four(self):
        with pytest.raises(ValueError):
            multilevel_run([], self._make_level)
        with pytest.raises(ValueError):
            multilevel_run([8, 16], self._make_level)
        with pytest.raises(ValueError):
            multilevel_run([4, 12], self._make_level)

    def test_single_level_equals_plain_run(self):
        runs = multilevel_run([4], self._make_level,
                              certifier=certify_steps_empirical)
        dp, z, params = self._make_level(4)
        cert = certify_steps_empirical(params, dp)
        state = run(dp, z, params, certificate=cert)
        assert np.allclose(runs[0].state.f, state.f, atol=1e-12)
        assert np.allclose(runs[0].state.p, state.p, atol=1e-12)

    def test_two_levels_couple_rho_and_warm_start(self):
        runs = multilevel_run([4, 8], self._make_level,
                              certifier=certify_steps_empirical)
        assert runs[0].params.rho == pytest.approx(8.4090e-4, rel=1e-4)
        assert runs[1].params.rho == pytest.approx(5.9460e-4, rel=1e-4)
        assert runs[1].problem.mesh.level == 8

    def test_failure_carries_completed_levels(self):
        def flaky(level):
            if level == 8:
                raise RuntimeError("synthetic breakage")
            return self._make_level(level)

        with pytest.raises(MultilevelError) as excinfo:
            multilevel_run([4, 8], flaky, certifier=certify_steps_empirical)
        assert excinfo.value.level == 8
        assert [r.level for r in excinfo.value.completed] == [4]
