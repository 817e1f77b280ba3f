"""Linearized primal-dual iteration for the TV-regularized reconstruction.

One iteration from (f_n, p_n):

    f_{n+1} = clamp_box( f_n - tau * (u_a(f_n) - rho * div_rep(p_n)) )
    f~      = 2 f_{n+1} - f_n
    p_{n+1} = project_ball( p_n + (tau*rho/theta) * grad f~ )

where u_a is the adjoint state of the data misfit and div_rep is the
weighted nodal representer of the divergence.  Both updates solve their
proximal subproblems exactly in the lumped metric.  A step-size certificate
(coercivity constant, trace constant, discrete gradient norm) is checked
before a run; under it the iterate differences are monotone in the induced
preconditioner norm and decay like O(1/n).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fem_assembly import P0VecField, P1Field, div_adjoint, elem_gradient
from .mesh import TriMesh, prolong_p0, prolong_p1
from .pde_solvers import DiscreteProblem, Observation, discretize, misfit
from .sparse_linalg import CgConvergenceError, grad_operator_norm
from .tv_calculus import (project_dual_ball, project_dual_ball_isotropic,
                          tv_value)


@dataclass(frozen=True)
class PdParams:
    """Step sizes and run controls.

    tol1/tol2 are the stopping-rule offsets; when left unset they default
    to 1e-5*sqrt(h) and 1e-4*sqrt(h) for the mesh at hand.
    """

    rho: float
    tau: float = 2e-4
    theta: float = 5e-2
    max_iter: int = 600
    tol1: float | None = None
    tol2: float | None = None
    isotropic_dual: bool = False
    record_b_norms: bool = False

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.tau <= 0 or self.theta <= 0:
            raise ValueError("tau and theta must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def stopping_offsets(self, h: float) -> tuple[float, float]:
        t1 = self.tol1 if self.tol1 is not None else 1e-5 * math.sqrt(h)
        t2 = self.tol2 if self.tol2 is not None else 1e-4 * math.sqrt(h)
        return t1, t2


def params_for_level(h: float, rho_coef: float = 1e-3, **kwargs) -> PdParams:
    """Parameters with the mesh-coupled regularization rho = rho_coef*sqrt(h)."""
    return PdParams(rho=rho_coef * math.sqrt(h), **kwargs)


@dataclass(frozen=True)
class StepCertificate:
    """Evaluated step-size condition (1/tau - s)*(theta/tau) > rho^2*|grad|^2.

    ``smooth_bound`` is the bound s on the norm of the smooth-part operator
    (source difference to adjoint-state difference): the analytic variant
    uses the worst case c_gamma^2/c1^2, the empirical variant a computed
    sharp value.
    """

    c1: float
    c_gamma: float
    grad_norm: float
    smooth_bound: float
    lhs: float
    rhs: float
    valid: bool


def coercivity_c1(alpha_lower: float, d: int = 2,
                  domain_volume: float = 4.0) -> float:
    """Coercivity constant of the bilinear form over mean-free functions."""
    if alpha_lower <= 0 or domain_volume <= 0 or d < 1:
        raise ValueError("alpha_lower, dimension and volume must be positive")
    return alpha_lower / (1.0 + 1.5 ** ((d + 2) / 4.0)
                          * domain_volume ** (1.0 / d))


def trace_constant(box_bounds) -> float:
    """Boundary-trace constant sqrt((d + hbar^2)/hlow) of a box containing 0."""
    box = [tuple(map(float, ab)) for ab in box_bounds]
    if not box:
        raise ValueError("empty box")
    for a, b in box:
        if not (a < 0.0 < b):
            raise ValueError("the box must contain 0 in its interior")
    ends = np.abs(np.asarray(box)).ravel()
    hlow, hbar = ends.min(), ends.max()
    return math.sqrt((len(box) + hbar**2) / hlow)


def certify_steps(params: PdParams, mesh: TriMesh, alpha_lower: float,
                  domain_box=None) -> StepCertificate:
    """Evaluate the step-size condition with the analytic worst-case bound."""
    if domain_box is None:
        domain_box = mesh.box
    volume = 1.0
    for a, b in domain_box:
        volume *= (b - a)
    c1 = coercivity_c1(alpha_lower, len(domain_box), volume)
    cg = trace_constant(domain_box)
    gnorm = grad_operator_norm(mesh)
    s = cg**2 / c1**2
    lhs = (1.0 / params.tau - s) * (params.theta / params.tau)
    rhs = params.rho**2 * gnorm**2
    return StepCertificate(c1, cg, gnorm, s, lhs, rhs, lhs > rhs)


def smooth_operator_norm(dp, tol: float = 1e-3, max_iter: int = 200) -> float:
    """Norm of the source-to-adjoint-difference operator, by power iteration.

    The operator maps a source increment through one state solve and one
    boundary-loaded solve; it is symmetric positive semi-definite in the
    weighted nodal product, so its norm equals the largest Rayleigh
    quotient.  This is the sharp value the analytic certificate bounds by
    c_gamma^2/c1^2.
    """
    rng = np.random.default_rng(20240901)
    v = rng.standard_normal(dp.mesh.n_vertices)
    v /= dp.lumped_norm(v)
    s_prev = 0.0
    for _ in range(max_iter):
        image = dp.solve_gamma_loaded(dp.solve_source_part(v))
        s = dp.lumped_inner(v, image)
        norm = dp.lumped_norm(image)
        if norm == 0.0:
            return 0.0
        v = image / norm
        if abs(s - s_prev) <= tol * max(abs(s), 1e-300):
            return s
        s_prev = s
    return s_prev


def certify_steps_empirical(params: PdParams, dp,
                            safety: float = 1.2) -> StepCertificate:
    """Step-size certificate using the computed smooth-operator norm.

    The analytic constants are pessimistic by orders of magnitude here, so
    they force uselessly small steps; the computed bound (inflated by the
    safety factor) certifies practical step sizes while keeping every
    monotonicity guarantee of the iteration.
    """
    from .pde_solvers import discretize

    dp = discretize(dp)
    domain_box = dp.mesh.box
    volume = 1.0
    for a, b in domain_box:
        volume *= (b - a)
    c1 = coercivity_c1(dp.prob.coeffs.alpha_lower, len(domain_box), volume)
    cg = trace_constant(domain_box)
    gnorm = grad_operator_norm(dp.mesh)
    s = safety * smooth_operator_norm(dp)
    lhs = (1.0 / params.tau - s) * (params.theta / params.tau)
    rhs = params.rho**2 * gnorm**2
    return StepCertificate(c1, cg, gnorm, s, lhs, rhs, lhs > rhs)


@dataclass
class IterationRecord:
    n: int
    objective: float
    tolerance: float
    step_b_norm_sq: float | None = None


@dataclass
class PdState:
    """Iterate pair plus run history."""

    f: P1Field
    p: P0VecField
    n: int
    history: list = field(default_factory=list)
    stopped_by_tolerance: bool = False

    @property
    def final_tolerance(self) -> float:
        return self.history[-1].tolerance if self.history else float("nan")


def extrapolate(f_new: P1Field, f_old: P1Field) -> P1Field:
    """Over-relaxed point 2*f_new - f_old (may leave the box on purpose)."""
    return 2.0 * f_new - f_old


class PdDriver:
    """Primal-dual iteration bound to one assembled problem."""

    def __init__(self, prob, params: PdParams,
                 certificate: StepCertificate | None = None,
                 allow_uncertified: bool = False):
        self.dp = discretize(prob)
        self.params = params
        self.box = self.dp.prob.box
        if certificate is None:
            certificate = certify_steps(params, self.dp.mesh,
                                        self.dp.prob.coeffs.alpha_lower,
                                        self.dp.mesh.box)
        self.certificate = certificate
        if not certificate.valid and not allow_uncertified:
            raise ValueError(
                f"step-size condition violated: lhs {certificate.lhs:.6g} "
                f"<= rhs {certificate.rhs:.6g}; decrease tau or rho")
        self._project_dual = (project_dual_ball_isotropic
                              if params.isotropic_dual else project_dual_ball)

    # -- single updates ------------------------------------------------------

    def div_rep(self, p: P0VecField) -> np.ndarray:
        """Nodal representer of div p in the lumped metric."""
        return -div_adjoint(self.dp.mesh, p) / self.dp.w

    def primal_step(self, f: P1Field, p: P0VecField,
                    u_adjoint: P1Field) -> P1Field:
        """Exact solution of the box-constrained primal proximal subproblem."""
        lo, hi = self.box
        step = f - self.params.tau * (u_adjoint
                                      - self.params.rho * self.div_rep(p))
        return np.clip(step, lo, hi)

    def dual_step(self, p: P0VecField, f_tilde: P1Field) -> P0VecField:
        """Exact solution of the ball-constrained dual proximal subproblem."""
        scale = self.params.tau * self.params.rho / self.params.theta
        return self._project_dual(p + scale * elem_gradient(self.dp.mesh,
                                                            f_tilde))

    def projected_gradient(self, f: P1Field, p: P0VecField,
                           u_adjoint: P1Field) -> np.ndarray:
        """Fixed-point residual (f - primal_step(f)) / tau of the iteration."""
        return (f - self.primal_step(f, p, u_adjoint)) / self.params.tau

    def tolerance(self, f: P1Field, p: P0VecField, u_adjoint: P1Field,
                  g0_norm: float) -> float:
        """Stopping functional: residual norm minus the run's offsets."""
        t1, t2 = self.params.stopping_offsets(self.dp.mesh.mesh_size)
        gnorm = self.dp.lumped_norm(self.projected_gradient(f, p, u_adjoint))
        return gnorm - t1 - t2 * g0_norm

    def objective(self, f: P1Field, u_state: P1Field, z: Observation) -> float:
        return misfit(self.dp, u_state, z) + self.params.rho * tv_value(
            self.dp.mesh, f)

    def b_norm_sq(self, delta_f: P1Field, delta_p: P0VecField,
                  tol: float | None = None) -> float:
        """Squared preconditioner norm of an iterate difference.

        Combines the two proximal metrics with the smooth coupling term; a
        negative value beyond round-off means the certificate is violated.
        """
        dp, prm = self.dp, self.params
        u_bar = dp.solve_source_part(delta_f, tol)
        u_bar_a = dp.solve_gamma_loaded(u_bar, tol)
        t_f = dp.lumped_inner(delta_f, delta_f) / prm.tau
        t_smooth = dp.lumped_inner(delta_f, u_bar_a)
        grad_df = elem_gradient(dp.mesh, delta_f)
        t_cross = 2.0 * prm.rho * float(
            np.sum(dp.mesh.areas[:, None] * grad_df * delta_p))
        t_p = prm.theta / prm.tau * float(
            np.sum(dp.mesh.areas[:, None] * delta_p**2))
        value = t_f - t_smooth - t_cross + t_p
        scale = abs(t_f) + abs(t_smooth) + abs(t_cross) + abs(t_p)
        if value < -1e-10 * max(scale, 1e-300):
            raise RuntimeError(
                f"preconditioner norm came out negative ({value:.3e}); "
                "the step-size certificate does not hold")
        return value

    # -- full run --------------------------------------------------------------

    def default_start(self):
        lo, hi = self.box
        f0 = np.clip(np.ones(self.dp.mesh.n_vertices), lo, hi)
        p0 = np.full((self.dp.mesh.n_triangles, 2), 0.5)
        return f0, p0

    def run(self, z: Observation, f0: P1Field | None = None,
            p0: P0VecField | None = None, on_iteration=None) -> PdState:
        """Iterate until the stopping functional is nonpositive or max_iter.

        The history carries the objective and stopping value at every
        visited iterate, and (when enabled) the preconditioner norm of each
        step taken.
        """
        dp, prm = self.dp, self.params
        lo, hi = self.box
        if f0 is None or p0 is None:
            df0, dp0 = self.default_start()
            f0 = df0 if f0 is None else f0
            p0 = dp0 if p0 is None else p0
        f = np.clip(np.asarray(f0, dtype=float), lo, hi)
        p = self._project_dual(np.asarray(p0, dtype=float))
        state = PdState(f=f, p=p, n=0)

        u = dp.solve_state(f)
        u_a_prev = None
        g0_norm = None
        for n in range(prm.max_iter + 1):
            try:
                u_a = dp.solve_adjoint(u, z, x0=u_a_prev)
            except CgConvergenceError as exc:
                raise CgConvergenceError(
                    f"adjoint solve failed at iteration {n}: {exc}",
                    exc.report) from exc
            u_a_prev = u_a
            f_next = self.primal_step(f, p, u_a)
            g_norm = dp.lumped_norm((f - f_next) / prm.tau)
            if g0_norm is None:
                g0_norm = g_norm
            t1, t2 = prm.stopping_offsets(dp.mesh.mesh_size)
            tol_val = g_norm - t1 - t2 * g0_norm
            record = IterationRecord(n, self.objective(f, u, z), tol_val)
            state.history.append(record)
            if on_iteration is not None:
                on_iteration(n, f, p, u, u_a)
            if tol_val <= 0.0 or n == prm.max_iter:
                state.f, state.p, state.n = f, p, n
                state.stopped_by_tolerance = tol_val <= 0.0
                return state

            f_tilde = extrapolate(f_next, f)
            p_next = self.dual_step(p, f_tilde)
            assert np.all(f_next >= lo) and np.all(f_next <= hi)
            assert np.max(np.abs(p_next)) <= 1.0 + 1e-15
            if prm.record_b_norms:
                record.step_b_norm_sq = self.b_norm_sq(f_next - f, p_next - p)
            f, p = f_next, p_next
            try:
                u = dp.solve_state(f, x0=u)
            except CgConvergenceError as exc:
                raise CgConvergenceError(
                    f"state solve failed at iteration {n + 1}: {exc}",
                    exc.report) from exc
        raise AssertionError("unreachable")


def run(prob, z: Observation, params: PdParams, f0=None, p0=None,
        certificate: StepCertificate | None = None,
        allow_uncertified: bool = False, on_iteration=None) -> PdState:
    driver = PdDriver(prob, params, certificate, allow_uncertified)
    return driver.run(z, f0, p0, on_iteration)


@dataclass
class LevelRun:
    level: int
    problem: DiscreteProblem
    observation: Observation
    params: PdParams
    state: PdState


class MultilevelError(RuntimeError):
    """A level of a multilevel run failed; carries the completed levels."""

    def __init__(self, level: int, completed: list, cause: Exception):
        super().__init__(f"level {level} failed: {cause}")
        self.level = level
        self.completed = completed
        self.cause = cause


def multilevel_run(levels, make_level, certifier=None, initial=None,
                   on_iteration=None) -> list[LevelRun]:
    """Run the iteration level by level with warm-started iterates.

    ``levels`` must start at 4 and double at every step.  ``make_level``
    maps a level to a (problem, observation, params) triple; the final
    iterate pair of each level is interpolated onto the next mesh as its
    starting point.  ``certifier(params, problem)`` may supply the step-size
    certificate (defaults to the analytic one); ``initial`` optionally sets
    the first level's (f0, p0).
    """
    levels = list(levels)
    if not levels:
        raise ValueError("levels must be nonempty")
    if levels[0] != 4 or any(b != 2 * a for a, b in zip(levels, levels[1:])):
        raise ValueError(
            f"levels must start at 4 and double at each step, got {levels}")
    results: list[LevelRun] = []
    prev = None
    for level in levels:
        try:
            prob, z, params = make_level(level)
            dp = discretize(prob)
            if prev is not None:
                f0 = prolong_p1(prev.state.f, prev.problem.mesh, dp.mesh)
                p0 = prolong_p0(prev.state.p, prev.problem.mesh, dp.mesh)
            elif initial is not None:
                f0, p0 = initial
            else:
                f0 = p0 = None
            certificate = certifier(params, dp) if certifier else None
            state = run(dp, z, params, f0=f0, p0=p0, certificate=certificate,
                        on_iteration=on_iteration)
        except Exception as exc:
            raise MultilevelError(level, results, exc) from exc
        prev = LevelRun(level, dp, z, params, state)
        results.append(prev)
    return results
