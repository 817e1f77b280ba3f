"""End-to-end benchmark: desk-scale reconstruction study on (-1,1)^2.

Builds the piecewise-constant diffusion matrix and the discontinuous truth
source on nested structured meshes, synthesizes noisy boundary data,
reconstructs level by level with warm starts, and reports the error table
together with optional field exports.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .fem_assembly import CoefficientSet, NeumannData, P1Field
from .mesh import GammaSpec, TriMesh, build_structured
from .pde_solvers import DiscreteProblem, Observation, ProblemDef, discretize
from .primal_dual import (LevelRun, MultilevelError, PdParams, certify_steps,
                          certify_steps_empirical, multilevel_run)

GAMMA_CASES = {
    "bottom": ("bottom",),
    "bottom_left": ("bottom", "left"),
}

# truth source: high value inside the disk of radius 1/2, low outside,
# scaled so the exact volume integral vanishes
F_HIGH = 2.0 - math.pi / 8.0
F_LOW = -math.pi / 8.0


def in_square(x) -> bool:
    return abs(x[0]) <= 0.5 and abs(x[1]) <= 0.5


def in_disk(x) -> bool:
    return x[0] ** 2 + x[1] ** 2 <= 0.25


def in_diamond(x) -> bool:
    return abs(x[0]) + abs(x[1]) <= 0.5


def benchmark_alpha(x) -> np.ndarray:
    """Symmetric diffusion matrix of the benchmark, evaluated at a point."""
    a11 = 3.0 if in_square(x) else 1.0
    a12 = 1.0 if in_diamond(x) else 0.0
    a22 = 4.0 if in_disk(x) else 2.0
    return np.array([[a11, a12], [a12, a22]])


def benchmark_truth(mesh: TriMesh) -> P1Field:
    """Nodal interpolant of the discontinuous truth source."""
    inside = (mesh.vertices[:, 0] ** 2 + mesh.vertices[:, 1] ** 2) <= 0.25
    return np.where(inside, F_HIGH, F_LOW)


def benchmark_flux(mesh: TriMesh) -> NeumannData:
    """Piecewise-constant boundary flux, evaluated at edge midpoints."""
    mids = 0.5 * (mesh.vertices[mesh.boundary_edges[:, 0]]
                  + mesh.vertices[mesh.boundary_edges[:, 1]])
    values = np.empty(len(mids))
    for i, (side, (mx, my)) in enumerate(zip(mesh.edge_sides, mids)):
        if side == "bottom":
            values[i] = 1.0 if mx > 0 else -2.0
        elif side == "top":
            values[i] = 2.0 if mx > 0 else -1.0
        elif side == "left":
            values[i] = 3.0 if my <= 0 else -4.0
        else:  # right
            values[i] = -3.0 if my > 0 else 4.0
    return NeumannData(values)


def build_benchmark_problem(level: int, gamma_case: str = "bottom",
                            box=(-1.0, 3.0)):
    """Benchmark problem plus the interpolated truth source.

    Coefficients are sampled at triangle centroids, the flux at edge
    midpoints; the operator is pure Neumann (no reaction, no boundary term).
    """
    if gamma_case not in GAMMA_CASES:
        raise ValueError(f"unknown gamma case {gamma_case!r}; "
                         f"choose from {sorted(GAMMA_CASES)}")
    mesh = build_structured(level)
    alpha = np.stack([benchmark_alpha(x) for x in mesh.centroids])
    coeffs = CoefficientSet(alpha, np.zeros(mesh.n_triangles),
                            np.zeros(len(mesh.boundary_edges)),
                            alpha_lower=0.1)
    prob = ProblemDef(mesh, coeffs, benchmark_flux(mesh),
                      GammaSpec(frozenset(GAMMA_CASES[gamma_case])), box)
    return prob, benchmark_truth(mesh)


def synthesize_observation(dp: DiscreteProblem, f_truth: P1Field,
                           theta_level: float, seed,
                           u_truth: P1Field | None = None) -> Observation:
    """Trace of the truth state on the observed sides plus uniform noise.

    Noise stream: PCG64 seeded with ``seed``, one uniform(-1,1) draw per
    observation node in increasing node order, scaled by ``theta_level``.
    The recorded noise level is the boundary L2 norm of the perturbation.
    """
    dp = discretize(dp)
    if u_truth is None:
        u_truth = dp.solve_state(f_truth)
    nodes = dp.gamma_nodes
    g = u_truth[nodes]
    rng = np.random.default_rng(seed)
    noise = theta_level * rng.uniform(-1.0, 1.0, size=nodes.shape[0])
    diff = np.zeros(dp.mesh.n_vertices)
    diff[nodes] = noise
    delta = dp.gamma_norm(diff)
    return Observation(nodes, g + noise, delta)


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs of a full benchmark run (all overridable from the CLI).

    The primal step defaults to tau = 5 under the computed (empirical)
    step-size certificate; the analytic worst-case certificate caps tau
    near 2e-4, which stalls the iteration at desk scale (see README).
    """

    levels: tuple = (4, 8, 16, 32)
    gamma_case: str = "bottom"
    seed: int = 0
    noise_coef: float = 1.0        # theta_l = noise_coef * h_l * sqrt(rho_l)
    rho_coef: float = 1e-3         # rho_l = rho_coef * sqrt(h_l)
    tau: float = 5.0
    theta: float = 5e-2
    max_iter: int = 600
    box: tuple = (-1.0, 3.0)
    certify: str = "empirical"     # empirical | analytic
    isotropic_dual: bool = False
    record_b_norms: bool = False
    truth_refine: bool = False     # synthesize data on a once-refined mesh
    out_dir: str = "results"
    export_format: str = "csv"     # csv | vtk | none
    cg_tol: float = 1e-10

    @staticmethod
    def from_json(path: str, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("levels", "box"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        return ExperimentConfig(**data)

    def to_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class RunRecord:
    """One row of the benchmark table."""

    level: int
    h: float
    rho: float
    delta: float
    iterations: int
    tolerance: float
    err_f_L2: float
    err_u_L2: float
    err_u_H1: float

    CSV_HEADER = ("level,h,rho,delta,iterations,tolerance,"
                  "err_f_L2,err_u_L2,err_u_H1")

    def csv_row(self) -> str:
        floats = (self.h, self.rho, self.delta, self.tolerance,
                  self.err_f_L2, self.err_u_L2, self.err_u_H1)
        h, rho, delta, tol, ef, eu, eh = (f"{v:.10e}" for v in floats)
        return (f"{self.level},{h},{rho},{delta},{self.iterations},"
                f"{tol},{ef},{eu},{eh}")


class BenchmarkError(RuntimeError):
    """A benchmark level failed; carries the records of completed levels."""

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


def _level_errors(run: LevelRun, f_truth: P1Field):
    """Error columns: source error plus the two constrained-state errors."""
    dp = run.problem
    u_truth = dp.solve_state(f_truth)
    u_rec = dp.solve_state(run.state.f)
    bnodes = dp.mesh.boundary_nodes()
    bvals_dag = np.zeros(dp.mesh.n_vertices)
    bvals_dag[bnodes] = u_truth[bnodes]
    u_dag = dp.solve_dirichlet(f_truth, bvals_dag)
    bvals_rec = bvals_dag.copy()
    bvals_rec[dp.gamma_nodes] = u_rec[dp.gamma_nodes]
    u_l = dp.solve_dirichlet(run.state.f, bvals_rec)
    diff = u_dag - u_l
    return (dp.l2_norm(f_truth - run.state.f),
            dp.l2_norm(diff), dp.h1_norm(diff))


def compatible_start(dp: DiscreteProblem, box):
    """Constant start satisfying the flux compatibility constraint.

    The mean of the source is invisible to the deflated forward map, so the
    iteration preserves it; starting on the compatible slice (source mean =
    minus the total flux over the volume) is the only way the final mean
    can be right.
    """
    c = -dp.b_flux.sum() / dp.domain_volume
    f0 = np.full(dp.mesh.n_vertices, float(np.clip(c, *box)))
    p0 = np.full((dp.mesh.n_triangles, 2), 0.5)
    return f0, p0


def run_benchmark(config: ExperimentConfig):
    """Multilevel reconstruction over config.levels; returns records + runs."""
    if not config.levels:
        raise ValueError("config.levels must be nonempty")
    truths: dict[int, P1Field] = {}

    def make_level(level):
        prob, f_truth = build_benchmark_problem(level, config.gamma_case,
                                                config.box)
        dp = DiscreteProblem(prob, cg_tol=config.cg_tol)
        truths[level] = f_truth
        h = dp.mesh.mesh_size
        rho = config.rho_coef * math.sqrt(h)
        theta_l = config.noise_coef * h * math.sqrt(rho)
        if config.truth_refine:
            fine_prob, fine_truth = build_benchmark_problem(
                2 * level, config.gamma_case, config.box)
            fine_dp = DiscreteProblem(fine_prob, cg_tol=config.cg_tol)
            u_fine = fine_dp.solve_state(fine_truth)
            # coarse node (ix, iy) coincides with fine node (2ix, 2iy)
            nf = 2 * level + 1
            iy, ix = np.divmod(dp.gamma_nodes, level + 1)
            fine_nodes = 2 * iy * nf + 2 * ix
            u_on_coarse = np.zeros(dp.mesh.n_vertices)
            u_on_coarse[dp.gamma_nodes] = u_fine[fine_nodes]
            z = synthesize_observation(dp, f_truth, theta_l,
                                       [config.seed, level],
                                       u_truth=u_on_coarse)
        else:
            z = synthesize_observation(dp, f_truth, theta_l,
                                       [config.seed, level])
        params = PdParams(rho=rho, tau=config.tau, theta=config.theta,
                          max_iter=config.max_iter,
                          isotropic_dual=config.isotropic_dual,
                          record_b_norms=config.record_b_norms)
        return dp, z, params

    if config.certify == "empirical":
        certifier = certify_steps_empirical
    elif config.certify == "analytic":
        certifier = (lambda params, dp:
                     certify_steps(params, dp.mesh,
                                   dp.prob.coeffs.alpha_lower, dp.mesh.box))
    else:
        raise ValueError(f"unknown certify mode {config.certify!r}")

    first_prob, _ = build_benchmark_problem(config.levels[0],
                                            config.gamma_case, config.box)
    first_dp = DiscreteProblem(first_prob, cg_tol=config.cg_tol)
    initial = compatible_start(first_dp, config.box)
    try:
        runs = multilevel_run(config.levels, make_level, certifier=certifier,
                              initial=initial)
    except MultilevelError as exc:
        records = _records_for(exc.completed, truths)
        raise BenchmarkError(str(exc), records) from exc
    return _records_for(runs, truths), runs


def _records_for(runs, truths):
    records = []
    for run_ in runs:
        err_f, err_u, err_u_h1 = _level_errors(run_, truths[run_.level])
        records.append(RunRecord(
            level=run_.level, h=run_.problem.mesh.mesh_size,
            rho=run_.params.rho, delta=run_.observation.noise_level,
            iterations=run_.state.n, tolerance=run_.state.final_tolerance,
            err_f_L2=err_f, err_u_L2=err_u, err_u_H1=err_u_h1))
    return records


def write_table(records, path: str, incomplete: str | None = None):
    lines = [RunRecord.CSV_HEADER] + [r.csv_row() for r in records]
    if incomplete is not None:
        lines.append(f"# incomplete: {incomplete}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_benchmark(config: ExperimentConfig, records, runs):
    """Write the results table and per-level field files into out_dir."""
    os.makedirs(config.out_dir, exist_ok=True)
    write_table(records, os.path.join(config.out_dir, "table.csv"))
    if config.export_format == "none":
        return
    ext = config.export_format
    for run_ in runs:
        mesh = run_.problem.mesh
        base = os.path.join(config.out_dir, f"level{run_.level}")
        export_field(mesh, run_.state.f, f"{base}_f.{ext}", ext,
                     name="reconstruction")
        export_field(mesh, run_.state.p, f"{base}_p.{ext}", ext, name="dual")
        write_observation_csv(mesh, run_.observation,
                              f"{base}_observation.csv")


def export_field(mesh: TriMesh, values: np.ndarray, path: str,
                 fmt: str = "csv", name: str = "value"):
    """Write a nodal or per-triangle field as CSV or legacy ASCII VTK.

    CSV: one row per node (nodal fields) or per centroid (element fields),
    vector components expanded into extra columns.  Output is byte-stable
    for identical inputs.
    """
    values = np.asarray(values, dtype=float)
    nodal = values.shape[0] == mesh.n_vertices
    if not nodal and values.shape[0] != mesh.n_triangles:
        raise ValueError("field length matches neither nodes nor triangles")
    comps = values.reshape(values.shape[0], -1)
    try:
        if fmt == "csv":
            _write_csv_field(mesh, comps, nodal, path)
        elif fmt == "vtk":
            _write_vtk_field(mesh, comps, nodal, path, name)
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write field to {path}: {exc}") from exc


def _write_csv_field(mesh, comps, nodal, path):
    points = mesh.vertices if nodal else mesh.centroids
    if comps.shape[1] == 1:
        header = "x1,x2,value"
    else:
        header = "x1,x2," + ",".join(f"value_{k + 1}"
                                     for k in range(comps.shape[1]))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for pt, row in zip(points, comps):
            cols = [f"{pt[0]:.10e}", f"{pt[1]:.10e}"]
            cols += [_trim(v) for v in row]
            fh.write(",".join(cols) + "\n")


def _trim(v: float) -> str:
    return f"{v:.17g}"


def _write_vtk_field(mesh, comps, nodal, path, name):
    nt = mesh.n_triangles
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(f"{name}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} float\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.10e} {y:.10e} 0.0\n")
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"{'POINT_DATA' if nodal else 'CELL_DATA'} "
                 f"{mesh.n_vertices if nodal else nt}\n")
        if comps.shape[1] == 1:
            fh.write(f"SCALARS {name} float 1\nLOOKUP_TABLE default\n")
            for (v,) in comps:
                fh.write(f"{v:.10e}\n")
        else:
            fh.write(f"VECTORS {name} float\n")
            for row in comps:
                vals = list(row) + [0.0] * (3 - len(row))
                fh.write(" ".join(f"{v:.10e}" for v in vals) + "\n")


def write_observation_csv(mesh: TriMesh, z: Observation, path: str):
    with open(path, "w") as fh:
        fh.write("node_x1,node_x2,z_value\n")
        for idx, val in zip(z.nodes, z.values):
            x, y = mesh.vertices[idx]
            fh.write(f"{x:.10e},{y:.10e},{_trim(val)}\n")


def read_observation_csv(path: str, mesh: TriMesh,
                         gamma: GammaSpec) -> Observation:
    """Match observation rows to mesh nodes on the observed sides."""
    nodes = mesh.side_nodes(gamma.sides)
    coords = mesh.vertices[nodes]
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != nodes.shape[0]:
        raise ValueError(
            f"observation file has {data.shape[0]} rows, expected "
            f"{nodes.shape[0]} boundary nodes")
    values = np.empty(nodes.shape[0])
    tol = 1e-8 * mesh.mesh_size
    for x, y, v in data:
        dist = np.hypot(coords[:, 0] - x, coords[:, 1] - y)
        k = int(np.argmin(dist))
        if dist[k] > tol:
            raise ValueError(f"observation point ({x}, {y}) matches no "
                             "node on the observed boundary")
        values[k] = v
    return Observation(nodes, values)
