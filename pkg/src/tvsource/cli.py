"""Command line front end.

Subcommands:
  bench   multilevel benchmark run writing the error table and field files
  solve   single-level reconstruction from an observation CSV
  check   quick self-test of the core numerical invariants
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import experiment, primal_dual
from .experiment import (ExperimentConfig, build_benchmark_problem,
                         compatible_start, export_field,
                         read_observation_csv, run_benchmark)
from .mesh import build_structured
from .pde_solvers import DiscreteProblem
from .primal_dual import (PdParams, certify_steps, certify_steps_empirical,
                          params_for_level)
from .sparse_linalg import grad_operator_norm
from .tv_calculus import gradient_pairing, subgradient_witness, tv_value


def _parse_levels(text: str):
    return tuple(int(tok) for tok in text.split(","))


def _parse_box(text: str):
    lo, hi = (float(tok) for tok in text.split(","))
    return (lo, hi)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--gamma", choices=sorted(experiment.GAMMA_CASES),
                   default=None, help="observed boundary sides")
    p.add_argument("--tau", type=float, default=None, help="primal step size")
    p.add_argument("--theta", type=float, default=None, help="dual weight")
    p.add_argument("--rho-coef", type=float, default=None,
                   help="regularization: rho = rho_coef * sqrt(h)")
    p.add_argument("--box", type=_parse_box, default=None,
                   metavar="LO,HI", help="pointwise source bounds")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--isotropic-dual", action="store_true", default=None,
                   help="use the per-triangle Euclidean dual projection")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--format", choices=("csv", "vtk", "none"), default=None,
                   help="field export format")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvsource",
        description="TV-regularized reconstruction of elliptic source terms "
                    "from partial boundary observations")
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="run the multilevel benchmark")
    p_bench.add_argument("--config", default=None,
                         help="JSON config file (flags override it)")
    p_bench.add_argument("--levels", type=_parse_levels, default=None,
                         metavar="L1,L2,...", help="levels, doubling from 4")
    p_bench.add_argument("--include-64", action="store_true",
                         help="extend the default levels up to 64")
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--noise-coef", type=float, default=None,
                         help="noise scale: theta_l = c * h_l * sqrt(rho_l)")
    p_bench.add_argument("--truth-refine", action="store_true", default=None,
                         help="synthesize data on a once-refined mesh")
    p_bench.add_argument("--record-b-norms", action="store_true",
                         default=None, help="track step preconditioner norms")
    _add_common(p_bench)

    p_solve = sub.add_parser("solve", help="reconstruct from an observation file")
    p_solve.add_argument("observation", help="CSV with node_x1,node_x2,z_value")
    p_solve.add_argument("--level", type=int, required=True)
    _add_common(p_solve)

    sub.add_parser("check", help="run the numerical invariant self-test")
    return parser


def cmd_bench(args) -> int:
    overrides = dict(
        levels=args.levels, gamma_case=args.gamma, seed=args.seed,
        noise_coef=args.noise_coef, rho_coef=args.rho_coef, tau=args.tau,
        theta=args.theta, max_iter=args.max_iter, box=args.box,
        isotropic_dual=args.isotropic_dual,
        record_b_norms=args.record_b_norms, truth_refine=args.truth_refine,
        out_dir=args.out, export_format=args.format)
    if args.config:
        config = ExperimentConfig.from_json(args.config, **overrides)
    else:
        defaults = ExperimentConfig()
        merged = {k: v for k, v in overrides.items() if v is not None}
        config = ExperimentConfig(**{**defaults.__dict__, **merged})
    if args.include_64 and args.levels is None:
        config = ExperimentConfig(**{**config.__dict__,
                                     "levels": (4, 8, 16, 32, 64)})
    try:
        records, runs = run_benchmark(config)
    except experiment.BenchmarkError as exc:
        os.makedirs(config.out_dir, exist_ok=True)
        experiment.write_table(exc.records,
                               os.path.join(config.out_dir, "table.csv"),
                               incomplete=str(exc))
        print(f"benchmark aborted: {exc}", file=sys.stderr)
        print(f"partial table written to {config.out_dir}/table.csv",
              file=sys.stderr)
        return 1
    experiment.export_benchmark(config, records, runs)
    print(experiment.RunRecord.CSV_HEADER)
    for rec in records:
        print(rec.csv_row())
    print(f"table and fields written to {config.out_dir}/")
    return 0


def cmd_solve(args) -> int:
    level = args.level
    box = args.box or (-1.0, 3.0)
    prob, _ = build_benchmark_problem(level, args.gamma or "bottom", box)
    dp = DiscreteProblem(prob)
    z = read_observation_csv(args.observation, dp.mesh, prob.gamma)
    kw = {"tau": args.tau if args.tau is not None else 5.0}
    if args.theta is not None:
        kw["theta"] = args.theta
    if args.max_iter is not None:
        kw["max_iter"] = args.max_iter
    if args.isotropic_dual:
        kw["isotropic_dual"] = True
    params = params_for_level(dp.mesh.mesh_size,
                              rho_coef=args.rho_coef or 1e-3, **kw)
    cert = certify_steps_empirical(params, dp)
    f0, p0 = compatible_start(dp, box)
    state = primal_dual.run(dp, z, params, f0=f0, p0=p0, certificate=cert)
    out_dir = args.out or "results"
    os.makedirs(out_dir, exist_ok=True)
    fmt = args.format or "csv"
    if fmt != "none":
        export_field(dp.mesh, state.f,
                     os.path.join(out_dir, f"solve_level{level}_f.{fmt}"),
                     fmt, name="reconstruction")
    print(f"stopped after {state.n} iterations, "
          f"final tolerance {state.final_tolerance:.4e}, "
          f"objective {state.history[-1].objective:.6e}")
    return 0


def cmd_check(_args) -> int:
    """Fast invariant battery; prints one line per check."""
    failures = 0

    def report(name, ok, detail=""):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" +
              (f"  ({detail})" if detail else ""))
        failures += 0 if ok else 1

    mesh = build_structured(4)
    report("mesh areas sum to the domain volume",
           abs(mesh.areas.sum() - 4.0) < 1e-12)

    rng = np.random.default_rng(7)
    f = rng.standard_normal(mesh.n_vertices)
    p = np.sign(rng.standard_normal((mesh.n_triangles, 2)))
    tv = tv_value(mesh, f)
    witness = gradient_pairing(mesh, f, subgradient_witness(mesh, f))
    report("duality witness attains the total variation",
           abs(tv - witness) <= 1e-12 * max(tv, 1.0))
    report("feasible pairings stay below the total variation",
           gradient_pairing(mesh, f, p) <= tv + 1e-12)

    prob, f_truth = build_benchmark_problem(4)
    dp = DiscreteProblem(prob)
    params = params_for_level(dp.mesh.mesh_size)
    cert = certify_steps(params, dp.mesh, prob.coeffs.alpha_lower)
    report("step-size certificate holds at level 4",
           cert.valid, f"lhs={cert.lhs:.4g} rhs={cert.rhs:.4g}")
    report("coercivity and trace constants",
           abs(cert.c1 - 0.025) < 1e-12
           and abs(cert.c_gamma - math.sqrt(3.0)) < 1e-12)

    xi = rng.standard_normal(dp.mesh.n_vertices)
    z = experiment.synthesize_observation(dp, f_truth, 0.0, 0)
    u = dp.solve_state(f, tol=1e-12)
    u_a = dp.solve_adjoint(u, z, tol=1e-12)
    u_bar = dp.solve_source_part(xi, tol=1e-12)
    lhs = float((u - z.embed(dp.mesh.n_vertices)) @ (dp.M_gamma @ u_bar))
    rhs = dp.lumped_inner(xi, u_a)
    report("adjoint gradient identity",
           abs(lhs - rhs) <= 1e-8 * max(abs(lhs), 1.0),
           f"|lhs-rhs|={abs(lhs - rhs):.2e}")

    gn4 = grad_operator_norm(build_structured(4))
    gn8 = grad_operator_norm(build_structured(8))
    report("gradient norm scales like 1/h", 1.9 <= gn8 / gn4 <= 2.1,
           f"ratio={gn8 / gn4:.3f}")

    print(f"{failures} failure(s)")
    return 1 if failures else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"bench": cmd_bench, "solve": cmd_solve, "check": cmd_check}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
