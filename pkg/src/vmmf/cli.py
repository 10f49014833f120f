"""Command-line entry point (``vmmf <subcommand> ...``)."""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

# old system TBB builds make numba warn on every parallel launch
warnings.filterwarnings("ignore", message=".*TBB.*")

from .dynamics import PhaseEnsemble, SimConfig, TrajectoryHistory, simulate


def _kernel_build(a):
    from .kernels import build_kernel_tables, build_mollifier, save_kernel

    k = build_kernel_tables(build_mollifier(a.epsilon, a.chi), a.tmax, dt=a.dt, dr=a.dr,
                            family=a.family)
    save_kernel(k, a.out)
    print(json.dumps({"out": str(a.out), "epsilon": k.epsilon, "family": k.family,
                      "shape": list(k.tables.shape[1:])}))
    return 0


def _load_kernel(path):
    from .kernels import load_kernel

    return load_kernel(path)


def _simulate(a):
    cfg = SimConfig.from_ini(a.config)
    hist = simulate(cfg, _load_kernel(a.kernel))
    hist.save(a.out, a.csv)
    print(json.dumps({"out": str(a.out), "particles": hist.n_particles,
                      "steps": hist.steps}))
    return 0


def _meanfield(a):
    from .meanfield import picard_solve, reference_flow

    cfg = SimConfig.from_ini(a.config)
    kernel = _load_kernel(a.kernel)
    cfg.validate(kernel)
    initial = PhaseEnsemble.from_csv(a.initial) if a.initial else cfg.initial_ensemble()
    if a.mode == "flow":
        sol = reference_flow(initial, kernel, cfg)
    else:
        sol = picard_solve(initial, kernel, cfg, max_iter=a.max_iter, tol=a.tol)
    sol.to_history().save(a.out, a.csv)
    print(json.dumps({"out": str(a.out), "mode": a.mode, "iterations": sol.iterations,
                      "converged": sol.converged,
                      "residual": sol.residuals[-1] if sol.residuals else None}))
    return 0 if sol.converged else 1


def _read_ensemble(path: str, t: float | None) -> PhaseEnsemble:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return PhaseEnsemble.from_csv(p)
    hist = TrajectoryHistory.load(p)
    return hist.ensemble_at(hist.t_end if t is None else t)


def _mkr(a):
    from .transport import mkr_distance

    mu = _read_ensemble(a.mu, a.t)
    nu = _read_ensemble(a.nu, a.t)
    d, plan = mkr_distance(mu, nu, mode=a.mode, budget=a.budget)
    print(json.dumps({"distance": d, "atoms": [mu.n, nu.n], "mode": plan.mode,
                      "gap": plan.gap}))
    return 0


def _field_dump(a):
    from .fields import FieldGrid, sample_grid, save_field_grid

    h, R = (float(v) for v in a.grid.split(","))
    hist = TrajectoryHistory.load(a.history)
    g = sample_grid(hist, _load_kernel(a.kernel), a.t, FieldGrid.cube(R, h))
    out = Path(a.out)
    save_field_grid(g, out, csv_prefix=str(out.with_suffix("")))
    print(json.dumps({"out": str(out), "shape": list(g.shape), "t": a.t}))
    return 0


def _experiment(a):
    from .harness import run_experiment

    rep = run_experiment(a.name, a.config, a.out)
    for name, c in rep.criteria.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {a.name}.{name}: {c['value']}")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmmf", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("kernel-build", help="tabulate a retarded kernel")
    s.add_argument("--epsilon", type=float, required=True)
    s.add_argument("--tmax", type=float, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--family", choices=["double", "single"], default="double")
    s.add_argument("--chi", default="bump")
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--dr", type=float, default=None)
    s.set_defaults(func=_kernel_build)

    s = sub.add_parser("simulate", help="run the N-particle system")
    s.add_argument("--config", required=True)
    s.add_argument("--kernel", required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--csv", type=Path, default=None)
    s.set_defaults(func=_simulate)

    s = sub.add_parser("meanfield", help="weighted mean-field flow")
    s.add_argument("--mode", choices=["flow", "picard"], default="flow")
    s.add_argument("--config", required=True)
    s.add_argument("--kernel", required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--initial", default=None, help="weighted ensemble CSV")
    s.add_argument("--csv", type=Path, default=None)
    s.add_argument("--max-iter", type=int, default=60)
    s.add_argument("--tol", type=float, default=1e-12)
    s.set_defaults(func=_meanfield)

    s = sub.add_parser("mkr", help="truncated-cost transport distance")
    s.add_argument("--mu", required=True)
    s.add_argument("--nu", required=True)
    s.add_argument("--mode", choices=["exact", "entropic"], default="exact")
    s.add_argument("--t", type=float, default=None, help="time slice of history inputs")
    s.add_argument("--budget", type=int, default=1024)
    s.set_defaults(func=_mkr)

    s = sub.add_parser("field-dump", help="sample fields on a cube grid")
    s.add_argument("--history", required=True)
    s.add_argument("--kernel", required=True)
    s.add_argument("--t", type=float, required=True)
    s.add_argument("--grid", required=True, help="h,R: spacing and half width")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=_field_dump)

    s = sub.add_parser("experiment", help="run an experiment and write its report")
    s.add_argument("name", choices=["equivalence", "dobrushin", "meanfield", "energy"])
    s.add_argument("--config", default=None)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=_experiment)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        return a.func(a)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"vmmf {a.cmd}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
