"""Command-line entry point: ``fraclame <subcommand> --config <path> --out <dir>``.

Exit codes: 0 success, 1 solver failure, 2 configuration failure, 3 invariant failure.
Every run writes report.json (deterministic), timings.json and the CSV tables
moments.csv, constants.csv and gaps.csv.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
COMMANDS = ("validate", "forward", "dtn", "invert-linear", "invert-obstacle", "invert-nonlinear")
CSV_COLUMNS = ["experiment", "quantity", "recovered", "truth", "budget", "relative_error"]

log = logging.getLogger("fraclame")


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _csv_value(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return v


class Outputs:
    def __init__(self, out: Path):
        self.out = out
        self.tables = {"moments": [], "constants": [], "gaps": []}

    def write(self, report: dict, timings: dict):
        self.out.mkdir(parents=True, exist_ok=True)
        text = json.dumps(_clean(report), sort_keys=True, indent=2, allow_nan=False)
        (self.out / "report.json").write_text(text + "\n")
        (self.out / "timings.json").write_text(json.dumps(_clean(timings), sort_keys=True, indent=2) + "\n")
        for name, rows in self.tables.items():
            with open(self.out / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for row in rows:
                    w.writerow([_csv_value(float(v)) if not isinstance(v, str) else v for v in row])


# ------------------------------------------------------------------ commands

def cmd_validate(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    from .invariants import run_suites

    checks, t = run_suites(cfg, workers)
    timings.update({f"suite.{k}": v for k, v in t.items()})
    ok = all(c.passed for c in checks)
    failed = [c.name for c in checks if not c.passed]
    return {"invariants": [c.to_dict() for c in checks], "failed": failed}, EXIT_OK if ok else EXIT_INVARIANT


def cmd_forward(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    import numpy as np

    from .forms import bilinear_B
    from .solvers import AmplitudeError, NewtonOptions, solve_exterior_linear, solve_exterior_nonlinear, solve_obstacle

    fw = cfg.raw["forward"]
    kind = fw["kind"]
    part = cfg.partition("d1" if kind == "obstacle" else None)
    g = cfg.vector_field(fw["data"])
    p = cfg.lame("p1", part.omega)
    sv = cfg.raw["solver"]
    result = {"kind": kind}
    if kind == "linear":
        u, rep = solve_exterior_linear(g, p, ctx, part, sv["tol"], sv["max_iter"])
        pe = p
    elif kind == "obstacle":
        u, rep = solve_obstacle(g, p, ctx, part, sv["tol"], sv["max_iter"])
        pe = p.restricted(part.free)
    else:
        c = cfg.coefficients("c1", part.omega)
        opts = NewtonOptions(tol=sv["newton_tol"], continuation_steps=sv["continuation_steps"])
        u, rep = solve_exterior_nonlinear(g, p, c, ctx, part, opts)
        pe = p
        largest = 1.0
        for factor in fw.get("probe", []):
            try:
                solve_exterior_nonlinear(factor * g, p, c, ctx, part, opts)
                largest = max(largest, float(factor))
            except AmplitudeError:
                break
        result["largest_solved_amplitude_factor"] = largest
    om = part.omega
    result.update(solve=rep.to_dict(), data_max=float(np.abs(g).max()),
                  max_abs_omega=float(np.abs(u[:, om]).max()),
                  l2_omega=float(np.sqrt(ctx.grid.cell_volume * np.sum(u[:, om] ** 2))),
                  energy=float(bilinear_B(u, u, pe, ctx)))
    return result, EXIT_OK


def _subset(d, count: int):
    import numpy as np

    from .runge import ControlDictionary, farthest_point_order

    order = np.sort(farthest_point_order(d.centers)[:count]) if count < len(d.centers) else None
    centers = d.centers if order is None else d.centers[order]
    return ControlDictionary(d.grid, centers, d.radius, d.support)


def cmd_dtn(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    import numpy as np

    from .dtn import dtn_gap_matrix
    from .forms import stiffness_apply
    from .runge import build_dictionary
    from .solvers import DirectSolver

    part = cfg.partition()
    dt = cfg.raw["dtn"]
    p1, p2 = cfg.lame("p1", part.omega), cfg.lame("p2", part.omega)
    radius = dt["radius"] if dt["radius"] is not None else cfg.raw["runge"]["radius"]
    full1 = build_dictionary(ctx.grid, part.w1, radius=radius)
    full2 = full1 if cfg.raw["regions"]["w2"] == cfg.raw["regions"]["w1"] else build_dictionary(
        ctx.grid, part.w2, radius=radius)
    controls = _atoms_of(full1, dt["controls"])
    tests = _atoms_of(full2, dt["tests"])
    tol = cfg.raw["solver"]["tol"]
    gap = dtn_gap_matrix(p1, p2, controls, tests, ctx, part, direct=True)
    solver = DirectSolver(p1, ctx, part.omega)
    hv = ctx.grid.cell_volume
    uc, _ = solver.solve(controls)
    ut, _ = solver.solve(tests)
    P = -hv * np.einsum("aixyz,bixyz->ab", stiffness_apply(uc, p1, ctx), tests)
    Q = -hv * np.einsum("bixyz,aixyz->ab", stiffness_apply(ut, p1, ctx), controls)
    scale = float(np.abs(P).max())
    threshold = 10 * tol * scale
    sym = float(np.max(np.abs(P - Q) / np.maximum(np.abs(P), 1.0)))
    equal = p1.same_as(p2)
    for a in range(gap.values.shape[0]):
        for b in range(gap.values.shape[1]):
            v = float(gap.values[a, b])
            out.tables["gaps"].append(["dtn", f"gap[{a},{b}]", v, 0.0 if equal else float("nan"), threshold,
                                       abs(v) / scale])
    result = {"gap": gap.to_dict(), "pairing_scale": scale, "threshold": threshold,
              "below_threshold": gap.max_abs <= threshold, "equal_parameters": equal,
              "symmetry_defect": sym, "controls": int(len(controls)), "tests": int(len(tests))}
    code = EXIT_INVARIANT if (equal and gap.max_abs > threshold) or sym > 1e-9 else EXIT_OK
    return result, code


def _atoms_of(d, n_fields: int):
    """First ``n_fields`` atoms of a farthest-point subset (3 directions per center)."""
    sub = _subset(d, -(-n_fields // 3))
    return sub.atoms(0, n_fields)


def _constant_difference(a, b, omega):
    import numpy as np

    d = (b - a)[omega]
    return float(d[0]) if d.size and np.all(d == d[0]) else None


def cmd_invert_linear(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    from .config import make_setup
    from .experiments import recover_constants_lame, run_linear_inversion

    part = cfg.partition()
    om = part.omega
    p1, p2 = cfg.lame("p1", om), cfg.lame("p2", om)
    psi, sup = cfg.psi()
    setup = make_setup(cfg, ctx, part, cache_dir=out.out / "cache")
    omr = cfg.region("omega")
    t0 = time.perf_counter()
    rep, gap = run_linear_inversion(psi, sup, p1, p2, setup, omr)
    timings["moments"] = time.perf_counter() - t0
    null, _ = run_linear_inversion(psi, sup, p1, p1, setup, omr, experiment="invert-linear-null")
    cl = _constant_difference(p1.lambda_field, p2.lambda_field, om)
    cm = _constant_difference(p1.mu_field, p2.mu_field, om)
    truth = None if cl is None or cm is None else (cl, cm)
    syn, _ = recover_constants_lame(psi, p1, p2, ctx, truth=truth, experiment="invert-linear-synthetic")
    rc, idents = recover_constants_lame(psi, p1, p2, ctx, setup=setup, gap=gap, truth=truth)
    for r in rep.results + null.results:
        out.tables["moments"].append(r.csv_row())
    for s in (syn, rc):
        out.tables["constants"].extend(s.csv_rows())
    result = {"moments": rep.to_dict(), "null_moments": null.to_dict(),
              "constants_synthetic": syn.to_dict(), "constants_runge": rc.to_dict(),
              "constant_identities": [i.to_dict() for i in idents],
              "dictionary": {"controls": setup.controls.size, "tests": setup.tests.size,
                             "alpha_rel": setup.alpha_rel, "alpha": setup.alpha},
              "gap_max_abs": gap.max_abs}
    ok = rep.all_within_budget and null.all_within_budget
    return result, EXIT_OK if ok else EXIT_INVARIANT


def cmd_invert_obstacle(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    import numpy as np

    from .experiments import obstacle_distinguish
    from .grid import GeometryError
    from .runge import build_dictionary

    p1 = cfg.lame("p1", cfg.partition().omega)
    parts = {k: cfg.partition(k) for k in ("d1", "d2")}
    ot = cfg.raw["obstacle_test"]
    g = cfg.vector_field([ot["data"]])
    if np.any(g[:, ~parts["d1"].w1] != 0):
        raise GeometryError("obstacle_test.data must be supported in W1")
    tests = _subset(build_dictionary(ctx.grid, parts["d1"].w2, radius=cfg.raw["runge"]["radius"]), ot["tests"])
    tol = cfg.raw["solver"]["tol"]
    same = obstacle_distinguish(g, p1, ctx, (parts["d1"], parts["d1"]), tests, tol)
    diff = obstacle_distinguish(g, p1, ctx, (parts["d1"], parts["d2"]), tests, tol)
    for name, rep in (("same", same), ("distinct", diff)):
        for b, v in enumerate(rep.gaps):
            out.tables["gaps"].append([f"invert-obstacle-{name}", f"gap[{b}]", float(v),
                                       0.0 if name == "same" else float("nan"), rep.threshold,
                                       abs(float(v)) / rep.scale if rep.scale else float("nan")])
    expect_distinct = bool(np.any(parts["d1"].obstacle != parts["d2"].obstacle))
    result = {"same_obstacle": same.to_dict(), "distinct_obstacles": diff.to_dict(),
              "obstacle_nodes": {k: int(v.obstacle.sum()) for k, v in parts.items()},
              "expected_distinguishable": expect_distinct,
              "separation_over_threshold": diff.max_gap / same.threshold if same.threshold else None}
    ok = (not same.distinguishable) and diff.distinguishable == expect_distinct
    return result, EXIT_OK if ok else EXIT_INVARIANT


def cmd_invert_nonlinear(cfg, ctx, out: Outputs, timings: dict, workers: int) -> tuple:
    from .config import make_setup
    from .experiments import recover_AC, synthetic_ac_constants

    if ctx.s < 0.5:
        from .config import ConfigError
        raise ConfigError("invert-nonlinear requires s in [1/2, 1)")
    part = cfg.partition()
    om = part.omega
    p = cfg.lame("p1", om)
    c1, c2 = cfg.coefficients("c1", om), cfg.coefficients("c2", om)
    psi, sup = cfg.psi()
    omr = cfg.region("omega")
    setup = make_setup(cfg, ctx, part, cache_dir=out.out / "cache")
    ca = _constant_difference(c1.A_field, c2.A_field, om)
    cc = _constant_difference(c1.C_field, c2.C_field, om)
    truth = None if ca is None or cc is None else (ca, cc)
    rep, cs = recover_AC(psi, sup, p, c1, c2, setup, omr, truth_constants=truth)
    null, _ = recover_AC(psi, sup, p, c1, c1, setup, omr, truth_constants=(0.0, 0.0),
                         experiment="invert-nonlinear-null")
    syn = synthetic_ac_constants(psi, sup, c1, c2, ctx, omr, truth)
    for r in rep.results + null.results:
        out.tables["moments"].append(r.csv_row())
    for s in (syn, cs):
        out.tables["constants"].extend(s.csv_rows())
    result = {"moments": rep.to_dict(), "null_moments": null.to_dict(), "constants_runge": cs.to_dict(),
              "constants_synthetic": syn.to_dict(),
              "dictionary": {"controls": setup.controls.size, "tests": setup.tests.size,
                             "alpha_rel": setup.alpha_rel, "alpha": setup.alpha}}
    ok = rep.all_within_budget and null.all_within_budget
    return result, EXIT_OK if ok else EXIT_INVARIANT


HANDLERS = {"validate": cmd_validate, "forward": cmd_forward, "dtn": cmd_dtn,
            "invert-linear": cmd_invert_linear, "invert-obstacle": cmd_invert_obstacle,
            "invert-nonlinear": cmd_invert_nonlinear}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fraclame", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run configuration (or shipped:<name>)")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the configuration seed (u64)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for FFTs and BLAS")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import __version__
    from .config import ConfigError, RunConfig, shipped_config
    from .grid import GeometryError
    from .solvers import SolverError

    out = Outputs(Path(args.out))
    report = {"command": args.command, "version": __version__}
    timings: dict = {}
    t0 = time.perf_counter()
    try:
        path = shipped_config(args.config.split(":", 1)[1]) if args.config.startswith("shipped:") else args.config
        cfg = RunConfig.load(path).with_seed(args.seed)
        report.update(config=cfg.raw, config_hash=cfg.hash, seed=cfg.seed)
        ctx = cfg.context(args.threads)
        result, code = HANDLERS[args.command](cfg, ctx, out, timings, args.threads)
        report.update(status="ok" if code == EXIT_OK else "invariant_failure", result=result)
    except (ConfigError, GeometryError) as exc:
        code = EXIT_CONFIG
        report.update(status="config_error", reason=str(exc), error_type=type(exc).__name__)
    except SolverError as exc:
        code = EXIT_SOLVER
        report.update(status="solver_failure", reason=str(exc), error_type=type(exc).__name__)
    report["exit_code"] = code
    timings["total"] = time.perf_counter() - t0
    try:
        out.write(report, timings)
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code != EXIT_OK:
        print(f"fraclame {args.command}: {report['status']}: {report.get('reason', report.get('result', {}).get('failed', ''))}",
              file=sys.stderr)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
