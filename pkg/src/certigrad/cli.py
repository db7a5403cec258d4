"""Command-line frontend: problem files, experiment drivers, reports.

Problems enter as JSON (triplet-sparse symmetric matrices plus optional
named parameters with sensitivity triplets) and leave as JSON reports and
CSV traces. All outputs are written atomically and are byte-reproducible
for a fixed (config, seed) pair, except for wall-clock timing metadata,
which lives under separate "timings"/"environment" keys.

Exit codes of ``solve``: 0 certified tight solution, 1 parse error,
2 not tight, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import tempfile

import numpy as np
import scipy

from . import __version__
from .autotight import tighten_loop
from .certify import NOT_TIGHT, TIGHT_CERTIFIED, certify
from .diff import backprop_cift, backprop_is, kkt_workspace
from .errors import CertigradError
from .qcqp import HomQCQP, ParamSymMatrix, build_hom_qcqp
from .sdp import NUMERICAL_FAILURE, OPTIMAL, build_shor_relaxation, solve_sdp

SCHEMA_VERSION = "1.0"

log = logging.getLogger("certigrad")


class ParseError(CertigradError):
    """Problem or config file is malformed; message names the offending field."""


# --- problem files -----------------------------------------------------------

def _check_triplets(trips, n, where):
    out = []
    if not isinstance(trips, list):
        raise ParseError(f"{where}: expected a list of [row, col, value] triplets")
    for k, t in enumerate(trips):
        if not (isinstance(t, list) and len(t) == 3):
            raise ParseError(f"{where}[{k}]: expected [row, col, value]")
        i, j, v = t
        if not (isinstance(i, int) and isinstance(j, int)):
            raise ParseError(f"{where}[{k}]: row/col must be integers")
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(f"{where}[{k}]: index ({i},{j}) outside dim {n}")
        out.append((i, j, float(v)))
    return tuple(out)


def problem_from_dict(doc: dict) -> HomQCQP:
    if not isinstance(doc, dict):
        raise ParseError("problem file must be a JSON object")
    version = str(doc.get("schema_version", ""))
    if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise ParseError(f"schema_version: unsupported major version {version!r}")
    try:
        n = int(doc["n"])
        homog = int(doc["homog_index"])
        cost_doc = doc["cost"]
        cons_doc = doc["constraints"]
    except KeyError as exc:
        raise ParseError(f"missing required field {exc.args[0]!r}") from None
    if not (0 <= homog < n):
        raise ParseError(f"homog_index: {homog} outside dim {n}")

    params = doc.get("params", [])
    cost_sens = {}
    cons_sens = {}
    for p_idx, p in enumerate(params):
        where = f"params[{p_idx}]"
        if "name" not in p:
            raise ParseError(f"{where}: missing 'name'")
        if "cost" in p:
            cost_sens[p_idx] = _check_triplets(p["cost"], n, f"{where}.cost")
        for ci, trips in p.get("constraints", {}).items():
            cons_sens.setdefault(int(ci), {})[p_idx] = _check_triplets(
                trips, n, f"{where}.constraints[{ci}]")

    cost = ParamSymMatrix(n, _check_triplets(cost_doc.get("triplets", []), n, "cost.triplets"),
                          cost_sens)
    constraints = []
    flags = []
    for ci, c in enumerate(cons_doc):
        trips = _check_triplets(c.get("triplets", []), n, f"constraints[{ci}].triplets")
        constraints.append(ParamSymMatrix(n, trips, cons_sens.get(ci, {})))
        flags.append(bool(c.get("redundant", False)))
    try:
        return build_hom_qcqp(cost, constraints, homog, flags)
    except CertigradError as exc:
        raise ParseError(str(exc)) from exc


def problem_to_dict(q: HomQCQP, param_names=None) -> dict:
    def trips(mat):
        return [[i, j, v] for i, j, v in mat.entries]

    doc = {
        "schema_version": SCHEMA_VERSION,
        "n": q.n,
        "homog_index": q.homog_index,
        "cost": {"triplets": trips(q.cost)},
        "constraints": [{"triplets": trips(a), "redundant": bool(f)}
                        for a, f in zip(q.constraints, q.redundant_flags)],
    }
    indices = q.param_indices()
    if indices:
        params = []
        for k in indices:
            entry = {"name": param_names[k] if param_names else f"p{k}"}
            if k in q.cost.param_sensitivity:
                entry["cost"] = [[i, j, v] for i, j, v in q.cost.param_sensitivity[k]]
            cons = {str(ci): [[i, j, v] for i, j, v in a.param_sensitivity[k]]
                    for ci, a in enumerate(q.constraints) if k in a.param_sensitivity}
            if cons:
                entry["constraints"] = cons
            params.append(entry)
        doc["params"] = params
    return doc


def load_problem(path: str) -> HomQCQP:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return problem_from_dict(doc)


# --- report plumbing ---------------------------------------------------------

def environment_fingerprint() -> dict:
    return {
        "certigrad": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def atomic_write(path: str, data: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_csv(path: str, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def _emit(report: dict, out: str | None):
    text = dump_report(report)
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


# --- solve command -----------------------------------------------------------

def _parse_loss_grad(spec: str, n: int) -> np.ndarray:
    if spec.startswith("onehot:"):
        k = int(spec.split(":", 1)[1])
        if not (0 <= k < n):
            raise ParseError(f"--loss-grad onehot index {k} outside dim {n}")
        g = np.zeros(n)
        g[k] = 1.0
        return g
    try:
        with open(spec) as fh:
            vals = json.load(fh)
    except OSError as exc:
        raise ParseError(f"--loss-grad: cannot read {spec}: {exc}") from exc
    g = np.asarray(vals, dtype=float)
    if g.shape != (n,):
        raise ParseError(f"--loss-grad: expected length {n}, got {g.shape}")
    return g


def cmd_solve(args) -> int:
    try:
        q = load_problem(args.problem)
        loss_grad = None
        if args.grad != "none":
            if not args.loss_grad:
                raise ParseError("--grad requires --loss-grad (path or onehot:K)")
            loss_grad = _parse_loss_grad(args.loss_grad, q.n)
    except ParseError as exc:
        log.error("parse error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1

    sdp = build_shor_relaxation(q)
    sol = solve_sdp(sdp, tol=args.tol)
    cert = certify(q, sol, ratio_threshold=args.ratio_threshold,
                   require_optimal=False)
    result = {
        "status": sol.status,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "residuals": {"primal": sol.primal_infeas, "dual": sol.dual_infeas,
                      "gap": sol.gap},
        "tightness_ratio": cert.tightness_ratio,
        "verdict": cert.verdict,
        "certificate_eigs": {"min": cert.certificate_min_eig,
                             "second": cert.certificate_second_eig},
        "stationarity_residual": cert.stationarity_residual,
    }
    if cert.x is not None:
        result["x"] = cert.x.tolist()
        result["multipliers"] = cert.lam.tolist()

    if loss_grad is not None and cert.verdict == TIGHT_CERTIFIED:
        ws = kkt_workspace(q, cert.x, cert.lam)
        if args.grad == "is":
            rep = backprop_is(ws, loss_grad)
        else:
            rep = backprop_cift(q, cert.x, loss_grad)
        grad_block = {
            "method": rep.method,
            "lsqr_iters": rep.lsqr_iters,
            "lsqr_residual": rep.lsqr_residual,
            "grad_cost": rep.grad_Q.tolist(),
            "grad_constraints": [g.tolist() for g in rep.grad_A],
        }
        if q.param_indices():
            grad_block["grad_params"] = rep.chain_to_params(q).tolist()
        result["gradients"] = grad_block

    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "solve",
        "config": {"problem": args.problem, "tol": args.tol,
                   "ratio_threshold": args.ratio_threshold, "grad": args.grad,
                   "loss_grad": args.loss_grad},
        "seed": None,
        "results": [result],
        "environment": environment_fingerprint(),
    }
    _emit(report, args.out)
    if sol.status == NUMERICAL_FAILURE:
        return 3
    if cert.verdict != TIGHT_CERTIFIED:
        return 2
    return 0


# --- experiment command ------------------------------------------------------

EXPERIMENTS = ("poly-bilevel", "stereo-calib", "jac-compare", "tightness-audit")

DEFAULT_CONFIGS = {
    "poly-bilevel": {
        "theta0": [10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389],
        "target": [1.7, 7.3],
        "lr": 2e-2,
        "loss_tol": 1e-4,
        "max_outer": 10000,
        "sdp_tol": 1e-10,
    },
    "stereo-calib": {
        "trials": 10,
        "n_poses": 20,
        "n_grid": 8,
        "sigma": 0.5,
        "b_init_error": 0.003,
        "lr": 1e-4,
        "grad_tol": 1e-3,
        "max_outer": 150,
        "sdp_tol": 1e-10,
    },
    "jac-compare": {
        "trials": 50,
        "weighting": "scalar",
        "n_grid": 8,
        "sdp_tol": 1e-10,
        "fd_landmarks": None,
        "fd_step": 1e-5,
    },
    "tightness-audit": {
        "theta": [10.0, 2.6334, -4.3443, 0.0, 0.8055, -0.1334, 0.0389],
        "keep_constraints": [0, 1],
        "max_rounds": 25,
        "sample_count": None,
        "nullspace_tol": 1e-8,
        "ratio_threshold": 1e5,
        "sdp_tol": 1e-10,
    },
}


def _load_config(name: str, path: str | None) -> dict:
    cfg = dict(DEFAULT_CONFIGS[name])
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"config {path}: {exc}") from exc
        unknown = set(user) - set(cfg)
        if unknown:
            raise ParseError(f"config: unknown keys {sorted(unknown)} for {name}")
        cfg.update(user)
    return cfg


def _run_poly_bilevel(cfg, seed, out_dir, jobs):
    from .experiments.poly import poly_bilevel, poly_global_min

    del seed, jobs  # deterministic experiment, single trajectory
    trace = poly_bilevel(np.array(cfg["theta0"], dtype=float),
                         target=tuple(cfg["target"]), lr=cfg["lr"],
                         loss_tol=cfg["loss_tol"], max_outer=cfg["max_outer"],
                         sdp_tol=cfg["sdp_tol"])
    rows = [(i, trace.losses[i], trace.grad_norms[i], trace.ratios[i],
             trace.extras["t_star"][i], *trace.params[i])
            for i in range(trace.iterations)]
    header = ["iteration", "loss", "grad_norm", "tightness_ratio", "t_star",
              *[f"theta{k}" for k in range(7)]]
    if out_dir:
        write_csv(os.path.join(out_dir, "poly_bilevel_trace.csv"), header, rows)
    tmin, vmin = poly_global_min(trace.params[-1])
    return {
        "iterations": trace.iterations,
        "converged": trace.converged,
        "final_loss": trace.losses[-1],
        "final_theta": list(trace.params[-1]),
        "final_global_minimizer": [tmin, vmin],
    }


def _run_stereo_calib(cfg, seed, out_dir, jobs):
    from .experiments.stereo import calibrate_baseline

    traces = calibrate_baseline(
        cfg["trials"], b_init_error=cfg["b_init_error"], lr=cfg["lr"],
        grad_tol=cfg["grad_tol"], max_outer=cfg["max_outer"], seed=seed,
        n_poses=cfg["n_poses"], n_grid=cfg["n_grid"], sigma=cfg["sigma"],
        sdp_tol=cfg["sdp_tol"], jobs=jobs)
    rows = []
    for t_idx, tr in enumerate(traces):
        for i in range(tr.iterations):
            rows.append((t_idx, i, tr.losses[i], tr.params[i][0],
                         tr.grad_norms[i], tr.ratios[i]))
    if out_dir:
        write_csv(os.path.join(out_dir, "stereo_calib_trace.csv"),
                  ["trial", "iteration", "loss", "baseline", "grad_abs",
                   "min_tightness_ratio"], rows)
    errors = [tr.extras["final_error"][0] for tr in traces]
    return {
        "trials": len(traces),
        "mean_final_error": float(np.mean(errors)),
        "std_final_error": float(np.std(errors)),
        "mean_iterations": float(np.mean([tr.iterations for tr in traces])),
        "converged_trials": int(sum(tr.converged for tr in traces)),
        "final_errors": errors,
    }


def _run_jac_compare(cfg, seed, out_dir, jobs):
    from .experiments.stereo import jacobian_compare

    rep = jacobian_compare(cfg["trials"], weighting=cfg["weighting"],
                           seed=seed, n_grid=cfg["n_grid"],
                           sdp_tol=cfg["sdp_tol"],
                           fd_landmarks=cfg["fd_landmarks"],
                           fd_step=cfg["fd_step"], jobs=jobs)
    if out_dir:
        rows = [(i, rep.diff_is[i], rep.diff_cift[i], rep.agree_is_cift[i])
                for i in range(len(rep.diff_is))]
        write_csv(os.path.join(out_dir, "jac_compare_trials.csv"),
                  ["trial", "jac_diff_is", "jac_diff_cift", "is_cift_agreement"],
                  rows)
    summary = rep.summary()
    summary["timings"] = {"backprop_is_mean_s": rep.time_is,
                          "backprop_cift_mean_s": rep.time_cift}
    return summary


def _run_tightness_audit(cfg, seed, out_dir, jobs):
    from .experiments.poly import poly_problem, poly_sampler

    del jobs
    base = poly_problem(np.array(cfg["theta"], dtype=float))
    keep = list(cfg["keep_constraints"])
    stripped = build_hom_qcqp(base.cost,
                              tuple(base.constraints[i] for i in keep),
                              base.homog_index)
    tightened, report = tighten_loop(
        stripped, poly_sampler(), max_rounds=cfg["max_rounds"],
        ratio_threshold=cfg["ratio_threshold"], sdp_tol=cfg["sdp_tol"],
        sample_count=cfg["sample_count"], nullspace_tol=cfg["nullspace_tol"],
        seed=seed)
    rows = [(r.round, r.n_constraints, r.ratio, r.verdict, r.added)
            for r in report.rounds]
    if out_dir:
        write_csv(os.path.join(out_dir, "tightness_audit_rounds.csv"),
                  ["round", "n_constraints", "tightness_ratio", "verdict",
                   "constraint_added"], rows)
    return {
        "tight": report.tight,
        "exhausted": report.exhausted,
        "rounds": len(report.rounds),
        "discovered_count": report.discovered_count,
        "final_constraint_count": tightened.m,
        "message": report.message,
        "final_problem": problem_to_dict(tightened),
    }


_RUNNERS = {
    "poly-bilevel": _run_poly_bilevel,
    "stereo-calib": _run_stereo_calib,
    "jac-compare": _run_jac_compare,
    "tightness-audit": _run_tightness_audit,
}


def cmd_experiment(args) -> int:
    try:
        cfg = _load_config(args.name, args.config)
    except ParseError as exc:
        log.error("config error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        results = _RUNNERS[args.name](cfg, args.seed, args.out_dir, args.jobs)
    except CertigradError as exc:
        log.error("experiment failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": f"experiment:{args.name}",
        "config": cfg,
        "seed": args.seed,
        "results": results,
        "environment": environment_fingerprint(),
    }
    out = os.path.join(args.out_dir, "report.json") if args.out_dir else None
    _emit(report, out)
    if args.out_dir:
        print(f"report written to {out}")
    failures = results.get("failures", 0) if isinstance(results, dict) else 0
    trials = results.get("trials", 1) if isinstance(results, dict) else 1
    return 0 if failures < max(trials, 1) else 3


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certigrad",
        description="Certified global QCQP solutions and solution gradients "
                    "via semidefinite relaxation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve one problem file")
    p_solve.add_argument("problem", help="path to a problem JSON file")
    p_solve.add_argument("--tol", type=float, default=1e-10,
                         help="SDP solve tolerance (default 1e-10)")
    p_solve.add_argument("--ratio-threshold", type=float, default=1e5,
                         help="eigenvalue ratio accepted as rank-1 (default 1e5)")
    p_solve.add_argument("--grad", choices=["none", "is", "cift"],
                         default="none", help="backprop engine for gradients")
    p_solve.add_argument("--loss-grad", default=None,
                         help="loss gradient w.r.t. x: JSON file path or onehot:K")
    p_solve.add_argument("--out", default=None,
                         help="write the JSON report here instead of stdout")
    p_solve.set_defaults(func=cmd_solve)

    p_exp = sub.add_parser(
        "experiment", help="run a built-in experiment",
        description="CSV columns: poly-bilevel trace (iteration, loss, "
                    "grad_norm, tightness_ratio, t_star, theta0..theta6); "
                    "stereo-calib trace (trial, iteration, loss, baseline, "
                    "grad_abs, min_tightness_ratio); jac-compare trials "
                    "(trial, jac_diff_is, jac_diff_cift, is_cift_agreement); "
                    "tightness-audit rounds (round, n_constraints, "
                    "tightness_ratio, verdict, constraint_added).")
    p_exp.add_argument("name", choices=EXPERIMENTS)
    p_exp.add_argument("--config", default=None, help="JSON config file")
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out-dir", default=None,
                       help="directory for report.json and CSV traces")
    p_exp.add_argument("--jobs", type=int, default=1,
                       help="trial-level parallelism")
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CERTIGRAD_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
