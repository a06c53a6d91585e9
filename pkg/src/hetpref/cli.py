"""Command line entry point: ``hetpref <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .dataio import (
    WATCH_RATIO_CUTS,
    DataError,
    SyntheticConfig,
    build_gap_matrix,
    discretize_scores,
    generate_theta,
    ingest_comparisons,
    make_probabilities,
    read_matrix,
    sample_comparisons,
    write_comparisons,
    write_matrix,
)
from .debias import debias_pipeline
from .estimator import SolverConfig, estimate_pipeline, kkt_residuals
from .harness import ExperimentSpec, KINDS, run_experiment
from .inference import (
    BootstrapConfig,
    agg_gap_test,
    aggregated_rank_intervals,
    gap_report,
    indiv_gap_test,
    indiv_variance_row,
    individual_rank_intervals,
    write_json,
    write_rank_intervals,
)
from .pairspace import signed_index

log = logging.getLogger("hetpref")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return raw


def _solver_cfg(args, cfg: dict) -> SolverConfig:
    solver = dict(cfg.get("solver") or {})
    if getattr(args, "lam", None) is not None:
        solver["lam"] = args.lam
    return SolverConfig(**solver)


def _boot_cfg(args, cfg: dict) -> BootstrapConfig:
    boot = dict(cfg.get("bootstrap") or {})
    if getattr(args, "B", None) is not None:
        boot["B"] = args.B
    if getattr(args, "alpha", None) is not None:
        boot["alpha"] = args.alpha
    if args.seed is not None:
        boot["seed"] = args.seed
    return BootstrapConfig(**boot)


def _rng(args, cfg: dict) -> np.random.Generator:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    return np.random.default_rng(seed)


def _load_data(args):
    return ingest_comparisons(args.data, d1=args.d1, d2=args.d2)


def cmd_simulate(args, cfg):
    raw = dict(cfg.get("synthetic", cfg) or {})
    for key in ("d1", "d2", "p"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    if args.seed is not None:
        raw["seed"] = args.seed
    if "d2" not in raw:
        raise ValueError("simulate needs d2 (flag --d2 or config key)")
    sc = SyntheticConfig.from_mapping({k: v for k, v in raw.items() if k in {
        "d1", "d2", "p", "p_spec", "sup_norm", "series_terms", "seed", "noiseless"}})
    rng = np.random.default_rng(sc.seed)
    theta = generate_theta(sc, rng)
    data = sample_comparisons(theta, make_probabilities(sc.d1, sc.p_spec), rng, noiseless=sc.noiseless)
    out = Path(args.out)
    write_matrix(out / "theta.csv", theta)
    write_matrix(out / "gaps.csv", build_gap_matrix(theta))
    write_comparisons(data, out / "comparisons.csv")
    return {"d1": sc.d1, "d2": sc.d2, "observations": data.n_obs, "outputs": ["theta.csv", "gaps.csv", "comparisons.csv"]}


def cmd_ingest(args, cfg):
    out = Path(args.out)
    if args.scores:
        cuts = [float(c) for c in args.cuts.split(",")] if args.cuts else list(WATCH_RATIO_CUTS)
        theta = discretize_scores(read_matrix(args.scores), cuts)
        write_matrix(out / "theta.csv", theta)
        return {"d1": theta.shape[0], "d2": theta.shape[1], "outputs": ["theta.csv"]}
    data = _load_data(args)
    write_comparisons(data, out / "comparisons.csv")
    counts = data.user_counts()
    return {
        "d1": data.d1,
        "d2": data.d2,
        "observations": data.n_obs,
        "users_without_data": int(np.sum(counts == 0)),
        "p_mean": float(np.mean(data.p)),
        "outputs": ["comparisons.csv"],
    }


def cmd_estimate(args, cfg):
    data = _load_data(args)
    b = estimate_pipeline(data, _solver_cfg(args, cfg))
    out = Path(args.out)
    write_matrix(out / "L_hat.csv", b.L_hat)
    write_matrix(out / "M_hat.csv", b.M_hat)
    write_matrix(out / "theta_hat.csv", b.Theta_hat)
    report = {
        "lambda": b.lam,
        "iterations": b.solver_iters,
        "converged": b.converged,
        "objective_trace": b.objective_trace,
        "kkt": kkt_residuals(data, b.solution),
        "empty_users": (b.empty_users + 1).tolist(),
    }
    write_json(out / "estimate_report.json", report)
    return {k: report[k] for k in ("lambda", "iterations", "converged", "kkt")}


def cmd_debias(args, cfg):
    data = _load_data(args)
    solver = _solver_cfg(args, cfg)
    b = estimate_pipeline(data, solver)
    deb = debias_pipeline(data, b, rng=_rng(args, cfg) if args.split else None, cfg=solver, q=args.q)
    out = Path(args.out)
    write_matrix(out / "M_nr.csv", deb.M_nr)
    outputs = ["M_nr.csv"]
    if deb.M_proj is not None:
        write_matrix(out / "M_proj.csv", deb.M_proj)
        outputs.append("M_proj.csv")
    return {"q": deb.q, "outputs": outputs}


def cmd_infer(args, cfg):
    data = _load_data(args)
    solver = _solver_cfg(args, cfg)
    boot = _boot_cfg(args, cfg)
    b = estimate_pipeline(data, solver)
    users = args.user or []
    deb = debias_pipeline(data, b, rng=_rng(args, cfg) if users else None, cfg=solver)
    results = []
    for j, j2 in args.pair:
        k = signed_index(data.space, j, j2).k
        results.append(agg_gap_test(deb.M_nr, b.M_hat, data, k, boot.alpha))
        for u in users:
            w = indiv_variance_row(deb.split.U1, deb.split.V1, b.M_hat, data.p, u)[k - 1]
            results.append(indiv_gap_test(deb.M_proj, w, u, k, boot.alpha))
    report = {"alpha": boot.alpha, "q": deb.q, "targets": gap_report(results, data.space)}
    write_json(Path(args.out) / "inference_report.json", report)
    return report


def cmd_rank_ci(args, cfg):
    data = _load_data(args)
    solver = _solver_cfg(args, cfg)
    boot = _boot_cfg(args, cfg)
    b = estimate_pipeline(data, solver)
    J = args.J or list(range(1, data.d2 + 1))
    K_set = args.K_set or list(range(1, data.d2 + 1))
    out = Path(args.out)
    if args.user is None:
        deb = debias_pipeline(data, b)
        ri = aggregated_rank_intervals(deb.M_nr, b.M_hat, data, J, K_set, boot)
        name = "rank_ci_aggregated"
    else:
        deb = debias_pipeline(data, b, rng=_rng(args, cfg), cfg=solver)
        ri = individual_rank_intervals(deb.split, deb.M_proj, b.M_hat, data, args.user, J, K_set, boot)
        name = f"rank_ci_user{args.user}"
    write_rank_intervals(out / f"{name}.csv", ri)
    payload = {
        "scope": ri.scope,
        "J": ri.J,
        "K_set": ri.K_set,
        "alpha": ri.alpha,
        "boot_quantile": ri.boot_quantile,
        "B": boot.B,
        "seed": boot.seed,
        "intervals": [[int(j), int(u), int(lo)] for j, u, lo in zip(ri.J, ri.upper, ri.lower)],
    }
    write_json(out / f"{name}.json", payload)
    return {"scope": ri.scope, "boot_quantile": ri.boot_quantile, "output": f"{name}.csv"}


def cmd_experiment(args, cfg):
    raw = dict(cfg.get("experiment", cfg) or {})
    if args.kind is not None:
        raw["kind"] = args.kind
    elif "kind" not in raw:
        raise ValueError("experiment kind missing: pass it or set it in the config")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.reps is not None:
        raw["reps"] = args.reps
    spec = ExperimentSpec.from_mapping(raw)
    manifest = run_experiment(spec, out_dir=args.out, threads=args.threads, dry_run=args.dry_run)
    if args.dry_run:
        return {"kind": spec.kind, "estimated_seconds": manifest["estimated_seconds"], "valid": True}
    return {"kind": spec.kind, "wall_seconds": manifest["wall_seconds"], "summary": manifest.get("summary")}


def _pair(text: str):
    try:
        j, j2 = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'j,j2', got {text!r}")
    return j, j2


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps a
    # subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="worker processes for experiments (default: 1)")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and estimate runtime only")
    common.add_argument("-v", "--verbose", action="store_true")

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--data", required=True, help="comparisons CSV (user,item_a,item_b,winner[,p])")
    data_args.add_argument("--d1", type=int, help="number of users (default: largest id seen)")
    data_args.add_argument("--d2", type=int, help="number of items (default: largest id seen)")
    data_args.add_argument("--lam", type=float, help="regularization weight (default: sqrt(0.5 dbar / pbar))")

    boot_args = argparse.ArgumentParser(add_help=False)
    boot_args.add_argument("--B", type=int, help="bootstrap replications")
    boot_args.add_argument("--alpha", type=float, help="significance level")

    ap = argparse.ArgumentParser(prog="hetpref", parents=[common], description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a synthetic score matrix and comparisons")
    p.add_argument("--d2", type=int)
    p.add_argument("--d1", type=int)
    p.add_argument("--p", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", parents=[common], help="validate a comparisons file or discretize a score file")
    p.add_argument("--data", help="comparisons CSV")
    p.add_argument("--d1", type=int)
    p.add_argument("--d2", type=int)
    p.add_argument("--scores", help="headerless d1 x d2 raw score CSV to discretize")
    p.add_argument("--cuts", help="comma-separated ascending cut points")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("estimate", parents=[common, data_args], help="fit the low-rank estimator")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("debias", parents=[common, data_args], help="Newton debiasing (and split projection)")
    p.add_argument("--split", action="store_true", help="also run the split, cross-fit and projection steps")
    p.add_argument("--q", type=int, help="projection rank (default: 10%% singular value rule)")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("infer", parents=[common, data_args, boot_args], help="z-tests for score gaps")
    p.add_argument("--pair", type=_pair, action="append", required=True, help="item pair 'j,j2' (repeatable)")
    p.add_argument("--user", type=int, action="append", help="also test this user's gap (repeatable)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("rank-ci", parents=[common, data_args, boot_args], help="simultaneous rank intervals")
    p.add_argument("--user", type=int, help="individual scope for this user (default: aggregated)")
    p.add_argument("--J", type=int, nargs="+", help="target items (default: all)")
    p.add_argument("--K-set", dest="K_set", type=int, nargs="+", help="reference items (default: all)")
    p.set_defaults(func=cmd_rank_ci)

    p = sub.add_parser("experiment", parents=[common], help="run a Monte Carlo study from a config")
    p.add_argument("kind", nargs="?", choices=KINDS, help="defaults to the config's kind")
    p.add_argument("--reps", type=int, help="override the replication count")
    p.set_defaults(func=cmd_experiment)
    return ap


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "out", "threads": 1, "dry_run": False, "verbose": False}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        if args.dry_run and args.command != "experiment":
            if getattr(args, "data", None):
                _load_data(args)
            print(json.dumps({"command": args.command, "valid": True}))
            return 0
        result = args.func(args, cfg)
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=_json_default))
    return 0


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
