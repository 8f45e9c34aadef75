"""Command-line front end.

Subcommands: test (global test at one gamma), changepoint (gamma search,
optionally with closed testing and the Bonferroni baseline), simulate
(scenario files), dist (chi-bar distribution utilities).  Every output file
starts with a machine-readable header carrying the package version, the
resolved configuration, and the seed; exit codes signal only whether the run
completed (rejection decisions live in the reports).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .chibar import ChiBarSpec, chibar_cdf, chibar_quantile, chibar_weights, perlman_pvalue
from .critical import CriticalOpts
from .inference import (
    METHODS,
    SensitivityReport,
    bonferroni_changepoints,
    changepoint_gamma,
    closed_testing,
    closed_testing_changepoints,
    global_test,
)
from .oracle import MAX_UNITS_FOR_U_SEARCH, exact_worst_case_pvalue
from .simulate import (
    design_sensitivity_estimate,
    load_scenarios,
    power_curve,
    type1_table,
)
from .study import (
    StudyError,
    aligned_rank_scores,
    dump_study_json,
    huber_pair_scores,
    load_study,
    user_scores,
)

EXIT_OK = 0
EXIT_INPUT = 2


def _threads(value: int | None) -> int:
    if value:
        return value
    env = os.environ.get("SENS_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _header(args: argparse.Namespace, seed: int | None = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None}
    return {"version": __version__, "config": config, "seed": seed}


def _write_json(path: str, header: dict, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"header": header, **payload}, fh, indent=1, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, frozenset):
        return sorted(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_csv(path: str, header: dict, fieldnames: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, default=_jsonable) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _record_dict(rec) -> dict:
    return {
        "gamma": rec.gamma,
        "method": rec.method,
        "outcomes": None if rec.outcomes is None else list(rec.outcomes),
        "a_star": rec.a_star,
        "b_star": rec.b_star,
        "critical_value": rec.critical_value,
        "reject": rec.reject,
        "lambda_star": None if rec.lambda_star is None else list(np.asarray(rec.lambda_star)),
        "warnings": rec.warnings,
        "info": rec.info,
    }


def _record_row(rec, subset_label: str = "all") -> dict:
    return {
        "gamma": rec.gamma,
        "subset": subset_label,
        "method": rec.method,
        "a_star": rec.a_star,
        "critical_value": rec.critical_value,
        "reject": int(rec.reject),
    }


def _load_scored_study(args):
    study = load_study(args.data)
    if getattr(args, "scores_csv", None):
        q = np.loadtxt(args.scores_csv, delimiter=",", ndmin=2)
        scores = user_scores(study, q)
    elif args.statistic == "huber":
        scores = huber_pair_scores(study, args.kappa)
    elif args.statistic == "aligned-rank":
        scores = aligned_rank_scores(study)
    else:
        raise StudyError(f"unknown statistic scheme {args.statistic!r}")
    return study, scores


def cmd_test(args) -> int:
    study, scores = _load_scored_study(args)
    if args.dump_study:
        dump_study_json(study, args.dump_study)
    rec = global_test(
        study, scores, args.gamma, args.alpha, args.method,
        crit_opts=_crit_opts(args),
    )
    payload = {"study": {"I": study.I, "N": study.N, "K": study.K}, "record": _record_dict(rec)}
    if args.oracle:
        if study.N <= MAX_UNITS_FOR_U_SEARCH:
            payload["oracle"] = {
                "exact_worst_case_pvalue_coherent": exact_worst_case_pvalue(
                    study, scores, args.gamma, "coherent"
                )
            }
        else:
            payload["oracle"] = {
                "skipped": f"exact search needs N <= {MAX_UNITS_FOR_U_SEARCH}, study has {study.N}"
            }
    header = _header(args, seed=args.seed)
    if args.out_json:
        _write_json(args.out_json, header, payload)
    if args.out_csv:
        _write_csv(
            args.out_csv, header,
            ["gamma", "subset", "method", "a_star", "critical_value", "reject"],
            [_record_row(rec)],
        )
    print(
        f"gamma={rec.gamma:g} method={rec.method} a*={rec.a_star:.4f} "
        f"critical={rec.critical_value:.4f} reject={rec.reject}"
    )
    for w in rec.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_changepoint(args) -> int:
    study, scores = _load_scored_study(args)
    kwargs = dict(
        gamma_min=args.gamma_min, gamma_max=args.gamma_max, resolution=args.resolution,
        crit_opts=_crit_opts(args),
    )
    cp = changepoint_gamma(study, scores, args.alpha, args.method, **kwargs)
    report = SensitivityReport(records=cp.evaluations, changepoint=cp, warnings=list(cp.warnings))
    rows = [_record_row(r) for r in cp.evaluations]
    payload = {
        "changepoint": {"value": cp.value, "status": cp.status, "display": str(cp)},
        "records": [_record_dict(r) for r in cp.evaluations],
    }
    if args.closed_testing:
        closed = closed_testing_changepoints(
            study, scores, args.alpha, args.method,
            args.gamma_min, args.gamma_max, args.resolution, crit_opts=_crit_opts(args),
        )
        report.per_outcome_closed = closed.per_outcome
        payload["closed_testing"] = {
            f"outcome_{k + 1}": {"value": cp_k.value, "status": cp_k.status, "display": str(cp_k)}
            for k, cp_k in closed.per_outcome.items()
        }
        for S, cp_s in closed.per_subset.items():
            label = "+".join(str(k + 1) for k in sorted(S))
            rows.extend(_record_row(r, label) for r in cp_s.evaluations)
    if args.bonferroni:
        bon = bonferroni_changepoints(
            study, scores, args.alpha, args.gamma_min, args.gamma_max, args.resolution
        )
        report.per_outcome_bonferroni = bon
        payload["bonferroni"] = {
            f"outcome_{k + 1}": {"value": cp_k.value, "status": cp_k.status, "display": str(cp_k)}
            for k, cp_k in bon.items()
        }
    header = _header(args, seed=args.seed)
    if args.out_json:
        _write_json(args.out_json, header, payload)
    if args.out_csv:
        _write_csv(
            args.out_csv, header,
            ["gamma", "subset", "method", "a_star", "critical_value", "reject"],
            sorted(rows, key=lambda r: (r["subset"], r["gamma"])),
        )
    print(f"changepoint gamma: {cp}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario)
    threads = _threads(args.threads)
    all_rows: list[dict] = []
    payload_tables = []
    for scn in scenarios:
        if args.reps:
            scn = type(scn)(**{**scn.__dict__, "replicates": args.reps})
        if args.seed is not None:
            scn = type(scn)(**{**scn.__dict__, "seed": args.seed})
        if scn.mode == "power":
            table = power_curve(scn, threads=threads)
        elif scn.mode == "type1":
            table = type1_table(scn, threads=threads)
        else:
            rows = []
            for method in scn.methods:
                if method == "unconstrained":
                    continue
                est = design_sensitivity_estimate(scn, method)
                rows.append(
                    {
                        "method": method, "gamma": "", "power": "", "se": "",
                        "design_sensitivity": est.value, "spread": est.spread,
                    }
                )
            payload_tables.append({"scenario": scn.name, "design_sensitivities": rows})
            for r in rows:
                all_rows.append({"scenario": scn.name, **r})
            print(f"{scn.name}: " + "  ".join(
                f"{r['method']}={r['design_sensitivity']:.2f}" for r in rows
            ))
            continue
        rows = [
            {"scenario": scn.name, "method": r["method"], "gamma": r["gamma"],
             "power": r["power"], "se": r["se"], "design_sensitivity": "", "spread": ""}
            for r in table.rows
        ]
        all_rows.extend(rows)
        payload_tables.append({"scenario": scn.name, "rows": table.rows})
        for r in table.rows:
            print(f"{scn.name} method={r['method']} gamma={r['gamma']:g} "
                  f"power={r['power']:.3f} (se {r['se']:.3f})")
    header = _header(args, seed=args.seed if args.seed is not None else scenarios[0].seed)
    if args.out_json:
        _write_json(args.out_json, header, {"tables": payload_tables})
    if args.out_csv:
        _write_csv(
            args.out_csv, header,
            ["scenario", "method", "gamma", "power", "se", "design_sensitivity", "spread"],
            all_rows,
        )
    return EXIT_OK


def _parse_corr(args) -> ChiBarSpec:
    if args.corr:
        rows = [[float(x) for x in row.split(",")] for row in args.corr.split(";")]
        return ChiBarSpec(np.asarray(rows))
    k = args.k or 1
    rho = args.rho or 0.0
    c = (1 - rho) * np.eye(k) + rho * np.ones((k, k))
    np.fill_diagonal(c, 1.0)
    return ChiBarSpec(c)


def cmd_dist(args) -> int:
    out: dict = {}
    if args.what == "perlman":
        if args.value is None:
            raise StudyError("dist perlman needs --value (squared scale)")
        out["perlman_pvalue"] = perlman_pvalue(args.value, args.k or 1)
    else:
        spec = _parse_corr(args)
        w = chibar_weights(spec, n=args.n_mc, seed=args.seed or 0)
        if args.what == "weights":
            out["weights"] = list(w.w)
            out["method"] = w.method
            if w.se is not None:
                out["se"] = list(w.se)
        elif args.what == "cdf":
            if args.value is None:
                raise StudyError("dist cdf needs --value")
            out["cdf"] = chibar_cdf(args.value, w)
        elif args.what == "quantile":
            p = 1.0 - (args.alpha if args.alpha is not None else 0.05)
            q = chibar_quantile(p, w)
            out["p"] = p
            out["quantile_sq"] = q
            out["critical_deviate"] = float(np.sqrt(q))
    header = _header(args, seed=args.seed)
    if args.out_json:
        _write_json(args.out_json, header, out)
    print(json.dumps(out, default=_jsonable))
    return EXIT_OK


def _crit_opts(args) -> CriticalOpts:
    opts = CriticalOpts()
    if getattr(args, "n_mc", None):
        opts.n_mc = args.n_mc
    if getattr(args, "seed", None) is not None:
        opts.mc_seed = args.seed
    return opts


def _add_common_io(p, with_data=True):
    if with_data:
        p.add_argument("data", help="study CSV (stratum_id, treated, y1..yK) or study JSON")
        p.add_argument("--statistic", default="huber", choices=["huber", "aligned-rank"])
        p.add_argument("--kappa", type=float, default=2.5, help="Huber trim point")
        p.add_argument("--scores-csv", help="user-supplied N x K score matrix (CSV)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0, help="root seed for all Monte Carlo")
    p.add_argument("--n-mc", type=int, help="Monte Carlo budget for critical values")
    p.add_argument("--threads", type=int, help="worker threads (default: SENS_THREADS or CPUs)")
    p.add_argument("--out-json", help="write JSON report here")
    p.add_argument("--out-csv", help="write CSV report here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvsens", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="global one-sided sensitivity test at one gamma")
    _add_common_io(p)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--method", default="chibar", choices=list(METHODS))
    p.add_argument("--dump-study", help="write the ingested study as JSON here")
    p.add_argument("--oracle", action="store_true",
                   help="add exact small-instance worst-case p-value to the report")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("changepoint", help="largest gamma at which the test rejects")
    _add_common_io(p)
    p.add_argument("--method", default="chibar", choices=list(METHODS))
    p.add_argument("--gamma-min", type=float, default=1.0)
    p.add_argument("--gamma-max", type=float, default=10.0)
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--closed-testing", action="store_true",
                   help="add per-outcome changepoints via closed testing")
    p.add_argument("--bonferroni", action="store_true",
                   help="add per-outcome Bonferroni changepoints")
    p.set_defaults(func=cmd_changepoint)

    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("scenario", help="flat key=value scenario file")
    p.add_argument("--reps", type=int, help="override replicate count")
    p.add_argument("--seed", type=int, help="override scenario seed")
    p.add_argument("--threads", type=int)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dist", help="chi-bar distribution utilities")
    p.add_argument("what", choices=["quantile", "cdf", "weights", "perlman"])
    p.add_argument("--corr", help="correlation matrix, rows ';'-separated: '1,0.3;0.3,1'")
    p.add_argument("--k", type=int, help="dimension (with --rho for equicorrelation)")
    p.add_argument("--rho", type=float, help="equicorrelation (with --k)")
    p.add_argument("--alpha", type=float, help="for quantile: upper tail level")
    p.add_argument("--value", type=float, help="evaluation point (squared scale)")
    p.add_argument("--n-mc", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_dist)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (StudyError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
