"""Command-line front end.

Three subcommands: ``simulate`` runs the Monte Carlo coverage study,
``analyze`` runs the full inference pipeline on a user dataset, and
``curve`` sweeps the subgroup threshold and emits plot-ready interval data.
All outputs are deterministic functions of the flags (including --seed);
rerunning a command reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import RngStream, load_dataset_csv
from .errors import EmptySubgroupError, PisacapError
from .inference import (
    PipelineConfig,
    fit_nuisance_and_cate,
    naive_ci,
    perturbation_ci,
    sample_split_ci,
    select_m_adaptive,
    select_subset,
)
from .simbench import SimulationConfig, StudyRow, parse_method, run_study
from .subgroup import boundary_diagnostic, cate_refitter, load_blackbox, membership

# stream labels shared by analyze and curve
_L_PIPE, _L_SPLIT, _L_SELECT, _L_PERTURB = 1, 3, 5, 14

DEFAULT_METHODS = "naive,split,oracle,m=n,m=n/2,m=n/4,m=n/8,adaptive"


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _config_comment(config: dict) -> str:
    return "# config: " + json.dumps(config, sort_keys=True) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_parser(sub):
    p = sub.add_parser("simulate", help="run the Monte Carlo coverage study")
    p.add_argument("--setting", default="A", help="comma list from A,B,C,D")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise-sd", type=float, default=0.4)
    p.add_argument("--M", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--c", type=float, default=0.0)
    p.add_argument("--Q", type=int, default=5)
    p.add_argument("--clip-eps", type=float, default=0.01)
    p.add_argument("--n-mc", type=int, default=1_000_000, help="truth draws per repetition")
    p.add_argument(
        "--methods",
        default=DEFAULT_METHODS,
        help="comma list of naive,split,oracle,adaptive,m=n,m=n/2,m=n/4,m=n/8,m=<int>",
    )
    p.add_argument(
        "--m",
        default=None,
        help="shortcut: replace the perturbation entries with this single policy",
    )
    p.add_argument(
        "--subgroup-source",
        choices=("fitted", "true"),
        default="fitted",
        help="'true' freezes membership at the exact effect (calibration runs)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output prefix (.csv and .json)")
    p.set_defaults(func=cmd_simulate)


def _resolve_methods(methods_flag, m_flag):
    methods = [t.strip() for t in methods_flag.split(",") if t.strip()]
    if m_flag is not None:
        tok = m_flag.strip().lower()
        if tok == "n" or tok.startswith("n/"):
            tok = f"m={tok}"
        elif tok.isdigit():
            tok = f"m={tok}"
        elif tok != "adaptive":
            raise ValueError(f"cannot parse --m value '{m_flag}'")
        methods = [t for t in methods if parse_method(t)[0] != "perturb"]
        methods.append(tok)
    for t in methods:
        parse_method(t)
    return methods


def cmd_simulate(args) -> int:
    settings = [s.strip().upper() for s in args.setting.split(",") if s.strip()]
    methods = _resolve_methods(args.methods, args.m)
    config = SimulationConfig(
        pipeline=PipelineConfig(
            c=args.c, alpha=args.alpha, Q=args.Q, clip_eps=args.clip_eps, M=args.M
        ),
        n=args.n,
        noise_sd=args.noise_sd,
        n_mc=args.n_mc,
        subgroup_source=args.subgroup_source,
    )
    rows = run_study(
        settings, methods, args.reps, config, master_seed=args.seed, threads=args.threads
    )
    echo = _simulate_echo(args, settings, methods)
    _write_study_csv(rows, args.out + ".csv", echo)
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        fh.write(_json_dumps({"config": echo, "rows": [r.to_record() for r in rows]}))
    total = sum(r.runtime for r in rows)
    print(f"wrote {args.out}.csv and {args.out}.json ({total:.1f}s method time)", file=sys.stderr)
    return 0


def _simulate_echo(args, settings, methods) -> dict:
    return {
        "command": "simulate",
        "setting": settings,
        "methods": methods,
        "reps": args.reps,
        "n": args.n,
        "noise_sd": args.noise_sd,
        "M": args.M,
        "alpha": args.alpha,
        "c": args.c,
        "Q": args.Q,
        "clip_eps": args.clip_eps,
        "n_mc": args.n_mc,
        "subgroup_source": args.subgroup_source,
        "seed": args.seed,
        "threads": args.threads,
    }


def _write_study_csv(rows: list[StudyRow], path, echo) -> None:
    cols = ["setting", "method", "m_policy", "reps", "ecp", "cil", "failures", "mean_selected_m"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_config_comment(echo))
        fh.write(",".join(cols) + "\n")
        for r in rows:
            rec = r.to_record()
            fh.write(",".join(_fmt(rec[c]) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# analyze / curve
# ---------------------------------------------------------------------------


def _analysis_flags(p):
    p.add_argument("--data", required=True, help="CSV with header y,g,z1..zp")
    p.add_argument(
        "--cate",
        choices=("linear", "spline", "tree", "localpoly", "external"),
        default="linear",
    )
    p.add_argument("--predictions", default=None, help="id,dhat CSV for --cate external")
    p.add_argument("--m", default="adaptive", help="perturbation subset size or 'adaptive'")
    p.add_argument("--M", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--Q", type=int, default=5)
    p.add_argument("--clip-eps", type=float, default=0.01)
    p.add_argument("--outcome-knots", type=int, default=4)
    p.add_argument("--outcome-degree", type=int, default=3)
    p.add_argument("--cate-knots", type=int, default=4)
    p.add_argument("--cate-degree", type=int, default=3)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--lp-degree", type=int, default=2)
    p.add_argument("--lp-span", type=float, default=0.75)
    p.add_argument("--boundary-bandwidth", type=float, default=0.05)
    p.add_argument(
        "--baselines",
        default="naive,split",
        help="comma list of baselines to include (naive, split); empty for none",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)


def _analyze_parser(sub):
    p = sub.add_parser("analyze", help="inference on a dataset at one threshold")
    _analysis_flags(p)
    p.add_argument("--c", type=float, default=0.0)
    p.set_defaults(func=cmd_analyze)


def _curve_parser(sub):
    p = sub.add_parser("curve", help="interval curve over a threshold grid")
    _analysis_flags(p)
    p.add_argument("--c-grid", required=True, help="start:stop:step inclusive grid")
    p.set_defaults(func=cmd_curve)


def _cate_params(args) -> dict:
    if args.cate == "spline":
        return {"n_knots": args.cate_knots, "degree": args.cate_degree}
    if args.cate == "tree":
        return {"min_leaf": args.min_leaf, "max_depth": args.max_depth}
    if args.cate == "localpoly":
        return {"degree": args.lp_degree, "span": args.lp_span}
    return {}


def _analysis_config(args, c) -> PipelineConfig:
    kind = args.cate if args.cate != "external" else "linear"
    return PipelineConfig(
        c=c,
        alpha=args.alpha,
        Q=args.Q,
        clip_eps=args.clip_eps,
        M=args.M,
        cate_kind=kind,
        cate_params=_cate_params(args),
        outcome_degree=args.outcome_degree,
        outcome_knots=args.outcome_knots,
    )


def _analysis_echo(args, command, c_values) -> dict:
    return {
        "command": command,
        "data": args.data,
        "cate": args.cate,
        "predictions": args.predictions,
        "c": c_values if command == "curve" else c_values[0],
        "m": args.m,
        "M": args.M,
        "alpha": args.alpha,
        "Q": args.Q,
        "clip_eps": args.clip_eps,
        "outcome_knots": args.outcome_knots,
        "outcome_degree": args.outcome_degree,
        "cate_knots": args.cate_knots,
        "cate_degree": args.cate_degree,
        "min_leaf": args.min_leaf,
        "max_depth": args.max_depth,
        "lp_degree": args.lp_degree,
        "lp_span": args.lp_span,
        "boundary_bandwidth": args.boundary_bandwidth,
        "baselines": args.baselines,
        "seed": args.seed,
    }


def _parse_grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError("--c-grid must be start:stop:step")
    start, stop, step = (float(x) for x in parts)
    if step <= 0 or stop < start:
        raise ValueError("--c-grid needs step > 0 and stop >= start")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [start + i * step for i in range(count)]


def _analyze_at(args, c_values, command):
    """Shared pipeline for analyze (singleton grid) and curve."""
    data = load_dataset_csv(args.data)
    if args.cate == "external":
        if not args.predictions:
            raise PisacapError("--cate external requires --predictions")
        cate = load_blackbox(args.predictions, data)
    else:
        cate = None
    baselines = [b.strip() for b in args.baselines.split(",") if b.strip()]
    for b in baselines:
        if b not in ("naive", "split"):
            raise PisacapError(f"unknown baseline '{b}'")
    if args.cate == "external" and "split" in baselines:
        baselines.remove("split")  # no way to refit external scores on a half
    root = RngStream(args.seed)
    config0 = _analysis_config(args, c_values[0])
    # nuisances and the score fit do not depend on c; fit once
    folds, nuis, cate = fit_nuisance_and_cate(
        data, config0, root.child(_L_PIPE), cate=cate
    )
    results = []
    for ci_index, c in enumerate(c_values):
        config = _analysis_config(args, c)
        entry = {"c": c, "results": [], "empty_subgroup": False}
        try:
            spec = membership(cate, c)
        except EmptySubgroupError:
            entry["empty_subgroup"] = True
            entry["subgroup_size"] = 0
            results.append(entry)
            continue
        entry["subgroup_size"] = spec.size
        n = data.n
        selected = None
        m_tok = args.m.strip().lower()
        c_rng = root.child(_L_PERTURB).child(ci_index)
        if m_tok == "adaptive":
            refit = None
            if args.cate != "external":
                refit = cate_refitter(data, nuis, config.cate_kind, **config.cate_params)
            selected = select_m_adaptive(
                nuis.psi,
                spec.member,
                grid=[max(n // d, 1) for d in config.grid_divisors],
                C=config.selector_C,
                M_pilot=config.selector_M_pilot,
                alpha=config.alpha,
                rng=root.child(_L_SELECT).child(ci_index),
                c=c,
                refit=refit,
                delta_denom=config.delta_denom,
                redraw_cap=config.redraw_cap,
            )
            m = selected
        elif m_tok == "n":
            m = n
        elif m_tok.startswith("n/"):
            m = max(n // int(m_tok[2:]), 1)
        else:
            m = int(m_tok)
        subset = select_subset(n, m, c_rng.child(0))
        perturb = perturbation_ci(
            nuis.psi,
            spec.member,
            subset,
            M=config.M,
            alpha=config.alpha,
            rng=c_rng.child(1),
            delta_denom=config.delta_denom,
            redraw_cap=config.redraw_cap,
        )
        entry["selected_m"] = selected
        entry["results"].append(perturb.to_record())
        if "naive" in baselines:
            entry["results"].append(
                naive_ci(nuis.psi, spec.member, config.alpha).to_record()
            )
        if "split" in baselines:
            try:
                split = sample_split_ci(data, config, root.child(_L_SPLIT).child(ci_index))
                entry["results"].append(split.to_record())
            except PisacapError as exc:
                entry["results"].append(
                    {"method": "sample-split", "error": f"{type(exc).__name__}: {exc}"}
                )
        results.append(entry)
    diagnostic = boundary_diagnostic(cate, c_values[0], args.boundary_bandwidth)
    return data, cate, results, diagnostic


def cmd_analyze(args) -> int:
    data, cate, results, diagnostic = _analyze_at(args, [args.c], "analyze")
    entry = results[0]
    if entry["empty_subgroup"]:
        raise PisacapError(
            f"no rows with subgroup score >= {args.c}; nothing to infer"
        )
    out = {
        "config": _analysis_echo(args, "analyze", [args.c]),
        "n": data.n,
        "p": data.p,
        "cate_source": cate.source,
        "subgroup_size": entry["subgroup_size"],
        "selected_m": entry["selected_m"],
        "boundary_diagnostic": diagnostic,
        "results": entry["results"],
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(_json_dumps(out))
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_curve(args) -> int:
    grid = _parse_grid(args.c_grid)
    data, cate, results, diagnostic = _analyze_at(args, grid, "curve")
    echo = _analysis_echo(args, "curve", grid)
    cols = ["c", "estimate", "lower", "upper", "method", "subgroup_size", "empty_subgroup"]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(_config_comment(echo))
        fh.write(",".join(cols) + "\n")
        for entry in results:
            if entry["empty_subgroup"]:
                fh.write(
                    ",".join([_fmt(entry["c"]), "", "", "", "", "0", "1"]) + "\n"
                )
                continue
            for rec in entry["results"]:
                if "error" in rec:
                    continue
                fh.write(
                    ",".join(
                        [
                            _fmt(entry["c"]),
                            _fmt(rec["estimate"]),
                            _fmt(rec["lower"]),
                            _fmt(rec["upper"]),
                            rec["method"],
                            _fmt(rec["subgroup_size"]),
                            "0",
                        ]
                    )
                    + "\n"
                )
    sidecar = {"config": echo, "boundary_diagnostic": diagnostic, "entries": results}
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        fh.write(_json_dumps(sidecar))
    print(f"wrote {args.out} and {args.out}.json", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pisacap",
        description=(
            "Debiased in-sample confidence intervals for post-hoc identified "
            "subgroups via conditional adaptive perturbation"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _simulate_parser(sub)
    _analyze_parser(sub)
    _curve_parser(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PisacapError, ValueError, OSError) as exc:
        print(f"pisacap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
