"""``invlab`` command line.

Exit status: 0 when every assertion passes, 1 when one fails, 2 for usage
errors (bad arguments, invalid config, missing or corrupt files).

Config precedence, lowest first: study defaults, config file,
``INVLAB_SEED`` (seed only), command-line flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import TASKS, DatasetError, LabeledDataset, generate
from .experiments import STUDIES, ConfigError, RunFilesError, load_config, recompute, run_experiment
from .groups import GroupError
from .models import ModelError, ParamVector, load_checkpoint
from .pac_bayes import (GRID_PENALTY, PRIOR_STD_GRID, BoundDomainError, BoundInputs,
                        GaussianWeightDistribution, assemble_report, effective_kl, grid_prior,
                        kl_diag_gaussian, optimize_stochastic_bound, stochastic_risk)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

USAGE_ERRORS = (ConfigError, RunFilesError, DatasetError, ModelError, BoundDomainError, GroupError)


class UsageError(Exception):
    pass


def _key_values(items) -> dict:
    """``key=value`` pairs; values parse as JSON when they can."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"expected key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except ValueError:
            out[key] = raw
    return out


# -- run -------------------------------------------------------------------------------------


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "replicates": args.replicates, "output": args.out,
                 "jobs": args.jobs, "params": _key_values(args.set)}
    config = load_config(args.config, overrides)
    summary = run_experiment(config)
    if not args.quiet:
        print(render_summary(summary))
        print(f"\nwrote {config.output}")
    return EXIT_PASS if summary["passed"] else EXIT_FAIL


# -- report ----------------------------------------------------------------------------------


def _num(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    return format(v, ".6g")


def _table(header, rows) -> list[str]:
    widths = [max(len(str(r[j])) for r in [header] + rows) for j in range(len(header))]
    fmt = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    return [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]


def render_summary(summary: dict, recomputed: dict | None = None) -> str:
    lines = [f"study       {summary['study']}",
             f"seed        {summary['seed']}",
             f"replicates  {summary['replicates']}",
             f"verdict     {'PASS' if summary['passed'] else 'FAIL'}", ""]
    if recomputed is None:
        rows = [[k, _num(v)] for k, v in sorted(summary["metrics"].items())]
        lines += _table(["metric", "value"], rows)
    else:
        rows = []
        for k in sorted(set(summary["metrics"]) | set(recomputed["metrics"])):
            a, b = summary["metrics"].get(k), recomputed["metrics"].get(k)
            rows.append([k, _num(a), _num(b), "ok" if a == b else "MISMATCH"])
        lines += _table(["metric", "stored", "recomputed", "check"], rows)
    lines.append("")
    rows = [[a["name"], "PASS" if a["passed"] else "FAIL", a["detail"]] for a in summary["assertions"]]
    lines += _table(["assertion", "verdict", "detail"], rows)
    return "\n".join(lines)


def cmd_report(args) -> int:
    stored, fresh = recompute(args.dir)
    consistent = stored["metrics"] == fresh["metrics"] and stored["assertions"] == fresh["assertions"]
    print(render_summary(stored, fresh))
    if args.data or args.figures:
        from . import plotting

        if stored["study"] not in plotting.FIGURES:
            print(f"\n{stored['study']} has no per-epoch curves to export")
        else:
            for path in plotting.write_gnuplot(args.dir, stored["study"], args.data) if args.data else []:
                print(f"data    {path}")
            for path in plotting.render_figures(args.dir, stored["study"], args.figures) if args.figures else []:
                print(f"figure  {path}")
    if not consistent:
        print("\nstored summary does not match the replicate files", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS if stored["passed"] else EXIT_FAIL


# -- gen-data --------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}")
    params = _key_values(args.param)
    params["seed"] = args.seed
    try:
        task = TASKS[args.task](**params)
    except TypeError as exc:
        raise UsageError(f"bad task parameter: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in generate(task):
        if len(ds) == 0:
            continue
        path = out / f"{args.task}_{ds.meta['split']}.csv"
        ds.save(path)
        print(f"{path}  ({len(ds)} rows, {ds.input_dim} features)")
    return EXIT_PASS


# -- bound -----------------------------------------------------------------------------------


def cmd_bound(args) -> int:
    spec, params, _ = load_checkpoint(args.checkpoint)
    ds = LabeledDataset.load(args.dataset)
    if ds.input_dim != spec.input_dim:
        raise UsageError("dataset and checkpoint input dimensions differ")
    inputs = BoundInputs(len(ds), args.delta, args.beta if args.beta is not None else "optimize",
                         mc_samples=args.draws)
    rng = np.random.default_rng(args.seed)
    if args.prior_checkpoint:
        p_spec, center, _ = load_checkpoint(args.prior_checkpoint)
        if p_spec.n_params != spec.n_params:
            raise UsageError("prior checkpoint does not match the model")
        center = ParamVector(center.values, spec)
    else:
        center = params.with_values(np.zeros(spec.n_params))

    if args.optimize:
        report = optimize_stochastic_bound(spec, params, ds, inputs, center, rng)
    else:
        Q = GaussianWeightDistribution(params, args.std)
        if args.mode == "baseline":
            risk = stochastic_risk(Q, ds, rng, inputs.mc_samples)
        elif args.mode == "da":
            group = ds.group
            if group is None:
                raise UsageError("the dataset sidecar names no group; da mode needs one")
            risk = stochastic_risk(Q, ds, rng, inputs.mc_samples, "augmented", group)
        else:
            if spec.averaging is None:
                raise UsageError("fa mode needs a checkpoint with an averaging layer")
            risk = stochastic_risk(Q, ds, rng, inputs.mc_samples)
        kl_fn = effective_kl if args.mode == "fa" else kl_diag_gaussian
        sigmas = [args.prior_std] if args.prior_std is not None else PRIOR_STD_GRID
        penalty = 0.0 if args.prior_std is not None else GRID_PENALTY
        report = min((assemble_report(args.mode, inputs, risk, kl_fn(Q, grid_prior(center, s)), penalty,
                                      {"prior_std": float(s), "posterior_std": args.std})
                      for s in sigmas), key=lambda r: r.bound)
    if "prior_std" in report.extra:
        print(f"prior std {report.extra['prior_std']:g}", file=sys.stderr)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_PASS


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="invlab", description=__doc__.split("\n\n")[0].strip("`"))
    ap.add_argument("--version", action="version", version=f"invlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a study from a TOML config",
                       description=f"Studies: {', '.join(STUDIES)}.")
    r.add_argument("config", help="TOML file with study, seed, replicates, output and [params]")
    r.add_argument("--seed", type=int, help="overrides INVLAB_SEED and the file")
    r.add_argument("--replicates", type=int)
    r.add_argument("--out", help="run directory")
    r.add_argument("--jobs", type=int, help="replicates run concurrently")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="study parameter override")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="tabulate a completed run and recheck it against its CSVs")
    p.add_argument("dir")
    p.add_argument("--data", metavar="DIR", help="write gnuplot .dat files of per-epoch curves")
    p.add_argument("--figures", metavar="DIR", help="render PNG figures of per-epoch curves")
    p.set_defaults(fn=cmd_report)

    g = sub.add_parser("gen-data", help="write a synthetic invariant dataset (CSV + JSON sidecar)")
    g.add_argument("task", help=f"one of: {', '.join(TASKS)}")
    g.add_argument("--out", default=".")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="task constructor argument, e.g. sizes=[200,100,0]")
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("bound", help="Catoni PAC-Bayes bound of a Gaussian around a checkpoint")
    b.add_argument("checkpoint")
    b.add_argument("dataset")
    b.add_argument("--mode", choices=("baseline", "da", "fa"), default="baseline")
    b.add_argument("--std", type=float, default=0.01, help="posterior standard deviation")
    b.add_argument("--prior-std", type=float,
                   help="prior standard deviation (default: best of the 18-point grid, union-bounded)")
    b.add_argument("--prior-checkpoint", help="prior mean (default: zero)")
    b.add_argument("--delta", type=float, default=0.05)
    b.add_argument("--beta", type=float, help="fixed beta (default: optimized over the grid)")
    b.add_argument("--draws", type=int, default=150, help="posterior draws for the risk")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--optimize", action="store_true",
                   help="fit the posterior by surrogate optimization instead of using --std")
    b.add_argument("--out", help="also write the report JSON here")
    b.set_defaults(fn=cmd_bound)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    try:
        return args.fn(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"invlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
