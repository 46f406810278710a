"""Command-line entry point.

Every subcommand takes a config path plus optional ``--seed`` and ``--out``
overrides, reruns the deterministic pipeline prefix it needs, and writes
``report.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..attacker import infer_distribution, load_checkpoint
from ..errors import FedLdiError
from ..vclients import TemporalMatrix
from .config import parse_config, replace
from .pipeline import ExperimentReport, default_output_dir, run_dp_sweep, run_experiment
from .plotdata import emit_plotdata

STAGE_FOR = {
    "simulate": "federation",
    "estimate-size": "size",
    "build-cluster": "cluster",
    "train-attacker": "attacker",
    "infer": "inference",
    "evaluate": "evaluation",
    "report": "evaluation",
}


def _load(args):
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else default_output_dir(cfg)
    return cfg, out


def _summary(report: ExperimentReport):
    lines = [f"config {report.config_hash[:12]}  stages: {', '.join(report.metadata['stages'])}"]
    if report.federation:
        lines.append(f"victim accuracy {report.federation['victim_accuracy']:.4f}  "
                     f"global accuracy {report.federation['global_accuracy']:.4f}")
    if report.size_estimate:
        lines.append(f"estimated size {report.size_estimate['size']} "
                     f"(true {report.size_estimate['true_size']})")
    if report.victim:
        d = report.victim["distances"]
        u = report.victim["baselines"]["uniform"]["distances"]
        lines.append(f"victim L1 {d['l1']:.4f}  JS {d['js']:.4f}  (uniform L1 {u['l1']:.4f})")
    if report.heldout and report.heldout.get("count"):
        h = report.heldout
        lines.append(f"held-out L1 {h['mean']['l1']:.4f}  (uniform {h['uniform_mean']['l1']:.4f})  "
                     f"argmax accuracy {h['argmax_accuracy']:.3f}")
    return "\n".join(lines)


def cmd_stage(args):
    cfg, out = _load(args)
    report = run_experiment(cfg, out, stop_after=STAGE_FOR[args.command])
    if args.command == "report":
        emit_plotdata([report], out)
    print(_summary(report))
    print(f"wrote {out / 'report.json'}")
    return 0


def cmd_infer(args):
    if args.model is None and args.matrix is None:
        return cmd_stage(args)
    if args.model is None or args.matrix is None:
        raise SystemExit("--model and --matrix must be given together")
    model = load_checkpoint(args.model)
    matrix = TemporalMatrix.from_csv(args.matrix)
    dist = infer_distribution(model, matrix.values)
    payload = {"model": str(args.model), "matrix": str(args.matrix), "predicted": dist.to_list()}
    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(" ".join(f"{x:.4f}" for x in dist.p))
    return 0


def cmd_sweep(args):
    cfg, out = _load(args)
    eps = [float(e) for e in args.eps.split(",")] if args.eps else None
    reports = run_dp_sweep(cfg, eps, out)
    for r in reports:
        print(f"eps {r.config['ldp']['epsilon']:g}: accuracy {r.federation['victim_accuracy']:.4f}"
              f"  victim L1 {r.victim['distances']['l1']:.4f}")
    sweep = {"epsilons": [r.config["ldp"]["epsilon"] for r in reports],
             "reports": [f"eps_{r.config['ldp']['epsilon']:g}/report.json" for r in reports]}
    (out / "report.json").write_text(json.dumps(sweep, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_report_from(args):
    reports = [ExperimentReport.read(p) for p in args.from_reports]
    out = Path(args.out) if args.out else Path(args.from_reports[0]).parent
    paths = emit_plotdata(reports, out)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fedldi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="output directory")

    helps = {
        "simulate": "run the federation with the victim",
        "estimate-size": "estimate the victim's dataset size",
        "build-cluster": "build and shadow-train the virtual cluster",
        "train-attacker": "train the attacker on the cluster records",
        "infer": "infer the victim's label distribution",
        "evaluate": "full pipeline with held-out evaluation",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        common(p)
        if name == "infer":
            p.add_argument("--model", default=None, help="attacker checkpoint (skips the pipeline)")
            p.add_argument("--matrix", default=None, help="temporal matrix CSV to classify")
            p.set_defaults(func=cmd_infer)
        else:
            p.set_defaults(func=cmd_stage)

    p = sub.add_parser("sweep-dp", help="full pipeline at several privacy budgets")
    common(p)
    p.add_argument("--eps", default=None, help="comma-separated epsilons (default: config dp_sweep)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="full pipeline plus plot-data CSVs")
    p.add_argument("config", nargs="?", help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--from", dest="from_reports", nargs="+", default=None,
                   help="emit plot data from existing report.json files instead")
    p.set_defaults(func=lambda a: cmd_report_from(a) if a.from_reports else cmd_stage(a))
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and not args.from_reports and not args.config:
        parser.error("report needs a config or --from")
    try:
        return args.func(args)
    except FedLdiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
