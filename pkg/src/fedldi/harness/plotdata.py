"""CSV emission for the distribution line plots and the privacy sweep."""

from __future__ import annotations

import csv
from pathlib import Path

DIST_COLUMNS = ["run", "class", "true", "predicted", "uniform", "lastlayer"]
SWEEP_COLUMNS = ["epsilon", "l1", "js", "kl", "wasserstein", "accuracy"]


def _as_dict(report):
    return report.to_dict() if hasattr(report, "to_dict") else report


def _fmt(x):
    return "" if x is None else repr(float(x))


def emit_plotdata(reports, out_dir):
    """Write ``dist_lines.csv`` and ``dp_sweep.csv``; returns their paths.

    Rows are ordered by report then class, so re-emission is byte-identical.
    """
    reports = [_as_dict(r) for r in reports]
    if not reports:
        raise ValueError("need at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist_path, sweep_path = out / "dist_lines.csv", out / "dp_sweep.csv"
    with open(dist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIST_COLUMNS)
        for i, rep in enumerate(reports):
            v = rep["victim"]
            cols = [v["true"], v["predicted"], v["baselines"]["uniform"]["predicted"],
                    v["baselines"]["lastlayer"]["predicted"]]
            for c in range(len(v["true"])):
                w.writerow([i, c] + [_fmt(col[c]) for col in cols])
    with open(sweep_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for rep in reports:
            ldp = rep["config"].get("ldp")
            d = rep["victim"]["distances"]
            w.writerow([_fmt(ldp["epsilon"]) if ldp else "", _fmt(d["l1"]), _fmt(d["js"]),
                        _fmt(d["kl"]), _fmt(d["wasserstein"]),
                        _fmt(rep["federation"]["victim_accuracy"])])
    return dist_path, sweep_path
