"""Seed aggregation of MetricsReports, CSV/JSON emission and figures.

Figures are written with the Agg backend and without the ``Software``
metadata chunk, so the same inputs give byte-identical PNG files.
"""

import csv
import io
import json
import os
from collections import OrderedDict

import numpy as np

from .errors import UsageError
from .metrics import MetricsReport, OOD_METHODS, ece_bins, roc_curve

CSV_COLUMNS = ("metric", "dataset", "method", "mean", "std")
BASE_METRICS = ("acc", "nll", "ece")


def _as_report(r):
    return r if isinstance(r, MetricsReport) else MetricsReport.from_dict(r)


def _sample_std(values):
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(reports):
    """Mean and sample std (n - 1) per metric over the given per-seed reports.

    Rows are grouped by (dataset, method); AUROC rows carry the OOD set in
    the dataset column as ``in->ood``.
    """
    reports = [_as_report(r) for r in reports]
    if not reports:
        raise UsageError("need at least one report to aggregate")
    ks = {r.n_classes for r in reports}
    if len(ks) > 1:
        raise UsageError(f"cannot aggregate reports with different class counts {sorted(ks)}")
    groups = OrderedDict()
    for r in reports:
        groups.setdefault((r.dataset, r.method), []).append(r)
    rows = []
    for (dataset, method), rs in groups.items():
        values = OrderedDict((m, [getattr(r, m) for r in rs]) for m in BASE_METRICS)
        oods = sorted({o for r in rs for o in r.auroc})
        for o in oods:
            for score in OOD_METHODS:
                vals = [r.auroc[o][score] for r in rs if o in r.auroc and score in r.auroc[o]]
                if vals:
                    values[(f"auroc_{score}", f"{dataset}->{o}")] = vals
        for key, vals in values.items():
            metric, ds = key if isinstance(key, tuple) else (key, dataset)
            rows.append({
                "metric": metric, "dataset": ds, "method": method,
                "mean": float(np.mean(vals)), "std": _sample_std(vals), "n": len(vals),
            })
    return rows


def emit_report(reports, fmt, out):
    """Write the seed aggregate of ``reports`` to ``out`` as json or csv."""
    if fmt not in ("json", "csv"):
        raise UsageError(f"report format must be json or csv, got {fmt!r}")
    reports = [_as_report(r) for r in reports]
    rows = aggregate(reports)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "mean": repr(row["mean"]), "std": repr(row["std"])})
        text = buf.getvalue()
    else:
        doc = {
            "seeds": [r.seed for r in reports],
            "rows": rows,
            "reports": [r.to_dict() for r in reports],
        }
        text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    with open(out, "w") as fh:
        fh.write(text)
    return out


def read_report(path):
    """Aggregate rows back from a file written by :func:`emit_report`."""
    with open(path) as fh:
        if path.endswith(".csv"):
            rows = list(csv.DictReader(fh))
            for row in rows:
                row["mean"], row["std"] = float(row["mean"]), float(row["std"])
            return rows
        return json.load(fh)["rows"]


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _pyplot().close(fig)
    return path


def plot_training_curves(train_report, path):
    plt = _pyplot()
    rows = train_report["epochs"] if isinstance(train_report, dict) else train_report.epochs
    ep = [r["epoch"] for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    a1.plot(ep, [r["data"] for r in rows], label="data term")
    a1.plot(ep, [-r["prior"] for r in rows], label="-prior")
    a1.set_yscale("symlog")
    a1.set_xlabel("epoch")
    a1.legend(frameon=False)
    a2.plot(ep, [r["val_nll"] for r in rows], color="k")
    best = min(rows, key=lambda r: r["val_nll"])
    a2.axvline(best["epoch"], ls=":", color="grey")
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation NLL")
    fig.tight_layout()
    return _save(fig, path)


def plot_reliability(pb, labels, path, bins=15):
    plt = _pyplot()
    _, acc, _ = ece_bins(pb, labels, bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([0, 1], [0, 1], ls="--", color="grey", lw=1)
    ax.bar(edges[:-1], acc, width=1.0 / bins, align="edge", edgecolor="k", alpha=0.7)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def plot_ood(in_scores, ood_scores_by_name, path, score_name="msp"):
    """Score histograms (left) and ROC curves (right), one OOD set per colour."""
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    lo = min([np.min(in_scores)] + [np.min(s) for s in ood_scores_by_name.values()])
    hi = max([np.max(in_scores)] + [np.max(s) for s in ood_scores_by_name.values()])
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, 31)
    a1.hist(in_scores, bins=edges, histtype="step", color="k", label="in-distribution")
    for name in sorted(ood_scores_by_name):
        s = ood_scores_by_name[name]
        a1.hist(s, bins=edges, histtype="step", label=name)
        fpr, tpr = roc_curve(in_scores, s)
        a2.plot(fpr, tpr, label=name)
    a1.set_xlabel(f"{score_name} score")
    a1.legend(frameon=False)
    a2.plot([0, 1], [0, 1], ls="--", color="grey", lw=1)
    a2.set_xlabel("false positive rate")
    a2.set_ylabel("true positive rate")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path, metric="auroc_msp"):
    """Bar chart of ``metric`` per variant from aggregate rows (mean and std)."""
    plt = _pyplot()
    sel = [r for r in rows if r["metric"] == metric]
    if not sel:
        raise UsageError(f"no {metric} rows to plot")
    fig, ax = plt.subplots(figsize=(5, 3.4))
    x = np.arange(len(sel))
    ax.bar(x, [r["mean"] for r in sel], yerr=[r["std"] for r in sel], capsize=4, color="0.6", edgecolor="k")
    ax.set_xticks(x)
    ax.set_xticklabels([r["method"] for r in sel])
    ax.set_ylabel(metric)
    lo = min(r["mean"] - r["std"] for r in sel)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    fig.tight_layout()
    return _save(fig, path)
