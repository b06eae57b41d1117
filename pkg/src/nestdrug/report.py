"""Report emission: delimited tables plus matplotlib figures rendered to SVG.

Figures are deterministic: fixed ordering, a pinned svg hashsalt, and no
date metadata, so re-running a command yields byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .errors import IoError  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "nestdrug"
matplotlib.rcParams["figure.max_open_warning"] = 0


def save_figure(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_csv_rows(path, rows: list[dict], columns: list[str]):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g")
    return value


def read_csv_rows(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def bar_chart(path, labels, series: dict[str, list[float]], title: str,
              ylabel: str):
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2), 3.2))
    width = 0.8 / max(1, len(series))
    x = np.arange(len(labels), dtype=float)
    for i, name in enumerate(sorted(series)):
        ax.bar(x + i * width, series[name], width=width, label=name)
    ax.set_xticks(x + width * (len(series) - 1) / 2)
    ax.set_xticklabels([str(l) for l in labels], rotation=30, ha="right")
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    save_figure(fig, path)


def line_chart(path, x, series: dict[str, list[float]], title: str,
               xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for name in sorted(series):
        ax.plot(x, series[name], marker="o", markersize=3, label=name)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    save_figure(fig, path)


def heatmap(path, matrix: np.ndarray, row_labels, col_labels, title: str):
    fig, ax = plt.subplots(figsize=(max(3.5, 0.5 * len(col_labels) + 2),
                                    max(2.5, 0.4 * len(row_labels) + 1.5)))
    im = ax.imshow(np.asarray(matrix), aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(col_labels)))
    ax.set_xticklabels([str(c) for c in col_labels], rotation=45, ha="right",
                       fontsize=7)
    ax.set_yticks(range(len(row_labels)))
    ax.set_yticklabels([str(r) for r in row_labels], fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    save_figure(fig, path)


# csv files emitted by the grid commands and consumed by `report`
KNOWN_TABLES = {
    "ablation.csv": {
        "numeric": ["auc_correct", "auc_generic", "delta"],
        "group_by": "target_id",
        "chart": ("delta", "Correct minus generic context (ROC-AUC)"),
    },
    "fusion.csv": {
        "numeric": ["auc"],
        "group_by": "variant",
        "chart": ("auc", "Mean ROC-AUC by fusion variant"),
    },
    "fewshot.csv": {
        "numeric": ["zero_shot_auc", "adapted_auc", "delta"],
        "group_by": "shots",
        "chart": ("delta", "Few-shot adaptation delta vs zero-shot"),
    },
    "eval_grid.csv": {
        "numeric": ["roc_auc", "pr_auc"],
        "group_by": "target_id",
        "chart": ("roc_auc", "ROC-AUC by target"),
    },
}


def emit_report(results_dir, out_dir) -> dict:
    """Aggregate known CSV tables into a summary JSON plus SVG charts.

    Unknown files are ignored; an empty results directory produces an empty
    summary with a warning rather than an error.
    """
    if not os.path.isdir(results_dir):
        raise IoError(f"results dir not found: {results_dir}")
    os.makedirs(out_dir, exist_ok=True)
    summary: dict = {"tables": {}, "warnings": []}
    found = False
    for fname in sorted(os.listdir(results_dir)):
        spec = KNOWN_TABLES.get(fname)
        if spec is None:
            continue
        rows = read_csv_rows(os.path.join(results_dir, fname))
        if not rows:
            summary["warnings"].append(f"{fname}: empty table")
            continue
        found = True
        group_col = spec["group_by"]
        groups: dict[str, list[dict]] = {}
        for row in rows:
            groups.setdefault(row.get(group_col, ""), []).append(row)
        table_summary = {}
        for key in sorted(groups):
            stats = {}
            for col in spec["numeric"]:
                vals = [float(r[col]) for r in groups[key]
                        if r.get(col) not in (None, "")]
                if vals:
                    stats[col] = {
                        "mean": float(np.mean(vals)),
                        "std": float(np.std(vals)),
                        "n": len(vals),
                    }
            table_summary[key] = stats
        summary["tables"][fname] = table_summary
        chart_col, chart_title = spec["chart"]
        labels = sorted(groups)
        means = [table_summary[k].get(chart_col, {}).get("mean", 0.0)
                 for k in labels]
        chart_path = os.path.join(
            out_dir, fname.replace(".csv", "") + f"_{chart_col}.svg")
        bar_chart(chart_path, labels, {chart_col: means}, chart_title, chart_col)
    if not found:
        summary["warnings"].append("no known result tables found")
    write_json(os.path.join(out_dir, "summary.json"), summary)
    return summary


def replay_curve(path, round_numbers, hit_rates: dict[str, list[float]]):
    line_chart(path, round_numbers, hit_rates,
               "Per-round hit rate", "round", "hit rate")


def attribution_heatmap(path, per_context: dict[str, np.ndarray], title: str):
    labels = sorted(per_context)
    matrix = np.stack([per_context[k] for k in labels])
    heatmap(path, matrix, labels, list(range(matrix.shape[1])), title)
