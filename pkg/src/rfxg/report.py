"""Render an evaluation directory into figures plus a markdown report.

Kept separate from the evaluation run on purpose: eval output must be
byte-identical across reruns, and figure files are not. The report reads
only the delimited tables the run left behind.
"""

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

__all__ = ["write_report"]


def _read_csv(path):
    if not path.is_file():
        return []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[1:] if rows else []


def _collect_scores(eval_dir):
    """metric -> explainer -> list of per-image scores."""
    table = defaultdict(lambda: defaultdict(list))
    for row in _read_csv(eval_dir / "metrics.csv"):
        image_id, metric, explainer, _query, score = row
        table[metric][explainer].append(float(score))
    return table


def _collect_curves(eval_dir):
    """metric -> explainer -> (alphas, scores)."""
    curves = defaultdict(dict)
    directory = eval_dir / "curves"
    if not directory.is_dir():
        return curves
    for path in sorted(directory.glob("*.csv")):
        metric, _, explainer = path.stem.partition("-")
        rows = _read_csv(path)
        if not rows:
            continue
        alphas = [float(r[0]) for r in rows]
        values = [float(r[1]) for r in rows]
        curves[metric][explainer] = (alphas, values)
    return curves


def _score_figure(metric, by_explainer, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(by_explainer)
    means = [float(np.mean(by_explainer[n])) for n in names]
    sems = [
        float(np.std(by_explainer[n], ddof=1) / np.sqrt(len(by_explainer[n])))
        if len(by_explainer[n]) > 1 else 0.0
        for n in names
    ]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(range(len(names)), means, yerr=sems, capsize=3, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("mean score")
    ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _curve_figure(metric, by_explainer, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.2))
    for name in sorted(by_explainer):
        alphas, values = by_explainer[name]
        ax.plot(alphas, values, marker="o", markersize=3, label=name)
    ax.set_xlabel("masked fraction")
    ax.set_ylabel("mean per-step score")
    ax.set_title(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(eval_dir, out_dir=None):
    """Build report.md and its figures; returns the report path."""
    eval_dir = Path(eval_dir)
    out = Path(out_dir) if out_dir else eval_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    figdir = out / "figures"
    figdir.mkdir(exist_ok=True)

    scores = _collect_scores(eval_dir)
    curves = _collect_curves(eval_dir)
    significance = _read_csv(eval_dir / "significance.csv")
    skips = _read_csv(eval_dir / "skips.csv")
    failures = _read_csv(eval_dir / "failures.csv")

    lines = ["# Saliency evaluation report", ""]
    if not scores:
        lines.append("No metric rows found; nothing to report.")
        report = out / "report.md"
        report.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return report

    lines.append("## Scores")
    lines.append("")
    explainers = sorted({e for by in scores.values() for e in by})
    lines.append("| metric | " + " | ".join(explainers) + " |")
    lines.append("|---" * (len(explainers) + 1) + "|")
    for metric in sorted(scores):
        cells = []
        for e in explainers:
            vals = scores[metric].get(e)
            cells.append(f"{np.mean(vals):.4f}" if vals else "-")
        lines.append(f"| {metric} | " + " | ".join(cells) + " |")
    lines.append("")

    for metric in sorted(scores):
        fig = figdir / f"scores-{metric}.png"
        _score_figure(metric, scores[metric], fig)
        lines.append(f"![{metric} scores](figures/scores-{metric}.png)")
        lines.append("")
        if metric in curves and curves[metric]:
            fig = figdir / f"curves-{metric}.png"
            _curve_figure(metric, curves[metric], fig)
            lines.append(f"![{metric} curves](figures/curves-{metric}.png)")
            lines.append("")

    if significance:
        lines.append("## Paired comparisons")
        lines.append("")
        lines.append("| metric | a | b | mean a | mean b | t | p |")
        lines.append("|---|---|---|---|---|---|---|")
        for metric, a, b, ma, mb, t, p, _dof in significance:
            lines.append(
                f"| {metric} | {a} | {b} | {float(ma):.4f} | {float(mb):.4f} "
                f"| {float(t):.3f} | {float(p):.2e} |"
            )
        lines.append("")

    if skips or failures:
        lines.append("## Exclusions")
        lines.append("")
        lines.append(f"{len(skips)} image(s) skipped, {len(failures)} failed.")
        lines.append("")

    report = out / "report.md"
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report
