"""
SVG figures and the markdown run summary.

Output is deterministic: matplotlib's SVG ids are salted with a fixed string
and the date metadata is dropped, so regenerating a report gives identical bytes.
"""

import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .errors import MissingInputs
from .telemetry import EXPERTISE_LEVELS

plt.rcParams["svg.hashsalt"] = "attnscope"
plt.rcParams["svg.fonttype"] = "none"

EXPERTISE_COLORS = {"resident": "#1f77b4", "general": "#ff7f0e", "specialist": "#2ca02c"}

# run-dir file -> section title, in report order
REPORT_TABLES = (
    ("cohort_summary.csv", "Cohort"),
    ("agreement_groups.csv", "Attention agreement vs grade concordance"),
    ("attention_table.csv", "Attention prediction (k-fold)"),
    ("cohort_models.csv", "Specialist vs non-specialist training"),
    ("expertise_table.csv", "Expertise classification (k-fold)"),
    ("expertise_table_2way.csv", "Expertise classification, specialist vs non-specialist (k-fold)"),
)


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def render_heatmap_svg(hmap, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 5))
    im = ax.imshow(hmap.values, cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title)
    return _save(fig, path)


def render_agreement_svg(points, groups, path):
    """Attention agreement (x) vs grade concordance (y), one colour and regression line per expertise."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for exp in EXPERTISE_LEVELS:
        sub = points[(points["expertise"] == exp)].dropna(subset=["grade_concordance"])
        if sub.empty:
            continue
        color = EXPERTISE_COLORS[exp]
        ax.scatter(sub["attn_agreement"], sub["grade_concordance"], s=18, color=color, alpha=0.7, label=exp)

        row = groups[groups["expertise"] == exp]
        if row.empty or not np.isfinite(row["slope"].iloc[0]):
            continue
        slope, intercept = row["slope"].iloc[0], row["intercept"].iloc[0]
        xs = np.array([sub["attn_agreement"].min(), sub["attn_agreement"].max()])
        ax.plot(xs, intercept + slope * xs, color=color, linewidth=2)

    ax.set_xlabel("Attention agreement (mean pairwise CC)")
    ax.set_ylabel("Grade concordance")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def markdown_table(df, float_format="{:.4f}"):
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return "nan" if not np.isfinite(v) else float_format.format(v)
        return str(v)

    lines = [
        "| " + " | ".join(str(c) for c in df.columns) + " |",
        "|" + "|".join("---" for _ in df.columns) + "|",
    ]
    for row in df.itertuples(index=False):
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines)


def write_report(run_dir):
    """
    Render ``agreement.svg`` and ``report.md`` from the tables found in ``run_dir``.

    Raises
    ------
    MissingInputs
        When the run directory holds none of the known tables.
    """
    present = [(f, title) for f, title in REPORT_TABLES if os.path.exists(os.path.join(run_dir, f))]
    if not present:
        raise MissingInputs(f"no agree/eval outputs found in {run_dir}")

    written = []
    sections = ["# attnscope report", ""]

    points_csv = os.path.join(run_dir, "agreement_points.csv")
    groups_csv = os.path.join(run_dir, "agreement_groups.csv")
    if os.path.exists(points_csv) and os.path.exists(groups_csv):
        svg = render_agreement_svg(pd.read_csv(points_csv), pd.read_csv(groups_csv), os.path.join(run_dir, "agreement.svg"))
        written.append(svg)
        sections += ["![agreement](agreement.svg)", ""]

    for file_name, title in present:
        df = pd.read_csv(os.path.join(run_dir, file_name))
        sections += [f"## {title}", "", markdown_table(df), ""]

    md_path = os.path.join(run_dir, "report.md")
    with open(md_path, "w") as f:
        f.write("\n".join(sections))
    written.append(md_path)
    logging.info(f"Report written to {run_dir}")
    return written
