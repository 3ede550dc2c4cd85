"""Matplotlib rendering of the pipeline's tabular outputs: DVH curves,
cognitive-category counts, paired-difference intervals, and per-group metric
distributions. Every report command writes these alongside its CSVs.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .stats import FamilyResult
from .traces import VariantComparison

STRUCTURE_COLORS = {
    "PTV": "#c62828",
    "GTV": "#ad1457",
    "Ring": "#6a1b9a",
    "Brain": "#455a64",
    "Brainstem": "#2e7d32",
    "OpticChiasm": "#f9a825",
    "OpticNerveL": "#ef6c00",
    "OpticNerveR": "#ff8f00",
    "CochleaL": "#1565c0",
    "CochleaR": "#0277bd",
}


def render_dvh(
    curves: Mapping[str, Mapping[str, Sequence[float]]],
    prescription_gy: float,
    path: str | Path,
    title: str = "Dose-volume histogram",
) -> Path:
    """curves: structure name -> {"thresholds_gy": [...], "fractions": [...]}."""
    fig, ax = plt.subplots(figsize=(7.0, 4.8))
    for name in sorted(curves):
        curve = curves[name]
        ax.plot(
            curve["thresholds_gy"],
            100.0 * np.asarray(curve["fractions"], dtype=float),
            label=name,
            color=STRUCTURE_COLORS.get(name),
            linewidth=1.6 if name == "PTV" else 1.1,
        )
    ax.axvline(prescription_gy, color="black", linestyle=":", linewidth=0.9, label="prescription")
    ax.set_xlabel("Dose (Gy)")
    ax.set_ylabel("Volume (%)")
    ax.set_ylim(0, 102)
    ax.set_xlim(left=0)
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def render_category_counts(
    comparison: VariantComparison,
    label_a: str,
    label_b: str,
    path: str | Path,
) -> Path:
    """Grouped bars of cognitive-category instance counts for two variants."""
    categories = [row.category.value for row in comparison.rows]
    counts_a = [row.count_a for row in comparison.rows]
    counts_b = [row.count_b for row in comparison.rows]
    x = np.arange(len(categories))
    width = 0.38
    fig, ax = plt.subplots(figsize=(8.0, 4.6))
    ax.bar(x - width / 2, counts_a, width, label=label_a, color="#1565c0")
    ax.bar(x + width / 2, counts_b, width, label=label_b, color="#c62828")
    ax.set_xticks(x)
    ax.set_xticklabels(categories, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("Utterance instances")
    ax.set_title("Cognitive-category counts by variant")
    ax.legend()
    ax.grid(axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def render_single_variant_counts(
    totals: Mapping[str, int],
    path: str | Path,
    title: str = "Cognitive-category counts",
) -> Path:
    names = list(totals.keys())
    values = [totals[n] for n in names]
    fig, ax = plt.subplots(figsize=(8.0, 4.6))
    ax.bar(np.arange(len(names)), values, color="#1565c0")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("Utterance instances")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def render_paired_differences(
    families: Sequence[FamilyResult],
    path: str | Path,
    title: str = "Paired differences (a - b) with bootstrap 95% CI",
) -> Path:
    """One marker per endpoint: median difference with CI whiskers; filled
    markers are significant after within-family FDR correction."""
    endpoints = [e for fam in families for e in fam.endpoints]
    if not endpoints:
        raise ValueError("no endpoints to plot")
    y = np.arange(len(endpoints))[::-1]
    fig, ax = plt.subplots(figsize=(7.0, 0.42 * len(endpoints) + 1.8))
    for yi, e in zip(y, endpoints):
        color = "#c62828" if e.significant else "#455a64"
        ax.errorbar(
            e.median_diff, yi,
            xerr=[[e.median_diff - e.ci_low], [e.ci_high - e.median_diff]],
            fmt="o", color=color, ecolor=color, capsize=3,
            markerfacecolor=color if e.significant else "white",
        )
    ax.axvline(0.0, color="black", linewidth=0.8, linestyle=":")
    ax.set_yticks(y)
    ax.set_yticklabels([f"{e.family}: {e.endpoint}" for e in endpoints], fontsize=8)
    ax.set_xlabel("Median paired difference")
    ax.set_title(title, fontsize=10)
    ax.grid(axis="x", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)


def render_group_distributions(
    points: Sequence[tuple[str, str, float]],
    endpoint: str,
    path: str | Path,
) -> Path:
    """Violin + scatter of one endpoint's per-patient values by group."""
    groups = sorted({g for _, g, _ in points})
    data = [[v for _, g, v in points if g == name] for name in groups]
    fig, ax = plt.subplots(figsize=(1.6 * len(groups) + 2.5, 4.6))
    nonempty = [(i, d) for i, d in enumerate(data) if d]
    if nonempty:
        ax.violinplot([d for _, d in nonempty], positions=[i for i, _ in nonempty], showmedians=True)
    rng = np.random.default_rng(0)
    for i, d in enumerate(data):
        if not d:
            continue
        jitter = rng.uniform(-0.06, 0.06, size=len(d))
        ax.plot(np.full(len(d), i) + jitter, d, "o", markersize=3, color="#1565c0", alpha=0.6)
    ax.set_xticks(np.arange(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylabel(endpoint)
    ax.set_title(f"{endpoint} by group")
    ax.grid(axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return Path(path)
