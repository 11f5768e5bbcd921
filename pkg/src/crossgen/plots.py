"""Strata line plots with CI bands, composite PNGs and a grid accuracy heatmap."""

import logging
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._io import write_png  # noqa: E402
from .registry import Stratum  # noqa: E402

logger = logging.getLogger(__name__)

# PNG metadata otherwise embeds the matplotlib version string
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def strata_figure(report):
    """Positive and negative mean score per stratum with shaded 95% CI bands."""
    rows = report.present()
    x = np.array([r.stratum.value for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for attr, ci_attr, label, color in (("mean_pos", "ci_pos", "positive", "tab:red"),
                                        ("mean_neg", "ci_neg", "negative", "tab:blue")):
        y = np.array([getattr(r, attr) for r in rows])
        ci = np.array([getattr(r, ci_attr) if r.ci_defined else 0.0 for r in rows])
        ax.plot(x, y, marker="o", color=color, label=label)
        ax.fill_between(x, y - ci, y + ci, color=color, alpha=0.2, linewidth=0)
    ax.set_xticks([s.value for s in Stratum], [s.label for s in Stratum])
    ax.set_xlim(-0.2, len(Stratum) - 0.8)
    ax.set_ylim(0, 100)
    ax.set_xlabel("involvement stratum")
    ax.set_ylabel("mean predicted score (%)")
    ax.set_title(f"{report.model} (95% CI)", fontsize=9)
    ax.legend(loc="center right")
    fig.tight_layout()
    return fig


def plot_strata(report, path):
    fig = strata_figure(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", **_SAVE_KW)
    plt.close(fig)
    return path


def plot_grid(grid, path, metric="accuracy"):
    """Heatmap of one metric: models (rows) x test datasets (columns)."""
    models = sorted({(c.model_dataset, c.preprocess, c.gabor) for c in grid.cells})
    tests = sorted({c.test_dataset for c in grid.cells})
    values = np.full((len(models), len(tests)), np.nan)
    for c in grid.cells:
        if c.report is not None:
            values[models.index((c.model_dataset, c.preprocess, c.gabor)), tests.index(c.test_dataset)] = \
                getattr(c.report, metric)
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(tests), 1.0 + 0.35 * len(models)))
    im = ax.imshow(values, vmin=0, vmax=100, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(tests)), tests, rotation=30, ha="right")
    ax.set_yticks(range(len(models)),
                  [f"{d}/{p}/{'gabor' if g else 'plain'}" for d, p, g in models], fontsize=7)
    for i in range(len(models)):
        for j in range(len(tests)):
            if not math.isnan(values[i, j]):
                ax.text(j, i, f"{values[i, j]:.0f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax, label=metric)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", **_SAVE_KW)
    plt.close(fig)
    return path


def emit_plots(grid, strata_reports, out_dir, composites=None):
    """Render every strata report, the grid heatmap and per-class composites.

    ``composites`` maps dataset name to a fitted BiasDiagnostics. Returns the
    written paths; an empty input set is a no-op with a warning.
    """
    out_dir = Path(out_dir)
    written = []
    if grid is None and not strata_reports and not composites:
        logger.warning("emit_plots: nothing to render")
        return written
    for report in strata_reports or []:
        if len(report.present()) == 0:
            continue
        written.append(plot_strata(report, out_dir / f"strata__{report.model}.png"))
    if grid is not None and grid.cells:
        written.append(plot_grid(grid, out_dir / "grid_accuracy.png"))
    for dataset, diag in (composites or {}).items():
        for k, c in diag.composites_.items():
            p = out_dir / f"composite__{dataset}__class{k}.png"
            write_png(p, c.to_uint8())
            written.append(p)
    return written
