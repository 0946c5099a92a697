"""Report figures.

All figures are written with the Agg backend and without the ``Software``
PNG metadata entry so re-running a report yields identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "lines.linewidth": 1.0,
    "svg.hashsalt": "uvpulse",
}

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def figsize(width: float = 4.5, ratio: float = GOLDEN):
    return (width, width * ratio)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def scatter_gt_vs_est(rows, path):
    """Estimated against reference pulse rate, one colour per scenario."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(3.6, 1.0))
        scenarios = sorted({r.scenario for r in rows})
        for i, sc in enumerate(scenarios):
            sel = [r for r in rows if r.scenario == sc]
            ax.scatter([r.gt_bpm for r in sel], [r.est_bpm for r in sel], s=14, label=sc, color=f"C{i}")
        lo = min([r.gt_bpm for r in rows] + [r.est_bpm for r in rows] + [45.0])
        hi = max([r.gt_bpm for r in rows] + [r.est_bpm for r in rows] + [150.0])
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("reference PR [BPM]")
        ax.set_ylabel("estimated PR [BPM]")
        ax.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)


def error_by_scenario(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        names = list(report.by_scenario)
        mae = [report.by_scenario[k].mae for k in names]
        se = [report.by_scenario[k].mae_se for k in names]
        ax.bar(names, mae, yerr=se, color="C0", capsize=3)
        ax.set_ylabel("MAE [BPM]")
        fig.tight_layout()
        return save(fig, path)


def spectrum(video_id, spec, est_bpm, gt_bpm, band, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        bpm = spec.freqs * 60
        sel = bpm <= 300
        p = spec.power[sel]
        ax.plot(bpm[sel], p / max(p.max(), 1e-300), color="k")
        ax.axvspan(band[0] * 60, band[1] * 60, color="C0", alpha=0.08, lw=0)
        ax.axvline(gt_bpm, color="C2", ls="--", label=f"reference {gt_bpm:.1f}")
        ax.axvline(est_bpm, color="C3", ls=":", label=f"estimate {est_bpm:.1f}")
        ax.set_xlabel("frequency [BPM]")
        ax.set_ylabel("normalized power")
        ax.set_title(video_id)
        ax.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)
