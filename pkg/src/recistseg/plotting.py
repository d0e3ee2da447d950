"""Report figures. Everything renders off-screen to PNG with fixed metadata."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "recistseg",
}
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def trimap_modes(summary: list[dict], path) -> Path:
    """Bar chart of mean DICE (with std whiskers) per trimap mode."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        names = [r["mode"] for r in summary]
        means = [r["dice_mean"] for r in summary]
        stds = [r["dice_std"] for r in summary]
        x = np.arange(len(names))
        ax.bar(x, means, yerr=stds, color="0.6", edgecolor="0.2", capsize=3)
        ax.set_xticks(x, names, rotation=15)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("DICE")
        for xi, m in zip(x, means):
            ax.text(xi, min(m + 0.03, 1.0), f"{m:.3f}", ha="center", va="bottom", fontsize=8)
        return _save(fig, path)


def offset_curves(series: dict[str, dict[int, float]], path) -> Path:
    """Mean DICE against slice offset, one line per method."""
    styles = ["o-", "s--", "^-.", "d:"]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for (name, pts), st in zip(series.items(), styles * 2):
            taus = sorted(pts)
            ax.plot(taus, [pts[t] for t in taus], st, ms=4, lw=1.2, label=name)
        ax.set_xlabel("slice offset from the RECIST slice")
        ax.set_ylabel("mean DICE")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        return _save(fig, path)


def volume_change(reference: np.ndarray, methods: dict[str, tuple[np.ndarray, float, float]], path) -> Path:
    """Method volume change against reference change with least-squares lines.

    ``methods`` maps a name to (deltas, slope, intercept).
    """
    markers = ["o", "s", "^", "d"]
    ref = np.asarray(reference, float) / 1000.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        lo, hi = float(ref.min()), float(ref.max())
        for (name, (d, a, b)), mk in zip(methods.items(), markers * 2):
            d = np.asarray(d, float) / 1000.0
            line = ax.scatter(ref, d, s=14, marker=mk, label=f"{name} (slope {a:.2f})")
            xs = np.array([lo, hi])
            ax.plot(xs, a * xs + b / 1000.0, color=line.get_facecolor()[0], lw=1)
            lo, hi = min(lo, float(d.min())), max(hi, float(d.max()))
        ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8, ls=":")
        ax.set_xlabel("reference volume change (cm$^3$)")
        ax.set_ylabel("measured volume change (cm$^3$)")
        ax.legend(frameon=False, fontsize=8)
        return _save(fig, path)
