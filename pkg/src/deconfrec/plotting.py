"""Report figures. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "deconfrec",
}


def new_figure(width=6.0, height=None):
    golden = (5 ** 0.5 - 1) / 2
    return plt.subplots(figsize=(width, height or width * golden))


def save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_group_auc(report: dict, path) -> None:
    """Grouped bars of pooled AUC per activeness group, one bar per variant."""
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        variants = list(report["variants"])
        n_groups = len(report["variants"][variants[0]]["groups"])
        width = 0.8 / len(variants)
        for k, name in enumerate(variants):
            rows = report["variants"][name]["groups"]
            xs = [r["group"] + (k - (len(variants) - 1) / 2) * width for r in rows]
            ys = [r["auc_pooled"] or 0.0 for r in rows]
            ax.bar(xs, ys, width=width, label=name)
        ax.set_xticks(range(1, n_groups + 1))
        ax.set_xticklabels([f"Group {j}" for j in range(1, n_groups + 1)])
        lo = min((r["auc_pooled"] or 1.0) for v in report["variants"].values() for r in v["groups"])
        ax.set_ylim(max(0.0, lo - 0.05), 1.0)
        ax.set_ylabel("AUC (pooled)")
        ax.set_title("Group-level AUC")
        ax.legend(frameon=False)
        save(fig, path)


def plot_training_curves(rows, path) -> None:
    """Validation AUC per epoch, stage II drawn dashed after stage I, one line per group."""
    val = [r for r in rows if r.get("metric") not in (None, "") and r["stage"] != "base"]
    stage1_len = 1 + max((r["epoch"] for r in val if r["stage"] == "stage1"), default=-1)
    groups = sorted({r["group"] for r in val}, key=str)
    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        for c, g in enumerate(groups):
            for stage, shift, ls in (("stage1", 0, "-"), ("stage2", stage1_len, "--")):
                pts = [(r["epoch"] + shift, r["metric"]) for r in val
                       if r["group"] == g and r["stage"] == stage]
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, marker="o", ms=2, lw=1, ls=ls, color=f"C{c % 10}",
                            label=str(g) if stage == "stage1" or not stage1_len else None)
        if stage1_len:
            ax.axvline(stage1_len - 0.5, color="0.6", lw=0.8)
        ax.set_xlabel("epoch (stage I, then stage II dashed)")
        ax.set_ylabel("validation AUC")
        ax.legend(title="group", frameon=False, ncol=3)
        save(fig, path)
