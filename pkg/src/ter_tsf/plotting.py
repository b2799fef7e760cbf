"""Report figures. Rendered headless with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "ter-tsf",
}
# PNG metadata keys matplotlib would otherwise stamp with version strings
_METADATA = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_rewards(report, path):
    """Mean best-candidate reward per round, one line per (domain, horizon)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for d in report.domains:
            for h in d.horizons:
                if not h.rounds:
                    continue
                xs = [r.round for r in h.rounds]
                ax.plot(xs, [r.mean_best_reward for r in h.rounds], marker="o", label=f"{d.domain} H={h.horizon}")
        ax.set_xlabel("round")
        ax.set_ylabel("mean best reward")
        ax.set_title(f"reward trajectory ({report.mode})")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_metrics(report, path):
    """Grouped MSE/MAE bars per horizon for each domain."""
    with plt.rc_context(RC):
        n = len(report.domains)
        fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False)
        for ax, d in zip(axes[0], report.domains):
            labels = [str(h.horizon) for h in d.horizons] + ["avg"]
            mse = [h.mse for h in d.horizons] + [d.mse]
            mae = [h.mae for h in d.horizons] + [d.mae]
            xs = range(len(labels))
            ax.bar([x - 0.2 for x in xs], mse, width=0.4, label="MSE")
            ax.bar([x + 0.2 for x in xs], mae, width=0.4, label="MAE")
            ax.set_xticks(list(xs))
            ax.set_xticklabels(labels)
            ax.set_xlabel("horizon")
            ax.set_title(d.domain)
        axes[0][0].set_ylabel(f"error ({report.units})")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)
