"""Stage summary CSV and matplotlib figures for pipeline runs.

Figures are rendered headlessly (Agg) straight to PNG files next to the
delimited summary: a mAP/Rank-1 ladder across stages and the CMC curves of
every evaluated stage.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

CMC_PLOT_MAX_RANK = 50


def write_summary_csv(path: str, stage_reports) -> None:
    """One row per evaluated stage: name, mAP, Rank-1/5/10, query counts."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["stage", "map", "rank1", "rank5", "rank10", "scored_queries", "excluded_queries"])
        for name, rep in stage_reports:
            w.writerow([
                name,
                "%.6f" % rep.map,
                "%.6f" % rep.rank(1),
                "%.6f" % rep.rank(5),
                "%.6f" % rep.rank(10),
                len(rep.per_query_ap),
                len(rep.excluded_queries),
            ])


def render_figures(stage_reports, fig_dir: str) -> list:
    """Render the mAP ladder and CMC curves; returns the written paths."""
    os.makedirs(fig_dir, exist_ok=True)
    names = [name for name, _ in stage_reports]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(names, [rep.map for _, rep in stage_reports], marker="o", label="mAP")
    ax.plot(names, [rep.rank(1) for _, rep in stage_reports], marker="s", label="Rank-1")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Pipeline stage ladder")
    ax.grid(True, alpha=0.3)
    ax.legend()
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    ladder = os.path.join(fig_dir, "map_ladder.png")
    fig.savefig(ladder, dpi=150)
    plt.close(fig)
    written.append(ladder)

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rep in stage_reports:
        k = min(len(rep.cmc), CMC_PLOT_MAX_RANK)
        ax.plot(range(1, k + 1), rep.cmc[:k], label=name)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("CMC curves")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    cmc = os.path.join(fig_dir, "cmc_curves.png")
    fig.savefig(cmc, dpi=150)
    plt.close(fig)
    written.append(cmc)
    return written


def render_cmc_csv(path: str, rep) -> None:
    """rank,cmc rows for a single report (delimited companion to the plot)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["rank", "cmc"])
        for k, value in enumerate(rep.cmc, start=1):
            w.writerow([k, "%.6f" % value])
