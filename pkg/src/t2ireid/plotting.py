"""Figures and delimited tables written next to pipeline outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "t2ireid",
}


def write_tsv(rows, path, columns=None):
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, delimiter="\t", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return Path(path)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return value


def _save(fig, path):
    path = Path(path)
    # fixed metadata keeps repeated runs byte-identical
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None, "Creator": None}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_attribute_frequencies(stats, path):
    """Bar chart of optional-attribute shares (fraction of all optional mentions)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = list(stats.counts)
        ax.bar(names, [100 * stats.shares[n] for n in names], color="#4c72b0")
        ax.set_ylabel("share of optional mentions (%)")
        ax.set_title(f"{stats.total_optional} optional mentions over {stats.caption_count} captions")
        ax.tick_params(axis="x", rotation=30)
        return _save(fig, path)


def plot_loss_curves(history, path, keys=None):
    """Plot every loss column of a training history (list of row dicts) against step."""
    history = list(history)
    if keys is None:
        keys = [k for k in history[0] if k.startswith("L_")] if history else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        steps = [row["step"] for row in history]
        for key in keys:
            ys = [row.get(key) for row in history]
            if any(y is not None for y in ys):
                ax.plot(steps, ys, label=key, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_rank_k(reports: dict, path):
    """Grouped bars of Rank-1/5/10 for one or more named reports."""
    ks = ("rank1", "rank5", "rank10")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(1, len(reports))
        for i, (name, rep) in enumerate(reports.items()):
            xs = [j + i * width for j in range(len(ks))]
            ax.bar(xs, [100 * getattr(rep, k) for k in ks], width=width, label=name)
        ax.set_xticks([j + width * (len(reports) - 1) / 2 for j in range(len(ks))])
        ax.set_xticklabels(["Rank-1", "Rank-5", "Rank-10"])
        ax.set_ylim(0, 100)
        ax.set_ylabel("accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)
