"""Optional PNG figures for ``analyze --figures`` (needs matplotlib)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("figures need matplotlib: pip install 'aqsts[figures]'") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    fig.clf()
    return path


def loss_series(per_step: pd.DataFrame, resolution: int, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(9, 3.2))
    hours = per_step["step"].to_numpy() * resolution / 60.0
    ax.plot(hours / 24.0, per_step["injection_MW"], lw=0.6)
    ax.set_xlabel("day")
    ax.set_ylabel("losses (MW)")
    ax.grid(alpha=0.3)
    out = _save(fig, path)
    plt.close(fig)
    return out


def voltage_boxes(store, buses: list[str], path: Path) -> Path:
    plt = _pyplot()
    vm = store.block("bus", "vm")
    idx = [store.model.bus_index[b] for b in buses]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(idx)), 3.6))
    ax.boxplot([vm[:, i] for i in idx], whis=(0, 100), showfliers=False)
    ax.set_xticks(range(1, len(idx) + 1), buses, rotation=90, fontsize=7)
    ax.set_ylabel("|V| (pu)")
    out = _save(fig, path)
    plt.close(fig)
    return out


def heatmap(matrix: pd.DataFrame, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(10, 2.8))
    im = ax.imshow(matrix.to_numpy(dtype=float), aspect="auto", cmap="viridis")
    ax.set_yticks(range(7), ["d1", "d2", "d3", "d4", "d5", "d6", "d7"])
    ax.set_xlabel("week")
    fig.colorbar(im, ax=ax, label="MW")
    out = _save(fig, path)
    plt.close(fig)
    return out


def utilization_bars(table: pd.DataFrame, path: Path) -> Path:
    plt = _pyplot()
    cols = [c for c in table.columns if c.endswith("_MWh")]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bottom = np.zeros(len(table))
    labels = table["unit"].astype(str).to_list()
    for c in cols:
        ax.bar(labels, table[c], bottom=bottom, label=c.replace("_MWh", ""))
        bottom += table[c].to_numpy()
    ax.set_ylabel("MWh")
    ax.legend(fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out


def distribution(summary: dict, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    edges = np.asarray(summary["base"]["edges"])
    centres = 0.5 * (edges[1:] + edges[:-1])
    width = np.diff(edges)
    ax.bar(centres, summary["base"]["counts"], width=width, alpha=0.5, label="wind")
    ax.bar(centres, summary["net"]["counts"], width=width, alpha=0.5, label="wind + storage")
    for key in ("gen_max_lim", "gen_min_lim"):
        ax.axvline(summary[key], color="k", ls="--", lw=0.8)
    ax.set_xlabel("MW")
    ax.set_title(f"{summary['zone']} period {summary['period']}")
    ax.legend(fontsize=7)
    out = _save(fig, path)
    plt.close(fig)
    return out
