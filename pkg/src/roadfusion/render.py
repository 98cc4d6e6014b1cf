"""Matplotlib rendering of maps, sweeps, and report figures.

Map drawings follow the colour convention: stop lines yellow, lane
dividers green, pedestrian crossings blue.  Figures are written next to
the delimited outputs with date metadata stripped so repeated runs stay
comparable.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon as MplPolygon  # noqa: E402

from .raster import LANE_DIVIDER, PEDESTRIAN_CROSSING, STOP_LINE  # noqa: E402
from .vectorize import VectorMap  # noqa: E402

CLASS_COLORS = {
    STOP_LINE: "gold",
    LANE_DIVIDER: "green",
    PEDESTRIAN_CROSSING: "royalblue",
}


def _savefig(fig, path: str | Path) -> None:
    path = Path(path)
    metadata = {"Date": None} if path.suffix.lower() == ".svg" else None
    fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)


def draw_map(ax, vm: VectorMap, linewidth: float = 1.5) -> None:
    for e in vm.elements:
        color = CLASS_COLORS[e.element_class]
        if e.is_polygon:
            ax.add_patch(MplPolygon(e.vertices, closed=True, facecolor=color,
                                    edgecolor=color, alpha=0.45, linewidth=linewidth))
        else:
            ax.plot(e.vertices[:, 0], e.vertices[:, 1], color=color, linewidth=linewidth)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")


def save_map_figure(vm: VectorMap, path: str | Path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 6))
    draw_map(ax, vm)
    if title:
        ax.set_title(title)
    _savefig(fig, path)


def save_maps_overview(maps: dict[str, VectorMap], path: str | Path) -> None:
    """One panel per named map, shared extents."""
    names = list(maps)
    fig, axes = plt.subplots(1, len(names), figsize=(5 * len(names), 5), squeeze=False)
    for ax, name in zip(axes[0], names):
        draw_map(ax, maps[name])
        ax.set_title(name)
    xlims = [ax.get_xlim() for ax in axes[0]]
    ylims = [ax.get_ylim() for ax in axes[0]]
    x0, x1 = min(l[0] for l in xlims), max(l[1] for l in xlims)
    y0, y1 = min(l[0] for l in ylims), max(l[1] for l in ylims)
    for ax in axes[0]:
        ax.set_xlim(x0, x1)
        ax.set_ylim(y0, y1)
    _savefig(fig, path)


def save_report_figure(per_map_iou: dict[str, dict[str, float]], path: str | Path) -> None:
    """Grouped bars: per-class IoU for each evaluated map."""
    classes = sorted({k for d in per_map_iou.values() for k in d})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(per_map_iou), 1)
    for i, (name, per_class) in enumerate(per_map_iou.items()):
        xs = [j + i * width for j in range(len(classes))]
        ax.bar(xs, [per_class.get(c, 0.0) for c in classes], width=width, label=name)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(classes))])
    ax.set_xticklabels(classes, rotation=15)
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend()
    _savefig(fig, path)


def save_sweep_figure(rows: list[dict], path: str | Path) -> None:
    """mIoU and computing time against frame count."""
    ks = [r["k"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(ks, [r["miou"] for r in rows], "o-", color="tab:blue", label="mIoU")
    ax1.set_xlabel("frames")
    ax1.set_ylabel("mIoU", color="tab:blue")
    ax1.set_ylim(0, 1)
    ax2 = ax1.twinx()
    ax2.plot(ks, [r["seconds"] for r in rows], "s--", color="tab:red", label="time")
    ax2.set_ylabel("computing time [s]", color="tab:red")
    _savefig(fig, path)


def save_density_figure(rows: list[dict], path: str | Path) -> None:
    """Point density per distance bin, with local mIoU when available."""
    labels = [f"{int(r['lo'])}-{int(r['hi'])}" for r in rows]
    xs = range(len(rows))
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(xs, [r["density"] for r in rows], color="tab:gray", alpha=0.7)
    ax1.set_xticks(list(xs))
    ax1.set_xticklabels(labels)
    ax1.set_xlabel("distance [m]")
    ax1.set_ylabel("points / m^2")
    mious = [r.get("miou") for r in rows]
    if any(m is not None for m in mious):
        ax2 = ax1.twinx()
        ax2.plot(list(xs), [m if m is not None else float("nan") for m in mious],
                 "o-", color="tab:blue")
        ax2.set_ylabel("mIoU", color="tab:blue")
        ax2.set_ylim(0, 1)
    _savefig(fig, path)
