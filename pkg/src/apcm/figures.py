"""Report figures rendered straight to files.

Uses the Agg backend only; nothing here opens a window.  Each renderer
returns the paths it wrote so the caller can list them in its report.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_COLORS = {
    "proposed": "tab:blue",
    "higgins": "tab:orange",
    "andersen": "tab:green",
    "none": "tab:red",
    "nominal": "tab:gray",
}


def _color(method: str):
    return _METHOD_COLORS.get(method, "black")


def render_timeseries(runs, outdir, field: str, ylabel: str) -> list:
    """One figure per (scenario, speed): the field over time, per method.

    runs: list of (summary, records) pairs; the first seed of each
    (scenario, method, speed) combination is drawn.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    panels = {}
    for summary, records in runs:
        key = (summary["family"], summary["speed"])
        panels.setdefault(key, {}).setdefault(summary["method"],
                                              (summary, records))
    written = []
    for (family, speed), by_method in sorted(panels.items()):
        fig, ax = plt.subplots(figsize=(7.0, 3.6))
        for method, (_, records) in sorted(by_method.items()):
            t = [r["t"] for r in records]
            ax.plot(t, [r[field] for r in records], label=method,
                    color=_color(method), linewidth=1.4)
        ax.set_xlabel("time [s]")
        ax.set_ylabel(ylabel)
        ax.set_title(f"{family} at {speed:g} m/s")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / f"{field}_{family}_{speed:g}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_group_bars(groups, outdir) -> list:
    """Bar panels of the pooled metrics per clutter label and speed."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    panels = {}
    for g in groups:
        panels.setdefault((g["clutter_label"], g["speed"]), []).append(g)
    written = []
    metrics = (("mean_velocity", "mean velocity [m/s]"),
               ("mean_displacement", "mean displacement [m]"),
               ("min_distance", "closest approach [m]"))
    for (label, speed), rows in sorted(panels.items()):
        rows = sorted(rows, key=lambda g: g["method"])
        fig, axes = plt.subplots(1, len(metrics), figsize=(10.5, 3.2))
        for ax, (field, title) in zip(np.atleast_1d(axes), metrics):
            names = [g["method"] for g in rows]
            vals = [g[field] for g in rows]
            ax.bar(names, vals, color=[_color(n) for n in names])
            ax.set_title(title, fontsize=9)
            ax.tick_params(axis="x", labelrotation=45, labelsize=8)
            ax.grid(axis="y", alpha=0.3)
        fig.suptitle(f"{label} clutter, {speed:g} m/s", fontsize=10)
        fig.tight_layout()
        path = outdir / f"summary_{label}_{speed:g}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written


def render_apcm(apcm_grid, merged_grid, path) -> Path:
    """Perspective map beside the belief grid it was computed on."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(10.0, 4.2))
    for ax, grid, title, cmap in (
            (axes[0], merged_grid, "belief grid", "gray_r"),
            (axes[1], apcm_grid, "perspective map", "viridis")):
        xmin, ymin, xmax, ymax = grid.extent
        im = ax.imshow(grid.values, origin="lower", cmap=cmap,
                       extent=(xmin, xmax, ymin, ymax), vmin=0.0, vmax=1.0)
        ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
