"""Report rendering and heat map emission."""

from __future__ import annotations

import json
import math

import numpy as np

from .rollout import HeatMap


def emit_heatmap_pgm(heat: HeatMap, path: str) -> None:
    """Write a binary PGM (P5, maxval 255) of the g x g heat grid.

    Values are min-max normalized to 0..255 with half-down rounding; a
    constant map degenerates to all zeros.
    """
    grid = heat.grid.astype(np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = (grid - lo) / (hi - lo) * 255.0
        payload = np.ceil(scaled - 0.5).astype(np.uint8)
    else:
        payload = np.zeros_like(grid, dtype=np.uint8)
    g = heat.grid_size
    with open(path, "wb") as fh:
        fh.write(f"P5\n{g} {g}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def emit_mask_pgm(indices, grid_size: int, path: str) -> None:
    """Write the selected patches as a white-on-black g x g PGM mask."""
    mask = np.zeros(grid_size * grid_size, dtype=np.uint8)
    mask[list(indices)] = 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid_size} {grid_size}\n255\n".encode("ascii"))
        fh.write(mask.tobytes())


def render_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned plain-text table; None cells render as '-'."""
    if not rows:
        return "(no rows)"
    if columns is None:
        columns = list(rows[0])
        for row in rows[1:]:
            for key in row:
                if key not in columns:
                    columns.append(key)

    def fmt(value) -> str:
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_report(report: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
