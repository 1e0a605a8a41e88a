"""Deterministic artifact writers: CSV, JSONL, and SVG heatmaps.

All output is plain string building with stable ordering and repr-based
float formatting, so byte-identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def write_jsonl(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# SVG heatmap
# ---------------------------------------------------------------------------

_NEG = (33, 102, 172)   # blue for negative values
_POS = (178, 24, 43)    # red for positive values
_GRAY = "#d9d9d9"


def _blend(value: float, vmax: float) -> str:
    """White at zero, saturating toward blue/red at +-vmax."""
    if vmax <= 0:
        return "#ffffff"
    frac = max(-1.0, min(1.0, value / vmax))
    target = _POS if frac > 0 else _NEG
    a = abs(frac)
    rgb = tuple(round(255 + (t - 255) * a) for t in target)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _esc(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def svg_heatmap(
    row_labels: Sequence[str],
    col_labels: Sequence[str],
    cells: dict,
    *,
    title: str,
    value_key: str = "r",
    vmax: Optional[float] = None,
) -> str:
    """Render a grid of per-(row, col) statistics as an SVG heatmap.

    ``cells[row][col]`` is a mapping with the value under ``value_key``, a
    ``p`` value, and ``stars``. Cells with p > 0.05 (or no value) are
    grayed out; significant cells are colored by sign and magnitude with
    their stars overlaid.
    """
    cell_w, cell_h = 72, 30
    left = 16 + (max((len(r) for r in row_labels), default=4)) * 7
    top = 56
    width = left + cell_w * len(col_labels) + 16
    height = top + cell_h * len(row_labels) + 70

    if vmax is None:
        magnitudes = [
            abs(cells[r][c][value_key])
            for r in row_labels
            for c in col_labels
            if cells.get(r, {}).get(c, {}).get(value_key) is not None
        ]
        vmax = max(magnitudes, default=1.0) or 1.0

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="Helvetica, Arial, sans-serif">',
        f'<text x="{left}" y="20" font-size="14" font-weight="bold">{_esc(title)}</text>',
    ]
    for j, col in enumerate(col_labels):
        x = left + j * cell_w + cell_w // 2
        parts.append(
            f'<text x="{x}" y="{top - 8}" font-size="9" text-anchor="middle">{_esc(col)}</text>'
        )
    for i, row in enumerate(row_labels):
        y = top + i * cell_h
        parts.append(
            f'<text x="{left - 6}" y="{y + cell_h // 2 + 3}" font-size="10" '
            f'text-anchor="end">{_esc(row)}</text>'
        )
        for j, col in enumerate(col_labels):
            x = left + j * cell_w
            cell = cells.get(row, {}).get(col, {})
            value = cell.get(value_key)
            p = cell.get("p")
            significant = value is not None and p is not None and p <= 0.05
            fill = _blend(value, vmax) if significant else _GRAY
            tip = f"{row} / {col}: " + (
                f"{value_key}={value!r}, p={p!r}" if value is not None else "not computable"
            )
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" '
                f'stroke="#ffffff" stroke-width="1"><title>{_esc(tip)}</title></rect>'
            )
            if significant:
                stars = cell.get("stars") or ""
                text_fill = "#ffffff" if abs(value / vmax) > 0.55 else "#222222"
                parts.append(
                    f'<text x="{x + cell_w // 2}" y="{y + cell_h // 2 + 4}" font-size="11" '
                    f'text-anchor="middle" fill="{text_fill}">{_esc(stars)}</text>'
                )
    legend_y = top + cell_h * len(row_labels) + 24
    parts.append(
        f'<text x="{left}" y="{legend_y}" font-size="9">color: sign and magnitude of '
        f'{_esc(value_key)} (saturated at {vmax!r}); gray: p &gt; 0.05 or not computable; '
        "stars: *** p&#8804;0.001, ** p&#8804;0.01, * p&#8804;0.05</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
