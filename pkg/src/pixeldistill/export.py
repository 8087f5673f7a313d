"""Fabrication outputs: cross-stitch symbol charts, count legends, mosaics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .palette import Palette, PaletteError

# 64 chart glyphs: digits, uppercase letters, then geometric symbols. Assigned
# by descending cell count so the densest color gets the most readable symbol.
SYMBOL_ALPHABET = (
    "0123456789"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    "■□▲△▼▽●○◆◇★☆◼◻▰▱◉◎⬢⬡⊕⊗⊙⊘⊞⊠✚✖"
)
assert len(SYMBOL_ALPHABET) == 64

CELL = 20  # SVG units per chart cell; print-friendly default


class ExportError(ValueError):
    pass


@dataclass
class StitchChart:
    """Symbol grid plus legend; counts always sum to the number of cells."""

    grid: np.ndarray        # (H, W) indices into SYMBOL_ALPHABET
    legend: dict            # symbol -> (palette index, hex color, cell count)
    title: str = ""


def make_chart(argmax_indices: np.ndarray, palette: Palette, title: str = "") -> StitchChart:
    indices = np.asarray(argmax_indices)
    if indices.ndim != 2:
        raise ExportError(f"expected an (H, W) index grid, got shape {indices.shape}")
    if palette.n > len(SYMBOL_ALPHABET):
        raise ExportError(
            f"palette has {palette.n} elements; charts support at most {len(SYMBOL_ALPHABET)}")
    if indices.min() < 0 or indices.max() >= palette.n:
        raise ExportError("index grid refers outside the palette")

    counts = np.bincount(indices.ravel(), minlength=palette.n)
    # stable sort: descending count, then ascending palette index
    order = sorted(range(palette.n), key=lambda k: (-counts[k], k))
    hexes = palette.hex_colors()
    symbol_of = {}
    legend = {}
    for rank, k in enumerate(order):
        if counts[k] == 0:
            continue
        sym = SYMBOL_ALPHABET[rank]
        symbol_of[k] = rank
        legend[sym] = (k, hexes[k], int(counts[k]))
    grid = np.vectorize(symbol_of.get)(indices)
    return StitchChart(grid=grid.astype(np.int64), legend=legend, title=title)


def render_chart_svg(chart: StitchChart) -> str:
    """Deterministic SVG text for a chart.

    Thin gridlines separate cells; bold gridlines fall every 10 cells (the
    cross-stitch counting convention). The legend lists symbol, hex color and
    cell count per used palette element.
    """
    h, w = chart.grid.shape
    title = chart.title or "stitch chart"
    legend_rows = sorted(chart.legend.items(), key=lambda kv: kv[1][0])
    grid_w, grid_h = w * CELL, h * CELL
    legend_h = (len(legend_rows) + 1) * CELL
    top = CELL * 2
    total_w = grid_w + 2 * CELL
    total_h = top + grid_h + legend_h + 2 * CELL
    x0, y0 = CELL, top

    out = []
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">')
    out.append(f'<title>{_escape(title)}</title>')
    out.append(
        f'<text x="{x0}" y="{CELL + 6}" font-family="monospace" font-size="16" '
        f'font-weight="bold">{_escape(title)}</text>')

    sym_by_rank = {v[0]: s for s, v in chart.legend.items()}
    for i in range(h):
        for j in range(w):
            rank = int(chart.grid[i, j])
            sym = SYMBOL_ALPHABET[rank]
            cx = x0 + j * CELL + CELL // 2
            cy = y0 + i * CELL + CELL // 2 + 5
            out.append(
                f'<text x="{cx}" y="{cy}" font-family="monospace" font-size="13" '
                f'text-anchor="middle">{_escape(sym)}</text>')

    for j in range(1, w + 1):
        bold = j % 10 == 0
        sw = 3 if bold else 1
        x = x0 + j * CELL
        out.append(f'<line x1="{x}" y1="{y0}" x2="{x}" y2="{y0 + grid_h}" '
                   f'stroke="black" stroke-width="{sw}"/>')
    for i in range(1, h + 1):
        bold = i % 10 == 0
        sw = 3 if bold else 1
        y = y0 + i * CELL
        out.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + grid_w}" y2="{y}" '
                   f'stroke="black" stroke-width="{sw}"/>')
    out.append(f'<rect x="{x0}" y="{y0}" width="{grid_w}" height="{grid_h}" '
               f'fill="none" stroke="black" stroke-width="2"/>')

    ly = y0 + grid_h + CELL
    for sym, (k, hexcolor, count) in legend_rows:
        out.append(f'<rect x="{x0}" y="{ly}" width="{CELL - 4}" height="{CELL - 4}" '
                   f'fill="{hexcolor}" stroke="black" stroke-width="1"/>')
        out.append(
            f'<text x="{x0 + CELL + 4}" y="{ly + CELL - 8}" font-family="monospace" '
            f'font-size="13">{_escape(sym)}  {hexcolor}  x{count}</text>')
        ly += CELL
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def chart_to_csv(argmax_indices: np.ndarray) -> str:
    """Row per cell: i, j, palette index."""
    indices = np.asarray(argmax_indices)
    lines = ["i,j,palette_index"]
    for i in range(indices.shape[0]):
        for j in range(indices.shape[1]):
            lines.append(f"{i},{j},{int(indices[i, j])}")
    return "\n".join(lines) + "\n"


def render_mosaic(argmax_indices: np.ndarray, tile_palette: Palette) -> np.ndarray:
    """Replace each cell with its palette tile bitmap; output is (H*h, W*w, 3)."""
    indices = np.asarray(argmax_indices)
    if indices.min() < 0 or indices.max() >= tile_palette.n:
        raise ExportError("index grid refers outside the palette")
    h, w = indices.shape
    th, tw = tile_palette.tile_shape
    tiles = tile_palette.elements[indices]          # (H, W, th, tw, 3)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(h * th, w * tw, 3)
