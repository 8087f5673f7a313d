"""Palette handling: parsing, serialization, K-means extraction, tile palettes.

A palette is a set of n >= 2 renderable elements that all share one tile size
(h, w); plain color palettes use 1x1 tiles. Element values live in [0, 1].
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging

_HEX_LINE = re.compile(r"^#([0-9a-fA-F]{6})$")


class PaletteError(ValueError):
    pass


@dataclass
class Palette:
    """n elements of shape (h, w, 3); ``elements`` is an (n, h, w, 3) array."""

    elements: np.ndarray
    name: str = "palette"

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.float64)
        if self.elements.ndim != 4 or self.elements.shape[3] != 3:
            raise PaletteError(f"elements must be (n, h, w, 3), got {self.elements.shape}")
        if self.n < 2:
            raise PaletteError(f"palette needs at least 2 elements, got {self.n}")
        if not np.isfinite(self.elements).all():
            raise PaletteError("palette contains non-finite values")
        if self.elements.min() < 0.0 or self.elements.max() > 1.0:
            raise PaletteError("palette values must lie in [0, 1]")
        flat = self.elements.reshape(self.n, -1)
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if np.array_equal(flat[i], flat[j]):
                    raise PaletteError(f"duplicate palette elements at indices {i} and {j}")

    @property
    def n(self) -> int:
        return self.elements.shape[0]

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.elements.shape[1], self.elements.shape[2]

    @property
    def is_colors(self) -> bool:
        return self.tile_shape == (1, 1)

    @property
    def colors(self) -> np.ndarray:
        """(n, 3) representative colors; tile elements use their mean color."""
        return self.elements.mean(axis=(1, 2))

    def hex_colors(self) -> list[str]:
        out = []
        for c in self.colors:
            r, g, b = (int(round(v * 255.0)) for v in c)
            out.append(f"#{r:02X}{g:02X}{b:02X}")
        return out


def parse_palette(text: str, name: str = "palette") -> Palette:
    """Parse palette-file contents: one #RRGGBB per line, ';' starts a comment."""
    if not text.strip():
        raise PaletteError("empty palette file")
    colors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        m = _HEX_LINE.match(line)
        if m is None:
            raise PaletteError(f"line {lineno}: malformed color {line!r} (expected #RRGGBB)")
        b = bytes.fromhex(m.group(1))
        colors.append([b[0] / 255.0, b[1] / 255.0, b[2] / 255.0])
    if len(colors) < 2:
        raise PaletteError(f"palette needs at least 2 colors, got {len(colors)}")
    arr = np.array(colors)[:, None, None, :]
    return Palette(arr, name=name)


def serialize_palette(palette: Palette) -> str:
    """Inverse of parse_palette for color palettes; round-trips bit-exactly."""
    if not palette.is_colors:
        raise PaletteError("only 1x1 color palettes serialize to text")
    return "\n".join(palette.hex_colors()) + "\n"


def kmeans_palette(image: np.ndarray, n: int, seed: int) -> Palette:
    """Extract an n-color palette as K-means centroids of the pixel colors.

    Deterministic given the seed: k-means++ seeding, Lloyd iterations with
    lowest-index tie-breaking, stop when the largest centroid move drops below
    1e-6 or after 200 iterations; empty clusters are re-seeded to the point
    farthest from its assigned centroid. Distances are squared-Euclidean in
    linear RGB.
    """
    if n < 2:
        raise PaletteError(f"need n >= 2 clusters, got {n}")
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise PaletteError("empty image")
    pixels = image.reshape(-1, image.shape[-1])[:, :3]
    points, counts = np.unique(pixels, axis=0, return_counts=True)
    if len(points) < n:
        raise PaletteError(
            f"insufficient distinct colors: image has {len(points)}, need {n}"
        )
    weights = counts.astype(np.float64)
    rng = np.random.default_rng(seed)

    # k-means++ over the weighted distinct colors (equivalent to the full
    # pixel multiset, just cheaper)
    centroids = np.empty((n, 3))
    first = rng.choice(len(points), p=weights / weights.sum())
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, n):
        p = weights * d2
        idx = rng.choice(len(points), p=p / p.sum())
        centroids[k] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[k]) ** 2).sum(axis=1))

    for _ in range(200):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dists, axis=1)  # argmin takes the lowest index on ties
        new_centroids = centroids.copy()
        for k in range(n):
            mask = assign == k
            if not mask.any():
                far = np.argmax(dists[np.arange(len(points)), assign])
                new_centroids[k] = points[far]
                continue
            wk = weights[mask]
            new_centroids[k] = (points[mask] * wk[:, None]).sum(axis=0) / wk.sum()
        move = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if move < 1e-6:
            break

    return Palette(centroids[:, None, None, :], name=f"kmeans{n}")


def load_tile_palette(directory) -> Palette:
    """Load a tile palette from a directory of equal-size PNG images.

    Elements are sorted by filename so the palette is independent of directory
    listing order.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if len(paths) < 2:
        raise PaletteError(f"need at least 2 tile images in {directory}, found {len(paths)}")
    tiles = []
    shape = None
    for p in paths:
        img = imaging.read_png(p)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise PaletteError(
                f"mixed tile dimensions: {p.name} is {img.shape[:2]}, expected {shape[:2]}"
            )
        tiles.append(img)
    return Palette(np.stack(tiles), name=directory.name)
