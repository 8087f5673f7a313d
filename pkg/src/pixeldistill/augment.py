"""Differentiable augmentation pipeline with analytic vector-Jacobian products.

A frozen AugmentSample is a linear map on pixel values (resize, flip,
perspective warp with zero fill, grayscale), so its vjp is the exact transpose
of the forward pass. The same sample must be applied to the generated image
and to every conditioning image so they stay geometrically aligned.

Order: bilinear resize to the target size -> horizontal flip -> perspective
warp (bilinear sampling, out-of-bounds filled with black) -> grayscale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import GRAY_WEIGHTS, bilinear_resize, bilinear_resize_vjp


@dataclass
class AugmentConfig:
    p_gray: float = 0.2
    p_flip: float = 0.5
    p_persp: float = 0.5
    distortion_scale: float = 0.3
    target_size: tuple[int, int] = (64, 64)  # (H, W) fed to the guidance backend

    def __post_init__(self):
        for name in ("p_gray", "p_flip", "p_persp"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not 0.0 <= self.distortion_scale <= 1.0:
            raise ValueError(f"distortion_scale must be in [0, 1], got {self.distortion_scale}")
        self.target_size = (int(self.target_size[0]), int(self.target_size[1]))

    @staticmethod
    def identity(target_size) -> "AugmentConfig":
        return AugmentConfig(p_gray=0.0, p_flip=0.0, p_persp=0.0,
                             distortion_scale=0.0, target_size=target_size)


@dataclass
class AugmentSample:
    """A sampled, frozen augmentation; reusable across images of one step."""

    gray: bool
    flip: bool
    homography: np.ndarray  # (3, 3), identity when no perspective was drawn
    target_size: tuple[int, int]
    seed: int

    @property
    def is_identity_warp(self) -> bool:
        return np.array_equal(self.homography, np.eye(3))


def _solve_homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """4-point DLT: the 3x3 matrix mapping src points to dst points."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src_pts, dst_pts)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def sample_augment(cfg: AugmentConfig, seed: int) -> AugmentSample:
    """Draw the Bernoulli flags and (when active) a random perspective warp.

    Corner displacements follow the standard random-perspective recipe: each
    corner of the target rectangle moves inward by uniform amounts bounded by
    distortion_scale * (W/2, H/2); the warp is the homography that maps the
    displaced corners back to the originals (so output pixels sample the
    source). Degenerate corner sets are redrawn up to 8 times, then the warp
    falls back to identity.
    """
    rng = np.random.default_rng(seed)
    gray = bool(rng.random() < cfg.p_gray)
    flip = bool(rng.random() < cfg.p_flip)
    persp = bool(rng.random() < cfg.p_persp)

    th, tw = cfg.target_size
    homography = np.eye(3)
    if persp and cfg.distortion_scale > 0.0:
        max_dx = cfg.distortion_scale * tw / 2.0
        max_dy = cfg.distortion_scale * th / 2.0
        corners = np.array([[0.0, 0.0], [tw - 1.0, 0.0],
                            [tw - 1.0, th - 1.0], [0.0, th - 1.0]])
        inward = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        for _ in range(8):
            d = rng.random((4, 2)) * [max_dx, max_dy]
            displaced = corners + inward * d
            try:
                h = _solve_homography(displaced, corners)
            except np.linalg.LinAlgError:
                continue
            if abs(np.linalg.det(h)) > 1e-9:
                homography = h
                break
    return AugmentSample(gray=gray, flip=flip, homography=homography,
                         target_size=cfg.target_size, seed=seed)


def _warp_plan(sample: AugmentSample):
    """Bilinear gather indices/weights for the perspective warp.

    Returns per-output-pixel neighbor rows, cols, weights, and validity masks;
    invalid neighbors contribute the (black) fill in the forward pass and are
    skipped by the transpose.
    """
    th, tw = sample.target_size
    ys, xs = np.mgrid[0:th, 0:tw]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(th * tw)])
    mapped = sample.homography @ pts
    sx = mapped[0] / mapped[2]
    sy = mapped[1] / mapped[2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    neighbors = []
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < th) & (xx >= 0) & (xx < tw)
        neighbors.append((yy, xx, w, valid))
    return neighbors


def _apply_warp(sample: AugmentSample, img: np.ndarray) -> np.ndarray:
    th, tw = sample.target_size
    c = img.shape[2]
    flat = img.reshape(th * tw, c)
    out = np.zeros_like(flat)
    for yy, xx, w, valid in _warp_plan(sample):
        idx = yy[valid] * tw + xx[valid]
        out[valid] += w[valid, None] * flat[idx]
    return out.reshape(th, tw, c)


def _apply_warp_t(sample: AugmentSample, grad: np.ndarray) -> np.ndarray:
    th, tw = sample.target_size
    c = grad.shape[2]
    gflat = grad.reshape(th * tw, c)
    out = np.zeros_like(gflat)
    for yy, xx, w, valid in _warp_plan(sample):
        idx = yy[valid] * tw + xx[valid]
        np.add.at(out, idx, w[valid, None] * gflat[valid])
    return out.reshape(th, tw, c)


def apply(sample: AugmentSample, image: np.ndarray) -> np.ndarray:
    """Forward-transform an image of any source size to the target size.

    Single-channel images (edge/depth maps) get the geometric transforms only;
    grayscale conversion is a no-op for them.
    """
    image = np.asarray(image, dtype=np.float64)
    th, tw = sample.target_size
    out = bilinear_resize(image, th, tw)
    if sample.flip:
        out = out[:, ::-1]
    if not sample.is_identity_warp:
        out = _apply_warp(sample, out)
    if sample.gray and out.shape[2] == 3:
        lum = out @ GRAY_WEIGHTS
        out = np.repeat(lum[:, :, None], 3, axis=2)
    return out


def vjp(sample: AugmentSample, dl_dy: np.ndarray, source_size: tuple[int, int]) -> np.ndarray:
    """Exact transpose of ``apply`` for a gradient at the target size."""
    dl_dy = np.asarray(dl_dy, dtype=np.float64)
    th, tw = sample.target_size
    if dl_dy.shape[:2] != (th, tw):
        raise ValueError(f"gradient shape {dl_dy.shape[:2]} does not match target {sample.target_size}")
    grad = dl_dy
    if sample.gray and grad.shape[2] == 3:
        summed = grad.sum(axis=2)
        grad = summed[:, :, None] * GRAY_WEIGHTS[None, None, :]
    if not sample.is_identity_warp:
        grad = _apply_warp_t(sample, grad)
    if sample.flip:
        grad = grad[:, ::-1]
    return bilinear_resize_vjp(grad, source_size[0], source_size[1])
