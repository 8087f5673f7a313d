"""Image I/O and classical vision utilities.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]. Values are treated as already-linear; no ICC/color management. Clamping
to [0, 1] happens only at import/export boundaries.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

# BT.601 luminance weights, also used by the augmentation pipeline.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 in [0, 1], shape (H, W, 3) or (H, W, 1)."""
    try:
        im = PILImage.open(path)
    except FileNotFoundError:
        raise ImageError(f"cannot read image: {path}")
    if im.mode == "P":
        im = im.convert("RGB")
    if im.mode not in ("RGB", "L"):
        raise ImageError(f"unsupported PNG mode {im.mode!r} (need 8-bit RGB or grayscale): {path}")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_png(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit PNG (values are clamped)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        PILImage.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(data, mode="RGB").save(path)


def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance, shape (H, W). Single-channel input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ GRAY_WEIGHTS
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    if img.ndim == 2:
        return img
    raise ImageError(f"cannot convert shape {img.shape} to grayscale")


def _lerp_axis_plan(src_len: int, dst_len: int):
    """Index/weight tables for align-corners-false bilinear along one axis."""
    scale = src_len / dst_len
    src = (np.arange(dst_len) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, src_len - 1)
    i0 = np.clip(i0, 0, src_len - 1)
    return i0, i1, 1.0 - frac, frac


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Standard align-corners-false bilinear resampling (edge clamp)."""
    if out_h < 1 or out_w < 1:
        raise ImageError("target dimensions must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    r0, r1, rw0, rw1 = _lerp_axis_plan(h, out_h)
    c0, c1, cw0, cw1 = _lerp_axis_plan(w, out_w)
    rows = img[r0] * rw0[:, None, None] + img[r1] * rw1[:, None, None]
    out = rows[:, c0] * cw0[None, :, None] + rows[:, c1] * cw1[None, :, None]
    return out


def bilinear_resize_vjp(grad_out: np.ndarray, src_h: int, src_w: int) -> np.ndarray:
    """Exact transpose of bilinear_resize for a gradient at the output size."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out_h, out_w = grad_out.shape[:2]
    if (src_h, src_w) == (out_h, out_w):
        return grad_out.copy()
    r0, r1, rw0, rw1 = _lerp_axis_plan(src_h, out_h)
    c0, c1, cw0, cw1 = _lerp_axis_plan(src_w, out_w)
    # transpose of the column lerp, then of the row lerp
    mid = np.zeros((out_h, src_w) + grad_out.shape[2:])
    np.add.at(mid, (slice(None), c0), grad_out * cw0[None, :, None])
    np.add.at(mid, (slice(None), c1), grad_out * cw1[None, :, None])
    src = np.zeros((src_h, src_w) + grad_out.shape[2:])
    np.add.at(src, r0, mid * rw0[:, None, None])
    np.add.at(src, r1, mid * rw1[:, None, None])
    return src


def nearest_upscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upscale for previews; never fed back into optimization."""
    if factor < 1:
        raise ImageError("upscale factor must be >= 1")
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def canny(img: np.ndarray, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Canny edge map, (H, W, 1) in [0, 1].

    Thresholds are fractions of the maximum gradient magnitude, so the edge set
    is invariant to rescaling image contrast. Pipeline: Gaussian pre-smooth
    (sigma 1) -> Sobel -> non-maximum suppression over 4 quantized directions ->
    hysteresis from high-threshold seeds -> binary map -> Gaussian blur of
    radius 1 pixel (3x3 kernel).
    """
    if not (0.0 <= low < high <= 1.0):
        raise ImageError(f"need 0 <= low < high <= 1, got low={low} high={high}")
    gray = to_gray(img)
    h, w = gray.shape
    smooth = ndimage.gaussian_filter(gray, sigma=1.0)
    gx = ndimage.sobel(smooth, axis=1)
    gy = ndimage.sobel(smooth, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0.0:
        return np.zeros((h, w, 1))

    # quantize gradient direction to 0/45/90/135 degrees
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    direction = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    nms = np.zeros_like(mag)
    for d, (dy, dx) in offsets.items():
        fwd = np.roll(np.roll(mag, -dy, axis=0), -dx, axis=1)
        bwd = np.roll(np.roll(mag, dy, axis=0), dx, axis=1)
        keep = (direction == d) & (mag >= fwd) & (mag >= bwd)
        nms[keep] = mag[keep]
    # the rolled comparisons wrap around; borders are unreliable either way
    nms[0, :] = nms[-1, :] = 0.0
    nms[:, 0] = nms[:, -1] = 0.0

    strong = nms >= high * peak
    weak = nms >= low * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros((h, w, 1))
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    edges = np.isin(labels, keep_labels).astype(np.float64)

    # "radius 1" blur: 3x3 Gaussian kernel (sigma 1, truncated at 1 sigma)
    blurred = ndimage.gaussian_filter(edges, sigma=1.0, truncate=1.0)
    return np.clip(blurred, 0.0, 1.0)[:, :, None]


def pseudo_depth(img: np.ndarray) -> np.ndarray:
    """Placeholder depth map: blurred luminance normalized to [0, 1].

    Stands in for a real monocular depth predictor so the conditioning plumbing
    is exercisable end to end; supply a real depth PNG for production use.
    """
    gray = to_gray(img)
    h, w = gray.shape
    blurred = ndimage.gaussian_filter(gray, sigma=min(h, w) / 16.0)
    lo, hi = blurred.min(), blurred.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w, 1))
    return ((blurred - lo) / (hi - lo))[:, :, None]
