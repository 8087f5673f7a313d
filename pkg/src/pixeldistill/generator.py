"""Stochastic quantized image generator.

The generator is parameterized by a per-pixel logit field of shape (H, W, n)
over an n-element palette. Rendering blends palette elements with per-pixel
weights that come from a plain softmax, from a temperature softmax over
Gumbel-perturbed logits, or from a hard argmax. All logit math is float64;
8-bit quantization only happens at image export.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .palette import Palette

# Gumbel uniforms are clamped away from {0, 1}; the induced sampling bias is
# below 1e-10 while keeping -log(-log U) finite.
_U_CLAMP = 1e-12


@dataclass
class LogitField:
    """The generator parameters: one unnormalized score per pixel and element."""

    lam: np.ndarray  # (H, W, n) float64

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.lam.ndim != 3:
            raise ValueError(f"logits must be (H, W, n), got {self.lam.shape}")
        if not np.isfinite(self.lam).all():
            raise ValueError("logits contain non-finite values")

    @property
    def shape(self):
        return self.lam.shape

    @property
    def n(self) -> int:
        return self.lam.shape[2]


@dataclass
class ProbField:
    """Per-pixel categorical probabilities over the palette."""

    pi: np.ndarray  # (H, W, n), rows sum to 1


@dataclass
class GumbelDraw:
    """One frozen Gumbel-softmax sample of the generator."""

    g: np.ndarray      # (H, W, n) Gumbel(0, 1) noise
    s_tau: np.ndarray  # (H, W, n) temperature-softmax weights
    tau: float
    seed: int


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def center(theta: LogitField) -> LogitField:
    """Remove the per-pixel channel mean; leaves the softmax unchanged."""
    return LogitField(theta.lam - theta.lam.mean(axis=-1, keepdims=True))


def softmax_probs(theta: LogitField) -> ProbField:
    return ProbField(_stable_softmax(theta.lam))


def init_from_image(image_ds: np.ndarray, palette: Palette, norm: str = "l1") -> LogitField:
    """Initialize logits as negated distances to the palette colors.

    ``image_ds`` must already be downsampled to the generator grid (H, W).
    Tile palettes are matched by their mean color. With this initialization the
    argmax at each pixel is its nearest palette element.
    """
    image_ds = np.asarray(image_ds, dtype=np.float64)
    if image_ds.ndim != 3 or image_ds.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image_ds.shape}")
    diff = image_ds[:, :, None, :] - palette.colors[None, None, :, :]
    if norm == "l1":
        dist = np.abs(diff).sum(axis=-1)
    elif norm == "l2":
        dist = np.sqrt((diff ** 2).sum(axis=-1))
    else:
        raise ValueError(f"unknown norm {norm!r} (use 'l1' or 'l2')")
    return center(LogitField(-dist))


def init_random(h: int, w: int, n: int, seed: int, scale: float = 0.1) -> LogitField:
    """I.i.d. normal(0, scale^2) logits, centered; deterministic given seed."""
    if scale <= 0:
        raise ValueError("scale must be > 0")
    rng = np.random.default_rng(seed)
    return center(LogitField(rng.normal(0.0, scale, size=(h, w, n))))


def gumbel_sample(theta: LogitField, tau: float, seed: int) -> GumbelDraw:
    """Perturb logits with Gumbel(0, 1) noise and take a temperature softmax."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    rng = np.random.default_rng(seed)
    u = rng.random(size=theta.shape)
    u = np.clip(u, _U_CLAMP, 1.0 - _U_CLAMP)
    g = -np.log(-np.log(u))
    s = _stable_softmax((theta.lam + g) / tau)
    return GumbelDraw(g=g, s_tau=s, tau=float(tau), seed=seed)


def argmax_indices(theta: LogitField) -> np.ndarray:
    """Most probable element per pixel; ties go to the lowest index."""
    return np.argmax(theta.lam, axis=-1)


def _blend(weights: np.ndarray, palette: Palette) -> np.ndarray:
    """Convex blend of palette elements, laid out on the (i, j) grid."""
    hh, ww = palette.tile_shape
    grid_h, grid_w = weights.shape[:2]
    if palette.is_colors:
        out = weights @ palette.elements[:, 0, 0, :]
        return out
    blended = np.einsum("ijn,nabc->iajbc", weights, palette.elements)
    return blended.reshape(grid_h * hh, grid_w * ww, 3)


def render(theta: LogitField, palette: Palette, mode: str = "argmax",
           draw: GumbelDraw | None = None) -> np.ndarray:
    """Render the generator to an RGB array of shape (H*h, W*w, 3).

    Modes: ``argmax`` emits palette elements only (hard quantization),
    ``softmax`` blends with the per-pixel probabilities, ``gumbel`` blends
    with the weights of a given frozen draw.
    """
    if palette.n != theta.n:
        raise ValueError(f"palette has {palette.n} elements, logits have {theta.n}")
    if mode == "argmax":
        onehot = np.eye(theta.n)[argmax_indices(theta)]
        return _blend(onehot, palette)
    if mode == "softmax":
        return _blend(softmax_probs(theta).pi, palette)
    if mode == "gumbel":
        if draw is None:
            raise ValueError("gumbel mode needs a draw")
        return _blend(draw.s_tau, palette)
    raise ValueError(f"unknown render mode {mode!r}")


def render_hard_from_draw(draw: GumbelDraw, theta: LogitField, palette: Palette) -> np.ndarray:
    """Hard one-hot render of a draw's argmax (straight-through forward pass)."""
    y = theta.lam + draw.g
    onehot = np.eye(theta.n)[np.argmax(y, axis=-1)]
    return _blend(onehot, palette)


def entropy_map(pi: ProbField) -> tuple[np.ndarray, float]:
    """Per-pixel normalized Shannon entropy and its mean over the image.

    Normalization divides by log n so 0 means a certain pixel and 1 a uniform
    one, independent of palette size. 0*log(0) is taken as 0.
    """
    p = pi.pi
    n = p.shape[-1]
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -plogp.sum(axis=-1) / np.log(n)
    return h, float(h.mean())


def backprop_to_logits(dl_dx: np.ndarray, weights_src, palette: Palette) -> np.ndarray:
    """Pull an image-space gradient back to the logits.

    ``weights_src`` is the ProbField or GumbelDraw that produced the render.
    Applies the transpose of the palette blend and then the softmax Jacobian
    transpose: J^T v = w * (v - <v, w>) per pixel, with an extra 1/tau factor
    for Gumbel draws. The result sums to zero over the element axis at every
    pixel.
    """
    if isinstance(weights_src, GumbelDraw):
        weights, inv_tau = weights_src.s_tau, 1.0 / weights_src.tau
    elif isinstance(weights_src, ProbField):
        weights, inv_tau = weights_src.pi, 1.0
    else:
        raise TypeError("weights_src must be a ProbField or GumbelDraw")

    dl_dx = np.asarray(dl_dx, dtype=np.float64)
    grid_h, grid_w, n = weights.shape
    hh, ww = palette.tile_shape
    if dl_dx.shape != (grid_h * hh, grid_w * ww, 3):
        raise ValueError(
            f"gradient shape {dl_dx.shape} does not match render shape "
            f"{(grid_h * hh, grid_w * ww, 3)}"
        )
    if palette.is_colors:
        v = dl_dx @ palette.elements[:, 0, 0, :].T
    else:
        v = np.einsum(
            "iajbc,nabc->ijn",
            dl_dx.reshape(grid_h, hh, grid_w, ww, 3),
            palette.elements,
        )
    inner = (v * weights).sum(axis=-1, keepdims=True)
    return inv_tau * weights * (v - inner)
