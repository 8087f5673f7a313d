"""Gradient assembly: distillation noise/semantic terms plus FFT smoothness.

One optimization step draws a single (Gumbel, augmentation, timestep, epsilon)
sample, obtains the pixel-space guidance gradients from a backend, and chains
them through the augmentation transpose and the generator Jacobian transpose.
The smoothness term penalizes masked high-frequency magnitudes of the raw
render (at native resolution, before augmentation) and contributes its own
analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import augment as aug_mod
from . import generator as gen_mod
from .guidance import Condition, GuidanceGrad, NoiseSchedule, sample_timestep
from .imaging import GRAY_WEIGHTS
from .palette import Palette
from .rng import stream_rng, stream_seed


@dataclass
class LossWeights:
    s: float = 40.0       # guidance scale
    w_fft: float = 20.0   # smoothness weight

    def __post_init__(self):
        if self.s < 0 or self.w_fft < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class FftMask:
    """High-pass mask on the centered spectrum: 0 inside the disk of radius r0
    around DC, 1 outside."""

    m: np.ndarray
    r0: int


def make_fft_mask(h: int, w: int, r0: Optional[int] = None) -> FftMask:
    """Default cut radius keeps DC plus coarse structure unpenalized."""
    if r0 is None:
        r0 = max(1, min(h, w) // 8)
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    m = (dist > r0).astype(np.float64)
    if m.sum() == 0:
        raise ValueError(f"mask radius {r0} leaves no frequencies for {h}x{w}")
    return FftMask(m=m, r0=int(r0))


def fft_loss(x: np.ndarray, mask: FftMask) -> tuple[float, np.ndarray]:
    """Mean masked magnitude of the centered spectrum of the grayscale image,
    with its gradient.

    The pipeline grayscale -> DFT -> center-shift is linear, so the gradient is
    its transpose applied to the subgradient of |.| (taken as 0 at 0).
    """
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[:2]
    if mask.m.shape != (h, w):
        raise ValueError(f"mask shape {mask.m.shape} does not match image {x.shape[:2]}")
    gray = x @ GRAY_WEIGHTS if x.ndim == 3 else x
    spec = np.fft.fftshift(np.fft.fft2(gray))
    mag = np.abs(spec)
    norm = mask.m.sum()
    value = float((mask.m * mag).sum() / norm)

    phase = np.where(mag > 0.0, np.conj(spec) / np.where(mag > 0.0, mag, 1.0), 0.0)
    r = mask.m * phase / norm
    # transpose of shift o fft2 is fft2 o unshift (the DFT matrix is symmetric)
    dgray = np.real(np.fft.fft2(np.fft.ifftshift(r)))
    if x.ndim == 3:
        return value, dgray[:, :, None] * GRAY_WEIGHTS[None, None, :]
    return value, dgray


@dataclass
class StepDiagnostics:
    """Everything a telemetry row or a verification test wants from one step."""

    t: int
    noise_seed: int
    fft_value: float
    grad_noise_norm: float
    grad_sem_norm: float
    grad_noise_img: np.ndarray   # image-space term, augmented size
    grad_sem_img: np.ndarray
    x_render: np.ndarray         # raw render at native size
    aug_sample: aug_mod.AugmentSample
    weights_src: object          # the ProbField or GumbelDraw that made x


def lsds_step(theta: gen_mod.LogitField, palette: Palette, backend, schedule: NoiseSchedule,
              aug_cfg: aug_mod.AugmentConfig, cond: Condition, weights: LossWeights,
              step: int, seed: int, *, tau: float = 1.0, use_gumbel: bool = True,
              straight_through: bool = False, total_steps: int = 1, t_min: int = 20,
              b_start: int = 980, b_end: int = 800,
              fft_mask: Optional[FftMask] = None) -> tuple[np.ndarray, StepDiagnostics]:
    """One stochastic gradient sample of the total objective.

    All randomness is derived from (seed, step), so calling twice with the same
    arguments is deterministic — which is also what freezes the sample for
    finite-difference verification.
    """
    # render one sample of the generator
    if use_gumbel:
        draw = gen_mod.gumbel_sample(theta, tau, stream_seed(seed, "gumbel", step))
        weights_src = draw
        if straight_through:
            x = gen_mod.render_hard_from_draw(draw, theta, palette)
        else:
            x = gen_mod.render(theta, palette, mode="gumbel", draw=draw)
    else:
        weights_src = gen_mod.softmax_probs(theta)
        x = gen_mod.render(theta, palette, mode="softmax")

    # identical augmentation for the render and the conditioning images
    sample = aug_mod.sample_augment(aug_cfg, stream_seed(seed, "augment", step))
    x_aug = aug_mod.apply(sample, x)
    cond_aug = cond
    if cond.canny is not None or cond.depth is not None:
        cond_aug = Condition(
            prompt=cond.prompt, uncond_prompt=cond.uncond_prompt,
            canny=aug_mod.apply(sample, cond.canny) if cond.canny is not None else None,
            depth=aug_mod.apply(sample, cond.depth) if cond.depth is not None else None,
            canny_scale=cond.canny_scale, depth_scale=cond.depth_scale,
        )

    t = sample_timestep(step, total_steps, t_min, b_start, b_end,
                        stream_rng(seed, "timestep", step))
    noise_seed = stream_seed(seed, "epsilon", step)
    gg: GuidanceGrad = backend.evaluate(x_aug, cond_aug, t, noise_seed)
    grad_noise = np.asarray(gg.grad_noise, dtype=np.float64)
    grad_sem = np.asarray(gg.grad_sem, dtype=np.float64)

    grad_img = grad_noise + weights.s * grad_sem
    grad_x = aug_mod.vjp(sample, grad_img, source_size=x.shape[:2])

    if fft_mask is None:
        fft_mask = make_fft_mask(x.shape[0], x.shape[1])
    fft_value, dfft_dx = fft_loss(x, fft_mask)
    if weights.w_fft > 0.0:
        grad_x = grad_x + weights.w_fft * dfft_dx

    grad_theta = gen_mod.backprop_to_logits(grad_x, weights_src, palette)
    diag = StepDiagnostics(
        t=t, noise_seed=noise_seed, fft_value=fft_value,
        grad_noise_norm=float(np.linalg.norm(grad_noise)),
        grad_sem_norm=float(np.linalg.norm(grad_sem)),
        grad_noise_img=grad_noise, grad_sem_img=grad_sem,
        x_render=x, aug_sample=sample, weights_src=weights_src,
    )
    return grad_theta, diag
