"""Noise schedule, classifier-free guidance assembly, and guidance backends.

A guidance backend is anything with
``evaluate(x_aug, condition, t, noise_seed) -> GuidanceGrad`` that is
deterministic given its inputs and the seed. Two exact in-process oracles are
provided for verification; the remote client in :mod:`pixeldistill.protocol`
satisfies the same contract over the wire.

The per-call noise is always derived as
``default_rng(noise_seed).standard_normal(shape)`` so every backend (and the
remote peer) agrees on epsilon without transmitting RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np


class GuidanceError(RuntimeError):
    pass


@dataclass
class NoiseSchedule:
    """Variance-preserving forward-process tables for t in {0..T}."""

    t_max: int
    alpha: np.ndarray  # (T+1,), strictly decreasing
    sigma: np.ndarray  # (T+1,), strictly increasing
    w: np.ndarray      # (T+1,), sigma_t^2 gradient scaling


def make_schedule(kind: str = "linear-beta", t_max: int = 1000) -> NoiseSchedule:
    """DDPM linear-beta schedule (1e-4 to 0.02 over t_max steps).

    alpha_t^2 + sigma_t^2 = 1 holds by construction; t = 0 is noiseless.
    """
    if kind != "linear-beta":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if t_max < 2:
        raise ValueError("t_max must be >= 2")
    betas = np.linspace(1e-4, 0.02, t_max)
    abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(abar)
    sigma = np.sqrt(1.0 - abar)
    return NoiseSchedule(t_max=t_max, alpha=alpha, sigma=sigma, w=sigma ** 2)


@dataclass
class Condition:
    """Prompt and spatial-conditioning inputs forwarded to a backend.

    In-process oracles ignore everything here by contract; the scales are
    opaque pass-through floats for remote backends.
    """

    prompt: str = ""
    uncond_prompt: str = ""
    canny: Optional[np.ndarray] = None  # (H, W, 1) or (H, W, 3)
    depth: Optional[np.ndarray] = None  # (H, W, 1)
    canny_scale: float = 0.35
    depth_scale: float = 0.35

    def __post_init__(self):
        if self.canny_scale < 0 or self.depth_scale < 0:
            raise ValueError("conditioning scales must be >= 0")


@dataclass
class GuidanceGrad:
    """Pixel-space gradient pair: variance-reduction term and semantic term.

    Both already carry the w(t) scaling and (for remote backends) the chain
    through the latent encoder, so the loss assembly only adds the guidance
    scale and the generator chain.
    """

    grad_noise: np.ndarray
    grad_sem: np.ndarray
    t: int


class GuidanceBackend(Protocol):
    def evaluate(self, x_aug: np.ndarray, condition: Condition, t: int,
                 noise_seed: int) -> GuidanceGrad: ...


def draw_epsilon(noise_seed: int, shape, dtype=np.float64) -> np.ndarray:
    """The shared epsilon convention: PCG64 standard normals from the seed."""
    eps = np.random.default_rng(noise_seed).standard_normal(shape)
    return eps.astype(dtype, copy=False)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    """Classifier-free guidance: push the conditional prediction away from the
    unconditional one with strength s."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("conditional/unconditional shapes differ")
    return eps_cond + s * (eps_cond - eps_uncond)


class DeltaOracle:
    """Exact denoiser for a Dirac data distribution.

    When all probability mass sits on ``target``, the optimal noise prediction
    given x_t = alpha*x + sigma*eps is (x_t - alpha*target) / sigma. The
    conditional branch uses ``target_cond``, the unconditional branch
    ``target_uncond`` (defaults to the same image, making the semantic term
    vanish). Computation preserves the input dtype; formula order is fixed so
    a float32 evaluation is bit-comparable across implementations.
    """

    name = "delta-oracle"

    def __init__(self, target_cond: np.ndarray, target_uncond: Optional[np.ndarray] = None,
                 schedule: Optional[NoiseSchedule] = None):
        self.target_cond = np.asarray(target_cond, dtype=np.float64)
        self.target_uncond = (self.target_cond if target_uncond is None
                              else np.asarray(target_uncond, dtype=np.float64))
        if self.target_cond.shape != self.target_uncond.shape:
            raise ValueError("target shapes differ")
        self.schedule = schedule or make_schedule()

    def evaluate(self, x_aug, condition, t, noise_seed):
        if not 0 < t <= self.schedule.t_max:
            raise GuidanceError(f"timestep {t} outside (0, {self.schedule.t_max}]")
        x = np.asarray(x_aug)
        if x.shape != self.target_cond.shape:
            raise GuidanceError(
                f"image shape {x.shape} does not match oracle target {self.target_cond.shape}")
        dt = x.dtype.type
        alpha = dt(self.schedule.alpha[t])
        sigma = dt(self.schedule.sigma[t])
        w = dt(self.schedule.w[t])
        eps = draw_epsilon(noise_seed, x.shape, dtype=x.dtype)
        target_c = self.target_cond.astype(x.dtype, copy=False)
        target_u = self.target_uncond.astype(x.dtype, copy=False)
        x_t = alpha * x + sigma * eps
        eps_hat_c = (x_t - alpha * target_c) / sigma
        eps_hat_u = (x_t - alpha * target_u) / sigma
        grad_noise = w * (eps_hat_c - eps)
        grad_sem = w * (eps_hat_c - eps_hat_u)
        return GuidanceGrad(grad_noise=grad_noise, grad_sem=grad_sem, t=t)


class GmmOracle:
    """Exact posterior-mean denoiser for an isotropic Gaussian-mixture prior.

    Components are whole images with shared scalar std ``gamma``. Under
    x_t = alpha*x_0 + sigma*eps the marginal of x_t per component is Gaussian
    with variance alpha^2 gamma^2 + sigma^2, so the posterior mean E[x_0 | x_t]
    has a closed form through component responsibilities. The conditional and
    unconditional predictions coincide (one mixture models the data), so the
    semantic term is zero.
    """

    name = "gmm-oracle"

    def __init__(self, means, weights, gamma: float,
                 schedule: Optional[NoiseSchedule] = None):
        self.means = np.asarray(means, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.means.ndim < 2 or len(self.means) != len(self.weights):
            raise ValueError("means and weights must pair up")
        if (self.weights <= 0).any():
            raise ValueError("weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        if gamma <= 0:
            raise ValueError("gamma must be > 0")
        self.gamma = float(gamma)
        self.schedule = schedule or make_schedule()

    def posterior_mean(self, x_t: np.ndarray, t: int) -> np.ndarray:
        alpha = self.schedule.alpha[t]
        sigma = self.schedule.sigma[t]
        var = alpha ** 2 * self.gamma ** 2 + sigma ** 2
        axes = tuple(range(1, self.means.ndim))
        sq = ((x_t[None] - alpha * self.means) ** 2).sum(axis=axes)
        logr = np.log(self.weights) - sq / (2.0 * var)
        logr -= logr.max()
        r = np.exp(logr)
        r /= r.sum()
        shrink = alpha * self.gamma ** 2 / var
        per_comp = self.means + shrink * (x_t[None] - alpha * self.means)
        return np.tensordot(r, per_comp, axes=1)

    def evaluate(self, x_aug, condition, t, noise_seed):
        if not 0 < t <= self.schedule.t_max:
            raise GuidanceError(f"timestep {t} outside (0, {self.schedule.t_max}]")
        x = np.asarray(x_aug, dtype=np.float64)
        if x.shape != self.means.shape[1:]:
            raise GuidanceError(
                f"image shape {x.shape} does not match oracle means {self.means.shape[1:]}")
        alpha = self.schedule.alpha[t]
        sigma = self.schedule.sigma[t]
        w = self.schedule.w[t]
        eps = draw_epsilon(noise_seed, x.shape)
        x_t = alpha * x + sigma * eps
        eps_hat = (x_t - alpha * self.posterior_mean(x_t, t)) / sigma
        grad_noise = w * (eps_hat - eps)
        return GuidanceGrad(grad_noise=grad_noise, grad_sem=np.zeros_like(grad_noise), t=t)


def timestep_upper_bound(step: int, total_steps: int, b_start: int = 980,
                         b_end: int = 800) -> int:
    """Annealed upper bound: linear from b_start to b_end over the first half
    of the run, constant b_end afterwards."""
    if total_steps <= 1:
        return b_end
    half = total_steps / 2.0
    frac = min(1.0, step / half)
    return int(round(b_start + (b_end - b_start) * frac))


def sample_timestep(step: int, total_steps: int, a: int, b_start: int, b_end: int,
                    rng: np.random.Generator) -> int:
    """Draw t uniformly from {a, ..., b(step)} with the annealed upper bound."""
    if not 0 < a < b_end <= b_start:
        raise ValueError(f"need 0 < a < b_end <= b_start, got a={a} b_end={b_end} b_start={b_start}")
    b = timestep_upper_bound(step, total_steps, b_start, b_end)
    return int(rng.integers(a, b + 1))
