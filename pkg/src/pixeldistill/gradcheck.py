"""Finite-difference verification suites for every differentiable stage.

Each check compares an analytic gradient against central differences of an
independently written forward evaluation at small sizes and prints the max
relative error. Used by the ``gradcheck`` CLI subcommand and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment as aug_mod
from . import generator as gen_mod
from .guidance import Condition, DeltaOracle, make_schedule
from .loss import LossWeights, fft_loss, lsds_step, make_fft_mask
from .palette import Palette


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float

    @property
    def ok(self) -> bool:
        return self.error < self.threshold


def _central_diff(f, theta_lam: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(theta_lam)
    it = np.nditer(theta_lam, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        bumped = theta_lam.copy()
        bumped[idx] += h
        up = f(bumped)
        bumped[idx] -= 2 * h
        down = f(bumped)
        grad[idx] = (up - down) / (2 * h)
    return grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _test_palette(n: int, rng) -> Palette:
    colors = rng.random((n, 1, 1, 3))
    return Palette(colors, name="gradcheck")


def check_generator(size: int = 4, n: int = 3, seed: int = 0) -> list[CheckResult]:
    """Render-then-project scalars, softmax and Gumbel modes, vs FD."""
    rng = np.random.default_rng(seed)
    palette = _test_palette(n, rng)
    theta = gen_mod.LogitField(rng.normal(0, 1, (size, size, n)))
    probe = rng.normal(0, 1, (size, size, 3))
    results = []

    def f_soft(lam):
        x = gen_mod.render(gen_mod.LogitField(lam), palette, mode="softmax")
        return float((x * probe).sum())

    analytic = gen_mod.backprop_to_logits(probe, gen_mod.softmax_probs(theta), palette)
    numeric = _central_diff(f_soft, theta.lam)
    results.append(CheckResult("generator/softmax", _rel_err(analytic, numeric), 1e-6))

    tau = 0.7
    draw_seed = 123

    def f_gumbel(lam):
        d = gen_mod.gumbel_sample(gen_mod.LogitField(lam), tau, draw_seed)
        x = gen_mod.render(gen_mod.LogitField(lam), palette, mode="gumbel", draw=d)
        return float((x * probe).sum())

    draw = gen_mod.gumbel_sample(theta, tau, draw_seed)
    analytic = gen_mod.backprop_to_logits(probe, draw, palette)
    numeric = _central_diff(f_gumbel, theta.lam)
    results.append(CheckResult("generator/gumbel", _rel_err(analytic, numeric), 1e-6))
    return results


def check_augment(seed: int = 0) -> list[CheckResult]:
    """Adjoint identity for a fully active sample, FD for the identity warp."""
    rng = np.random.default_rng(seed)
    results = []

    cfg = aug_mod.AugmentConfig(p_gray=1.0, p_flip=1.0, p_persp=1.0,
                                distortion_scale=0.4, target_size=(7, 9))
    sample = aug_mod.sample_augment(cfg, seed=5)
    src = (6, 5)
    v = rng.normal(0, 1, (src[0], src[1], 3))
    u = rng.normal(0, 1, (7, 9, 3))
    lhs = float((aug_mod.apply(sample, v) * u).sum())
    rhs = float((v * aug_mod.vjp(sample, u, src)).sum())
    denom = max(abs(lhs), abs(rhs), 1e-12)
    results.append(CheckResult("augment/adjoint", abs(lhs - rhs) / denom, 1e-9))

    ident = aug_mod.sample_augment(aug_mod.AugmentConfig.identity((12, 12)), seed=1)
    img = rng.normal(0, 1, (6, 6, 3))
    probe = rng.normal(0, 1, (12, 12, 3))

    def f(arr):
        return float((aug_mod.apply(ident, arr) * probe).sum())

    analytic = aug_mod.vjp(ident, probe, (6, 6))
    numeric = _central_diff(f, img, h=1e-6)
    results.append(CheckResult("augment/resize-vjp", _rel_err(analytic, numeric), 1e-6))
    return results


def check_fft(size: int = 8, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.random((size, size, 3))
    mask = make_fft_mask(size, size, r0=1)
    _, analytic = fft_loss(x, mask)
    numeric = _central_diff(lambda arr: fft_loss(arr, mask)[0], x, h=1e-6)
    return [CheckResult("loss/fft", _rel_err(analytic, numeric), 1e-5)]


def check_full_pipeline(size: int = 4, n: int = 3, seed: int = 0,
                        inject_sign_error: bool = False) -> list[CheckResult]:
    """Full chain vs FD of the closed-form scalar the delta oracle minimizes.

    For the delta denoiser the guided residual collapses to
    (w * alpha / sigma) * (x_aug - T) with T = (1+s)*target_cond - s*target_uncond,
    i.e. the gradient of (w * alpha / (2 sigma)) * ||x_aug - T||^2. That scalar
    plus the smoothness term gives an independent forward evaluation of the
    objective the step assembles.
    """
    rng = np.random.default_rng(seed)
    palette = _test_palette(n, rng)
    theta = gen_mod.LogitField(rng.normal(0, 1, (size, size, n)))
    schedule = make_schedule()
    aug_cfg = aug_mod.AugmentConfig(p_gray=1.0, p_flip=1.0, p_persp=1.0,
                                    distortion_scale=0.3, target_size=(6, 6))
    target_c = rng.random((6, 6, 3))
    target_u = rng.random((6, 6, 3))
    backend = DeltaOracle(target_c, target_u, schedule=schedule)
    weights = LossWeights(s=3.0, w_fft=2.0)
    mask = make_fft_mask(size, size, r0=1)
    cond = Condition()
    step, master_seed = 7, seed

    kwargs = dict(tau=0.8, use_gumbel=True, total_steps=100, t_min=20,
                  b_start=980, b_end=800, fft_mask=mask)
    grad, diag = lsds_step(theta, palette, backend, schedule, aug_cfg, cond,
                           weights, step, master_seed, **kwargs)
    if inject_sign_error:
        grad = -grad

    t = diag.t
    alpha, sigma, w = schedule.alpha[t], schedule.sigma[t], schedule.w[t]
    coeff = w * alpha / sigma
    target = (1.0 + weights.s) * target_c - weights.s * target_u
    sample = diag.aug_sample

    def scalar(lam):
        th = gen_mod.LogitField(lam)
        d = gen_mod.gumbel_sample(th, kwargs["tau"], diag.weights_src.seed)
        x = gen_mod.render(th, palette, mode="gumbel", draw=d)
        x_aug = aug_mod.apply(sample, x)
        quad = 0.5 * coeff * float(((x_aug - target) ** 2).sum())
        return quad + weights.w_fft * fft_loss(x, mask)[0]

    numeric = _central_diff(scalar, theta.lam)
    return [CheckResult("pipeline/full", _rel_err(grad, numeric), 1e-4)]


def run_all(size: int = 4, n: int = 3, seed: int = 0,
            inject_sign_error: bool = False) -> list[CheckResult]:
    results = []
    results += check_generator(size, n, seed)
    results += check_augment(seed)
    results += check_fft(8, seed)
    results += check_full_pipeline(size, n, seed, inject_sign_error=inject_sign_error)
    return results
