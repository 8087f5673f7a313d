"""Training loop: adaptive-moment optimizer with decoupled weight decay,
learning-rate warmup, per-step centering, checkpointing, and telemetry."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import generator as gen_mod
from .augment import AugmentConfig
from .guidance import Condition, NoiseSchedule, make_schedule
from .loss import LossWeights, lsds_step, make_fft_mask
from .palette import Palette
from .rng import stream_seed

log = logging.getLogger("pixeldistill.optimize")


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.25
    warmup: int = 250
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def init_optim(shape, lr: float = 0.25, warmup: int = 250,
               weight_decay: float = 0.0) -> OptimState:
    return OptimState(m=np.zeros(shape), v=np.zeros(shape), lr=lr,
                      warmup=warmup, weight_decay=weight_decay)


def lr_at(state: OptimState, step: int) -> float:
    """Linear warmup to the constant base rate: lr * min(1, step / warmup)."""
    if state.warmup <= 0:
        return state.lr
    return state.lr * min(1.0, step / state.warmup)


def adamw_update(state: OptimState, lam: np.ndarray, grad: np.ndarray) -> tuple[OptimState, np.ndarray]:
    """One decoupled-weight-decay adaptive-moment update (no centering)."""
    if lam.shape != grad.shape:
        raise ValueError(f"parameter shape {lam.shape} != gradient shape {grad.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad ** 2
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    lr = lr_at(state, step)
    new_lam = lam - lr * m_hat / (np.sqrt(v_hat) + state.eps) - lr * state.weight_decay * lam
    new_state = replace(state, m=m, v=v, step=step)
    return new_state, new_lam


def opt_step(state: OptimState, theta: gen_mod.LogitField,
             grad: np.ndarray) -> tuple[OptimState, gen_mod.LogitField]:
    """Optimizer update followed by logit centering (applied every iteration)."""
    new_state, new_lam = adamw_update(state, theta.lam, grad)
    return new_state, gen_mod.center(gen_mod.LogitField(new_lam))


@dataclass
class RunConfig:
    steps: int = 6000
    size: tuple[int, int] = (64, 64)  # (H, W) generator grid
    seed: int = 0
    tau: float = 1.0
    use_gumbel: bool = True
    straight_through: bool = False
    init: str = "image"               # image | random
    init_scale: float = 0.1
    init_norm: str = "l1"
    s: float = 40.0
    w_fft: float = 20.0
    fft_radius: Optional[int] = None
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    t_min: int = 20
    b_start: int = 980
    b_end: int = 800
    schedule_steps: int = 1000
    lr: float = 0.25
    warmup: int = 250
    weight_decay: float = 0.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.init not in ("image", "random"):
            raise ValueError(f"unknown init mode {self.init!r}")


@dataclass
class RunResult:
    theta: gen_mod.LogitField
    argmax_render: np.ndarray
    softmax_render: np.ndarray
    entropy_trace: list
    fft_trace: list
    telemetry: list  # rows of (step, t, lr, grad_norm_noise, grad_norm_sem, fft_loss, mean_norm_entropy)


TELEMETRY_COLUMNS = ["step", "t", "lr", "grad_norm_noise", "grad_norm_sem",
                     "fft_loss", "mean_norm_entropy"]


def save_checkpoint(path, theta: gen_mod.LogitField, state: OptimState,
                    config_hash: str = "") -> None:
    """Raw f64 logits plus optimizer moments, with a small JSON sidecar."""
    path = Path(path)
    np.savez(path, lam=theta.lam, m=state.m, v=state.v)
    sidecar = {
        "height": theta.shape[0], "width": theta.shape[1], "palette_size": theta.n,
        "step": state.step, "config_hash": config_hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_checkpoint(path) -> tuple[gen_mod.LogitField, np.ndarray, np.ndarray, int]:
    path = Path(path)
    data = np.load(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return gen_mod.LogitField(data["lam"]), data["m"], data["v"], int(meta["step"])


def _init_theta(config: RunConfig, palette: Palette,
                input_image_ds: Optional[np.ndarray]) -> gen_mod.LogitField:
    h, w = config.size
    if config.init == "image":
        if input_image_ds is None:
            raise ValueError("image initialization needs an input image")
        return gen_mod.init_from_image(input_image_ds, palette, norm=config.init_norm)
    return gen_mod.init_random(h, w, palette.n, stream_seed(config.seed, "init"),
                               scale=config.init_scale)


def run(config: RunConfig, palette: Palette, backend, *,
        input_image_ds: Optional[np.ndarray] = None,
        condition: Optional[Condition] = None,
        schedule: Optional[NoiseSchedule] = None,
        out_dir=None, config_hash: str = "",
        resume_from=None) -> RunResult:
    """Run the optimization loop; deterministic given the config seed and a
    deterministic backend.

    With ``out_dir`` set, telemetry rows stream to ``telemetry.csv`` and
    checkpoints land in ``checkpoints/``. On a backend failure the current
    state is checkpointed before the error propagates.
    """
    if palette.n < 2:
        raise ValueError("palette too small")
    schedule = schedule or make_schedule(t_max=config.schedule_steps)
    condition = condition or Condition()
    h, w = config.size
    tile_h, tile_w = palette.tile_shape
    render_size = (h * tile_h, w * tile_w)
    fft_mask = make_fft_mask(render_size[0], render_size[1], config.fft_radius)
    weights = LossWeights(s=config.s, w_fft=config.w_fft)

    if resume_from is not None:
        theta, m, v, start_step = load_checkpoint(resume_from)
        state = init_optim(theta.shape, lr=config.lr, warmup=config.warmup,
                           weight_decay=config.weight_decay)
        state.m, state.v, state.step = m, v, start_step
    else:
        theta = _init_theta(config, palette, input_image_ds)
        state = init_optim(theta.shape, lr=config.lr, warmup=config.warmup,
                           weight_decay=config.weight_decay)
        start_step = 0

    telemetry_file = None
    writer = None
    ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        mode = "a" if resume_from is not None else "w"
        telemetry_file = open(out_dir / "telemetry.csv", mode, newline="")
        writer = csv.writer(telemetry_file)
        if mode == "w":
            writer.writerow(TELEMETRY_COLUMNS)

    entropy_trace = []
    fft_trace = []
    telemetry_rows = []
    try:
        for i in range(start_step, config.steps):
            try:
                grad, diag = lsds_step(
                    theta, palette, backend, schedule, config.aug, condition,
                    weights, i, config.seed, tau=config.tau,
                    use_gumbel=config.use_gumbel,
                    straight_through=config.straight_through,
                    total_steps=config.steps, t_min=config.t_min,
                    b_start=config.b_start, b_end=config.b_end, fft_mask=fft_mask)
            except Exception:
                if ckpt_dir is not None:
                    save_checkpoint(ckpt_dir / f"failed_step_{i:06d}.npz", theta,
                                    state, config_hash)
                    log.error("backend failure at step %d; checkpoint saved", i)
                raise
            state, theta = opt_step(state, theta, grad)
            _, mean_entropy = gen_mod.entropy_map(gen_mod.softmax_probs(theta))
            lr = lr_at(state, state.step)
            row = [i, diag.t, repr(lr), repr(diag.grad_noise_norm),
                   repr(diag.grad_sem_norm), repr(diag.fft_value),
                   repr(mean_entropy)]
            telemetry_rows.append(row)
            entropy_trace.append(mean_entropy)
            fft_trace.append(diag.fft_value)
            if writer is not None:
                writer.writerow(row)
            if ckpt_dir is not None and config.checkpoint_every > 0 \
                    and (i + 1) % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"step_{i + 1:06d}.npz", theta, state,
                                config_hash)
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"step_{config.steps:06d}.npz", theta,
                            state, config_hash)
    finally:
        if telemetry_file is not None:
            telemetry_file.close()

    return RunResult(
        theta=theta,
        argmax_render=gen_mod.render(theta, palette, mode="argmax"),
        softmax_render=gen_mod.render(theta, palette, mode="softmax"),
        entropy_trace=entropy_trace,
        fft_trace=fft_trace,
        telemetry=telemetry_rows,
    )
