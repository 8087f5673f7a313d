"""Palette-constrained low-resolution image synthesis by score distillation."""

from .augment import AugmentConfig, AugmentSample, apply, sample_augment, vjp
from .generator import (
    GumbelDraw,
    LogitField,
    ProbField,
    argmax_indices,
    backprop_to_logits,
    center,
    entropy_map,
    gumbel_sample,
    init_from_image,
    init_random,
    render,
    softmax_probs,
)
from .guidance import (
    Condition,
    DeltaOracle,
    GmmOracle,
    GuidanceGrad,
    NoiseSchedule,
    cfg_combine,
    draw_epsilon,
    make_schedule,
    sample_timestep,
)
from .loss import FftMask, LossWeights, fft_loss, lsds_step, make_fft_mask
from .optimize import OptimState, RunConfig, RunResult, opt_step, run
from .palette import Palette, PaletteError, kmeans_palette, load_tile_palette, parse_palette

__version__ = "0.1.0"
