"""Variance-preserving forward-process tables (DDPM linear beta, T = 1000)."""

from __future__ import annotations

import numpy as np


class Schedule:
    def __init__(self, t_max: int = 1000):
        betas = np.linspace(1e-4, 0.02, t_max)
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        self.t_max = t_max
        self.alpha = np.sqrt(abar)
        self.sigma = np.sqrt(1.0 - abar)
        self.w = self.sigma ** 2
