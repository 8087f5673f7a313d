"""Echo-delta mode: the exact Dirac-posterior denoiser, computed in float32.

With all data mass on ``target``, the optimal noise prediction for
x_t = alpha*x + sigma*eps is (x_t - alpha*target) / sigma. The gradient pair is

    grad_noise = w * (eps_hat_cond - eps)
    grad_sem   = w * (eps_hat_cond - eps_hat_uncond)

Formula order is fixed; engines implementing the same math in float32 get
bit-identical results, which is the whole point of this mode.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .schedule import Schedule


def load_target(path) -> np.ndarray:
    im = Image.open(path)
    if im.mode == "P":
        im = im.convert("RGB")
    if im.mode == "L":
        arr = np.asarray(im, dtype=np.float64)[:, :, None] / 255.0
        return np.repeat(arr, 3, axis=2)
    if im.mode != "RGB":
        raise ValueError(f"unsupported target image mode {im.mode!r}")
    return np.asarray(im, dtype=np.float64) / 255.0


class EchoDeltaBackend:
    name = "echo-delta"

    def __init__(self, target_cond: np.ndarray, target_uncond: np.ndarray | None = None,
                 schedule: Schedule | None = None):
        self.target_cond = np.asarray(target_cond, dtype=np.float64)
        self.target_uncond = (self.target_cond if target_uncond is None
                              else np.asarray(target_uncond, dtype=np.float64))
        if self.target_cond.shape != self.target_uncond.shape:
            raise ValueError("target shapes differ")
        self.schedule = schedule or Schedule()

    def expected_shape(self):
        return self.target_cond.shape

    def grads(self, x: np.ndarray, eps: np.ndarray, t: int,
              request: dict) -> tuple[np.ndarray, np.ndarray]:
        f32 = np.float32
        sched = self.schedule
        alpha, sigma, w = f32(sched.alpha[t]), f32(sched.sigma[t]), f32(sched.w[t])
        x = x.astype(np.float32, copy=False)
        eps = eps.astype(np.float32, copy=False)
        target_c = self.target_cond.astype(np.float32, copy=False)
        target_u = self.target_uncond.astype(np.float32, copy=False)
        x_t = alpha * x + sigma * eps
        eps_hat_c = (x_t - alpha * target_c) / sigma
        eps_hat_u = (x_t - alpha * target_u) / sigma
        grad_noise = w * (eps_hat_c - eps)
        grad_sem = w * (eps_hat_c - eps_hat_u)
        return grad_noise, grad_sem
