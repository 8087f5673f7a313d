"""Diffusion mode: wraps a pretrained latent diffusion model with edge/depth
conditioning and classifier-free guidance, returning pixel-space gradients.

The augmented image is encoded through a distilled VAE encoder, noised at the
requested timestep, and denoised twice (conditional with ControlNet residuals,
unconditional). The noise and semantic residuals are each scaled by w(t) and
backpropagated through the encoder, so the engine receives plain pixel-space
tensors and needs no knowledge of the latent space.

Requires the ``diffusion`` extra (torch, diffusers, transformers) and network
access (or a local cache) for the pretrained weights.
"""

from __future__ import annotations

import numpy as np

from .schedule import Schedule


class DiffusionUnavailable(RuntimeError):
    pass


DEFAULT_MODEL = "stabilityai/stable-diffusion-xl-base-1.0"
DEFAULT_VAE = "madebyollin/taesdxl"
DEFAULT_CANNY_CONTROLNET = "diffusers/controlnet-canny-sdxl-1.0-mid"
DEFAULT_DEPTH_CONTROLNET = "diffusers/controlnet-depth-sdxl-1.0-mid"


class DiffusionBackend:
    name = "diffusion"

    def __init__(self, model_id: str = DEFAULT_MODEL, vae_id: str = DEFAULT_VAE,
                 canny_controlnet: str = DEFAULT_CANNY_CONTROLNET,
                 depth_controlnet: str = DEFAULT_DEPTH_CONTROLNET,
                 lora: str | None = None, device: str = "cuda"):
        try:
            import torch
            from diffusers import (
                AutoencoderTiny,
                ControlNetModel,
                StableDiffusionXLControlNetPipeline,
            )
        except ImportError as e:
            raise DiffusionUnavailable(
                f"diffusion mode needs torch + diffusers (pip install "
                f"'guidance-sidecar[diffusion]'): {e}")

        self.torch = torch
        self.device = device
        self.schedule = Schedule(1000)  # protocol-level timestep bounds only
        controlnets = [
            ControlNetModel.from_pretrained(canny_controlnet, torch_dtype=torch.float32),
            ControlNetModel.from_pretrained(depth_controlnet, torch_dtype=torch.float32),
        ]
        self.pipe = StableDiffusionXLControlNetPipeline.from_pretrained(
            model_id, controlnet=controlnets, torch_dtype=torch.float32)
        self.pipe.vae = AutoencoderTiny.from_pretrained(vae_id, torch_dtype=torch.float32)
        if lora:
            self.pipe.load_lora_weights(lora)
        self.pipe.to(device)
        for module in (self.pipe.unet, self.pipe.vae, self.pipe.text_encoder,
                       self.pipe.text_encoder_2, *self.pipe.controlnet.nets):
            module.requires_grad_(False)
        self._prompt_cache: dict[str, tuple] = {}

    def expected_shape(self):
        return None  # any (h, w, 3) the pipeline resolution supports

    def _embed(self, prompt: str):
        if prompt not in self._prompt_cache:
            with self.torch.no_grad():
                self._prompt_cache[prompt] = self.pipe.encode_prompt(
                    prompt, device=self.device, num_images_per_prompt=1,
                    do_classifier_free_guidance=False)
        return self._prompt_cache[prompt]

    def _schedule_coeffs(self, t: int):
        sched = self.pipe.scheduler
        abar = sched.alphas_cumprod[t]
        alpha = abar.sqrt()
        sigma = (1.0 - abar).sqrt()
        return alpha, sigma, sigma ** 2

    def grads(self, x: np.ndarray, eps: np.ndarray, t: int,
              request: dict) -> tuple[np.ndarray, np.ndarray]:
        torch = self.torch
        device = self.device
        h, w = x.shape[:2]

        def to_tensor(arr, channels):
            tt = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
            return tt.permute(2, 0, 1)[None].to(device)

        x_t_in = to_tensor(x, 3).requires_grad_(True)
        cond_images = []
        scales = []
        if "canny" in request.get("slots", []):
            cond_images.append(to_tensor(request["tensors"]["canny"], 3))
            scales.append(float(request.get("canny_scale", 0.35)))
        if "depth" in request.get("slots", []):
            depth = np.repeat(request["tensors"]["depth"], 3, axis=2)
            cond_images.append(to_tensor(depth, 3))
            scales.append(float(request.get("depth_scale", 0.35)))

        # encode through the distilled VAE; gradients flow back through here
        z = self.pipe.vae.encode(x_t_in * 2.0 - 1.0).latents
        alpha, sigma, w_t = self._schedule_coeffs(t)
        eps_latent = torch.randn(
            z.shape, generator=torch.Generator(device="cpu").manual_seed(
                int(request.get("latent_noise_seed", request.get("t", 0)))),
            dtype=z.dtype).to(device)
        z_t = alpha * z.detach() + sigma * eps_latent

        prompt_embeds = self._embed(request.get("prompt", ""))
        uncond_embeds = self._embed(request.get("uncond_prompt", ""))
        tt = torch.tensor([t], device=device)

        def predict(embeds):
            pe, _, pooled, _ = embeds
            added = {"text_embeds": pooled,
                     "time_ids": self.pipe._get_add_time_ids(
                         (h, w), (0, 0), (h, w), dtype=pe.dtype,
                         text_encoder_projection_dim=pooled.shape[-1]).to(device)}
            down_res = mid_res = None
            if cond_images:
                down_res, mid_res = self.pipe.controlnet(
                    z_t, tt, encoder_hidden_states=pe,
                    controlnet_cond=cond_images,
                    conditioning_scale=scales, added_cond_kwargs=added,
                    return_dict=False)
            with torch.no_grad():
                return self.pipe.unet(
                    z_t, tt, encoder_hidden_states=pe,
                    down_block_additional_residuals=down_res,
                    mid_block_additional_residual=mid_res,
                    added_cond_kwargs=added).sample

        eps_cond = predict(prompt_embeds)
        eps_uncond = predict(uncond_embeds)
        eps_hat = eps_latent

        # split before the encoder backprop; linearity makes the order immaterial
        residual_noise = w_t * (eps_cond - eps_hat)
        residual_sem = w_t * (eps_cond - eps_uncond)
        grad_noise = torch.autograd.grad(z, x_t_in, grad_outputs=residual_noise,
                                         retain_graph=True)[0]
        grad_sem = torch.autograd.grad(z, x_t_in, grad_outputs=residual_sem)[0]

        def to_numpy(g):
            return g[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)

        return to_numpy(grad_noise), to_numpy(grad_sem)
