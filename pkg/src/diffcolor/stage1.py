"""Stage 1: colorization with a generative color prior.

Fine-tunes the denoiser (encoder/decoder frozen) under the combined
objective — denoising loss plus a weighted contrastive color term — so that
deterministic sampling from the inverted grayscale latent yields a vivid
primary colorized image.

The contrastive term is evaluated on the decoded one-step x0 estimate each
step; sampling the full chain per training step would be intractable, so
the x0 estimate is this module's central approximation.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

from .core import ColorImage, GrayImage, replicate_gray
from .diffusion import (
    DiffusionBackend,
    Latent,
    add_noise_t,
    ddim_invert_t,
    ddim_sample_t,
    load_checkpoint,
    noise_mse_t,
    predict_x0_t,
    save_checkpoint,
)
from .errors import BackendFrozenViolation, NonFiniteLoss
from .guidance import GuidanceBackend, NegativePromptSet, contrastive_loss_t
from .instrumentation import gradient_steps


@dataclasses.dataclass
class Stage1Config:
    """Knobs for the Stage-1 fine-tune; defaults match full-scale operation."""

    steps: int = 1500
    lr: float = 2e-6
    lam: float = 0.5  # weight of the contrastive color term
    sample_steps: int = 50
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    start_mode: str = "invert"  # "invert" (deterministic) or "noise"
    cfg_scale: float = 1.0  # classifier-free guidance; 1.0 = off
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.start_mode not in ("invert", "noise"):
            raise ValueError(f"unknown start_mode {self.start_mode!r}")

    @classmethod
    def toy(cls, **overrides) -> "Stage1Config":
        """Desk-scale settings for the toy backend."""
        base = dict(steps=300, lr=1e-3, lam=0.5, sample_steps=20, seed=0)
        base.update(overrides)
        return cls(**base)


class _CfgScaledBackend:
    """Denoise wrapper blending conditional and unconditional predictions."""

    def __init__(self, backend: DiffusionBackend, uncond: torch.Tensor, scale: float):
        self._backend = backend
        self._uncond = uncond
        self._scale = scale
        self.schedule = backend.schedule
        self.latent_shape = backend.latent_shape
        self.embedding_dim = backend.embedding_dim

    def denoise_t(self, z_t, t, emb):
        cond = self._backend.denoise_t(z_t, t, emb)
        if self._scale == 1.0:
            return cond
        uncond = self._backend.denoise_t(z_t, t, self._uncond)
        return uncond + self._scale * (cond - uncond)


def _check_frozen(backend: DiffusionBackend) -> None:
    for p in backend.frozen_parameters():
        if p.grad is not None and float(p.grad.abs().max()) != 0.0:
            raise BackendFrozenViolation("encoder/decoder parameters received gradients")


def sample_primary(
    backend: DiffusionBackend,
    gray: GrayImage,
    emb: torch.Tensor,
    sample_steps: int,
    start_mode: str = "invert",
    seed: int = 0,
    cfg_scale: float = 1.0,
    start_noise: torch.Tensor | None = None,
    start_noise_scale: float = 0.0,
) -> ColorImage:
    """Invert the grayscale latent under emb, sample back, decode.

    With start_noise (a unit-Gaussian tensor), the start latent becomes the
    variance-preserving blend (z_T + scale * noise) / sqrt(1 + scale^2); the
    blend is what lets the fine-tuned prior act and seeds diversify outputs.
    """
    x = backend.to_tensor(replicate_gray(gray).data).unsqueeze(0)
    with torch.no_grad():
        z0 = backend.encode_t(x)
        runner = backend
        if cfg_scale != 1.0:
            uncond = torch.zeros_like(emb)
            runner = _CfgScaledBackend(backend, uncond, cfg_scale)
        if start_mode == "invert":
            z_T = ddim_invert_t(runner, z0, emb, sample_steps)
        else:
            gen = torch.Generator().manual_seed(seed)
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            z_T = add_noise_t(z0, eps, backend.schedule.T, backend.schedule)
        if start_noise is not None and start_noise_scale > 0.0:
            z_T = (z_T + start_noise_scale * start_noise) / math.sqrt(
                1.0 + start_noise_scale**2
            )
        z_out = ddim_sample_t(runner, z_T, emb, sample_steps)
        img = backend.decode_t(z_out)[0]
    return ColorImage(np.clip(img.double().numpy(), 0.0, 1.0))


def colorize_stage1(
    gray: GrayImage,
    context_prompt: str,
    negatives: NegativePromptSet,
    cfg: Stage1Config,
    backend: DiffusionBackend,
    guidance: GuidanceBackend,
    on_step=None,
) -> tuple[ColorImage, DiffusionBackend, list[dict]]:
    """Fine-tune the denoiser on one grayscale image, then sample x_pri.

    Mutates (fine-tunes) the given backend in place and returns it as the
    fine-tuned reference, together with the sampled primary image and the
    per-step training log (step / ldm / cst / combined records).

    Raises NonFiniteLoss with step diagnostics when the objective diverges,
    and BackendFrozenViolation if encoder/decoder parameters ever receive a
    gradient.
    """
    if not context_prompt.strip():
        raise ValueError("context prompt must be non-empty")

    schedule = backend.schedule
    emb_np = guidance.encode_text(context_prompt)
    emb_np.require_dim(backend.embedding_dim)
    emb = backend.to_tensor(emb_np.vector).unsqueeze(0)
    e_plus = backend.to_tensor(emb_np.vector)
    neg_embs = [
        backend.to_tensor(n.vector) for n in negatives.embeddings(guidance)
    ]

    x = backend.to_tensor(replicate_gray(gray).data).unsqueeze(0)
    with torch.no_grad():
        z0 = backend.encode_t(x)

    for p in backend.frozen_parameters():
        p.requires_grad_(False)

    opt = torch.optim.Adam(
        backend.denoiser_parameters(),
        lr=cfg.lr,
        betas=cfg.adam_betas,
        eps=cfg.adam_eps,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    log: list[dict] = []

    for step in range(cfg.steps):
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        z_t = add_noise_t(z0, eps, t, schedule)
        eps_hat = backend.denoise_t(z_t, t, emb)
        ldm = noise_mse_t(eps, eps_hat)

        if cfg.lam > 0:
            z0_hat = predict_x0_t(z_t, eps_hat, t, schedule)
            x0_hat = backend.decode_t(z0_hat)[0]
            e_img = guidance.encode_image_t(x0_hat)
            cst = contrastive_loss_t(e_img, e_plus, neg_embs)
        else:
            cst = torch.zeros((), dtype=z0.dtype)

        loss = ldm + cfg.lam * cst
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"combined loss became non-finite at step {step}",
                step=step,
                diagnostics={"ldm": float(ldm.detach()), "cst": float(cst.detach()), "t": t},
            )

        opt.zero_grad()
        loss.backward()
        _check_frozen(backend)
        opt.step()
        gradient_steps.increment()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            record = {
                "step": step,
                "ldm": float(ldm.detach()),
                "cst": float(cst.detach()),
                "combined": float(loss.detach()),
            }
            log.append(record)
            if on_step:
                on_step(record)

    x_pri = sample_primary(
        backend,
        gray,
        emb,
        cfg.sample_steps,
        start_mode=cfg.start_mode,
        seed=cfg.seed,
        cfg_scale=cfg.cfg_scale,
    )
    return x_pri, backend, log


def evaluate_contrastive_term(
    backend: DiffusionBackend,
    guidance: GuidanceBackend,
    gray: GrayImage,
    context_prompt: str,
    negatives: NegativePromptSet,
    n_probes: int = 32,
    seed: int = 1234,
) -> float:
    """Mean contrastive loss over fixed (t, eps) probes via the x0-decode path.

    A stable, deterministic readout of how strongly the current model's
    denoised estimates carry color; used to compare guided vs unguided runs.
    """
    schedule = backend.schedule
    emb_np = guidance.encode_text(context_prompt)
    emb = backend.to_tensor(emb_np.vector).unsqueeze(0)
    e_plus = backend.to_tensor(emb_np.vector)
    neg_embs = [
        backend.to_tensor(n.vector) for n in negatives.embeddings(guidance)
    ]
    x = backend.to_tensor(replicate_gray(gray).data).unsqueeze(0)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        z0 = backend.encode_t(x)
        for _ in range(n_probes):
            t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            z_t = add_noise_t(z0, eps, t, schedule)
            eps_hat = backend.denoise_t(z_t, t, emb)
            z0_hat = predict_x0_t(z_t, eps_hat, t, schedule)
            x0_hat = backend.decode_t(z0_hat)[0]
            e_img = guidance.encode_image_t(x0_hat)
            total += float(contrastive_loss_t(e_img, e_plus, neg_embs))
    return total / n_probes


def snapshot_backend(backend: DiffusionBackend, path):
    """Persist the fine-tuned backend; lossless round trip of all tensors."""
    return save_checkpoint(backend, path)


def restore_backend(path) -> DiffusionBackend:
    return load_checkpoint(path)


def encode_gray_latent(backend: DiffusionBackend, gray: GrayImage) -> Latent:
    return backend.encode(replicate_gray(gray))
