"""Forward noising, the denoising training loss, and deterministic DDIM traversal.

All operations exist in two layers: torch-level `*_t` functions used inside
training loops (differentiable, batched), and numpy-facing wrappers over the
`Latent` / `TextEmbedding` value types.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..embedding import TextEmbedding
from ..errors import ShapeMismatch
from .backend import DiffusionBackend, Latent
from .schedule import NoiseSchedule, sample_step_grid


# -- closed-form forward noising -------------------------------------------------


def add_noise_t(
    z0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def add_noise(z0: Latent, eps: Latent, t: int, schedule: NoiseSchedule) -> Latent:
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    ab = schedule.alpha_bar(t)
    return Latent(np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data)


def predict_x0_t(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """One-step clean-latent estimate: (z_t - sqrt(1-abar) eps_hat) / sqrt(abar)."""
    ab = schedule.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


# -- denoising loss ---------------------------------------------------------------


def noise_mse_t(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all latent elements (the loss reduction)."""
    if eps.shape != eps_hat.shape:
        raise ShapeMismatch(
            f"eps shape {tuple(eps.shape)} != prediction shape {tuple(eps_hat.shape)}"
        )
    return torch.mean((eps - eps_hat) ** 2)


def ldm_loss_t(
    backend: DiffusionBackend,
    z0: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    emb: torch.Tensor,
) -> torch.Tensor:
    """Denoising loss at one sampled (t, eps): ||eps - eps_theta(z_t, t, emb)||^2 mean."""
    z_t = add_noise_t(z0, eps, t, backend.schedule)
    eps_hat = backend.denoise_t(z_t, t, emb)
    return noise_mse_t(eps, eps_hat)


def ldm_loss(
    backend: DiffusionBackend, z0: Latent, t: int, eps: Latent, emb: TextEmbedding
) -> float:
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    emb.require_dim(backend.embedding_dim)
    z = backend.to_tensor(z0.data).unsqueeze(0)
    e = backend.to_tensor(eps.data).unsqueeze(0)
    c = backend.to_tensor(emb.vector).unsqueeze(0)
    with torch.no_grad():
        return float(ldm_loss_t(backend, z, t, e, c))


# -- deterministic DDIM traversal ---------------------------------------------------


def _ddim_step(
    z: torch.Tensor,
    eps_hat: torch.Tensor,
    t_from: int,
    t_to: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Move z from timestep t_from to t_to along the deterministic DDIM map.

    Shared by sampling (t_to < t_from) and inversion (t_to > t_from):
    reproject the x0 estimate at the target noise level.
    """
    ab_from = schedule.alpha_bar(t_from)
    ab_to = schedule.alpha_bar(t_to)
    x0 = (z - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * eps_hat


def ddim_invert_t(
    backend: DiffusionBackend,
    z0: torch.Tensor,
    emb: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Deterministic forward traversal 0 -> T over an even step grid."""
    grid = sample_step_grid(backend.schedule.T, steps)
    z = z0
    prev = 0
    for t in grid:
        eps_hat = backend.denoise_t(z, max(prev, 1), emb)
        z = _ddim_step(z, eps_hat, prev, t, backend.schedule)
        prev = t
    return z


def ddim_sample_t(
    backend: DiffusionBackend,
    z_T: torch.Tensor,
    emb: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Deterministic reverse traversal T -> 0 over the same even step grid."""
    grid = sample_step_grid(backend.schedule.T, steps)
    z = z_T
    for i in range(len(grid) - 1, -1, -1):
        t = grid[i]
        t_prev = grid[i - 1] if i > 0 else 0
        eps_hat = backend.denoise_t(z, t, emb)
        z = _ddim_step(z, eps_hat, t, t_prev, backend.schedule)
    return z


def ddim_invert(
    backend: DiffusionBackend, z0: Latent, emb: TextEmbedding, steps: int
) -> Latent:
    z0.require_shape(backend.latent_shape)
    emb.require_dim(backend.embedding_dim)
    z = backend.to_tensor(z0.data).unsqueeze(0)
    e = backend.to_tensor(emb.vector).unsqueeze(0)
    with torch.no_grad():
        out = ddim_invert_t(backend, z, e, steps)
    return Latent(out[0].double().numpy())


def ddim_sample(
    backend: DiffusionBackend,
    z_T: Latent,
    emb: TextEmbedding,
    steps: int,
    eta: float = 0.0,
) -> Latent:
    """eta=0 (deterministic) is the only supported mode."""
    if eta != 0.0:
        raise ValueError("only deterministic DDIM (eta=0) is supported")
    z_T.require_shape(backend.latent_shape)
    emb.require_dim(backend.embedding_dim)
    z = backend.to_tensor(z_T.data).unsqueeze(0)
    e = backend.to_tensor(emb.vector).unsqueeze(0)
    with torch.no_grad():
        out = ddim_sample_t(backend, z, e, steps)
    return Latent(out[0].double().numpy())
