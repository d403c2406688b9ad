from .backend import (
    DiffusionBackend,
    Latent,
    load_checkpoint,
    register_backend,
    save_checkpoint,
)
from .ddim import (
    add_noise,
    add_noise_t,
    ddim_invert,
    ddim_invert_t,
    ddim_sample,
    ddim_sample_t,
    ldm_loss,
    ldm_loss_t,
    noise_mse_t,
    predict_x0_t,
)
from .schedule import NoiseSchedule, make_schedule, sample_step_grid
from .toy import ToyBackend, build_toy_backend, default_cache_dir

__all__ = [
    "DiffusionBackend",
    "Latent",
    "NoiseSchedule",
    "ToyBackend",
    "add_noise",
    "add_noise_t",
    "build_toy_backend",
    "ddim_invert",
    "ddim_invert_t",
    "ddim_sample",
    "ddim_sample_t",
    "default_cache_dir",
    "ldm_loss",
    "ldm_loss_t",
    "load_checkpoint",
    "make_schedule",
    "noise_mse_t",
    "predict_x0_t",
    "register_backend",
    "sample_step_grid",
    "save_checkpoint",
]
