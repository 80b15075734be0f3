"""Toy-scale diffusion laboratory: full-T, fewer-state, and per-timestep training."""

__version__ = "0.1.0"

from .dataset import ToyDistribution, gaussian_oracle_eps, sample_batch
from .denoiser import AdamState, DenoiserModel, adam_step, create_model, forward, loss_and_grad, time_embed
from .registry import ModelRegistry, load_registry, resolve, save_checkpoint
from .sampler import (
    SamplerSpec,
    sample,
    sample_ddim,
    sample_ddpm_full,
    sample_disentangled,
    sample_generalized_full,
    step_ddpm,
    step_generalized,
)
from .schedule import LatentSubsequence, NoiseSchedule, build_schedule, select_taus, sigma_ddpm, snr
from .trainer import (
    BudgetAllocation,
    RunConfig,
    allocate_budget,
    train_baseline,
    train_disentangled,
    train_fewer,
)

__all__ = [
    "AdamState",
    "BudgetAllocation",
    "DenoiserModel",
    "LatentSubsequence",
    "ModelRegistry",
    "NoiseSchedule",
    "RunConfig",
    "SamplerSpec",
    "ToyDistribution",
    "adam_step",
    "allocate_budget",
    "build_schedule",
    "create_model",
    "forward",
    "gaussian_oracle_eps",
    "load_registry",
    "loss_and_grad",
    "resolve",
    "sample",
    "sample_batch",
    "sample_ddim",
    "sample_ddpm_full",
    "sample_disentangled",
    "sample_generalized_full",
    "save_checkpoint",
    "select_taus",
    "sigma_ddpm",
    "snr",
    "step_ddpm",
    "step_generalized",
    "time_embed",
    "train_baseline",
    "train_disentangled",
    "train_fewer",
]
