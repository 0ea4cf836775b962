"""Noise schedules, partial forward noising and the generated-frames ε objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import ConfigurationError, DimensionError
from .run_config import DiffusionConfig

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
LINEAR_BETA_RANGE = (1e-4, 0.02)

# (x_t, prompts, t, clean_flags) -> ε for the generated frames, or for all frames
Denoiser = Callable[[torch.Tensor, Sequence[str], torch.Tensor, Sequence[bool]], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step β and ᾱ = Π(1 − β) tables, float64."""

    kind: str
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)

    def sqrt_alpha_bar(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(self.alpha_bar[t.cpu().numpy()]), dtype=like.dtype)

    def sqrt_one_minus_alpha_bar(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(1.0 - self.alpha_bar[t.cpu().numpy()]), dtype=like.dtype)


def make_schedule(kind: str, num_timesteps: int) -> NoiseSchedule:
    """Build a ``cosine`` or ``linear`` schedule with ``num_timesteps`` ≥ 2 steps."""
    if num_timesteps < 2:
        raise ConfigurationError(f"A schedule needs at least 2 steps, got {num_timesteps}")
    if kind == "cosine":
        steps = np.arange(num_timesteps + 1, dtype=np.float64) / num_timesteps
        f = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2.0) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], MAX_BETA)
    elif kind == "linear":
        betas = np.linspace(*LINEAR_BETA_RANGE, num_timesteps, dtype=np.float64)
    else:
        raise ConfigurationError(f"Unknown noise schedule: {kind}")
    alpha_bar = np.cumprod(1.0 - betas)
    if not np.all(np.diff(alpha_bar) < 0):
        raise ConfigurationError(f"{kind} schedule with T={num_timesteps} is not strictly decreasing")
    return NoiseSchedule(kind=kind, betas=betas, alpha_bar=alpha_bar)


def schedule_from_config(config: DiffusionConfig) -> NoiseSchedule:
    return make_schedule(config.schedule, config.num_timesteps)


def generated_indices(clean_flags: Sequence[bool]) -> list[int]:
    return [i for i, flag in enumerate(clean_flags) if not flag]


def _broadcast(values: torch.Tensor, ndim: int) -> torch.Tensor:
    return values.reshape(-1, *([1] * (ndim - 1)))


def forward_noise(
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    clean_flags: Sequence[bool],
) -> torch.Tensor:
    """Noise the generated frames of ``x0`` (B, F, R, R, 3) to step ``t``; clean frames are copied.

    ``eps`` covers only the generated frames: (B, F_gen, R, R, 3).
    """
    if len(clean_flags) != x0.shape[1]:
        raise DimensionError(f"{len(clean_flags)} clean flags for {x0.shape[1]} frames")
    gen = generated_indices(clean_flags)
    expected = (x0.shape[0], len(gen), *x0.shape[2:])
    if tuple(eps.shape) != expected:
        raise DimensionError(f"Noise has shape {tuple(eps.shape)}, expected {expected}")
    t = torch.as_tensor(t).reshape(-1)
    if torch.any(t < 0) or torch.any(t >= schedule.num_timesteps):
        raise ValueError(f"Timesteps {t.tolist()} outside [0, {schedule.num_timesteps})")
    if t.numel() == 1 and x0.shape[0] > 1:
        t = t.expand(x0.shape[0])

    a = _broadcast(schedule.sqrt_alpha_bar(t, x0), x0.ndim)
    s = _broadcast(schedule.sqrt_one_minus_alpha_bar(t, x0), x0.ndim)
    x_t = x0.clone()
    x_t[:, gen] = a * x0[:, gen] + s * eps
    return x_t


def select_generated(prediction: torch.Tensor, clean_flags: Sequence[bool]) -> torch.Tensor:
    """Accept predictions for all frames or for the generated frames only."""
    gen = generated_indices(clean_flags)
    if prediction.shape[1] == len(clean_flags) and len(gen) != len(clean_flags):
        return prediction[:, gen]
    if prediction.shape[1] != len(gen):
        raise DimensionError(
            f"Prediction covers {prediction.shape[1]} frames, expected {len(gen)} or {len(clean_flags)}"
        )
    return prediction


def training_loss(
    denoiser: Denoiser,
    x0: torch.Tensor,
    prompts: Sequence[str],
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    clean_flags: Sequence[bool],
) -> torch.Tensor:
    """Mean squared error between ε and the prediction, over generated frames only."""
    x_t = forward_noise(x0, t, eps, schedule, clean_flags)
    prediction = select_generated(denoiser(x_t, prompts, t, clean_flags), clean_flags)
    return torch.mean((prediction - eps) ** 2)


Offset = Tuple[int, int]


def noise_roll(
    frames: Union[torch.Tensor, np.ndarray], offset: Offset
) -> Union[torch.Tensor, np.ndarray]:
    """Cyclically shift every frame of (..., R, R, C) by (dy, dx), taken mod R."""
    h, w = frames.shape[-3], frames.shape[-2]
    shifts = (int(offset[0]) % h, int(offset[1]) % w)
    if isinstance(frames, np.ndarray):
        return np.roll(frames, shifts, axis=(-3, -2))
    return torch.roll(frames, shifts=shifts, dims=(-3, -2))


def noise_unroll(
    frames: Union[torch.Tensor, np.ndarray], offset: Offset
) -> Union[torch.Tensor, np.ndarray]:
    return noise_roll(frames, (-int(offset[0]), -int(offset[1])))
