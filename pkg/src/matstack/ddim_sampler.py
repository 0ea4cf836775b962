"""DDIM sampling over frame stacks, with optional noise rolling for tileable output."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .diffusion_process import (
    Denoiser,
    NoiseSchedule,
    generated_indices,
    noise_roll,
    noise_unroll,
    select_generated,
)
from .errors import ConditionError, ConfigurationError, DimensionError
from .material_maps import FrameMode, FrameStack, MaterialMask
from .procedural_materials import SEED_MASK
from .run_config import SamplerConfig

logger = logging.getLogger(__name__)

# hook(original_denoise, "denoise", step_index, x_t=..., t=..., clean_flags=..., condition=..., offset=...)
StepHook = Callable[..., torch.Tensor]

ROLL_STREAM = 1
NOISE_STREAM = 0


def ddim_timesteps(num_timesteps: int, steps: int) -> np.ndarray:
    """Descending, unique timesteps from T − 1 down to 0; ``steps=1`` gives ``[T − 1]``."""
    if steps < 1 or steps > num_timesteps:
        raise ConfigurationError(f"Sampler steps must lie in [1, {num_timesteps}], got {steps}")
    if steps == 1:
        return np.array([num_timesteps - 1], dtype=np.int64)
    return np.round(np.linspace(num_timesteps - 1, 0, steps)).astype(np.int64)


@dataclass(frozen=True)
class DDIMCoefficients:
    """Per-step update tables, float64.

    ``x_prev = sqrt(alpha_bar_prev)·x̂₀ + direction·ε̂ + sigma·z``
    """

    timesteps: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    sigma: np.ndarray
    direction: np.ndarray

    def __len__(self) -> int:
        return len(self.timesteps)

    def state_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Rewrite the update as ``w_x0·x̂₀ + w_xt·x_t`` (ε̂ eliminated)."""
        w_xt = self.direction / np.sqrt(1.0 - self.alpha_bar)
        w_x0 = np.sqrt(self.alpha_bar_prev) - w_xt * np.sqrt(self.alpha_bar)
        return w_x0, w_xt


def ddim_coefficients(
    schedule: NoiseSchedule, timesteps: Sequence[int], eta: float = 0.0
) -> DDIMCoefficients:
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"eta must lie in [0, 1], got {eta}")
    timesteps = np.asarray(timesteps, dtype=np.int64)
    alpha_bar = schedule.alpha_bar[timesteps]
    alpha_bar_prev = np.ones_like(alpha_bar)
    alpha_bar_prev[:-1] = schedule.alpha_bar[timesteps[1:]]
    sigma = eta * np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)) * np.sqrt(
        1.0 - alpha_bar / alpha_bar_prev
    )
    direction = np.sqrt(np.maximum(1.0 - alpha_bar_prev - sigma**2, 0.0))
    return DDIMCoefficients(
        timesteps=timesteps,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        sigma=sigma,
        direction=direction,
    )


@dataclass
class SampleCondition:
    """What the caller supplies; which fields are required depends on the mode."""

    image: Optional[np.ndarray] = None
    mask: Optional[MaterialMask] = None
    prompt: str = ""

    def check(self, mode: FrameMode) -> None:
        if mode is FrameMode.TEXT_ONLY:
            if self.image is not None:
                raise ConditionError("Text-only sampling takes no input image; use image mode with a prompt")
            if self.mask is not None:
                raise ConditionError("Text-only sampling generates its placeholder mask")
            return
        if self.image is None:
            raise ConditionError(f"Mode {mode.value} requires an input image")
        if mode is FrameMode.MASK_INPUT_ABLATION and self.mask is None:
            raise ConditionError("Mask-input sampling requires a mask")
        if mode is FrameMode.IMAGE_COND and self.mask is not None:
            raise ConditionError("Image mode generates the mask; pass it only in mask-input mode")

    def clean_frames(self, mode: FrameMode, dtype: torch.dtype) -> List[torch.Tensor]:
        """Frames that stay noise-free, in stack order."""
        frames = []
        if self.image is not None:
            frames.append(torch.as_tensor(np.asarray(self.image), dtype=dtype))
        if mode is FrameMode.MASK_INPUT_ABLATION and self.mask is not None:
            values = torch.as_tensor(np.asarray(self.mask.values), dtype=dtype)
            frames.append(values[..., None].expand(*values.shape, 3).clone())
        return frames


def _resolution(denoiser: Denoiser, condition: SampleCondition, resolution: Optional[int]) -> int:
    if condition.image is not None:
        image_res = int(np.asarray(condition.image).shape[0])
        if resolution is not None and resolution != image_res:
            raise DimensionError(f"Image is {image_res}px, sampler asked for {resolution}px")
        resolution = image_res
    if resolution is None:
        config = getattr(denoiser, "config", None)
        if config is None:
            raise DimensionError("Resolution is unknown: pass an image or an explicit resolution")
        resolution = int(config.resolution)
    return resolution


def ddim_sample(
    denoiser: Denoiser,
    condition: SampleCondition,
    mode: FrameMode,
    schedule: NoiseSchedule,
    sampler_config: SamplerConfig,
    step_hook: Optional[StepHook] = None,
    resolution: Optional[int] = None,
    dtype: Optional[torch.dtype] = None,
) -> FrameStack:
    """Run the sampler and return the full stack, clean frames included, clamped to [0, 1].

    Clean frames are re-asserted before every denoiser call and the update only touches
    generated frames. With ``roll`` on, a fresh offset per step shifts every frame before the
    forward pass and is undone after the update; the stochastic term is added afterwards in
    the unrolled frame.
    """
    mode = FrameMode(mode)
    condition.check(mode)
    r = _resolution(denoiser, condition, resolution)
    if condition.image is not None and np.asarray(condition.image).shape != (r, r, 3):
        raise DimensionError(f"Image shape {np.asarray(condition.image).shape} != {(r, r, 3)}")
    if condition.mask is not None and np.asarray(condition.mask.values).shape != (r, r):
        raise DimensionError(f"Mask shape {np.asarray(condition.mask.values).shape} != {(r, r)}")
    if dtype is None:
        dtype = torch.float64 if (
            condition.image is not None and np.asarray(condition.image).dtype == np.float64
        ) else torch.float32

    flags = mode.clean_flags
    gen = generated_indices(flags)
    clean = [i for i, flag in enumerate(flags) if flag]
    clean_frames = condition.clean_frames(mode, dtype)
    coeffs = ddim_coefficients(
        schedule, ddim_timesteps(schedule.num_timesteps, sampler_config.steps), sampler_config.eta
    )
    max_offset = sampler_config.roll_max_offset or r

    noise_gen = torch.Generator().manual_seed(
        int(np.random.SeedSequence([sampler_config.seed & SEED_MASK, NOISE_STREAM]).generate_state(1)[0])
    )
    roll_rng = np.random.default_rng([sampler_config.seed & SEED_MASK, ROLL_STREAM])

    x = torch.zeros((1, len(flags), r, r, 3), dtype=dtype)
    x[:, gen] = torch.randn((1, len(gen), r, r, 3), generator=noise_gen, dtype=dtype)
    prompts = [condition.prompt]

    def denoise(x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return select_generated(denoiser(x_t, prompts, t, flags), flags)

    logger.debug(
        f"DDIM sampling: mode={mode.value}, steps={len(coeffs)}, eta={sampler_config.eta}, "
        f"roll={sampler_config.roll}"
    )
    for index, t in enumerate(coeffs.timesteps):
        for slot, frame in zip(clean, clean_frames):
            x[0, slot] = frame

        offset = (0, 0)
        if sampler_config.roll:
            offset = tuple(int(v) for v in roll_rng.integers(0, max_offset, size=2))
        x_in = noise_roll(x, offset)
        t_batch = torch.full((1,), int(t), dtype=torch.long)
        with torch.no_grad():
            if step_hook is not None:
                eps = step_hook(
                    denoise,
                    "denoise",
                    index,
                    x_t=x_in,
                    t=t_batch,
                    clean_flags=flags,
                    condition=clean_frames,
                    offset=offset,
                )
            else:
                eps = denoise(x_in, t_batch)
        eps = eps.to(dtype)

        x_gen = x_in[:, gen]
        x0_hat = (x_gen - float(np.sqrt(1.0 - coeffs.alpha_bar[index])) * eps) / float(
            np.sqrt(coeffs.alpha_bar[index])
        )
        updated = x_in.clone()
        updated[:, gen] = (
            float(np.sqrt(coeffs.alpha_bar_prev[index])) * x0_hat
            + float(coeffs.direction[index]) * eps
        )
        x = noise_unroll(updated, offset)
        if coeffs.sigma[index] > 0:
            z = torch.randn((1, len(gen), r, r, 3), generator=noise_gen, dtype=dtype)
            x[:, gen] = x[:, gen] + float(coeffs.sigma[index]) * z

    for slot, frame in zip(clean, clean_frames):
        x[0, slot] = frame
    frames = torch.clamp(x[0], 0.0, 1.0).cpu().numpy()
    return FrameStack(frames=frames, mode=mode)

