"""
High-level generation facade: checkpoint in, material maps out.

``MaterialGenerator`` bundles a trained denoiser with its noise schedule and exposes the
operations the CLI offers: sampling maps for a photo crop and/or a prompt, tiling with noise
rolling, and bicubic ×2 upsampling.

Usage:
    ```python
    from matstack import MaterialGenerator, SamplerConfig, FrameMode

    generator = MaterialGenerator.from_checkpoint("run/latest.ckpt")
    result = generator.generate(
        FrameMode.IMAGE_COND, image=crop, prompt="red brick wall", sampler_config=SamplerConfig()
    )
    big = generator.upsample(result.maps)
    ```
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from .ddim_sampler import SampleCondition, StepHook, ddim_sample
from .diffusion_process import NoiseSchedule, schedule_from_config
from .dit_model import MaterialDiT
from .material_maps import (
    FrameMode,
    FrameStack,
    MaterialMaps,
    MaterialMask,
    decode_normal,
    encode_normal,
    unpack_frames,
)
from .model_checkpoint import load_checkpoint
from .run_config import DiffusionConfig, SamplerConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
UPSAMPLER = "bicubic-x2"


@dataclass(frozen=True)
class GenerationResult:
    maps: MaterialMaps
    mask: MaterialMask
    stack: FrameStack
    image: Optional[np.ndarray] = None


def renormalize_normals(maps: MaterialMaps) -> MaterialMaps:
    normal = encode_normal(decode_normal(maps.normal.astype(np.float64)))
    return MaterialMaps(
        albedo=maps.albedo,
        normal=normal.astype(maps.albedo.dtype),
        roughness=maps.roughness,
        height=maps.height,
        metallic=maps.metallic,
    )


def tile_maps(maps: MaterialMaps, rows: int, cols: int) -> MaterialMaps:
    """Stitch a rows×cols grid by wrap duplication."""
    if rows < 1 or cols < 1:
        raise ValueError(f"Tile grid must be at least 1x1, got {rows}x{cols}")

    def tile(values: np.ndarray) -> np.ndarray:
        reps = (rows, cols) + (1,) * (values.ndim - 2)
        return np.tile(values, reps)

    return maps.map(tile)


def seam_ratio(image: np.ndarray) -> float:
    """Mean |∇| across the wrapped border divided by the mean interior |∇|.

    Values near 1 mean the wrap seam is as smooth as the interior.
    """
    values = np.asarray(image, dtype=np.float64)
    if values.ndim == 3:
        values = values.mean(axis=-1)
    interior = np.concatenate(
        [np.abs(np.diff(values, axis=1)).ravel(), np.abs(np.diff(values, axis=0)).ravel()]
    )
    border = np.concatenate(
        [np.abs(values[:, 0] - values[:, -1]), np.abs(values[0, :] - values[-1, :])]
    )
    interior_mean = float(interior.mean())
    border_mean = float(border.mean())
    if interior_mean == 0.0:
        return 1.0 if border_mean == 0.0 else math.inf
    return border_mean / interior_mean


def _bicubic(values: np.ndarray, size: int) -> np.ndarray:
    def resize(channel: np.ndarray) -> np.ndarray:
        img = Image.fromarray(channel.astype(np.float32))
        return np.asarray(img.resize((size, size), Image.Resampling.BICUBIC), dtype=np.float32)

    if values.ndim == 2:
        out = resize(values)
    else:
        out = np.stack([resize(values[..., c]) for c in range(values.shape[-1])], axis=-1)
    return np.clip(out, 0.0, 1.0)


def upsample_maps(maps: MaterialMaps, factor: int = 2) -> MaterialMaps:
    """Bicubic upsampling by an integer factor; normals are renormalized afterwards."""
    if factor < 1:
        raise ValueError(f"Upsampling factor must be positive, got {factor}")
    size = maps.resolution * factor
    return renormalize_normals(maps.map(lambda v: _bicubic(np.asarray(v), size)))


class MaterialGenerator:
    """A trained denoiser plus the schedule it was trained with."""

    def __init__(self, model: MaterialDiT, diffusion_config: DiffusionConfig):
        self.model = model.eval()
        self.diffusion_config = diffusion_config
        self.schedule: NoiseSchedule = schedule_from_config(diffusion_config)

    @classmethod
    def from_checkpoint(cls, path: PathLike) -> "MaterialGenerator":
        checkpoint = load_checkpoint(path)
        logger.info(f"Loaded generator from {path} (step {checkpoint.step})")
        return cls(checkpoint.to_model(), checkpoint.diffusion_config)

    @property
    def resolution(self) -> int:
        return self.model.config.resolution

    def generate(
        self,
        mode: FrameMode,
        image: Optional[np.ndarray] = None,
        mask: Optional[MaterialMask] = None,
        prompt: str = "",
        sampler_config: Optional[SamplerConfig] = None,
        step_hook: Optional[StepHook] = None,
    ) -> GenerationResult:
        """Sample one material; an image with a prompt is dual conditioning."""
        sampler_config = sampler_config or SamplerConfig()
        condition = SampleCondition(
            image=None if image is None else np.asarray(image, dtype=np.float32),
            mask=mask,
            prompt=prompt,
        )
        stack = ddim_sample(
            self.model,
            condition,
            mode,
            self.schedule,
            sampler_config,
            step_hook=step_hook,
            resolution=self.resolution,
            dtype=torch.float32,
        )
        maps, generated_mask, stack_image = unpack_frames(stack)
        return GenerationResult(
            maps=renormalize_normals(maps),
            mask=MaterialMask(values=generated_mask.values),
            stack=stack,
            image=stack_image,
        )

    def tile(
        self,
        mode: FrameMode,
        rows: int,
        cols: int,
        image: Optional[np.ndarray] = None,
        prompt: str = "",
        sampler_config: Optional[SamplerConfig] = None,
        roll: bool = True,
    ) -> tuple[MaterialMaps, float]:
        """Generate once (noise rolling on by default) and stitch a rows×cols grid.

        Returns the stitched maps and the albedo seam ratio of the single tile.
        """
        sampler_config = (sampler_config or SamplerConfig()).model_copy(update={"roll": roll})
        result = self.generate(mode, image=image, prompt=prompt, sampler_config=sampler_config)
        ratio = seam_ratio(result.maps.albedo)
        logger.info(f"Tiled {rows}x{cols}; seam ratio {ratio:.3f}")
        return tile_maps(result.maps, rows, cols), ratio

    @staticmethod
    def upsample(maps: MaterialMaps, factor: int = 2) -> MaterialMaps:
        return upsample_maps(maps, factor)
