"""Material maps, masks and the frame stacking that turns them into a diffusion "video"."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ModeError, StructureError

logger = logging.getLogger(__name__)

# Frame order inside every stack. The image slot is absent in TextOnly stacks.
FRAME_ORDER = ("image", "mask", "albedo", "normal", "roughness", "height", "metallic")
MAP_NAMES = ("albedo", "normal", "roughness", "height", "metallic")
SCALAR_MAPS = ("roughness", "height", "metallic")

NORMAL_LENGTH_TOLERANCE = 1e-2
UNIT_TOLERANCE = 1e-6


class FrameMode(str, Enum):
    """How a stack is conditioned."""

    IMAGE_COND = "image"
    TEXT_ONLY = "text"
    MASK_INPUT_ABLATION = "mask-input"

    @property
    def frame_count(self) -> int:
        return 6 if self is FrameMode.TEXT_ONLY else 7

    @property
    def clean_flags(self) -> Tuple[bool, ...]:
        if self is FrameMode.IMAGE_COND:
            return (True,) + (False,) * 6
        if self is FrameMode.MASK_INPUT_ABLATION:
            return (True, True) + (False,) * 5
        return (False,) * 6

    @property
    def generated_count(self) -> int:
        return sum(not flag for flag in self.clean_flags)


def encode_normal(normals: np.ndarray) -> np.ndarray:
    """Encode unit normals (..., 3) into RGB with c = (n + 1) / 2."""
    normals = np.asarray(normals)
    if not np.all(np.isfinite(normals)):
        raise ValueError("Normal field contains non-finite values")
    return (normals + 1.0) * 0.5


def decode_normal(rgb: np.ndarray) -> np.ndarray:
    """Decode RGB (..., 3) into unit normals; z is forced non-negative before renormalizing."""
    rgb = np.asarray(rgb)
    if not np.all(np.isfinite(rgb)):
        raise ValueError("Normal map contains non-finite values")
    n = rgb * 2.0 - 1.0
    n = np.concatenate([n[..., :2], np.maximum(n[..., 2:3], 0.0)], axis=-1)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    flat = np.zeros_like(n)
    flat[..., 2] = 1.0
    safe = np.where(length > 0, length, 1.0)
    return np.where(length > 0, n / safe, flat)


@dataclass(frozen=True)
class MaterialMaps:
    """The five SVBRDF maps of one material at a square resolution R.

    RGB maps are (R, R, 3), scalar maps (R, R); every value lies in [0, 1].
    ``albedo`` is linear, ``normal`` holds the (n + 1) / 2 encoding.
    """

    albedo: np.ndarray
    normal: np.ndarray
    roughness: np.ndarray
    height: np.ndarray
    metallic: np.ndarray

    @property
    def resolution(self) -> int:
        return int(self.albedo.shape[0])

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in MAP_NAMES}

    def validate(self) -> None:
        """Check shared resolution, ranges and unit-length normals."""
        r = self.resolution
        if r <= 0:
            raise DimensionError("Material maps must have a positive resolution")
        for name in ("albedo", "normal"):
            if getattr(self, name).shape != (r, r, 3):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected {(r, r, 3)}"
                )
        for name in SCALAR_MAPS:
            if getattr(self, name).shape != (r, r):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected {(r, r)}"
                )
        for name in MAP_NAMES:
            values = getattr(self, name)
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{name} contains non-finite values")
            if values.min() < 0.0 or values.max() > 1.0:
                raise ValueError(f"{name} has values outside [0, 1]")
        length = np.linalg.norm(self.normal.astype(np.float64) * 2.0 - 1.0, axis=-1)
        if np.any(np.abs(length - 1.0) > NORMAL_LENGTH_TOLERANCE):
            raise ValueError("normal map does not decode to unit vectors")

    def map(self, fn) -> "MaterialMaps":
        """Apply ``fn`` to every map and return a new instance."""
        return MaterialMaps(**{name: fn(getattr(self, name)) for name in MAP_NAMES})

    @classmethod
    def constant(
        cls,
        resolution: int,
        albedo=(0.5, 0.5, 0.5),
        roughness: float = 0.5,
        height: float = 0.5,
        metallic: float = 0.0,
        dtype=np.float32,
    ) -> "MaterialMaps":
        r = resolution
        return cls(
            albedo=np.broadcast_to(np.asarray(albedo, dtype=dtype), (r, r, 3)).copy(),
            normal=np.broadcast_to(np.asarray((0.5, 0.5, 1.0), dtype=dtype), (r, r, 3)).copy(),
            roughness=np.full((r, r), roughness, dtype=dtype),
            height=np.full((r, r), height, dtype=dtype),
            metallic=np.full((r, r), metallic, dtype=dtype),
        )


@dataclass(frozen=True)
class MaterialMask:
    """Dominant-material mask, one value in [0, 1] per texel."""

    values: np.ndarray

    @property
    def resolution(self) -> int:
        return int(self.values.shape[0])

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    @classmethod
    def full(cls, resolution: int, dtype=np.float32) -> "MaterialMask":
        return cls(values=np.ones((resolution, resolution), dtype=dtype))


@dataclass(frozen=True)
class Prompt:
    """Text condition; may be empty."""

    text: str = ""


@dataclass(frozen=True)
class FrameStack:
    """Ordered RGB frames (F, R, R, 3) with per-frame clean flags."""

    frames: np.ndarray
    mode: FrameMode
    clean_flags: Tuple[bool, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.clean_flags:
            object.__setattr__(self, "clean_flags", self.mode.clean_flags)

    @property
    def resolution(self) -> int:
        return int(self.frames.shape[1])

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise StructureError(f"Frames must be (F, R, R, 3), got {self.frames.shape}")
        if self.frames.shape[0] != self.mode.frame_count:
            raise StructureError(
                f"{self.mode.value} stacks hold {self.mode.frame_count} frames, "
                f"got {self.frames.shape[0]}"
            )
        if tuple(self.clean_flags) != self.mode.clean_flags:
            raise StructureError(f"Clean flags {self.clean_flags} do not match mode {self.mode.value}")


def _replicate(channel: np.ndarray) -> np.ndarray:
    return np.repeat(channel[..., None], 3, axis=-1)


def _collapse(frame: np.ndarray) -> np.ndarray:
    c0, c1, c2 = frame[..., 0], frame[..., 1], frame[..., 2]
    equal = (c0 == c1) & (c1 == c2)
    return np.where(equal, c0, frame.mean(axis=-1).astype(frame.dtype))


def pack_frames(
    maps: MaterialMaps,
    mask: Optional[MaterialMask],
    image: Optional[np.ndarray],
    mode: FrameMode,
) -> FrameStack:
    """Stack [image?, mask, albedo, normal, roughness, height, metallic] as RGB frames."""
    mode = FrameMode(mode)
    r = maps.resolution
    dtype = maps.albedo.dtype

    if mode is FrameMode.TEXT_ONLY:
        if image is not None:
            raise ModeError("An input image cannot be stacked in text-only mode")
        if mask is not None and not np.all(mask.values == 1):
            raise ModeError("Text-only stacks carry the white placeholder, not a mask")
        mask_frame = np.ones((r, r, 3), dtype=dtype)
    else:
        if image is None:
            raise ModeError(f"Mode {mode.value} requires an input image")
        if mask is None:
            raise ModeError(f"Mode {mode.value} requires a mask")
        if mask.resolution != r or mask.values.shape != (r, r):
            raise DimensionError(f"Mask resolution {mask.values.shape} != maps {r}")
        mask_frame = _replicate(mask.values.astype(dtype))

    if image is not None and np.asarray(image).shape != (r, r, 3):
        raise DimensionError(f"Image shape {np.asarray(image).shape} != {(r, r, 3)}")
    for name in MAP_NAMES:
        expected = (r, r, 3) if name in ("albedo", "normal") else (r, r)
        if getattr(maps, name).shape != expected:
            raise DimensionError(f"{name} shape {getattr(maps, name).shape} != {expected}")

    frames = [] if image is None else [np.asarray(image, dtype=dtype)]
    frames.append(mask_frame)
    frames.append(maps.albedo)
    frames.append(maps.normal)
    frames.extend(_replicate(getattr(maps, name)) for name in SCALAR_MAPS)
    return FrameStack(frames=np.stack(frames).astype(dtype, copy=False), mode=mode)


def unpack_frames(
    stack: FrameStack,
) -> Tuple[MaterialMaps, MaterialMask, Optional[np.ndarray]]:
    """Inverse of pack_frames; scalar maps come back as the mean of their channels."""
    stack.validate()
    frames = np.clip(stack.frames, 0.0, 1.0)
    offset = 0 if stack.mode is FrameMode.TEXT_ONLY else 1
    image = None if offset == 0 else frames[0]
    mask = MaterialMask(values=_collapse(frames[offset]))
    albedo, normal, roughness, height, metallic = frames[offset + 1 : offset + 6]
    maps = MaterialMaps(
        albedo=albedo,
        normal=normal,
        roughness=_collapse(roughness),
        height=_collapse(height),
        metallic=_collapse(metallic),
    )
    return maps, mask, image
