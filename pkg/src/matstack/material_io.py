"""PNG persistence for crops, masks and material maps.

Albedo maps and rendered crops are stored sRGB-encoded; every other map is stored linear.
All files are 8-bit PNGs.
"""

from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from einops import reduce
from PIL import Image

from .material_maps import (
    MAP_NAMES,
    MaterialMaps,
    MaterialMask,
    decode_normal,
    encode_normal,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SRGB_MAPS = frozenset(["albedo"])


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1.0 / 2.4) - 0.055,
    )


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(
        encoded <= 0.04045,
        encoded / 12.92,
        np.power((encoded + 0.055) / 1.055, 2.4),
    )


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: PathLike, values: np.ndarray, srgb: bool = False) -> Path:
    """Write an (H, W) or (H, W, 3) float image in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=np.float64)
    if srgb:
        values = srgb_encode(values)
    Image.fromarray(to_uint8(values)).save(path, format="PNG")
    logger.debug(f"Wrote {path}")
    return path


def encode_png_bytes(values: np.ndarray) -> bytes:
    """Encode an (H, W) or (H, W, 3) float image in [0, 1] as 8-bit PNG bytes."""
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(np.asarray(values, dtype=np.float64))).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png_bytes(data: bytes) -> np.ndarray:
    """Decode PNG bytes into float32 RGB values in [0, 1]."""
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def load_png(
    path: PathLike, srgb: bool = False, grayscale: bool = False
) -> np.ndarray:
    """Read an 8-bit PNG into float32 values in [0, 1]."""
    with Image.open(path) as img:
        img = img.convert("L" if grayscale else "RGB")
        values = np.asarray(img, dtype=np.float32) / 255.0
    if srgb:
        values = srgb_decode(values).astype(np.float32)
    return values


def save_material_maps(
    directory: PathLike, maps: MaterialMaps, prefix: str = ""
) -> Dict[str, str]:
    """Write the five maps as ``<prefix><name>.png``; returns name -> path."""
    directory = Path(directory)
    paths: Dict[str, str] = {}
    for name in MAP_NAMES:
        target = directory / f"{prefix}{name}.png"
        save_png(target, getattr(maps, name), srgb=name in SRGB_MAPS)
        paths[name] = str(target)
    return paths


def load_material_maps(paths: Dict[str, PathLike]) -> MaterialMaps:
    """Load maps written by save_material_maps; normals are renormalized after quantization."""
    loaded = {}
    for name in MAP_NAMES:
        grayscale = name not in ("albedo", "normal")
        loaded[name] = load_png(paths[name], srgb=name in SRGB_MAPS, grayscale=grayscale)
    loaded["normal"] = encode_normal(decode_normal(loaded["normal"])).astype(np.float32)
    return MaterialMaps(**loaded)


def load_mask(path: PathLike) -> MaterialMask:
    return MaterialMask(values=load_png(path, grayscale=True))


def save_mask(path: PathLike, mask: MaterialMask) -> Path:
    return save_png(path, mask.values)


def load_crop(path: PathLike, expected_resolution: Optional[int] = None) -> np.ndarray:
    """Load an sRGB crop as stored (sRGB values are what the model sees).

    A square crop that is an integer multiple of ``expected_resolution`` is box-averaged, the
    same reduction training applies to its stacks; any other size is resized bicubically.
    """
    crop = load_png(path)
    if expected_resolution is None or crop.shape[:2] == (expected_resolution, expected_resolution):
        return crop
    height, width = crop.shape[:2]
    if height == width and height > expected_resolution and height % expected_resolution == 0:
        factor = height // expected_resolution
        return reduce(crop, "(h a) (w b) c -> h w c", "mean", a=factor, b=factor).astype(np.float32)
    with Image.open(path) as img:
        img = img.convert("RGB").resize(
            (expected_resolution, expected_resolution), Image.Resampling.BICUBIC
        )
        return np.asarray(img, dtype=np.float32) / 255.0
