"""Parametric material families standing in for a commercial material library.

Every family is synthesized from a seed alone, so the same (family, seed, resolution)
always yields bit-identical maps. Checker, stripes, brick and noise-blobs are periodic
over the map, so they tile seamlessly and survive wrap resampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError
from .material_maps import MaterialMaps, encode_normal

logger = logging.getLogger(__name__)

FAMILIES = ("checker", "stripes", "noise-blobs", "brick", "constant")
PERIODIC_FAMILIES = ("checker", "stripes", "brick")

SEED_MASK = 0xFFFFFFFFFFFFFFFF
MIN_PERIOD = 4
NORMAL_STRENGTH = 4.0

# Linear-space colours.
PALETTE: Dict[str, Tuple[float, float, float]] = {
    "red": (0.55, 0.06, 0.04),
    "orange": (0.75, 0.28, 0.05),
    "yellow": (0.80, 0.65, 0.08),
    "green": (0.10, 0.40, 0.08),
    "teal": (0.05, 0.35, 0.35),
    "blue": (0.05, 0.12, 0.60),
    "purple": (0.30, 0.08, 0.45),
    "brown": (0.25, 0.12, 0.05),
    "white": (0.85, 0.85, 0.85),
    "grey": (0.35, 0.35, 0.35),
    "black": (0.03, 0.03, 0.03),
}

NOUNS = {
    "checker": "checkered tiles",
    "stripes": "striped fabric",
    "noise-blobs": "mottled stone",
    "brick": "brick wall",
    "constant": "plain paint",
}


@dataclass(frozen=True)
class ProceduralMaterial:
    """Parameters of one synthesized material; ``name`` doubles as its text prompt."""

    family: str
    period: int
    palette: Tuple[Tuple[float, float, float], ...]
    palette_names: Tuple[str, ...]
    roughness_range: Tuple[float, float]
    metallic_range: Tuple[float, float]
    height_amplitude: float
    name: str

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"Unknown material family: {self.family}")
        if self.period < MIN_PERIOD:
            raise ConfigurationError(f"Period {self.period} is below {MIN_PERIOD} texels")
        if not self.palette:
            raise ConfigurationError("Palette must not be empty")


def candidate_periods(resolution: int, family: str) -> List[int]:
    """Periods that keep ``family`` seamless at ``resolution``."""
    step = 4 if family == "brick" else 2
    lower = 8 if family == "brick" else MIN_PERIOD
    return [
        p
        for p in range(lower, resolution // 2 + 1)
        if resolution % p == 0 and p % step == 0
    ]


def height_to_normal(height: np.ndarray, strength: float = NORMAL_STRENGTH) -> np.ndarray:
    """Tangent-space normals (y up) from a periodic height field, RGB encoded."""
    d_col = 0.5 * (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1))
    d_row = 0.5 * (np.roll(height, -1, axis=0) - np.roll(height, 1, axis=0))
    n = np.stack(
        [-strength * d_col, strength * d_row, np.ones_like(height)], axis=-1
    ).astype(np.float64)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return encode_normal(n)


def _lowpass_noise(rng: np.random.Generator, resolution: int, period: int) -> np.ndarray:
    """Periodic smooth noise in [0, 1] with features about ``period`` texels wide."""
    white = rng.standard_normal((resolution, resolution))
    freqs = np.fft.fftfreq(resolution)
    radius = np.hypot(freqs[:, None], freqs[None, :])
    cutoff = 1.0 / period
    spectrum = np.fft.fft2(white) * np.exp(-0.5 * (radius / cutoff) ** 2)
    field = np.real(np.fft.ifft2(spectrum))
    span = field.max() - field.min()
    if span <= 0:
        return np.full_like(field, 0.5)
    return (field - field.min()) / span


def _pick_colors(rng: np.random.Generator, count: int) -> List[str]:
    names = list(PALETTE)
    picks = rng.choice(len(names), size=count, replace=False)
    return [names[i] for i in picks]


def _checker(rng, r, period):
    half = period // 2
    ys, xs = np.mgrid[0:r, 0:r]
    idx = ((xs // half) + (ys // half)) % 2
    return idx, idx.astype(np.float64)


def _stripes(rng, r, period):
    half = period // 2
    ys, xs = np.mgrid[0:r, 0:r]
    coord = xs if rng.random() < 0.5 else ys
    idx = (coord // half) % 2
    height = 0.5 + 0.5 * np.cos(2.0 * np.pi * coord / period)
    return idx, height


def _brick(rng, r, period):
    course = period // 4
    ys, xs = np.mgrid[0:r, 0:r]
    row = ys // course
    shifted = (xs + (row % 2) * (period // 2)) % r
    mortar = ((ys % course) == 0) | ((shifted % period) == 0)
    idx = mortar.astype(np.int64)
    return idx, np.where(mortar, 0.0, 1.0)


def _noise_blobs(rng, r, period):
    field = _lowpass_noise(rng, r, period)
    idx = (field > 0.5).astype(np.int64)
    return idx, field


_LAYOUTS: Dict[str, Callable] = {
    "checker": _checker,
    "stripes": _stripes,
    "brick": _brick,
    "noise-blobs": _noise_blobs,
}


def synth_material(
    family: str,
    seed: int,
    resolution: int = 64,
    period: Optional[int] = None,
) -> Tuple[ProceduralMaterial, MaterialMaps]:
    """Synthesize a material of ``family`` from ``seed``.

    Args:
        family: One of FAMILIES
        seed: Any integer; reduced to 64 bits
        resolution: Side of the square maps in texels
        period: Pattern period in texels; drawn from the seamless candidates when omitted

    Returns:
        The material parameters and its validated maps (float32)
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"Unknown material family: {family}")
    rng = np.random.default_rng(int(seed) & SEED_MASK)
    r = resolution

    if period is None:
        options = candidate_periods(r, family)
        period = int(rng.choice(options)) if options else max(r, MIN_PERIOD)
    elif period < MIN_PERIOD:
        raise ConfigurationError(f"Period {period} is below {MIN_PERIOD} texels")
    elif family in PERIODIC_FAMILIES and (r % period or period % 2):
        raise ConfigurationError(f"Period {period} does not tile a {r}-texel map")
    elif family == "brick" and (period % 4 or period < 8):
        raise ConfigurationError(f"Brick period must be a multiple of 4 and at least 8, got {period}")

    color_names = _pick_colors(rng, 1 if family == "constant" else 2)
    if family == "brick" and rng.random() < 0.7:
        color_names = [color_names[0], "grey"] if color_names[0] != "grey" else color_names
    colors = np.array([PALETTE[c] for c in color_names])
    is_metal = family in ("checker", "stripes", "constant") and rng.random() < 0.2
    metallic_range = (0.9, 1.0) if is_metal else (0.0, 0.05)
    roughness_range = tuple(sorted(rng.uniform(0.15, 0.9, size=2)))
    amplitude = float(rng.uniform(0.1, 0.4))

    metallic = rng.uniform(*metallic_range, size=len(colors))
    roughness = rng.uniform(*roughness_range, size=len(colors))

    if family == "constant":
        idx = np.zeros((r, r), dtype=np.int64)
        height = np.full((r, r), 0.5)
    else:
        idx, pattern = _LAYOUTS[family](rng, r, period)
        height = 0.5 + amplitude * (pattern - 0.5)

    albedo = colors[idx]
    if family == "brick":
        # per-brick tint, periodic because the brick grid divides the map
        tint = rng.uniform(0.85, 1.15, size=(r // max(period // 4, 1) + 1, r // period + 1))
        ys, xs = np.mgrid[0:r, 0:r]
        course = ys // (period // 4)
        brick = ((xs + (course % 2) * (period // 2)) % r) // period
        albedo = albedo * np.where(idx[..., None] == 0, tint[course, brick][..., None], 1.0)
    if family == "noise-blobs":
        field = (height - height.min()) / max(float(np.ptp(height)), 1e-12)
        albedo = colors[0] * (1.0 - field[..., None]) + colors[1] * field[..., None]
        roughness_map = roughness[0] * (1.0 - field) + roughness[1] * field
    else:
        roughness_map = roughness[idx]

    maps = MaterialMaps(
        albedo=np.clip(albedo, 0.0, 1.0).astype(np.float32),
        normal=height_to_normal(height).astype(np.float32),
        roughness=np.clip(roughness_map, 0.0, 1.0).astype(np.float32),
        height=np.clip(height, 0.0, 1.0).astype(np.float32),
        metallic=metallic[idx].astype(np.float32),
    )
    maps.validate()

    adjective = "metallic " if is_metal else ""
    if family in ("constant", "brick", "noise-blobs"):
        name = f"{color_names[0]} {adjective}{NOUNS[family]}"
    else:
        name = f"{color_names[0]} and {color_names[1]} {adjective}{NOUNS[family]}"
    material = ProceduralMaterial(
        family=family,
        period=int(period),
        palette=tuple(tuple(float(c) for c in color) for color in colors),
        palette_names=tuple(color_names),
        roughness_range=(float(roughness_range[0]), float(roughness_range[1])),
        metallic_range=metallic_range,
        height_amplitude=amplitude,
        name=name,
    )
    material.validate()
    logger.debug(f"Synthesized {family} material '{name}' (period {period}, seed {seed})")
    return material, maps


def measure_period(image: np.ndarray, axis: int = 1, min_lag: int = MIN_PERIOD) -> float:
    """Dominant repeat distance of ``image`` along ``axis`` in pixels.

    Uses the circular autocorrelation of every mean-subtracted line, averaged over lines.
    The first lag whose correlation reaches 90% of the strongest lag in [min_lag, n/2] is
    refined to sub-pixel precision with a parabola through its neighbours.
    """
    values = np.asarray(image, dtype=np.float64)
    if values.ndim == 3:
        values = values.mean(axis=-1)
    if values.ndim != 2:
        raise DimensionError(f"Expected an (H, W) or (H, W, C) image, got {image.shape}")
    lines = np.moveaxis(values, axis, -1)
    n = lines.shape[-1]
    if n // 2 < min_lag:
        raise DimensionError(f"Line length {n} is too short to measure a period")

    centered = lines - lines.mean(axis=-1, keepdims=True)
    power = np.abs(np.fft.rfft(centered, axis=-1)) ** 2
    ac = np.fft.irfft(power, n=n, axis=-1).mean(axis=0)
    if ac[0] <= 1e-12:
        raise ValueError("Image has no variation along the requested axis")
    ac = ac / ac[0]

    window = ac[min_lag : n // 2 + 1]
    threshold = 0.9 * window.max()
    lag = min_lag + int(np.argmax(window >= threshold))
    while lag + 1 <= n // 2 and ac[lag + 1] > ac[lag]:
        lag += 1

    left, center, right = ac[lag - 1], ac[lag], ac[(lag + 1) % n]
    curvature = left - 2.0 * center + right
    if curvature >= 0:
        return float(lag)
    offset = 0.5 * (left - right) / curvature
    return float(lag + np.clip(offset, -0.5, 0.5))
