"""Metallic/roughness microfacet shading and a material-mapped plane renderer.

The BRDF is the metallic/roughness subset of the Disney principled model:

- GGX normal distribution with α = roughness²
- Smith height-correlated masking-shadowing
- Schlick Fresnel with F0 = mix(0.04, albedo, metallic)
- Lambert diffuse weighted by (1 − metallic)(1 − F)

Every expression is written so swapping ``wi`` and ``wo`` evaluates the same floating-point
operations, which makes reciprocity exact.

World space is right-handed with the material plane at z = 0 facing +z. Texture u runs along +x,
texture v along −y, so image rows of a fronto-parallel view follow map rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import VisibilityError
from .image_warps import sample_bilinear
from .material_io import srgb_encode
from .material_maps import MaterialMaps, decode_normal
from .procedural_materials import SEED_MASK

logger = logging.getLogger(__name__)

DIELECTRIC_F0 = 0.04
MIN_ALPHA = 1e-3
AREA_LIGHT_SAMPLES = 16
PREVIEW_FOV_DEG = 45.0

Vec3 = Tuple[float, float, float]


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _normalize(v: np.ndarray) -> np.ndarray:
    length = np.sqrt(_dot(v, v))[..., None]
    return v / np.where(length > 0, length, 1.0)


@dataclass(frozen=True)
class ShadePoint:
    """Per-texel BRDF parameters; arrays broadcast over any leading shape.

    ``albedo`` and ``normal`` have a trailing axis of 3; ``metallic`` and ``roughness`` do not.
    """

    albedo: np.ndarray
    metallic: np.ndarray
    roughness: np.ndarray
    normal: np.ndarray

    @classmethod
    def uniform(
        cls,
        albedo: Sequence[float] = (0.5, 0.5, 0.5),
        metallic: float = 0.0,
        roughness: float = 0.5,
        normal: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "ShadePoint":
        return cls(
            albedo=np.asarray(albedo, dtype=np.float64),
            metallic=np.asarray(metallic, dtype=np.float64),
            roughness=np.asarray(roughness, dtype=np.float64),
            normal=np.asarray(normal, dtype=np.float64),
        )

    def check_finite(self) -> None:
        for name in ("albedo", "metallic", "roughness", "normal"):
            if np.any(np.isnan(getattr(self, name))):
                raise ValueError(f"BRDF parameter {name} contains NaN")


def ggx_alpha(roughness: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(roughness, dtype=np.float64) ** 2, MIN_ALPHA)


def ggx_distribution(alpha: np.ndarray, cos_h: np.ndarray) -> np.ndarray:
    """GGX normal distribution D(h) for cos_h = n·h."""
    a2 = alpha * alpha
    d = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * d * d)


def _smith_lambda(a2: np.ndarray, cos_theta: np.ndarray) -> np.ndarray:
    c2 = cos_theta * cos_theta
    return 0.5 * (np.sqrt(1.0 + a2 * (1.0 - c2) / c2) - 1.0)


def eval_brdf(wi: np.ndarray, wo: np.ndarray, point: ShadePoint) -> np.ndarray:
    """Evaluate f(wi, wo) in sr⁻¹ for unit directions (..., 3); back-facing pairs give 0."""
    point.check_finite()
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(point.normal, dtype=np.float64)
    albedo = np.asarray(point.albedo, dtype=np.float64)
    metallic = np.asarray(point.metallic, dtype=np.float64)[..., None]
    alpha = ggx_alpha(point.roughness)
    a2 = alpha * alpha

    n_wi = _dot(n, wi)
    n_wo = _dot(n, wo)
    front = (n_wi > 0) & (n_wo > 0)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        h = _normalize(wi + wo)
        n_h = _dot(n, h)
        distribution = ggx_distribution(alpha, n_h)
        geometry = 1.0 / (1.0 + (_smith_lambda(a2, n_wi) + _smith_lambda(a2, n_wo)))
        cos_d = 0.5 * (_dot(h, wi) + _dot(h, wo))
        f0 = DIELECTRIC_F0 * (1.0 - metallic) + albedo * metallic
        fresnel = f0 + (1.0 - f0) * (1.0 - np.clip(cos_d, 0.0, 1.0))[..., None] ** 5
        specular = (distribution * geometry)[..., None] * fresnel / (4.0 * (n_wi * n_wo))[..., None]
        diffuse = (1.0 - metallic) * (1.0 - fresnel) * albedo / np.pi
        value = diffuse + specular

    return np.where(front[..., None], value, 0.0)


def sample_ggx_half_vector(
    alpha: float, u1: np.ndarray, u2: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw half vectors around +z with density D(h)(n·h); returns (h, pdf)."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    a2 = alpha * alpha
    cos2 = (1.0 - u1) / (1.0 + (a2 - 1.0) * u1)
    cos_t = np.sqrt(cos2)
    sin_t = np.sqrt(np.maximum(1.0 - cos2, 0.0))
    phi = 2.0 * np.pi * u2
    h = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    pdf = ggx_distribution(alpha, cos_t) * cos_t
    return h, pdf


# ----------------------------------------------------------------------------
# Scene description
# ----------------------------------------------------------------------------


class Light(BaseModel):
    """Point, rectangular area, or ambient light.

    ``intensity`` is radiant intensity for point lights, emitted radiance for area lights and
    the constant term for ambient lights.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["point", "area", "ambient"]
    intensity: Vec3 = (1.0, 1.0, 1.0)
    position: Optional[Vec3] = None
    corners: Optional[Tuple[Vec3, Vec3, Vec3, Vec3]] = None

    @field_validator("intensity")
    @classmethod
    def _non_negative(cls, value: Vec3) -> Vec3:
        if any(c < 0 or not math.isfinite(c) for c in value):
            raise ValueError("light intensity must be finite and non-negative")
        return value

    @model_validator(mode="after")
    def _geometry_matches_kind(self) -> "Light":
        if self.kind == "point" and self.position is None:
            raise ValueError("point lights need a position")
        if self.kind == "area":
            if self.corners is None:
                raise ValueError("area lights need four corners")
            p = np.asarray(self.corners, dtype=np.float64)
            # p3 must close the parallelogram spanned at p0
            if not np.allclose(p[0] + (p[2] - p[1]), p[3], atol=1e-6):
                raise ValueError("area light corners must form a planar rectangle")
            if np.linalg.norm(np.cross(p[1] - p[0], p[3] - p[0])) <= 0:
                raise ValueError("area light has zero area")
        return self

    def scaled(self, factor: float) -> "Light":
        return self.model_copy(update={"intensity": tuple(c * factor for c in self.intensity)})


class Camera(BaseModel):
    """Pinhole camera with a vertical field of view and a square output."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    position: Vec3 = (0.0, 0.0, 1.2)
    look_at: Vec3 = (0.0, 0.0, 0.0)
    up: Vec3 = (0.0, 1.0, 0.0)
    fov_deg: float = PREVIEW_FOV_DEG
    resolution: int = 128

    @field_validator("fov_deg")
    @classmethod
    def _fov_range(cls, value: float) -> float:
        if not 10.0 < value < 120.0:
            raise ValueError(f"fov_deg must lie in (10, 120), got {value}")
        return value

    @field_validator("resolution")
    @classmethod
    def _positive_resolution(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("resolution must be positive")
        return value

    @model_validator(mode="after")
    def _non_degenerate(self) -> "Camera":
        forward = np.subtract(self.look_at, self.position)
        if np.linalg.norm(forward) == 0:
            raise ValueError("camera position and look_at coincide")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-9 * np.linalg.norm(forward):
            raise ValueError("camera up vector is parallel to the view direction")
        return self

    @classmethod
    def fronto_parallel(
        cls, resolution: int, plane_size: float = 1.0, fov_deg: float = PREVIEW_FOV_DEG
    ) -> "Camera":
        """Camera on the plane normal whose view exactly spans a plane of side ``plane_size``."""
        distance = 0.5 * plane_size / math.tan(math.radians(fov_deg) / 2.0)
        return cls(position=(0.0, 0.0, distance), fov_deg=fov_deg, resolution=resolution)

    def primary_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and unit directions (H, W, 3) through every pixel center."""
        origin = np.asarray(self.position, dtype=np.float64)
        forward = _normalize(np.subtract(self.look_at, self.position).astype(np.float64))
        right = _normalize(np.cross(forward, np.asarray(self.up, dtype=np.float64)))
        true_up = np.cross(right, forward)
        n = self.resolution
        tan_half = math.tan(math.radians(self.fov_deg) / 2.0)
        coords = ((np.arange(n) + 0.5) / n * 2.0 - 1.0) * tan_half
        px = coords[None, :, None]
        py = -coords[:, None, None]
        directions = forward + px * right + py * true_up
        return origin, _normalize(directions)


class PlaneSpec(BaseModel):
    """Square material plane at z = 0 centred on the origin."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    size: float = 1.0
    uv_repeat: float = 1.0

    @field_validator("size", "uv_repeat")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("plane size and uv_repeat must be positive")
        return value


class LightRig(BaseModel):
    """Named light set used for previews and re-render evaluation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    lights: Tuple[Light, ...]

    @classmethod
    def preset(cls, name: str) -> "LightRig":
        if name == "studio":
            return cls(
                name="studio",
                lights=(
                    Light(kind="point", position=(0.15, 0.2, 1.2), intensity=(1.5, 1.5, 1.5)),
                    Light(kind="point", position=(-0.6, -0.4, 0.8), intensity=(0.6, 0.6, 0.6)),
                    Light(kind="point", position=(0.0, 0.7, 0.5), intensity=(0.4, 0.4, 0.4)),
                    Light(kind="ambient", intensity=(0.03, 0.03, 0.03)),
                ),
            )
        if name == "ambient":
            return cls(name="ambient", lights=(Light(kind="ambient", intensity=(0.8, 0.8, 0.8)),))
        raise ValueError(f"Unknown light rig: {name}")


@dataclass(frozen=True)
class RenderResult:
    """Rendered image plus the buffers needed downstream.

    ``image`` is the tone-mapped sRGB image, ``radiance`` the linear pre-tonemap buffer,
    ``uv`` the texture coordinate hit per pixel (NaN on misses) and ``hit`` the coverage mask.
    """

    image: np.ndarray
    radiance: np.ndarray
    uv: np.ndarray
    hit: np.ndarray


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------


def _intersect_plane(
    camera: Camera, plane: PlaneSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    origin, directions = camera.primary_rays()
    if origin[2] <= 0:
        raise VisibilityError(f"Camera at {camera.position} is behind the material plane")
    dz = directions[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    points = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * directions
    half = plane.size / 2.0
    hit = (
        (dz < 0)
        & np.isfinite(t)
        & (np.abs(points[..., 0]) <= half)
        & (np.abs(points[..., 1]) <= half)
    )
    if not np.any(hit):
        raise VisibilityError("The camera sees no part of the material plane")
    u = (points[..., 0] + half) / plane.size * plane.uv_repeat
    v = (half - points[..., 1]) / plane.size * plane.uv_repeat
    uv = np.stack([u, v], axis=-1)
    uv[~hit] = np.nan
    return points, uv, hit


def sample_maps_at_uv(maps: MaterialMaps, uv: np.ndarray) -> dict:
    """Bilinearly sample every map at texture coordinates ``uv`` (N, 2) with wrap addressing."""
    r = maps.resolution
    cols = uv[:, 0] * r - 0.5
    rows = uv[:, 1] * r - 0.5
    return {
        name: sample_bilinear(np.asarray(values, dtype=np.float64), rows, cols, mode="wrap")
        for name, values in maps.as_dict().items()
    }


def _area_light_samples(
    light: Light, count: int, rng: np.random.Generator, n_points: int
) -> Tuple[np.ndarray, np.ndarray, float]:
    p = np.asarray(light.corners, dtype=np.float64)
    e1 = p[1] - p[0]
    e2 = p[3] - p[0]
    cross = np.cross(e1, e2)
    area = float(np.linalg.norm(cross))
    side = int(round(math.sqrt(count)))
    cells = np.stack(
        np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    jitter = rng.random((n_points, side * side, 2))
    st = (cells[None, :, :] + jitter) / side
    positions = p[0] + st[..., 0:1] * e1 + st[..., 1:2] * e2
    return positions, cross / area, area


def render_plane(
    maps: MaterialMaps,
    camera: Camera,
    lights: Sequence[Light],
    plane: Optional[PlaneSpec] = None,
    seed: int = 0,
    shading_normals: bool = True,
    area_samples: int = AREA_LIGHT_SAMPLES,
) -> RenderResult:
    """Ray-trace the material plane seen by ``camera`` under ``lights``.

    Args:
        maps: Material maps applied to the plane with wrap addressing
        camera: Pinhole camera; must sit in front of the plane
        lights: Point, area and ambient lights, summed
        plane: Plane extent and UV tiling (defaults to a unit square, one tile)
        seed: Seed of the stratified area-light jitter
        shading_normals: Shade with the normal map instead of the geometric normal
        area_samples: Stratified samples per area light (a perfect square)

    Returns:
        RenderResult with sRGB image, linear radiance, UV buffer and hit mask
    """
    plane = plane or PlaneSpec()
    points, uv, hit = _intersect_plane(camera, plane)
    res = camera.resolution
    radiance = np.zeros((res, res, 3), dtype=np.float64)

    hit_points = points[hit]
    texels = sample_maps_at_uv(maps, uv[hit])
    if shading_normals:
        normal = decode_normal(np.clip(texels["normal"], 0.0, 1.0))
    else:
        normal = np.broadcast_to(np.array([0.0, 0.0, 1.0]), hit_points.shape)
    albedo = np.clip(texels["albedo"], 0.0, 1.0)
    shade = ShadePoint(
        albedo=albedo,
        metallic=np.clip(texels["metallic"], 0.0, 1.0),
        roughness=np.clip(texels["roughness"], 0.0, 1.0),
        normal=normal,
    )
    wo = _normalize(np.asarray(camera.position, dtype=np.float64) - hit_points)
    out = np.zeros_like(hit_points)

    for index, light in enumerate(lights):
        intensity = np.asarray(light.intensity, dtype=np.float64)
        if light.kind == "ambient":
            out += intensity * albedo
        elif light.kind == "point":
            to_light = np.asarray(light.position, dtype=np.float64) - hit_points
            dist2 = _dot(to_light, to_light)
            wi = to_light / np.sqrt(dist2)[..., None]
            above = wi[..., 2] > 0
            cos_i = np.maximum(_dot(shade.normal, wi), 0.0)
            f = eval_brdf(wi, wo, shade)
            out += np.where(above[..., None], f * (cos_i / dist2)[..., None], 0.0) * intensity
        else:
            rng = np.random.default_rng(np.random.SeedSequence([seed & SEED_MASK, index]))
            positions, light_normal, area = _area_light_samples(
                light, area_samples, rng, len(hit_points)
            )
            to_light = positions - hit_points[:, None, :]
            dist2 = _dot(to_light, to_light)
            wi = to_light / np.sqrt(dist2)[..., None]
            above = wi[..., 2] > 0
            cos_i = np.maximum(_dot(shade.normal[:, None, :], wi), 0.0)
            cos_l = np.abs(_dot(light_normal, -wi))
            expanded = ShadePoint(
                albedo=shade.albedo[:, None, :],
                metallic=shade.metallic[:, None],
                roughness=shade.roughness[:, None],
                normal=shade.normal[:, None, :],
            )
            f = eval_brdf(wi, wo[:, None, :], expanded)
            weight = np.where(above, cos_i * cos_l / dist2, 0.0) * (area / positions.shape[1])
            out += np.sum(f * weight[..., None], axis=1) * intensity

    radiance[hit] = out
    image = srgb_encode(np.clip(radiance, 0.0, 1.0))
    logger.debug(f"Rendered {res}x{res} plane, coverage {hit.mean():.3f}")
    return RenderResult(image=image, radiance=radiance, uv=uv, hit=hit)


def relight_preview(
    maps: MaterialMaps,
    rig: Union[str, LightRig, Sequence[Light]] = "studio",
    seed: int = 0,
    shading_normals: bool = True,
    linear: bool = False,
) -> np.ndarray:
    """Render ``maps`` head-on so the plane fills the frame at the maps' resolution.

    Returns the sRGB image, or the linear radiance when ``linear`` is set.
    """
    if isinstance(rig, str):
        lights: List[Light] = list(LightRig.preset(rig).lights)
    elif isinstance(rig, LightRig):
        lights = list(rig.lights)
    else:
        lights = list(rig)
    camera = Camera.fronto_parallel(maps.resolution)
    result = render_plane(
        maps, camera, lights, PlaneSpec(), seed=seed, shading_normals=shading_normals
    )
    return result.radiance if linear else result.image
