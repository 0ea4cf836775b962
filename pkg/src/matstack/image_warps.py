"""Resampling, homographies and thin-plate-spline warps on normalized [0, 1]² coordinates.

Images are indexed (row, col). A normalized point (x, y) addresses column x·W and row y·H,
so pixel (i, j) has its center at ((j + 0.5) / W, (i + 0.5) / H).
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import linalg, ndimage

from .errors import SpecError

logger = logging.getLogger(__name__)

TPS_REGULARIZATION = 1e-6
MAX_TPS_DISPLACEMENT = 0.15
MIN_QUAD_AREA = 0.2

_SCIPY_MODES = {"clamp": "nearest", "wrap": "grid-wrap"}


def sample_bilinear(
    image: np.ndarray, rows: np.ndarray, cols: np.ndarray, mode: str = "clamp"
) -> np.ndarray:
    """Bilinearly sample ``image`` (H, W) or (H, W, C) at fractional pixel indices.

    ``mode`` is ``clamp`` (edge clamp) or ``wrap`` (periodic addressing).
    """
    if mode not in _SCIPY_MODES:
        raise ValueError(f"Unknown addressing mode: {mode}")
    coords = np.stack([np.asarray(rows, dtype=np.float64), np.asarray(cols, dtype=np.float64)])
    scipy_mode = _SCIPY_MODES[mode]
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode=scipy_mode)
    channels = [
        ndimage.map_coordinates(image[..., c], coords, order=1, mode=scipy_mode)
        for c in range(image.shape[-1])
    ]
    return np.stack(channels, axis=-1).astype(image.dtype, copy=False)


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) coordinates of every pixel center."""
    ys, xs = np.meshgrid(
        (np.arange(height) + 0.5) / height,
        (np.arange(width) + 0.5) / width,
        indexing="ij",
    )
    return xs, ys


def apply_homography(matrix: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w = matrix[2, 0] * xs + matrix[2, 1] * ys + matrix[2, 2]
    x = (matrix[0, 0] * xs + matrix[0, 1] * ys + matrix[0, 2]) / w
    y = (matrix[1, 0] * xs + matrix[1, 1] * ys + matrix[1, 2]) / w
    return x, y


def homography_from_corners(corners: Sequence[Sequence[float]]) -> np.ndarray:
    """Homography mapping the unit square corners (0,0),(1,0),(1,1),(0,1) onto ``corners``."""
    src = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    dst = np.asarray(corners, dtype=np.float64)
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = linalg.solve(np.array(rows), np.array(rhs))
    return np.append(h, 1.0).reshape(3, 3)


def _quad_area_and_convexity(quad: np.ndarray) -> Tuple[float, bool]:
    x, y = quad[:, 0], quad[:, 1]
    area = 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    edges = np.roll(quad, -1, axis=0) - quad
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    convex = bool(np.all(cross > 0) or np.all(cross < 0))
    return abs(area), convex


class ThinPlateSpline:
    """2D thin-plate spline interpolating displacements at control points.

    Kernel U(r) = r² log r, with a small ridge on the kernel diagonal.
    """

    def __init__(
        self,
        control_points: np.ndarray,
        displacements: np.ndarray,
        regularization: float = TPS_REGULARIZATION,
    ) -> None:
        self.control_points = np.asarray(control_points, dtype=np.float64).reshape(-1, 2)
        displacements = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
        k = len(self.control_points)
        kernel = self._kernel(self.control_points, self.control_points)
        kernel += regularization * np.eye(k)
        poly = np.hstack([np.ones((k, 1)), self.control_points])
        system = np.zeros((k + 3, k + 3))
        system[:k, :k] = kernel
        system[:k, k:] = poly
        system[k:, :k] = poly.T
        rhs = np.zeros((k + 3, 2))
        rhs[:k] = displacements
        solution = linalg.solve(system, rhs)
        self.weights = solution[:k]
        self.affine = solution[k:]

    @staticmethod
    def _kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        r2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            # r² log r == 0.5 · r² log r²
            values = 0.5 * r2 * np.log(r2)
        return np.where(r2 > 0, values, 0.0)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Displacement at ``points`` (N, 2)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        kernel = self._kernel(points, self.control_points)
        poly = np.hstack([np.ones((len(points), 1)), points])
        return kernel @ self.weights + poly @ self.affine


class DistortionSpec(BaseModel):
    """Homography followed by a thin-plate-spline warp, in normalized coordinates.

    ``homography`` maps source points to target points. ``tps_points`` lists
    (source, target) pairs of the TPS stage.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    homography: Tuple[Tuple[float, float, float], ...] = (
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (0.0, 0.0, 1.0),
    )
    tps_points: Tuple[Tuple[Tuple[float, float], Tuple[float, float]], ...] = ()

    @field_validator("homography")
    @classmethod
    def _three_by_three(cls, value):
        if len(value) != 3 or any(len(row) != 3 for row in value):
            raise ValueError("homography must be a 3x3 matrix")
        return value

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.homography, dtype=np.float64)

    @property
    def is_identity(self) -> bool:
        m = self.matrix
        return bool(np.array_equal(m / m[2, 2], np.eye(3))) and not self.tps_points

    def validate_spec(self) -> None:
        """Raise SpecError when the spec violates its invariants."""
        m = self.matrix
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < 1e-12:
            raise SpecError("homography must be finite and invertible")
        corners = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        w = m[2, 0] * corners[:, 0] + m[2, 1] * corners[:, 1] + m[2, 2]
        if np.any(w <= 0):
            raise SpecError("homography sends a unit-square corner to infinity")
        quad = np.stack(apply_homography(m, corners[:, 0], corners[:, 1]), axis=-1)
        area, convex = _quad_area_and_convexity(quad)
        if not convex:
            raise SpecError("homography image of the unit square is not convex")
        if area < MIN_QUAD_AREA:
            raise SpecError(f"homography image area {area:.3f} is below {MIN_QUAD_AREA}")
        for src, dst in self.tps_points:
            if np.hypot(dst[0] - src[0], dst[1] - src[1]) > MAX_TPS_DISPLACEMENT + 1e-12:
                raise SpecError(
                    f"TPS displacement from {src} to {dst} exceeds {MAX_TPS_DISPLACEMENT}"
                )

    def backward_spline(self) -> Optional[ThinPlateSpline]:
        """Spline giving, for a target point, the offset back to its TPS source."""
        if not self.tps_points:
            return None
        src = np.array([p[0] for p in self.tps_points], dtype=np.float64)
        dst = np.array([p[1] for p in self.tps_points], dtype=np.float64)
        return ThinPlateSpline(dst, src - dst)

    @classmethod
    def from_corners(
        cls,
        corners: Sequence[Sequence[float]],
        tps_points: Sequence[Tuple[Tuple[float, float], Tuple[float, float]]] = (),
    ) -> "DistortionSpec":
        matrix = homography_from_corners(corners)
        return cls(
            homography=tuple(tuple(float(v) for v in row) for row in matrix),
            tps_points=tuple(
                ((float(s[0]), float(s[1])), (float(d[0]), float(d[1])))
                for s, d in tps_points
            ),
        )


def source_coordinates(
    spec: DistortionSpec, height: int, width: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Fractional source (row, col) indices sampled by each output pixel."""
    xs, ys = pixel_grid(height, width)
    spline = spec.backward_spline()
    if spline is not None:
        offsets = spline(np.stack([xs.ravel(), ys.ravel()], axis=-1))
        xs = xs + offsets[:, 0].reshape(xs.shape)
        ys = ys + offsets[:, 1].reshape(ys.shape)
    inverse = np.linalg.inv(spec.matrix)
    sx, sy = apply_homography(inverse, xs, ys)
    return sy * height - 0.5, sx * width - 0.5


def warp_image(image: np.ndarray, spec: DistortionSpec, mode: str = "clamp") -> np.ndarray:
    """Warp ``image`` by the homography then the TPS stage with one bilinear resample."""
    if spec.is_identity:
        return image.copy()
    rows, cols = source_coordinates(spec, image.shape[0], image.shape[1])
    return sample_bilinear(image, rows, cols, mode=mode)


def warp_mask(mask: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Warp a binary mask like the crop and re-binarize it at 0.5."""
    warped = warp_image(mask.astype(np.float64), spec)
    return (warped >= 0.5).astype(mask.dtype)


def random_distortion(
    rng: np.random.Generator, severity: float, tps_controls: int = 1
) -> DistortionSpec:
    """Perspective-like corner jitter plus interior TPS pushes scaled by ``severity`` in [0, 1]."""
    severity = float(np.clip(severity, 0.0, 1.0))
    if severity == 0.0:
        return DistortionSpec()
    base = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    for _ in range(100):
        corners = base + rng.uniform(-0.2, 0.2, size=(4, 2)) * severity
        tps: List[Tuple[Tuple[float, float], Tuple[float, float]]] = []
        if tps_controls:
            fixed = [((x, y), (x, y)) for x, y in base]
            tps.extend(fixed)
            for _ in range(tps_controls):
                src = rng.uniform(0.3, 0.7, size=2)
                angle = rng.uniform(0.0, 2.0 * np.pi)
                push = MAX_TPS_DISPLACEMENT * severity * rng.uniform(0.5, 1.0)
                dst = src + push * np.array([np.cos(angle), np.sin(angle)])
                tps.append(((float(src[0]), float(src[1])), (float(dst[0]), float(dst[1]))))
        spec = DistortionSpec.from_corners(corners, tps)
        try:
            spec.validate_spec()
            return spec
        except SpecError:
            continue
    raise SpecError(f"could not draw a valid distortion at severity {severity}")
