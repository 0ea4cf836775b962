"""Training corpora: rendered Scenes crops, Materials text/maps pairs, and robustness sets.

A Scenes sample renders a material plane, composites planar occluders over it, warps the
composite with a distortion, and keeps the dominant-material mask warped the same way.
Its ground-truth maps are resampled so one crop pixel covers one texel on average.

A Materials sample is a prompt paired with maps and carries no crop.

Layout of a corpus directory::

    out/
      manifest.jsonl
      samples/000000/{crop,mask,albedo,normal,roughness,height,metallic}.png
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Annotated,
    Any,
    Dict,
    Iterator,
    List,
    Literal,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .brdf_renderer import Camera, Light, LightRig, PlaneSpec, relight_preview, render_plane
from .errors import (
    ConfigurationError,
    DominanceError,
    GenerationStuckError,
    GeometryError,
)
from .image_warps import DistortionSpec, random_distortion, sample_bilinear, warp_image, warp_mask
from .material_io import (
    load_crop,
    load_mask,
    load_material_maps,
    save_material_maps,
    save_png,
)
from .material_maps import MAP_NAMES, MaterialMaps, MaterialMask, decode_normal, encode_normal
from .procedural_materials import SEED_MASK, synth_material
from .run_config import DatasetConfig

logger = logging.getLogger(__name__)

MIN_DOMINANCE = 0.70
SCENES_PER_CYCLE = 5
CYCLE = 8
MANIFEST_NAME = "manifest.jsonl"

T = TypeVar("T")


# ----------------------------------------------------------------------------
# Scene description
# ----------------------------------------------------------------------------


class MaterialRef(BaseModel):
    """A procedural material addressed by family and seed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: str
    seed: int

    def synthesize(self, resolution: int) -> MaterialMaps:
        return synth_material(self.family, self.seed, resolution)[1]


class DiscOccluder(BaseModel):
    """Disc in normalized image coordinates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["disc"] = "disc"
    center: Tuple[float, float]
    radius: float
    material: Optional[MaterialRef] = None

    def coverage(self, resolution: int) -> np.ndarray:
        centers = (np.arange(resolution) + 0.5) / resolution
        dx = centers[None, :] - self.center[0]
        dy = centers[:, None] - self.center[1]
        return dx * dx + dy * dy <= self.radius * self.radius


class RectOccluder(BaseModel):
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in normalized image coordinates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["rect"] = "rect"
    x0: float
    y0: float
    x1: float
    y1: float
    material: Optional[MaterialRef] = None

    def coverage(self, resolution: int) -> np.ndarray:
        centers = (np.arange(resolution) + 0.5) / resolution
        inside_x = (centers >= self.x0) & (centers < self.x1)
        inside_y = (centers >= self.y0) & (centers < self.y1)
        return inside_y[:, None] & inside_x[None, :]


Occluder = Annotated[Union[DiscOccluder, RectOccluder], Field(discriminator="kind")]


class SceneSpec(BaseModel):
    """Everything needed to re-render one Scenes crop."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    material: MaterialRef
    camera: Camera
    lights: Tuple[Light, ...]
    plane: PlaneSpec = PlaneSpec()
    occluders: Tuple[Occluder, ...] = ()
    distortion: DistortionSpec = DistortionSpec()
    seed: int = 0


@dataclass(frozen=True)
class SceneCrop:
    """Warped crop (sRGB), its dominance mask and the matching UV buffer."""

    crop: np.ndarray
    mask: np.ndarray
    uv: np.ndarray
    dominance: float


@dataclass(frozen=True)
class CropSample:
    """One dataset tuple. ``crop`` and ``mask`` are absent for Materials samples."""

    prompt: str
    maps: MaterialMaps
    crop: Optional[np.ndarray] = None
    mask: Optional[MaterialMask] = None
    meta: Dict[str, Any] = field(default_factory=dict)


# ----------------------------------------------------------------------------
# Scene rendering and scale alignment
# ----------------------------------------------------------------------------


def render_scene_crop(
    material: MaterialMaps,
    occluders: Sequence[Tuple[Union[DiscOccluder, RectOccluder], MaterialMaps]],
    camera: Camera,
    lights: Sequence[Light],
    distortion: Optional[DistortionSpec] = None,
    seed: int = 0,
    plane: Optional[PlaneSpec] = None,
    min_dominance: float = MIN_DOMINANCE,
) -> SceneCrop:
    """Render the dominant material, composite occluders, then warp crop, mask and UVs alike.

    Occluders are camera-facing cards shaded with their own materials under the scene lights.

    Raises:
        DominanceError: if the visible dominant material covers less than ``min_dominance``
    """
    distortion = distortion or DistortionSpec()
    distortion.validate_spec()
    base = render_plane(material, camera, lights, plane, seed=seed)
    composite = base.image.copy()
    visible = base.hit.copy()
    res = camera.resolution

    for index, (shape, occluder_maps) in enumerate(occluders):
        if occluder_maps.resolution != res:
            raise ConfigurationError(
                f"Occluder maps are {occluder_maps.resolution}px, crop is {res}px"
            )
        cover = shape.coverage(res)
        shaded = relight_preview(occluder_maps, list(lights), seed=seed + index + 1)
        composite[cover] = shaded[cover]
        visible &= ~cover

    mask = warp_mask(visible.astype(np.float32), distortion)
    crop = np.clip(warp_image(composite, distortion), 0.0, 1.0)
    uv = base.uv if distortion.is_identity else warp_image(base.uv, distortion)
    dominance = float(mask.sum()) / mask.size
    if dominance < min_dominance:
        raise DominanceError(dominance, min_dominance)
    return SceneCrop(crop=crop.astype(np.float32), mask=mask, uv=uv, dominance=dominance)


def _texel_density(uv: np.ndarray, resolution: int) -> np.ndarray:
    tx = uv[..., 0] * resolution
    ty = uv[..., 1] * resolution
    dtx_dr, dtx_dc = np.gradient(tx)
    dty_dr, dty_dc = np.gradient(ty)
    return np.sqrt(np.abs(dtx_dc * dty_dr - dtx_dr * dty_dc))


def measure_uv_density(
    uv: np.ndarray, resolution: int, mask: Optional[np.ndarray] = None
) -> Tuple[float, float]:
    """Mean and variance of texels per crop pixel over the masked pixels.

    Raises:
        GeometryError: if no pixel has a usable, non-degenerate UV Jacobian
    """
    density = _texel_density(np.asarray(uv, dtype=np.float64), resolution)
    valid = np.isfinite(density)
    if mask is not None:
        valid &= np.asarray(mask) >= 0.5
    if not np.any(valid):
        raise GeometryError("UV buffer has no valid pixels under the mask")
    values = density[valid]
    mean = float(values.mean())
    if mean <= 1e-12:
        raise GeometryError("UV Jacobian is zero everywhere")
    return mean, float(values.var())


def align_uv_scale(
    maps: MaterialMaps, uv: np.ndarray, mask: Optional[np.ndarray] = None
) -> MaterialMaps:
    """Resample tileable ``maps`` so one crop pixel matches one output texel on average."""
    r = maps.resolution
    density, _ = measure_uv_density(uv, r, mask)
    if abs(density - 1.0) < 1e-6:
        return maps.map(np.copy)
    coords = (np.arange(r) + 0.5) * density - 0.5
    rows = np.broadcast_to(coords[:, None], (r, r))
    cols = np.broadcast_to(coords[None, :], (r, r))

    def resample(values: np.ndarray) -> np.ndarray:
        out = sample_bilinear(np.asarray(values, dtype=np.float64), rows, cols, mode="wrap")
        return np.clip(out, 0.0, 1.0).astype(values.dtype)

    aligned = maps.map(resample)
    normal = encode_normal(decode_normal(aligned.normal)).astype(maps.normal.dtype)
    return MaterialMaps(
        albedo=aligned.albedo,
        normal=normal,
        roughness=aligned.roughness,
        height=aligned.height,
        metallic=aligned.metallic,
    )


def render_scene_spec(spec: SceneSpec, resolution: int) -> SceneCrop:
    """Re-render a crop from its stored scene description."""
    occluders = [
        (shape, (shape.material or spec.material).synthesize(resolution))
        for shape in spec.occluders
    ]
    return render_scene_crop(
        spec.material.synthesize(resolution),
        occluders,
        spec.camera,
        spec.lights,
        spec.distortion,
        seed=spec.seed,
        plane=spec.plane,
    )


# ----------------------------------------------------------------------------
# Random scenes
# ----------------------------------------------------------------------------


def _random_lights(rng: np.random.Generator) -> Tuple[Light, ...]:
    lights: List[Light] = []
    x, y = rng.uniform(-1.0, 1.0, size=2)
    z = rng.uniform(0.8, 2.0)
    power = rng.uniform(0.8, 1.6) * (x * x + y * y + z * z)
    lights.append(Light(kind="point", position=(x, y, z), intensity=(power,) * 3))
    if rng.random() < 0.5:
        cx, cy = rng.uniform(-0.8, 0.8, size=2)
        cz = rng.uniform(1.0, 2.0)
        a, b = rng.uniform(0.15, 0.3, size=2)
        radiance = rng.uniform(0.3, 0.8) * cz * cz / (4.0 * a * b)
        corners = (
            (cx - a, cy - b, cz),
            (cx + a, cy - b, cz),
            (cx + a, cy + b, cz),
            (cx - a, cy + b, cz),
        )
        lights.append(Light(kind="area", corners=corners, intensity=(radiance,) * 3))
    ambient = rng.uniform(0.02, 0.08)
    lights.append(Light(kind="ambient", intensity=(ambient,) * 3))
    return tuple(lights)


def _random_camera(rng: np.random.Generator, resolution: int) -> Camera:
    distance = rng.uniform(0.5, 1.5)
    theta = math.radians(rng.uniform(0.0, 25.0))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    position = (
        distance * math.sin(theta) * math.cos(phi),
        distance * math.sin(theta) * math.sin(phi),
        distance * math.cos(theta),
    )
    look_at = (*rng.uniform(-0.3, 0.3, size=2), 0.0)
    return Camera(position=position, look_at=look_at, resolution=resolution)


def _random_occluders(
    rng: np.random.Generator, count: int, families: Sequence[str]
) -> Tuple[Union[DiscOccluder, RectOccluder], ...]:
    shapes: List[Union[DiscOccluder, RectOccluder]] = []
    for _ in range(count):
        material = MaterialRef(
            family=str(rng.choice(list(families))), seed=int(rng.integers(0, 2**63))
        )
        area = rng.uniform(0.03, 0.2)
        if rng.random() < 0.5:
            center = tuple(rng.uniform(0.0, 1.0, size=2))
            shapes.append(
                DiscOccluder(center=center, radius=math.sqrt(area / math.pi), material=material)
            )
        else:
            w = rng.uniform(0.15, 0.6)
            h = min(area / w, 1.0)
            x0, y0 = rng.uniform(-0.1, 1.0 - w + 0.1), rng.uniform(-0.1, 1.0 - h + 0.1)
            shapes.append(RectOccluder(x0=x0, y0=y0, x1=x0 + w, y1=y0 + h, material=material))
    return tuple(shapes)


def random_scene_spec(
    rng: np.random.Generator, config: DatasetConfig, material: MaterialRef
) -> SceneSpec:
    count = int(rng.integers(0, config.max_occluders + 1))
    severity = float(rng.uniform(0.0, config.distortion_severity))
    return SceneSpec(
        material=material,
        camera=_random_camera(rng, config.resolution),
        lights=_random_lights(rng),
        plane=PlaneSpec(size=4.0, uv_repeat=4.0),
        occluders=_random_occluders(rng, count, config.families),
        distortion=random_distortion(rng, severity),
        seed=int(rng.integers(0, 2**31)),
    )


# ----------------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------------


class ManifestRecord(BaseModel):
    """One manifest line; asset paths are relative to the manifest directory."""

    model_config = ConfigDict(extra="forbid")

    id: str
    source: Literal["scenes", "materials"]
    split: Literal["train", "val", "test"]
    prompt: str
    crop_path: Optional[str] = None
    mask_path: Optional[str] = None
    albedo_path: str
    normal_path: str
    roughness_path: str
    height_path: str
    metallic_path: str
    meta: Dict[str, Any] = Field(default_factory=dict)

    def map_paths(self, root: Path) -> Dict[str, Path]:
        return {name: root / getattr(self, f"{name}_path") for name in MAP_NAMES}


class DatasetManifest:
    """Ordered manifest records plus the directory their paths are relative to."""

    def __init__(self, records: Sequence[ManifestRecord], root: Union[str, Path]) -> None:
        self.records = list(records)
        self.root = Path(root)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def by_source(self, source: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.source == source]

    def by_split(self, split: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == split]

    def summary(self) -> Dict[str, Dict[str, int]]:
        counts: Dict[str, Dict[str, int]] = {}
        for record in self.records:
            counts.setdefault(record.source, {}).setdefault(record.split, 0)
            counts[record.source][record.split] += 1
        return counts

    def validate(self) -> None:
        """Check ids are unique and every referenced file exists."""
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise ConfigurationError(f"Duplicate sample id {record.id} in manifest")
            seen.add(record.id)
            paths = list(record.map_paths(self.root).values())
            paths += [self.root / p for p in (record.crop_path, record.mask_path) if p]
            for path in paths:
                if not path.is_file():
                    raise FileNotFoundError(f"Manifest references missing file {path}")

    def write(self, path: Optional[Union[str, Path]] = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in self.records:
                f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        records = []
        with open(path, encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(ManifestRecord.model_validate_json(line))
                except ValueError as e:
                    raise ConfigurationError(f"{path}:{number}: invalid manifest record: {e}") from e
        return cls(records, path.parent)

    def load_sample(self, record: ManifestRecord) -> CropSample:
        maps = load_material_maps(record.map_paths(self.root))
        crop = mask = None
        if record.crop_path:
            crop = load_crop(self.root / record.crop_path, expected_resolution=maps.resolution)
        if record.mask_path:
            mask = load_mask(self.root / record.mask_path)
        return CropSample(prompt=record.prompt, maps=maps, crop=crop, mask=mask, meta=record.meta)


# ----------------------------------------------------------------------------
# Corpus generation
# ----------------------------------------------------------------------------


def sample_source(index: int) -> str:
    """Fixed 5:3 interleave of Scenes and Materials samples."""
    return "scenes" if index % CYCLE < SCENES_PER_CYCLE else "materials"


def _sample_split(seed: int, index: int, config: DatasetConfig) -> str:
    u = np.random.default_rng([seed & SEED_MASK, index, 1]).random()
    if u < config.test_fraction:
        return "test"
    if u < config.test_fraction + config.val_fraction:
        return "val"
    return "train"


def generate_scene_sample(
    rng: np.random.Generator, config: DatasetConfig
) -> Tuple[CropSample, SceneSpec, int]:
    """Draw scenes until one passes the dominance check; returns (sample, spec, attempts)."""
    family = str(rng.choice(list(config.families)))
    material_seed = int(rng.integers(0, 2**63))
    material, maps = synth_material(family, material_seed, config.resolution)
    ref = MaterialRef(family=family, seed=material_seed)
    occluder_cache: Dict[MaterialRef, MaterialMaps] = {}

    for attempt in range(1, config.max_resamples + 2):
        spec = random_scene_spec(rng, config, ref)
        occluders = []
        for shape in spec.occluders:
            key = shape.material or ref
            if key not in occluder_cache:
                occluder_cache[key] = key.synthesize(config.resolution)
            occluders.append((shape, occluder_cache[key]))
        try:
            scene = render_scene_crop(
                maps, occluders, spec.camera, spec.lights, spec.distortion, spec.seed, spec.plane
            )
        except DominanceError as e:
            logger.warning(f"Resampling scene (attempt {attempt}): {e}")
            if attempt > config.max_resamples:
                raise GenerationStuckError(
                    f"{config.max_resamples} consecutive scenes failed the dominance check"
                ) from e
            continue
        aligned = align_uv_scale(maps, scene.uv, scene.mask)
        density, variance = measure_uv_density(scene.uv, config.resolution, scene.mask)
        sample = CropSample(
            prompt=material.name,
            maps=aligned,
            crop=scene.crop,
            mask=MaterialMask(values=scene.mask.astype(np.float32)),
            meta={
                "family": family,
                "dominance": scene.dominance,
                "uv_density": density,
                "uv_density_var": variance,
                "distortion": spec.distortion.model_dump(mode="json"),
            },
        )
        return sample, spec, attempt
    raise GenerationStuckError("unreachable")


def generate_material_sample(rng: np.random.Generator, config: DatasetConfig) -> CropSample:
    family = str(rng.choice(list(config.families)))
    material_seed = int(rng.integers(0, 2**63))
    material, maps = synth_material(family, material_seed, config.resolution)
    return CropSample(
        prompt=material.name,
        maps=maps,
        meta={"family": family, "material_seed": material_seed},
    )


def _write_sample(
    index: int, config: DatasetConfig, seed: int, out_dir: Path
) -> ManifestRecord:
    rng = np.random.default_rng([seed & SEED_MASK, index])
    source = sample_source(index)
    sample_id = f"{index:06d}"
    rel = Path("samples") / sample_id
    target = out_dir / rel
    meta: Dict[str, Any] = {"seed": seed, "index": index}

    if source == "scenes":
        sample, spec, attempts = generate_scene_sample(rng, config)
        meta.update(sample.meta, attempts=attempts, scene=spec.model_dump(mode="json"))
        save_png(target / "crop.png", sample.crop)
        save_png(target / "mask.png", sample.mask.values)
        crop_path, mask_path = (rel / "crop.png").as_posix(), (rel / "mask.png").as_posix()
    else:
        sample = generate_material_sample(rng, config)
        meta.update(sample.meta)
        crop_path = mask_path = None

    save_material_maps(target, sample.maps)
    split = _sample_split(seed, index, config)
    meta["split"] = split
    return ManifestRecord(
        id=sample_id,
        source=source,
        split=split,
        prompt=sample.prompt,
        crop_path=crop_path,
        mask_path=mask_path,
        meta=meta,
        **{f"{name}_path": (rel / f"{name}.png").as_posix() for name in MAP_NAMES},
    )


def build_dataset(
    config: DatasetConfig,
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    progress: bool = False,
) -> DatasetManifest:
    """Generate ``config.count`` samples under ``out_dir`` and write the JSONL manifest.

    Sample ``i`` depends only on (seed, i), so output is identical for any worker count.
    ``seed`` defaults to ``config.seed``.
    """
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(config.count)
    logger.info(
        f"Building dataset of {config.count} samples at R={config.resolution} into {out_dir}"
    )

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            mapped = pool.map(
                _write_sample,
                indices,
                [config] * config.count,
                [seed] * config.count,
                [out_dir] * config.count,
                chunksize=8,
            )
            records = list(tqdm(mapped, total=config.count, disable=not progress))
    else:
        records = [
            _write_sample(i, config, seed, out_dir)
            for i in tqdm(indices, total=config.count, disable=not progress)
        ]

    manifest = DatasetManifest(records, out_dir)
    path = manifest.write()
    logger.info(f"Wrote manifest with {len(records)} records to {path}")
    return manifest


# ----------------------------------------------------------------------------
# Batch mixing
# ----------------------------------------------------------------------------


def mix_batches(
    scenes: Sequence[T],
    materials: Sequence[T],
    batch_size: int,
    seed: int = 0,
    start_batch: int = 0,
) -> Iterator[List[T]]:
    """Endless batches of exactly 5B/8 Scenes and 3B/8 Materials items, shuffled within batch.

    Both streams cycle independently. Batch ``k`` depends only on (seed, k), so a resumed
    run can start at ``start_batch`` and see the same batches.
    """
    if batch_size <= 0 or batch_size % CYCLE:
        raise ConfigurationError(f"Batch size {batch_size} is not a positive multiple of 8")
    if not scenes or not materials:
        raise ConfigurationError("Both the scenes and the materials streams must be non-empty")
    n_scenes = batch_size * SCENES_PER_CYCLE // CYCLE
    n_materials = batch_size - n_scenes
    k = start_batch
    while True:
        batch = [scenes[(k * n_scenes + i) % len(scenes)] for i in range(n_scenes)]
        batch += [materials[(k * n_materials + i) % len(materials)] for i in range(n_materials)]
        order = np.random.default_rng([seed & SEED_MASK, k]).permutation(batch_size)
        yield [batch[i] for i in order]
        k += 1


def cycle_batches(
    items: Sequence[T], batch_size: int, seed: int = 0, start_batch: int = 0
) -> Iterator[List[T]]:
    """Single-stream fallback of mix_batches."""
    if not items:
        raise ConfigurationError("Cannot batch an empty stream")
    k = start_batch
    while True:
        batch = [items[(k * batch_size + i) % len(items)] for i in range(batch_size)]
        order = np.random.default_rng([seed & SEED_MASK, k]).permutation(batch_size)
        yield [batch[i] for i in order]
        k += 1


# ----------------------------------------------------------------------------
# Robustness sets
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessSample:
    """A warped preview of ``maps`` paired with the undistorted maps."""

    image: np.ndarray
    maps: MaterialMaps
    severity: Optional[float]
    distortion: DistortionSpec
    prompt: str = ""


def make_robustness_set(
    textures: Sequence[Union[MaterialMaps, Tuple[MaterialMaps, str]]],
    distortions: Sequence[Union[float, DistortionSpec]],
    seed: int = 0,
    rig: str = "studio",
    out_dir: Optional[Union[str, Path]] = None,
) -> List[RobustnessSample]:
    """Warp a preview of each texture by each grid entry (a severity or an explicit spec).

    When ``out_dir`` is given, inputs and ground truth are written with a
    ``robustness.jsonl`` manifest that records severity and spec in ``meta``.
    """
    samples: List[RobustnessSample] = []
    for i, texture in enumerate(textures):
        maps, prompt = texture if isinstance(texture, tuple) else (texture, "")
        preview = relight_preview(maps, rig, seed=seed)
        for k, entry in enumerate(distortions):
            if isinstance(entry, DistortionSpec):
                spec, severity = entry, None
            else:
                severity = float(entry)
                spec = random_distortion(np.random.default_rng([seed & SEED_MASK, i, k]), severity)
            spec.validate_spec()
            samples.append(
                RobustnessSample(
                    image=warp_image(preview, spec).astype(np.float32),
                    maps=maps,
                    severity=severity,
                    distortion=spec,
                    prompt=prompt,
                )
            )

    if out_dir is not None:
        _write_robustness_set(samples, Path(out_dir), len(distortions))
    return samples


def _write_robustness_set(samples: List[RobustnessSample], out_dir: Path, per_texture: int) -> Path:
    lines = []
    for n, sample in enumerate(samples):
        texture, variant = divmod(n, per_texture)
        sample_id = f"{texture:04d}-{variant:02d}"
        rel = Path("robustness") / sample_id
        save_png(out_dir / rel / "input.png", sample.image)
        gt_rel = Path("robustness") / f"{texture:04d}-gt"
        if variant == 0:
            save_material_maps(out_dir / gt_rel, sample.maps)
        record = ManifestRecord(
            id=sample_id,
            source="scenes",
            split="test",
            prompt=sample.prompt,
            crop_path=(rel / "input.png").as_posix(),
            meta={
                "severity": sample.severity,
                "distortion": sample.distortion.model_dump(mode="json"),
            },
            **{f"{name}_path": (gt_rel / f"{name}.png").as_posix() for name in MAP_NAMES},
        )
        lines.append(json.dumps(record.model_dump(mode="json"), sort_keys=True))
    path = out_dir / "robustness.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote robustness set with {len(samples)} inputs to {path}")
    return path
