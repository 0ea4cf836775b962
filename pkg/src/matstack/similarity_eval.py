"""
Appearance-similarity metrics over pluggable image embedders.

The metric core computes the average pairwise cosine similarity between the embeddings of two
image sets, with a 95% confidence half-width over the per-pair scores. Embedders are
interchangeable behind :class:`Embedder`: the builtin statistics embedder runs offline, the
remote one reaches any backbone served over the ``/embed`` HTTP contract.

Key Features:
    - ``BuiltinEmbedder``: 4x4 mean-RGB grid, 64-bin hue histogram and 36-bin gradient-orientation
      histogram, L2-normalized (148 dims)
    - ``RemoteEmbedder``: POSTs PNG bytes, validates the returned vector, retries transient failures
    - Order-independent aggregation (``math.fsum``); identical embeddings score exactly 1.0
    - Re-render score: relight generated maps and compare against a reference image

Wire Protocol:
    POST <endpoint>/embed with Content-Type image/png and the raw PNG as body.
    A 200 response carries JSON ``{"vector": [float, ...], "dim": int}``.

Usage:
    ```python
    from matstack.similarity_eval import BuiltinEmbedder, pairwise_cosine_score

    score = pairwise_cosine_score(generated_albedos, reference_albedos, BuiltinEmbedder())
    print(score.mean, score.ci95)
    ```
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import httpx
import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field

from .brdf_renderer import LightRig, relight_preview
from .errors import (
    ConfigurationError,
    DimensionError,
    EmbedderTimeoutError,
    EmbedderTransportError,
    EmbeddingDimensionError,
    MalformedEmbeddingError,
)
from .material_io import encode_png_bytes, srgb_encode, to_uint8
from .material_maps import MaterialMaps
from .run_config import EvalConfig

logger = logging.getLogger(__name__)

GRID_CELLS = 4
HUE_BINS = 64
ORIENTATION_BINS = 36
BINS_PER_QUADRANT = ORIENTATION_BINS // 4
BUILTIN_DIMENSION = 3 * GRID_CELLS * GRID_CELLS + HUE_BINS + ORIENTATION_BINS
CI_Z = 1.96
BIN_EPSILON = 1e-9
RETRY_ATTEMPTS = 3

REPORT_CHANNELS = ("albedo", "normal", "roughness", "render")


@runtime_checkable
class Embedder(Protocol):
    dimension: int

    def embed(self, image: np.ndarray) -> np.ndarray: ...


def _as_unit_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.ndim != 3 or image.shape[-1] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise DimensionError(f"Expected a non-empty (H, W, 3) image, got shape {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return np.clip(image.astype(np.float64), 0.0, 1.0)


def grid_means(image: np.ndarray) -> np.ndarray:
    """Mean RGB over a 4x4 grid of cells, row-major (48 values)."""
    rgb = _as_unit_rgb(image)
    if rgb.shape[0] < GRID_CELLS or rgb.shape[1] < GRID_CELLS:
        raise DimensionError(f"Image {rgb.shape[:2]} is smaller than the {GRID_CELLS}x{GRID_CELLS} grid")
    cells = []
    for band in np.array_split(rgb, GRID_CELLS, axis=0):
        for cell in np.array_split(band, GRID_CELLS, axis=1):
            cells.append(cell.reshape(-1, 3).mean(axis=0))
    return np.concatenate(cells)


def hue_histogram(image: np.ndarray) -> np.ndarray:
    """Fraction of pixels per hue bin; PIL's 8-bit hue divided into 64 bins."""
    rgb = _as_unit_rgb(image)
    hsv = np.asarray(Image.fromarray(to_uint8(rgb)).convert("HSV"))
    bins = hsv[..., 0].astype(np.int64) // (256 // HUE_BINS)
    counts = np.bincount(bins.ravel(), minlength=HUE_BINS).astype(np.float64)
    return counts / counts.sum()


def gradient_histogram(image: np.ndarray) -> np.ndarray:
    """Magnitude-weighted histogram of gradient orientation in 10° bins.

    Orientation is measured with y pointing up. Binning works per quadrant, so rotating the
    image by 90° shifts the histogram by exactly nine bins. A constant image yields zeros.
    """
    rgb = _as_unit_rgb(image)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    if luma.shape[0] < 2 or luma.shape[1] < 2:
        return np.zeros(ORIENTATION_BINS)
    d_row, d_col = np.gradient(luma)
    gx, gy = d_col, -d_row
    magnitude = np.hypot(gx, gy)

    # rotate every vector into the quadrant u > 0, v >= 0
    quadrant = np.select(
        [(gx > 0) & (gy >= 0), (gy > 0) & (gx <= 0), (gx < 0) & (gy <= 0)], [0, 1, 2], 3
    )
    u = np.choose(quadrant, [gx, gy, -gx, -gy])
    v = np.choose(quadrant, [gy, -gx, -gy, gx])
    within = np.degrees(np.arctan2(v, np.where(u > 0, u, 1.0)))
    sub_bin = np.minimum(
        np.floor(within / (90.0 / BINS_PER_QUADRANT) + BIN_EPSILON), BINS_PER_QUADRANT - 1
    ).astype(np.int64)
    bins = quadrant * BINS_PER_QUADRANT + sub_bin

    valid = magnitude > 0
    hist = np.bincount(bins[valid], weights=magnitude[valid], minlength=ORIENTATION_BINS)
    total = hist.sum()
    return hist / total if total > 0 else hist


class BuiltinEmbedder:
    """Deterministic offline embedder built from color and gradient statistics."""

    kind = "builtin"

    def __init__(self) -> None:
        self.dimension = BUILTIN_DIMENSION

    def embed(self, image: np.ndarray) -> np.ndarray:
        vector = np.concatenate(
            [grid_means(image), hue_histogram(image), gradient_histogram(image)]
        )
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise DimensionError("Image produced an all-zero feature vector")
        return vector / norm


class RemoteEmbedder:
    """
    Client for an embedding service speaking the ``/embed`` protocol.

    Timeouts, transport failures and 5xx responses are retried; after ``attempts`` tries the
    last failure surfaces as a typed :class:`EmbedderTransportError`. Malformed payloads and
    dimension mismatches are not retried. There is no fallback to the builtin embedder.
    """

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        dimension: int,
        timeout: float = 10.0,
        client: Optional[httpx.Client] = None,
        attempts: int = RETRY_ATTEMPTS,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.dimension = dimension
        self.timeout = timeout
        self.attempts = attempts
        self._client = client or httpx.Client(timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _post(self, body: bytes) -> httpx.Response:
        last_error: Optional[EmbedderTransportError] = None
        for attempt in range(1, self.attempts + 1):
            try:
                response = self._client.post(
                    f"{self.endpoint}/embed",
                    content=body,
                    headers={"Content-Type": "image/png"},
                    timeout=self.timeout,
                )
            except httpx.TimeoutException as e:
                last_error = EmbedderTimeoutError(f"Embedder at {self.endpoint} timed out: {e}")
            except httpx.TransportError as e:
                last_error = EmbedderTransportError(f"Embedder at {self.endpoint} unreachable: {e}")
            else:
                if response.status_code < 500:
                    return response
                last_error = EmbedderTransportError(
                    f"Embedder at {self.endpoint} answered {response.status_code}"
                )
            logger.warning(f"Embedding attempt {attempt}/{self.attempts} failed: {last_error}")
        assert last_error is not None
        logger.error(f"Giving up on embedder {self.endpoint} after {self.attempts} attempts")
        raise last_error

    def embed(self, image: np.ndarray) -> np.ndarray:
        response = self._post(encode_png_bytes(_as_unit_rgb(image)))
        if response.status_code != 200:
            raise EmbedderTransportError(
                f"Embedder at {self.endpoint} answered {response.status_code}: {response.text[:200]}"
            )
        try:
            payload = response.json()
            vector = np.asarray(payload["vector"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise MalformedEmbeddingError(f"Embedder returned an unusable payload: {e}") from e
        if vector.ndim != 1:
            raise MalformedEmbeddingError(f"Embedding must be a flat list, got shape {vector.shape}")
        if len(vector) != self.dimension:
            raise EmbeddingDimensionError(
                f"Embedder returned {len(vector)} dims, expected {self.dimension}"
            )
        if not np.all(np.isfinite(vector)) or not np.any(vector):
            raise MalformedEmbeddingError("Embedding must be finite with a non-zero norm")
        return vector


def build_embedder(config: EvalConfig, client: Optional[httpx.Client] = None) -> Embedder:
    """``builtin`` or an ``http(s)://`` endpoint of a remote embedder."""
    if config.embedder == "builtin":
        return BuiltinEmbedder()
    if config.embedder.startswith(("http://", "https://")):
        return RemoteEmbedder(config.embedder, config.dimension, config.timeout, client=client)
    raise ConfigurationError(f"Unknown embedder: {config.embedder}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; bit-identical vectors give exactly 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"Cannot compare embeddings of shapes {a.shape} and {b.shape}")
    norm = math.sqrt(math.fsum(a * a) * math.fsum(b * b))
    if norm == 0:
        raise ValueError("Cosine similarity is undefined for zero vectors")
    if np.array_equal(a, b):
        return 1.0
    return max(-1.0, min(1.0, math.fsum(a * b) / norm))


@dataclass(frozen=True)
class PairwiseScore:
    mean: float
    ci95: float
    n_pairs: int


def aggregate_scores(scores: Sequence[float]) -> PairwiseScore:
    """Mean and 1.96·std/√n (population std) of per-pair scores."""
    n = len(scores)
    if n == 0:
        raise ValueError("Cannot aggregate an empty score list")
    mean = math.fsum(scores) / n
    std = math.sqrt(math.fsum((s - mean) ** 2 for s in scores) / n)
    return PairwiseScore(mean=mean, ci95=CI_Z * std / math.sqrt(n), n_pairs=n)


def embed_all(
    images: Sequence[np.ndarray], embedder: Embedder, max_workers: int = 4, label: str = "set"
) -> List[np.ndarray]:
    """Embed concurrently; a failure is re-raised with the offending image index noted."""

    def run(item: Tuple[int, np.ndarray]) -> np.ndarray:
        index, image = item
        try:
            return embedder.embed(image)
        except Exception as e:
            e.add_note(f"while embedding {label}[{index}]")
            raise

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, enumerate(images)))


def pairwise_cosine_score(
    set_a: Sequence[np.ndarray],
    set_b: Sequence[np.ndarray],
    embedder: Embedder,
    max_workers: int = 4,
) -> PairwiseScore:
    """Average cosine over all |A|·|B| pairs with its 95% confidence half-width."""
    if not set_a or not set_b:
        raise ValueError("Both image sets must be non-empty")
    emb_a = embed_all(set_a, embedder, max_workers, label="A")
    emb_b = embed_all(set_b, embedder, max_workers, label="B")
    scores = [cosine(a, b) for a in emb_a for b in emb_b]
    result = aggregate_scores(scores)
    logger.debug(f"Pairwise score over {result.n_pairs} pairs: {result.mean:.4f} ± {result.ci95:.4f}")
    return result


def rerender_score(
    maps: MaterialMaps,
    reference: np.ndarray,
    embedder: Embedder,
    rig: Union[str, LightRig] = "studio",
    seed: int = 0,
) -> float:
    """Cosine between the embedding of ``relight_preview(maps)`` and of ``reference``."""
    rendered = relight_preview(maps, rig=rig, seed=seed)
    return cosine(embedder.embed(rendered), embedder.embed(reference))


def channel_image(maps: MaterialMaps, channel: str) -> np.ndarray:
    """The image a map channel is embedded as: sRGB albedo, encoded normal, grey roughness."""
    if channel == "albedo":
        return srgb_encode(maps.albedo)
    if channel == "normal":
        return np.asarray(maps.normal)
    if channel in ("roughness", "height", "metallic"):
        return np.repeat(np.asarray(getattr(maps, channel))[..., None], 3, axis=-1)
    raise ValueError(f"Unknown map channel: {channel}")


class ChannelScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float = Field(ge=-1.0, le=1.0)
    ci95: float = Field(ge=0.0)
    n_pairs: int = Field(ge=1)


class SimilarityReport(BaseModel):
    """Per-channel mean pairwise cosine with 95% confidence half-widths."""

    model_config = ConfigDict(frozen=True)

    embedder: str
    channels: Dict[str, ChannelScore]

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def evaluate_generated(
    generated: Sequence[MaterialMaps],
    references: Sequence[MaterialMaps],
    embedder: Embedder,
    reference_images: Optional[Sequence[np.ndarray]] = None,
    rig: Union[str, LightRig] = "studio",
    seed: int = 0,
    max_workers: int = 4,
) -> SimilarityReport:
    """Score each generated sample against its own reference and aggregate per channel.

    The render channel compares relit generated maps against ``reference_images`` when given,
    else against the relit reference maps.
    """
    if len(generated) != len(references) or not generated:
        raise ValueError(
            f"Need matching non-empty lists, got {len(generated)} generated and {len(references)} references"
        )
    if reference_images is not None and len(reference_images) != len(generated):
        raise ValueError("reference_images must match the generated samples one to one")

    channels: Dict[str, ChannelScore] = {}
    for channel in REPORT_CHANNELS:
        if channel == "render":
            gen_images = [relight_preview(m, rig=rig, seed=seed) for m in generated]
            ref_images = (
                list(reference_images)
                if reference_images is not None
                else [relight_preview(m, rig=rig, seed=seed) for m in references]
            )
        else:
            gen_images = [channel_image(m, channel) for m in generated]
            ref_images = [channel_image(m, channel) for m in references]
        gen_emb = embed_all(gen_images, embedder, max_workers, label=f"generated {channel}")
        ref_emb = embed_all(ref_images, embedder, max_workers, label=f"reference {channel}")
        scores = [cosine(g, r) for g, r in zip(gen_emb, ref_emb)]
        channels[channel] = ChannelScore(**aggregate_scores(scores).__dict__)
        logger.info(f"{channel}: {channels[channel].mean:.4f} ± {channels[channel].ci95:.4f}")

    return SimilarityReport(embedder=getattr(embedder, "kind", type(embedder).__name__), channels=channels)
