"""Unit tests for appearance-similarity metrics."""

import json
import math

import httpx
import numpy as np
import pytest

from matstack.brdf_renderer import relight_preview
from matstack.errors import (
    ConfigurationError,
    DimensionError,
    EmbedderTimeoutError,
    EmbedderTransportError,
    EmbeddingDimensionError,
    MalformedEmbeddingError,
)
from matstack.run_config import EvalConfig
from matstack.similarity_eval import (
    BUILTIN_DIMENSION,
    BuiltinEmbedder,
    RemoteEmbedder,
    aggregate_scores,
    build_embedder,
    channel_image,
    cosine,
    embed_all,
    evaluate_generated,
    gradient_histogram,
    hue_histogram,
    pairwise_cosine_score,
    rerender_score,
)


class FlattenEmbedder:
    """Embeds an image as its raw values."""

    kind = "flatten"

    def __init__(self, dimension):
        self.dimension = dimension

    def embed(self, image):
        return np.asarray(image, dtype=np.float64).ravel()


def _image(seed, size=16):
    return np.random.default_rng(seed).random((size, size, 3))


# ---------------------------------------------------------------------------
# Builtin features
# ---------------------------------------------------------------------------


class TestBuiltinEmbedder:
    def test_unit_vector_of_declared_dimension(self):
        vector = BuiltinEmbedder().embed(_image(0))
        assert vector.shape == (BUILTIN_DIMENSION,) == (148,)
        assert np.linalg.norm(vector) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        embedder = BuiltinEmbedder()
        assert np.array_equal(embedder.embed(_image(3)), embedder.embed(_image(3)))

    def test_accepts_uint8_and_grey(self):
        embedder = BuiltinEmbedder()
        assert embedder.embed(np.full((8, 8, 3), 128, dtype=np.uint8)).shape == (148,)
        assert embedder.embed(np.full((8, 8), 0.5)).shape == (148,)

    def test_rejects_tiny_and_malformed_images(self):
        with pytest.raises(DimensionError):
            BuiltinEmbedder().embed(np.zeros((2, 2, 3)))
        with pytest.raises(DimensionError):
            BuiltinEmbedder().embed(np.zeros((8, 8, 4)))

    def test_hue_histogram_sums_to_one(self):
        assert hue_histogram(_image(1)).sum() == pytest.approx(1.0)

    def test_constant_image_has_no_gradient(self):
        assert not np.any(gradient_histogram(np.full((8, 8, 3), 0.3)))

    def test_quarter_turn_shifts_orientation_bins(self):
        image = _image(5)
        original = gradient_histogram(image)
        rotated = gradient_histogram(np.rot90(image))
        np.testing.assert_allclose(rotated, np.roll(original, 9), atol=1e-12)

    def test_horizontal_ramp_lands_in_first_bin(self):
        ramp = np.repeat(np.linspace(0.0, 1.0, 8)[None, :, None], 8, axis=0).repeat(3, axis=2)
        hist = gradient_histogram(ramp)
        assert hist[0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Cosine and aggregation
# ---------------------------------------------------------------------------


class TestCosine:
    def test_identical_vectors_score_exactly_one(self):
        v = np.random.default_rng(2).normal(size=148)
        assert cosine(v, v.copy()) == 1.0

    def test_opposite_and_orthogonal(self):
        assert cosine([1.0, 0.0], [-2.0, 0.0]) == pytest.approx(-1.0)
        assert cosine([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_errors(self):
        with pytest.raises(DimensionError):
            cosine([1.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            cosine([0.0, 0.0], [1.0, 0.0])


class TestAggregate:
    def test_constant_scores_have_zero_interval(self):
        result = aggregate_scores([0.5, 0.5, 0.5])
        assert result.mean == 0.5
        assert result.ci95 == 0.0
        assert result.n_pairs == 3

    def test_population_std(self):
        result = aggregate_scores([0.0, 1.0])
        assert result.mean == 0.5
        assert result.ci95 == pytest.approx(1.96 * 0.5 / math.sqrt(2))

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_scores([])


class TestPairwiseScore:
    def test_matches_explicit_enumeration(self):
        set_a = [_image(10, 4), _image(11, 4)]
        set_b = [_image(12, 4), _image(13, 4)]
        expected = []
        for a in set_a:
            for b in set_b:
                va, vb = a.ravel(), b.ravel()
                expected.append(float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))))

        result = pairwise_cosine_score(set_a, set_b, FlattenEmbedder(48))

        assert result.n_pairs == 4
        assert abs(result.mean - np.mean(expected)) < 1e-12
        assert abs(result.ci95 - 1.96 * np.std(expected) / 2.0) < 1e-12

    def test_singleton_self_score(self):
        image = _image(4)
        result = pairwise_cosine_score([image], [image], BuiltinEmbedder())
        assert result.mean == 1.0
        assert result.ci95 == 0.0

    def test_order_independent(self):
        set_a = [_image(s) for s in range(4)]
        set_b = [_image(s) for s in range(4, 7)]
        forward = pairwise_cosine_score(set_a, set_b, BuiltinEmbedder())
        backward = pairwise_cosine_score(set_a[::-1], set_b[::-1], BuiltinEmbedder())
        assert forward.mean == backward.mean

    def test_empty_set(self):
        with pytest.raises(ValueError):
            pairwise_cosine_score([], [_image(0)], BuiltinEmbedder())

    def test_failure_names_offending_image(self):
        images = [_image(0), np.zeros((8, 8, 4))]
        with pytest.raises(DimensionError) as exc_info:
            embed_all(images, BuiltinEmbedder(), label="A")
        assert "while embedding A[1]" in exc_info.value.__notes__


# ---------------------------------------------------------------------------
# Remote embedder
# ---------------------------------------------------------------------------


class TestRemoteEmbedder:
    @staticmethod
    def _embedder(handler, dimension=4):
        client = httpx.Client(transport=httpx.MockTransport(handler))
        return RemoteEmbedder("http://embedder.test/", dimension, timeout=1.0, client=client)

    def test_posts_png_and_returns_vector(self):
        seen = []

        def handler(request):
            seen.append(request)
            return httpx.Response(200, json={"vector": [1.0, 2.0, 3.0, 4.0], "dim": 4})

        vector = self._embedder(handler).embed(_image(0, 8))

        assert vector.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert str(seen[0].url) == "http://embedder.test/embed"
        assert seen[0].headers["content-type"] == "image/png"
        assert seen[0].content.startswith(b"\x89PNG")

    def test_retries_server_errors(self):
        calls = []

        def handler(request):
            calls.append(request)
            if len(calls) < 3:
                return httpx.Response(503)
            return httpx.Response(200, json={"vector": [0.0, 1.0, 0.0, 0.0], "dim": 4})

        assert self._embedder(handler).embed(_image(0, 8))[1] == 1.0
        assert len(calls) == 3

    def test_gives_up_after_attempts(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(500)

        with pytest.raises(EmbedderTransportError, match="500"):
            self._embedder(handler).embed(_image(0, 8))
        assert len(calls) == 3

    def test_timeout(self):
        def handler(request):
            raise httpx.ReadTimeout("slow", request=request)

        with pytest.raises(EmbedderTimeoutError):
            self._embedder(handler).embed(_image(0, 8))

    def test_client_errors_are_not_retried(self):
        calls = []

        def handler(request):
            calls.append(request)
            return httpx.Response(415, text="unsupported")

        with pytest.raises(EmbedderTransportError, match="415"):
            self._embedder(handler).embed(_image(0, 8))
        assert len(calls) == 1

    @pytest.mark.parametrize(
        "body",
        [b"not json", json.dumps({"dim": 4}).encode(), json.dumps({"vector": [[1.0, 2.0]]}).encode()],
    )
    def test_malformed_payload(self, body):
        def handler(request):
            return httpx.Response(200, content=body)

        with pytest.raises(MalformedEmbeddingError):
            self._embedder(handler).embed(_image(0, 8))

    def test_zero_vector_is_malformed(self):
        def handler(request):
            return httpx.Response(200, json={"vector": [0.0] * 4, "dim": 4})

        with pytest.raises(MalformedEmbeddingError):
            self._embedder(handler).embed(_image(0, 8))

    def test_wrong_dimension(self):
        def handler(request):
            return httpx.Response(200, json={"vector": [1.0, 2.0], "dim": 2})

        with pytest.raises(EmbeddingDimensionError):
            self._embedder(handler).embed(_image(0, 8))


class TestBuildEmbedder:
    def test_builtin(self):
        assert isinstance(build_embedder(EvalConfig()), BuiltinEmbedder)

    def test_remote(self):
        embedder = build_embedder(EvalConfig(embedder="http://localhost:9000", dimension=512))
        assert isinstance(embedder, RemoteEmbedder)
        assert embedder.dimension == 512
        embedder.close()

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            build_embedder(EvalConfig(embedder="clip"))


# ---------------------------------------------------------------------------
# Map-level evaluation
# ---------------------------------------------------------------------------


class TestEvaluateGenerated:
    def test_identical_maps_score_one_on_every_channel(self, checker_maps):
        report = evaluate_generated([checker_maps], [checker_maps], BuiltinEmbedder())
        assert set(report.channels) == {"albedo", "normal", "roughness", "render"}
        assert all(score.mean == 1.0 for score in report.channels.values())
        assert json.loads(report.to_json())["embedder"] == "builtin"

    def test_reference_images_drive_the_render_channel(self, checker_maps, grey_maps):
        reference = relight_preview(grey_maps, rig="studio", seed=0)
        report = evaluate_generated(
            [checker_maps], [checker_maps], BuiltinEmbedder(), reference_images=[reference]
        )
        assert report.channels["albedo"].mean == 1.0
        assert report.channels["render"].mean < 1.0

    def test_length_mismatch(self, checker_maps):
        with pytest.raises(ValueError):
            evaluate_generated([checker_maps], [], BuiltinEmbedder())

    def test_channel_images(self, checker_maps):
        assert channel_image(checker_maps, "roughness").shape == (32, 32, 3)
        with pytest.raises(ValueError):
            channel_image(checker_maps, "specular")

    def test_rerender_score_of_own_render(self, checker_maps):
        reference = relight_preview(checker_maps, rig="studio", seed=0)
        assert rerender_score(checker_maps, reference, BuiltinEmbedder()) == 1.0
