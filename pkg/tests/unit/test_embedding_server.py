"""Unit tests for the embedding server."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from matstack.embedding_server import create_embedding_app
from matstack.material_io import decode_png_bytes, encode_png_bytes
from matstack.similarity_eval import BuiltinEmbedder, RemoteEmbedder, pairwise_cosine_score


@pytest.fixture
def client():
    return TestClient(create_embedding_app())


@pytest.fixture
def png_bytes():
    return encode_png_bytes(np.random.default_rng(0).random((16, 16, 3)))


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------


class TestEndpoints:
    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "ok", "dim": 148}

    def test_embed(self, client, png_bytes):
        response = client.post("/embed", content=png_bytes, headers={"Content-Type": "image/png"})
        assert response.status_code == 200
        payload = response.json()
        assert payload["dim"] == 148
        expected = BuiltinEmbedder().embed(decode_png_bytes(png_bytes))
        np.testing.assert_allclose(payload["vector"], expected, rtol=1e-12)

    def test_wrong_content_type(self, client, png_bytes):
        response = client.post("/embed", content=png_bytes, headers={"Content-Type": "image/jpeg"})
        assert response.status_code == 415

    def test_undecodable_body(self, client):
        response = client.post("/embed", content=b"not a png", headers={"Content-Type": "image/png"})
        assert response.status_code == 400

    def test_image_too_small(self, client):
        tiny = encode_png_bytes(np.zeros((2, 2, 3)))
        response = client.post("/embed", content=tiny, headers={"Content-Type": "image/png"})
        assert response.status_code == 422


# ---------------------------------------------------------------------------
# Client against server
# ---------------------------------------------------------------------------


class TestRemoteRoundTrip:
    def test_remote_embedder_matches_builtin(self, client):
        image = np.random.default_rng(1).random((16, 16, 3))
        remote = RemoteEmbedder("http://testserver", 148, client=client)

        vector = remote.embed(image)

        expected = BuiltinEmbedder().embed(decode_png_bytes(encode_png_bytes(image)))
        np.testing.assert_allclose(vector, expected, rtol=1e-12)

    def test_scores_match_builtin_on_8bit_images(self, client):
        rng = np.random.default_rng(2)
        set_a = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(2)]
        set_b = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(3)]
        remote = RemoteEmbedder("http://testserver", 148, client=client)

        local = pairwise_cosine_score(set_a, set_b, BuiltinEmbedder())
        served = pairwise_cosine_score(set_a, set_b, remote, max_workers=1)

        assert served.n_pairs == local.n_pairs == 6
        assert served.mean == pytest.approx(local.mean, abs=1e-6)
        assert served.ci95 == pytest.approx(local.ci95, abs=1e-6)
