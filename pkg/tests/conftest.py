"""Shared fixtures for matstack tests."""

import json
import os

import numpy as np
import pytest
import torch

from matstack.material_maps import MaterialMaps, MaterialMask
from matstack.procedural_materials import synth_material
from matstack.run_config import DiffusionConfig, ModelConfig, SamplerConfig, TrainConfig


# ---------------------------------------------------------------------------
# Materials
# ---------------------------------------------------------------------------


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def grey_maps():
    """16px constant mid-grey dielectric material."""
    return MaterialMaps.constant(16, albedo=(0.5, 0.5, 0.5), roughness=0.5)


@pytest.fixture
def random_maps():
    """Factory fixture for valid random maps with non-flat normals."""

    def _create(resolution=16, seed=0, dtype=np.float32):
        gen = np.random.default_rng(seed)
        n = gen.normal(size=(resolution, resolution, 3))
        n[..., 2] = np.abs(n[..., 2]) + 0.5
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        return MaterialMaps(
            albedo=gen.uniform(size=(resolution, resolution, 3)).astype(dtype),
            normal=((n + 1.0) * 0.5).astype(dtype),
            roughness=gen.uniform(size=(resolution, resolution)).astype(dtype),
            height=gen.uniform(size=(resolution, resolution)).astype(dtype),
            metallic=gen.uniform(size=(resolution, resolution)).astype(dtype),
        )

    return _create


@pytest.fixture
def checker_maps():
    """32px checker material with period 8."""
    _, maps = synth_material("checker", seed=3, resolution=32, period=8)
    return maps


@pytest.fixture
def half_mask():
    """16px mask with the left half set."""
    values = np.zeros((16, 16), dtype=np.float32)
    values[:, :8] = 1.0
    return MaterialMask(values=values)


# ---------------------------------------------------------------------------
# Model / diffusion configs
# ---------------------------------------------------------------------------


@pytest.fixture
def tiny_model_config():
    """Smallest useful denoiser: 16px frames, two patches per side, one block."""
    return ModelConfig(
        patch_size=8,
        embed_dim=16,
        depth=1,
        heads=2,
        text_vocab_size=64,
        text_slots=4,
        resolution=16,
    )


@pytest.fixture
def short_diffusion_config():
    return DiffusionConfig(schedule="cosine", num_timesteps=50)


@pytest.fixture
def fast_train_config():
    return TrainConfig(
        batch_size=8,
        lr=1e-3,
        steps=4,
        checkpoint_every=2,
        log_every=1,
        deterministic=True,
        seed=7,
    )


@pytest.fixture
def sampler_config():
    return SamplerConfig(steps=5, eta=0.0, seed=11)


@pytest.fixture(autouse=True)
def _torch_threads():
    """Single-threaded torch keeps reductions bit-reproducible across tests."""
    torch.set_num_threads(1)
    yield


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    """Strip MP__ variables leaking in from the caller's shell."""
    for key in list(os.environ):
        if key.upper().startswith("MP__"):
            monkeypatch.delenv(key)


TINY_RUN_CONFIG = {
    "dataset": {
        "count": 8,
        "resolution": 16,
        "families": ["checker", "constant"],
        "max_occluders": 0,
        "val_fraction": 0.0,
        "test_fraction": 0.0,
    },
    "model": {
        "patch_size": 8,
        "embed_dim": 16,
        "depth": 1,
        "heads": 2,
        "text_vocab_size": 64,
        "text_slots": 4,
        "resolution": 16,
    },
    "diffusion": {"schedule": "cosine", "num_timesteps": 50},
    "train": {"batch_size": 8, "steps": 2, "checkpoint_every": 1, "log_every": 1, "seed": 7},
    "sample": {"steps": 3, "seed": 11},
    "eval": {"max_workers": 1},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    """A run config small enough to drive every CLI command in seconds."""
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN_CONFIG), encoding="utf-8")
    return path
