"""Unit tests for run configuration loading."""

import json

import pytest
from pydantic import ValidationError

from matstack.errors import ConfigurationError
from matstack.material_maps import FrameMode
from matstack.run_config import (
    DatasetConfig,
    ModelConfig,
    RunConfig,
    SamplerConfig,
    load_run_config,
)


class TestDefaults:
    def test_defaults(self):
        config = load_run_config()
        assert config.model.resolution == 32
        assert config.diffusion.num_timesteps == 1000
        assert config.train.batch_size == 8
        assert config.sample.mode is FrameMode.IMAGE_COND
        assert config.eval.dimension == 148

    def test_sections_are_frozen(self):
        with pytest.raises(ValidationError):
            load_run_config().train.steps = 3


# ---------------------------------------------------------------------------
# JSON file and environment layering
# ---------------------------------------------------------------------------


class TestLoadRunConfig:
    def test_file_values(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"steps": 12}, "sample": {"mode": "text"}}))

        config = load_run_config(path)
        assert config.train.steps == 12
        assert config.sample.mode is FrameMode.TEXT_ONLY
        assert config.train.lr == 1e-4

    def test_environment_beats_file(self, tmp_path, monkeypatch):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"steps": 12, "lr": 0.01}}))
        monkeypatch.setenv("MP__TRAIN__STEPS", "99")

        config = load_run_config(path)
        assert config.train.steps == 99
        assert config.train.lr == 0.01

    def test_environment_without_file(self, monkeypatch):
        monkeypatch.setenv("MP__SAMPLE__ETA", "0.5")
        assert load_run_config().sample.eta == 0.5

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="does not exist"):
            load_run_config(tmp_path / "missing.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{train: 1")
        with pytest.raises(ConfigurationError, match="not valid JSON"):
            load_run_config(path)

    def test_top_level_must_be_object(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            load_run_config(path)

    @pytest.mark.parametrize(
        "data",
        [
            {"trainer": {}},
            {"train": {"stepz": 3}},
            {"train": {"steps": 0}},
            {"sample": {"eta": 1.5}},
            {"sample": {"mode": "video"}},
        ],
    )
    def test_rejects_unknown_or_invalid_values(self, data):
        with pytest.raises(ConfigurationError):
            RunConfig.from_mapping(data)

    def test_dump_then_reload_is_equal(self, tmp_path):
        config = RunConfig.from_mapping({"model": {"depth": 2}, "eval": {"rig": "ambient"}})
        path = config.dump_json(tmp_path / "out" / "config.json")
        assert load_run_config(path) == config


class TestSectionValidation:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError, match="divisible by heads"):
            ModelConfig(embed_dim=24, heads=5)

    def test_resolution_must_divide_into_patches(self):
        with pytest.raises(ValidationError, match="patch_size"):
            ModelConfig(resolution=20, patch_size=8)

    def test_unknown_family(self):
        with pytest.raises(ValidationError):
            DatasetConfig(families=("marble",))

    def test_roll_offset_must_be_positive(self):
        with pytest.raises(ValidationError):
            SamplerConfig(roll_max_offset=0)
