"""Unit tests for the command-line interface."""

import json

import httpx
import pytest

from matstack import cli
from matstack.cli import EXIT_FAILURE, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main
from matstack.dit_model import build_model
from matstack.errors import ConfigurationError, TrainingDivergedError
from matstack.material_io import save_material_maps
from matstack.model_checkpoint import save_checkpoint
from matstack.scene_dataset import MANIFEST_NAME, DatasetManifest
from matstack.similarity_eval import RemoteEmbedder


@pytest.fixture
def checkpoint(tmp_path, tiny_model_config, short_diffusion_config):
    model = build_model(tiny_model_config, short_diffusion_config.num_timesteps, seed=0)
    return save_checkpoint(tmp_path / "tiny.ckpt", model, tiny_model_config, short_diffusion_config)


@pytest.fixture
def dataset_dir(tmp_path, tiny_config_file):
    out = tmp_path / "data"
    assert main(["--config", str(tiny_config_file), "dataset-gen", "--out", str(out), "--seed", "3"]) == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# Parsing and configuration
# ---------------------------------------------------------------------------


class TestParser:
    def test_command_is_required(self):
        with pytest.raises(SystemExit) as exc_info:
            build_parser().parse_args([])
        assert exc_info.value.code == 2

    def test_generate_requires_checkpoint(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["generate", "--out", "x"])

    def test_parse_grid(self):
        assert cli._parse_grid("3X2") == (3, 2)
        for bad in ("2", "axb", "0x2"):
            with pytest.raises(ConfigurationError):
                cli._parse_grid(bad)


class TestConfigPrecedence:
    def test_flags_beat_environment(self, monkeypatch):
        monkeypatch.setenv("MP__SAMPLE__STEPS", "7")
        base = ["generate", "--ckpt", "m.ckpt", "--out", "o"]

        from_env = cli._resolve_config(build_parser().parse_args(base))
        from_flag = cli._resolve_config(build_parser().parse_args(base + ["--steps", "3"]))

        assert from_env.sample.steps == 7
        assert from_flag.sample.steps == 3

    def test_environment_beats_file(self, monkeypatch, tiny_config_file):
        monkeypatch.setenv("MP__SAMPLE__SEED", "99")
        args = build_parser().parse_args(["--config", str(tiny_config_file), "generate", "--ckpt", "m", "--out", "o"])
        config = cli._resolve_config(args)
        assert config.sample.seed == 99
        assert config.sample.steps == 3

    def test_mode_and_image_flags(self):
        args = build_parser().parse_args(
            ["generate", "--ckpt", "m", "--out", "o", "--mode", "text", "--image", "crop.png", "--no-roll"]
        )
        sample = cli._resolve_config(args).sample
        assert sample.mode.value == "text"
        assert sample.image_path == "crop.png"
        assert sample.roll is False

    def test_dataset_seed_goes_to_the_dataset_section(self, monkeypatch):
        monkeypatch.setenv("MP__DATASET__SEED", "4")

        from_env = cli._resolve_config(build_parser().parse_args(["dataset-gen", "--out", "d"]))
        from_flag = cli._resolve_config(build_parser().parse_args(["dataset-gen", "--out", "d", "--seed", "9"]))

        assert from_env.dataset.seed == 4
        assert from_flag.dataset.seed == 9
        assert from_flag.sample.seed == 0

    def test_embedder_flag(self):
        args = build_parser().parse_args(
            ["eval", "--manifest", "m", "--generated-dir", "g", "--out", "o", "--embedder", "http://e:1"]
        )
        assert cli._resolve_config(args).eval.embedder == "http://e:1"


# ---------------------------------------------------------------------------
# Exit codes
# ---------------------------------------------------------------------------


class TestExitCodes:
    def test_missing_checkpoint(self, tmp_path, capsys):
        code = main(["generate", "--ckpt", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE
        assert "does not exist" in capsys.readouterr().err

    def test_invalid_flag_value(self, tmp_path, checkpoint):
        code = main(["generate", "--ckpt", str(checkpoint), "--out", str(tmp_path / "o"), "--eta", "1.5"])
        assert code == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        code = main(["--config", str(tmp_path / "missing.json"), "preview", "--maps-dir", ".", "--out", "p.png"])
        assert code == EXIT_USAGE

    def test_missing_map_files(self, tmp_path):
        (tmp_path / "maps").mkdir()
        code = main(["preview", "--maps-dir", str(tmp_path / "maps"), "--out", str(tmp_path / "p.png")])
        assert code == EXIT_USAGE

    def test_training_divergence(self, tmp_path, tiny_config_file, dataset_dir, monkeypatch):
        def diverge(self, examples, steps=None, progress=False):
            raise TrainingDivergedError(step=1, t_histogram={}, grad_norm=None)

        monkeypatch.setattr(cli.DiffusionTrainer, "train", diverge)
        code = main(
            [
                "--config", str(tiny_config_file),
                "train", "--manifest", str(dataset_dir / MANIFEST_NAME), "--out", str(tmp_path / "run"),
            ]
        )
        assert code == EXIT_FAILURE


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


class TestCommands:
    def test_dataset_gen(self, dataset_dir):
        manifest = DatasetManifest.read(dataset_dir / MANIFEST_NAME)
        assert len(manifest) == 8
        assert (dataset_dir / "config.json").exists()

    def test_dataset_gen_records_its_seed(self, dataset_dir):
        dumped = json.loads((dataset_dir / "config.json").read_text())
        assert dumped["dataset"]["seed"] == 3

    def test_dumped_config_reproduces_the_corpus(self, tmp_path, dataset_dir):
        again = tmp_path / "again"
        assert main(["--config", str(dataset_dir / "config.json"), "dataset-gen", "--out", str(again)]) == EXIT_OK
        assert (again / MANIFEST_NAME).read_text() == (dataset_dir / MANIFEST_NAME).read_text()
        for name in ("albedo.png", "normal.png"):
            assert (again / "samples" / "000000" / name).read_bytes() == (dataset_dir / "samples" / "000000" / name).read_bytes()

    def test_preview(self, tmp_path, checker_maps):
        save_material_maps(tmp_path / "maps", checker_maps)
        out = tmp_path / "preview.png"
        assert main(["preview", "--maps-dir", str(tmp_path / "maps"), "--rig", "ambient", "--out", str(out)]) == EXIT_OK
        assert out.exists()

    def test_generate_text_only(self, tmp_path, checkpoint):
        out = tmp_path / "gen"
        code = main(
            [
                "generate", "--ckpt", str(checkpoint), "--mode", "text", "--prompt", "red brick",
                "--steps", "3", "--out", str(out), "--preview", "--upsample",
            ]
        )
        assert code == EXIT_OK
        for name in ("albedo", "normal", "roughness", "height", "metallic", "mask", "preview"):
            assert (out / f"{name}.png").exists()
        meta = json.loads((out / "generation.json").read_text())
        assert meta["resolution"] == 32
        assert meta["upsampler"] == "bicubic-x2"
        assert meta["mode"] == "text"

    def test_tile(self, tmp_path, checkpoint, capsys):
        out = tmp_path / "tile"
        code = main(["tile", "--ckpt", str(checkpoint), "--prompt", "tiles", "--grid", "2x2", "--steps", "2", "--out", str(out)])
        assert code == EXIT_OK
        assert (out / "albedo.png").exists()
        assert "seam ratio" in capsys.readouterr().out

    def test_eval_against_ground_truth(self, tmp_path, tiny_config_file, dataset_dir):
        manifest = DatasetManifest.read(dataset_dir / MANIFEST_NAME)
        generated = tmp_path / "generated"
        for record in manifest.records:
            save_material_maps(generated / record.id, manifest.load_sample(record).maps)
        report_path = tmp_path / "report.json"

        code = main(
            [
                "--config", str(tiny_config_file),
                "eval", "--manifest", str(dataset_dir / MANIFEST_NAME), "--generated-dir", str(generated),
                "--split", "train", "--out", str(report_path),
            ]
        )

        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert report["embedder"] == "builtin"
        assert all(channel["mean"] > 0.99 for channel in report["channels"].values())
        assert all(channel["n_pairs"] == 8 for channel in report["channels"].values())

    def test_eval_with_empty_split(self, tmp_path, tiny_config_file, dataset_dir):
        code = main(
            [
                "--config", str(tiny_config_file),
                "eval", "--manifest", str(dataset_dir / MANIFEST_NAME), "--generated-dir", str(tmp_path),
                "--out", str(tmp_path / "r.json"),
            ]
        )
        assert code == EXIT_USAGE

    def test_eval_embedder_unreachable(self, tmp_path, tiny_config_file, dataset_dir, monkeypatch):
        manifest = DatasetManifest.read(dataset_dir / MANIFEST_NAME)
        for record in manifest.records:
            save_material_maps(tmp_path / "generated" / record.id, manifest.load_sample(record).maps)

        def refuse(request):
            raise httpx.ConnectError("connection refused", request=request)

        client = httpx.Client(transport=httpx.MockTransport(refuse))
        monkeypatch.setattr(
            cli, "build_embedder", lambda config: RemoteEmbedder("http://embedder.test", 148, client=client)
        )
        code = main(
            [
                "--config", str(tiny_config_file),
                "eval", "--manifest", str(dataset_dir / MANIFEST_NAME), "--generated-dir", str(tmp_path / "generated"),
                "--split", "train", "--out", str(tmp_path / "r.json"),
            ]
        )
        assert code == EXIT_IO


class TestDeterminismAndContracts:
    def test_image_mode_without_image(self, tmp_path, checkpoint):
        code = main(["generate", "--ckpt", str(checkpoint), "--mode", "image", "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE

    def test_tile_image_mode_without_image(self, tmp_path, checkpoint):
        code = main(["tile", "--ckpt", str(checkpoint), "--mode", "image", "--prompt", "slate", "--out", str(tmp_path / "o")])
        assert code == EXIT_USAGE
        assert not (tmp_path / "o").exists()

    def test_negative_seed(self, tmp_path, checkpoint):
        flags = ["generate", "--ckpt", str(checkpoint), "--mode", "text", "--prompt", "slate", "--steps", "2"]
        code = main(flags + ["--seed", "-1", "--eta", "0.5", "--roll", "--preview", "--out", str(tmp_path / "o")])
        assert code == EXIT_OK
        assert json.loads((tmp_path / "o" / "generation.json").read_text())["seed"] == -1

    def test_missing_manifest(self, tmp_path, tiny_config_file):
        code = main(
            ["--config", str(tiny_config_file), "train", "--manifest", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "r")]
        )
        assert code == EXIT_USAGE

    def test_unwritable_output(self, tmp_path, tiny_config_file):
        blocker = tmp_path / "occupied"
        blocker.write_text("not a directory")
        code = main(["--config", str(tiny_config_file), "dataset-gen", "--out", str(blocker / "data")])
        assert code == EXIT_IO

    def test_fixed_seed_reproduces_files(self, tmp_path, checkpoint):
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            flags = ["generate", "--ckpt", str(checkpoint), "--mode", "text", "--prompt", "slate", "--steps", "3", "--seed", "4"]
            assert main(flags + ["--out", str(out)]) == EXIT_OK
            outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.png"))})
        assert outputs[0] == outputs[1]

    def test_single_tile_matches_rolled_generation(self, tmp_path, checkpoint):
        common = ["--ckpt", str(checkpoint), "--prompt", "slate", "--steps", "3", "--seed", "4"]
        assert main(["generate", *common, "--mode", "text", "--roll", "--out", str(tmp_path / "gen")]) == EXIT_OK
        assert main(["tile", *common, "--grid", "1x1", "--out", str(tmp_path / "tile")]) == EXIT_OK
        for name in ("albedo", "normal", "roughness", "height", "metallic"):
            assert (tmp_path / "gen" / f"{name}.png").read_bytes() == (tmp_path / "tile" / f"{name}.png").read_bytes()
