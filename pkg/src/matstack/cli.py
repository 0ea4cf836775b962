"""Command-line entry point: ``matstack <command> [options]``.

Exit codes: 0 success, 1 run failure (diverged training, stuck generation), 2 configuration or
condition error (including missing input files), 3 IO or embedder transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

from pydantic import ValidationError

from .brdf_renderer import relight_preview
from .diffusion_trainer import DiffusionTrainer, examples_from_manifest
from .errors import (
    CheckpointError,
    ConditionError,
    ConfigurationError,
    DimensionError,
    MatstackError,
    ModeError,
    SpecError,
    StructureError,
)
from .hooks import create_checkpoint_hook, create_loss_csv_hook
from .material_generator import UPSAMPLER, MaterialGenerator
from .material_io import (
    load_crop,
    load_mask,
    load_material_maps,
    save_mask,
    save_material_maps,
    save_png,
)
from .material_maps import MAP_NAMES, FrameMode, MaterialMaps
from .model_checkpoint import load_checkpoint
from .run_config import RunConfig, load_run_config
from .scene_dataset import DatasetManifest, build_dataset
from .similarity_eval import build_embedder, evaluate_generated

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3

CONFIG_DUMP_NAME = "config.json"

USAGE_ERRORS = (
    ConfigurationError,
    ConditionError,
    ModeError,
    DimensionError,
    StructureError,
    SpecError,
    CheckpointError,
    ValidationError,
)


def _require_file(path: Optional[str], flag: str) -> Path:
    if path is None or not Path(path).exists():
        raise ConfigurationError(f"{flag} {path} does not exist")
    return Path(path)


def _sample_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides: Dict[str, object] = {}
    for key in ("steps", "eta", "seed", "prompt"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = FrameMode(args.mode)
    if getattr(args, "roll", None) is not None:
        overrides["roll"] = args.roll
    if getattr(args, "image", None) is not None:
        overrides["image_path"] = args.image
    return overrides


def _override_section(config: RunConfig, section: str, overrides: Dict[str, object]) -> RunConfig:
    """Command-line flags win over file and environment values."""
    if not overrides:
        return config
    current = getattr(config, section)
    try:
        updated = type(current).model_validate({**current.model_dump(), **overrides})
    except ValidationError as e:
        raise ConfigurationError(f"Invalid {section} flags: {e}") from e
    return config.model_copy(update={section: updated})


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_dataset_gen(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out)
    manifest = build_dataset(config.dataset, out, progress=args.progress)
    config.dump_json(out / CONFIG_DUMP_NAME)
    summary = manifest.summary()
    print(json.dumps({"samples": len(manifest), "counts": summary}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    manifest = DatasetManifest.read(_require_file(args.manifest, "--manifest"))
    out = Path(args.out)
    config.dump_json(out / CONFIG_DUMP_NAME)
    examples = examples_from_manifest(
        manifest,
        config.model.resolution,
        split="train",
        mask_input_ablation=config.train.mask_input_ablation,
    )
    checkpoint = load_checkpoint(_require_file(args.resume, "--resume")) if args.resume else None
    trainer = DiffusionTrainer(
        config.model,
        config.diffusion,
        config.train,
        step_hooks=[
            create_loss_csv_hook(out / "loss.csv", overwrite=checkpoint is None),
            create_checkpoint_hook(
                out / "checkpoints", config.train.checkpoint_every, final_step=config.train.steps
            ),
        ],
    )
    if checkpoint is not None:
        trainer.resume_from(checkpoint)
    trainer.train(examples, progress=args.progress)
    path = trainer.save(out / "model.ckpt")
    print(f"checkpoint: {path}")
    return EXIT_OK


def _load_condition(args: argparse.Namespace, generator: MaterialGenerator, config: RunConfig):
    image_path = config.sample.image_path
    image = (
        load_crop(_require_file(image_path, "--image"), expected_resolution=generator.resolution)
        if image_path
        else None
    )
    mask = load_mask(_require_file(args.mask, "--mask")) if getattr(args, "mask", None) else None
    return image, mask


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    generator = MaterialGenerator.from_checkpoint(_require_file(args.ckpt, "--ckpt"))
    image, mask = _load_condition(args, generator, config)
    result = generator.generate(
        config.sample.mode,
        image=image,
        mask=mask,
        prompt=config.sample.prompt,
        sampler_config=config.sample,
    )
    maps = generator.upsample(result.maps) if args.upsample else result.maps

    out = Path(args.out)
    save_material_maps(out, maps)
    save_mask(out / "mask.png", result.mask)
    if args.preview:
        save_png(out / "preview.png", relight_preview(maps, rig=config.eval.rig, seed=config.sample.seed))
    config.dump_json(out / CONFIG_DUMP_NAME)
    meta = {
        "mode": config.sample.mode.value,
        "prompt": config.sample.prompt,
        "seed": config.sample.seed,
        "steps": config.sample.steps,
        "eta": config.sample.eta,
        "roll": config.sample.roll,
        "resolution": maps.resolution,
        "upsampler": UPSAMPLER if args.upsample else None,
    }
    (out / "generation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"maps: {out}")
    return EXIT_OK


def _parse_grid(grid: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in grid.lower().split("x"))
    except ValueError as e:
        raise ConfigurationError(f"--grid must look like 2x2, got {grid}") from e
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"--grid must be at least 1x1, got {grid}")
    return rows, cols


def cmd_tile(args: argparse.Namespace, config: RunConfig) -> int:
    rows, cols = _parse_grid(args.grid)
    generator = MaterialGenerator.from_checkpoint(_require_file(args.ckpt, "--ckpt"))
    image, _ = _load_condition(args, generator, config)
    # a prompt-only tile without --mode falls back to text
    mode = config.sample.mode
    if image is None and args.mode is None:
        mode = FrameMode.TEXT_ONLY
    maps, ratio = generator.tile(
        mode,
        rows,
        cols,
        image=image,
        prompt=config.sample.prompt,
        sampler_config=config.sample,
        roll=not args.no_roll,
    )
    out = Path(args.out)
    save_material_maps(out, maps)
    config.dump_json(out / CONFIG_DUMP_NAME)
    print(f"seam ratio (border/interior |grad|): {ratio:.4f}")
    print(f"tiled maps: {out} ({maps.resolution}px)")
    return EXIT_OK


def _maps_in(directory: Path) -> MaterialMaps:
    paths = {name: directory / f"{name}.png" for name in MAP_NAMES}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise ConfigurationError(f"Missing map files: {missing}")
    return load_material_maps(paths)


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    manifest = DatasetManifest.read(_require_file(args.manifest, "--manifest"))
    generated_dir = _require_file(args.generated_dir, "--generated-dir")
    records = manifest.by_split(args.split)
    if not records:
        raise ConfigurationError(f"Manifest has no {args.split} records")

    references = [manifest.load_sample(r).maps for r in records]
    generated = [_maps_in(generated_dir / r.id) for r in records]
    embedder = build_embedder(config.eval)
    report = evaluate_generated(
        generated,
        references,
        embedder,
        rig=config.eval.rig,
        seed=config.eval.seed,
        max_workers=config.eval.max_workers,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    config.dump_json(out.with_name(CONFIG_DUMP_NAME))
    print(report.to_json())
    return EXIT_OK


def cmd_preview(args: argparse.Namespace, config: RunConfig) -> int:
    maps = _maps_in(_require_file(args.maps_dir, "--maps-dir"))
    rig = args.rig or config.eval.rig
    save_png(Path(args.out), relight_preview(maps, rig=rig, seed=config.eval.seed))
    print(f"preview: {args.out}")
    return EXIT_OK


def cmd_embed_server(args: argparse.Namespace, config: RunConfig) -> int:
    from .embedding_server import run_embedding_server

    run_embedding_server(host=args.host, port=args.port, log_level=args.log_level)
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ckpt", required=True, help="Checkpoint file")
    parser.add_argument("--image", help="Input photo crop (PNG)")
    parser.add_argument("--prompt", help="Text prompt")
    parser.add_argument("--mode", choices=[m.value for m in FrameMode], help="Conditioning mode")
    parser.add_argument("--steps", type=int, help="DDIM steps")
    parser.add_argument("--eta", type=float, help="DDIM eta in [0, 1]")
    parser.add_argument("--seed", type=int, help="Sampler seed")
    parser.add_argument("--out", required=True, help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matstack", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run config (MP__SECTION__KEY env vars override it)")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="Build a Scenes + Materials corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="Corpus seed (overrides dataset.seed)")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_dataset_gen)

    p = sub.add_parser("train", help="Train the denoiser on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("generate", help="Sample material maps")
    _add_sampler_flags(p)
    p.add_argument("--mask", help="Mask PNG (mask-input mode only)")
    p.add_argument("--roll", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--upsample", action="store_true", help="Bicubic x2 upsampling")
    p.add_argument("--preview", action="store_true", help="Also write a relit preview")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("tile", help="Generate with noise rolling and stitch a grid")
    _add_sampler_flags(p)
    p.add_argument("--grid", default="2x2")
    p.add_argument("--no-roll", action="store_true", help="Disable noise rolling")
    p.set_defaults(handler=cmd_tile)

    p = sub.add_parser("eval", help="Score generated maps against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generated-dir", required=True, help="Holds <sample id>/<map>.png")
    p.add_argument("--embedder", help="builtin or an http(s) endpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("preview", help="Relight a set of maps")
    p.add_argument("--maps-dir", required=True)
    p.add_argument("--rig", choices=["studio", "ambient"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_preview)

    p = sub.add_parser("embed-server", help="Serve the builtin embedder over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8077)
    p.set_defaults(handler=cmd_embed_server)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    if args.command == "dataset-gen":
        return _override_section(
            config, "dataset", {} if args.seed is None else {"seed": args.seed}
        )
    if getattr(args, "embedder", None):
        config = _override_section(config, "eval", {"embedder": args.embedder})
    return _override_section(config, "sample", _sample_overrides(args))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Callable[[argparse.Namespace, RunConfig], int] = args.handler
    try:
        return handler(args, _resolve_config(args))
    except USAGE_ERRORS as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except MatstackError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
