"""
Training step hooks: a loss CSV log and periodic checkpoints.

Both hooks plug into ``DiffusionTrainer(step_hooks=[...])``. The trainer calls each hook as
``hook(original_train_step, "step", step, batch=..., trainer=...)``; the wrapper runs the
original step first and then performs its side effect. A failing side effect is logged and
never interrupts training.

Usage:
    ```python
    from matstack.hooks import create_checkpoint_hook, create_loss_csv_hook

    trainer = DiffusionTrainer(
        config.model,
        config.diffusion,
        config.train,
        step_hooks=[
            create_loss_csv_hook("run/loss.csv"),
            create_checkpoint_hook("run/checkpoints", every=config.train.checkpoint_every),
        ],
    )
    ```

CSV Format:
    step,loss,grad_norm
    1,0.998712,0.412331
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Any, Callable, Optional, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
CSV_FIELDS = ("step", "loss", "grad_norm")


class LossCSVHook:
    """Appends one row per training step to a CSV file."""

    def __init__(self, path: PathLike, overwrite: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if overwrite or not self.path.exists():
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(CSV_FIELDS)
        logger.info(f"Initialized LossCSVHook writing to {self.path}")

    def on_step(self, result: Any) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(
                [result.step, f"{result.loss:.6f}", f"{result.grad_norm:.6f}"]
            )


def read_loss_csv(path: PathLike) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {"step": int(row["step"]), "loss": float(row["loss"]), "grad_norm": float(row["grad_norm"])}
            for row in csv.DictReader(f)
        ]


class CheckpointHook:
    """Saves ``step_XXXXXX.ckpt`` every ``every`` steps and keeps ``latest.ckpt`` current."""

    def __init__(self, directory: PathLike, every: int, final_step: Optional[int] = None):
        if every < 1:
            raise ValueError(f"Checkpoint interval must be positive, got {every}")
        self.directory = Path(directory)
        self.every = every
        self.final_step = final_step
        logger.info(f"Initialized CheckpointHook: every {every} steps into {self.directory}")

    def due(self, step: int) -> bool:
        return step % self.every == 0 or (self.final_step is not None and step == self.final_step)

    def on_step(self, step: int, trainer: Any) -> Optional[Path]:
        if not self.due(step):
            return None
        path = trainer.save(self.directory / f"step_{step:06d}.ckpt")
        trainer.save(self.directory / "latest.ckpt")
        return path


def create_loss_csv_hook(path: PathLike, overwrite: bool = True) -> Callable:
    """
    Create a step hook that logs every step's loss to ``path``.

    Args:
        path: CSV file to write; its parent directory is created
        overwrite: Start a fresh file (header included) instead of appending to an existing one

    Returns:
        Hook function for ``DiffusionTrainer(step_hooks=...)``
    """
    csv_hook = LossCSVHook(path, overwrite=overwrite)

    def loss_csv_hook_wrapper(original_func, action: str, step: int, **kwargs):
        result = original_func(kwargs["batch"])
        if action == "step":
            try:
                csv_hook.on_step(result)
            except Exception as e:
                logger.error(f"Error writing loss row for step {step}: {e}", exc_info=True)
        return result

    loss_csv_hook_wrapper.hook = csv_hook  # type: ignore[attr-defined]
    return loss_csv_hook_wrapper


def create_checkpoint_hook(
    directory: PathLike, every: int, final_step: Optional[int] = None
) -> Callable:
    """
    Create a step hook that checkpoints the trainer periodically.

    Args:
        directory: Where checkpoint files go
        every: Interval in steps
        final_step: Also checkpoint at this step even when it is off the interval

    Returns:
        Hook function for ``DiffusionTrainer(step_hooks=...)``
    """
    checkpoint_hook = CheckpointHook(directory, every, final_step)

    def checkpoint_hook_wrapper(original_func, action: str, step: int, **kwargs):
        result = original_func(kwargs["batch"])
        if action == "step":
            try:
                checkpoint_hook.on_step(result.step, kwargs["trainer"])
            except Exception as e:
                logger.error(f"Error saving checkpoint at step {step}: {e}", exc_info=True)
        return result

    checkpoint_hook_wrapper.hook = checkpoint_hook  # type: ignore[attr-defined]
    return checkpoint_hook_wrapper
