"""
Training loop for the frame-stacked material denoiser.

The trainer turns manifest samples into frame stacks, draws 5:3 mixed Scenes/Materials
batches and optimizes the generated-frames ε objective with AdamW.

Key Features:
    - Per-step randomness derived from ``(seed, step)``: a resumed run replays the same t and ε
    - Mixed batches split by mode; the batch loss is the count-weighted mean of per-mode losses
    - Non-finite losses abort with the step, a histogram of the sampled t and the gradient norm
    - Pluggable step hooks (loss CSV, periodic checkpoints) that wrap ``train_step``

Usage:
    ```python
    from matstack import DatasetManifest, DiffusionTrainer, load_run_config
    from matstack.hooks import create_checkpoint_hook, create_loss_csv_hook

    config = load_run_config("toy.json")
    trainer = DiffusionTrainer(
        config.model,
        config.diffusion,
        config.train,
        step_hooks=[create_loss_csv_hook("run/loss.csv")],
    )
    examples = examples_from_manifest(DatasetManifest.read("data"), config.model.resolution)
    trainer.train(examples)
    trainer.save("run/model.ckpt")
    ```
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import torch
from einops import reduce
from tqdm import tqdm

from .diffusion_process import generated_indices, schedule_from_config, training_loss
from .dit_model import MaterialDiT, build_model
from .errors import CheckpointError, DimensionError, TrainingDivergedError
from .material_maps import FrameMode, pack_frames
from .model_checkpoint import Checkpoint, load_parameters, restore_optimizer, save_checkpoint
from .procedural_materials import SEED_MASK
from .run_config import DiffusionConfig, ModelConfig, TrainConfig
from .scene_dataset import CYCLE, CropSample, DatasetManifest, cycle_batches, mix_batches

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
# hook(original_train_step, "step", step, batch=..., trainer=...)
StepHook = Callable[..., "StepResult"]

T_HISTOGRAM_BINS = 10


@dataclass(frozen=True)
class TrainingExample:
    """One packed frame stack ready for the denoiser."""

    frames: np.ndarray
    mode: FrameMode
    prompt: str
    source: str


@dataclass(frozen=True)
class StepResult:
    step: int
    loss: float
    grad_norm: float
    timesteps: List[int] = field(default_factory=list)


def fit_resolution(frames: np.ndarray, resolution: int, mask_slot: Optional[int]) -> np.ndarray:
    """Box-downsample (F, R, R, 3) frames by an integer factor; the mask is re-binarized at 0.5."""
    current = frames.shape[1]
    if current == resolution:
        return frames
    if current < resolution or current % resolution:
        raise DimensionError(
            f"Cannot fit {current}px samples to a {resolution}px model (integer downsampling only)"
        )
    factor = current // resolution
    out = reduce(frames, "f (h a) (w b) c -> f h w c", "mean", a=factor, b=factor)
    if mask_slot is not None:
        out[mask_slot] = (out[mask_slot] >= 0.5).astype(out.dtype)
    return out.astype(np.float32)


def example_from_sample(
    sample: CropSample,
    source: str,
    resolution: int,
    mask_input_ablation: bool = False,
) -> TrainingExample:
    """Scenes samples become image (or mask-input) stacks; Materials samples become text-only stacks."""
    if source == "scenes":
        mode = FrameMode.MASK_INPUT_ABLATION if mask_input_ablation else FrameMode.IMAGE_COND
        stack = pack_frames(sample.maps, sample.mask, sample.crop, mode)
        mask_slot: Optional[int] = 1
    else:
        mode = FrameMode.TEXT_ONLY
        stack = pack_frames(sample.maps, None, None, mode)
        mask_slot = None
    frames = fit_resolution(stack.frames.astype(np.float32), resolution, mask_slot)
    return TrainingExample(frames=frames, mode=mode, prompt=sample.prompt, source=source)


def examples_from_manifest(
    manifest: DatasetManifest,
    resolution: int,
    split: str = "train",
    mask_input_ablation: bool = False,
) -> List[TrainingExample]:
    records = manifest.by_split(split)
    examples = [
        example_from_sample(manifest.load_sample(r), r.source, resolution, mask_input_ablation)
        for r in records
    ]
    logger.info(
        f"Loaded {len(examples)} {split} examples "
        f"({sum(e.source == 'scenes' for e in examples)} scenes) from {manifest.root}"
    )
    return examples


def smooth_losses(losses: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average; the first entries average over what is available."""
    values = np.asarray(losses, dtype=np.float64)
    if len(values) == 0:
        return values
    cumsum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    start = np.maximum(idx - window, 0)
    return (cumsum[idx] - cumsum[start]) / (idx - start)


def _step_generator(seed: int, step: int) -> torch.Generator:
    state = np.random.SeedSequence([seed & SEED_MASK, step]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


@contextmanager
def torch_determinism(enabled: bool, num_threads: int) -> Iterator[None]:
    """Deterministic kernels and a fixed thread count, restored to the previous state on exit."""
    if not enabled:
        yield
        return
    previous = (torch.are_deterministic_algorithms_enabled(), torch.get_num_threads())
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(num_threads)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous[0])
        torch.set_num_threads(previous[1])


def _t_histogram(timesteps: Sequence[int], num_timesteps: int) -> Dict[str, Any]:
    counts, edges = np.histogram(
        np.asarray(timesteps), bins=T_HISTOGRAM_BINS, range=(0, num_timesteps)
    )
    return {"edges": edges.astype(int).tolist(), "counts": counts.tolist()}


class DiffusionTrainer:
    """Owns the model, schedule, optimizer and step counter of one training run.

    With ``train.deterministic`` set, ``train`` switches torch to deterministic kernels and
    ``train.num_threads`` threads for the duration of the call only. Direct ``train_step``
    calls run under whatever settings the process already has.
    """

    def __init__(
        self,
        model_config: ModelConfig,
        diffusion_config: DiffusionConfig,
        train_config: TrainConfig,
        step_hooks: Optional[Sequence[StepHook]] = None,
        model: Optional[MaterialDiT] = None,
    ) -> None:
        self.model_config = model_config
        self.diffusion_config = diffusion_config
        self.train_config = train_config
        self.schedule = schedule_from_config(diffusion_config)
        self.model = model or build_model(
            model_config, diffusion_config.num_timesteps, seed=train_config.seed
        )
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=train_config.lr,
            betas=train_config.betas,
            weight_decay=train_config.weight_decay,
        )
        self.step = 0
        self.history: List[StepResult] = []

        for hook in step_hooks or ():
            self._apply_step_hook(hook)

    def _apply_step_hook(self, hook: StepHook) -> None:
        """Wrap ``train_step`` so the hook sees every step; hooks stack in the given order."""
        original_step = self.train_step

        def wrapped_step(batch: Sequence[TrainingExample]) -> StepResult:
            return hook(original_step, "step", self.step + 1, batch=batch, trainer=self)

        self.train_step = wrapped_step  # type: ignore[method-assign]

    def _batch_loss(
        self, batch: Sequence[TrainingExample], generator: torch.Generator
    ) -> tuple[torch.Tensor, List[int]]:
        groups: Dict[FrameMode, List[TrainingExample]] = defaultdict(list)
        for example in batch:
            groups[example.mode].append(example)

        total = torch.zeros((), dtype=torch.float32)
        sampled_t: List[int] = []
        # fixed mode order keeps the random draws reproducible
        for mode in FrameMode:
            members = groups.get(mode)
            if not members:
                continue
            flags = mode.clean_flags
            x0 = torch.from_numpy(np.stack([e.frames for e in members])).to(torch.float32)
            t = torch.randint(
                0, self.schedule.num_timesteps, (len(members),), generator=generator
            )
            eps = torch.randn(
                (len(members), len(generated_indices(flags)), *x0.shape[2:]),
                generator=generator,
                dtype=x0.dtype,
            )
            loss = training_loss(
                self.model, x0, [e.prompt for e in members], t, eps, self.schedule, flags
            )
            total = total + loss * (len(members) / len(batch))
            sampled_t.extend(int(v) for v in t)
        return total, sampled_t

    def train_step(self, batch: Sequence[TrainingExample]) -> StepResult:
        step = self.step + 1
        self.model.train()
        generator = _step_generator(self.train_config.seed, step)
        loss, sampled_t = self._batch_loss(batch, generator)

        if not torch.isfinite(loss):
            histogram = _t_histogram(sampled_t, self.schedule.num_timesteps)
            logger.error(f"Loss became non-finite at step {step}")
            raise TrainingDivergedError(step, histogram, None)

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.train_config.max_grad_norm)
        )
        if not math.isfinite(grad_norm):
            histogram = _t_histogram(sampled_t, self.schedule.num_timesteps)
            logger.error(f"Gradient norm became non-finite at step {step}")
            raise TrainingDivergedError(step, histogram, grad_norm)
        self.optimizer.step()

        self.step = step
        result = StepResult(step=step, loss=float(loss.detach()), grad_norm=grad_norm, timesteps=sampled_t)
        self.history.append(result)
        if step % self.train_config.log_every == 0:
            logger.info(f"step {step}: loss {result.loss:.5f}, grad norm {grad_norm:.4f}")
        else:
            logger.debug(f"step {step}: loss {result.loss:.5f}")
        return result

    def batches(self, examples: Sequence[TrainingExample]) -> Iterator[List[TrainingExample]]:
        """5:3 mixed batches when both sources are present and B is a multiple of 8."""
        scenes = [e for e in examples if e.source == "scenes"]
        materials = [e for e in examples if e.source != "scenes"]
        batch_size = self.train_config.batch_size
        if scenes and materials and batch_size % CYCLE == 0:
            return mix_batches(scenes, materials, batch_size, self.train_config.seed, self.step)
        if scenes and materials:
            logger.warning(
                f"Batch size {batch_size} is not a multiple of {CYCLE}; sampling without 5:3 mixing"
            )
        return cycle_batches(list(examples), batch_size, self.train_config.seed, self.step)

    def train(
        self,
        examples: Sequence[TrainingExample],
        steps: Optional[int] = None,
        progress: bool = False,
    ) -> List[StepResult]:
        """Run until the step counter reaches ``steps`` (default: ``train.steps``)."""
        target = steps if steps is not None else self.train_config.steps
        remaining = max(target - self.step, 0)
        logger.info(f"Training from step {self.step} to {target} on {len(examples)} examples")
        results = []
        if remaining == 0:
            return results
        batches = self.batches(examples)
        with torch_determinism(self.train_config.deterministic, self.train_config.num_threads):
            for _ in tqdm(range(remaining), disable=not progress, desc="train"):
                results.append(self.train_step(next(batches)))
        return results

    def rng_state(self) -> Dict[str, Any]:
        return {"seed": self.train_config.seed, "step": self.step}

    def save(self, path: PathLike) -> Path:
        return save_checkpoint(
            path,
            self.model,
            self.model_config,
            self.diffusion_config,
            step=self.step,
            optimizer=self.optimizer,
            rng_state=self.rng_state(),
        )

    def resume_from(self, checkpoint: Checkpoint) -> None:
        """Restore parameters, AdamW moments and the step counter."""
        if checkpoint.model_config != self.model_config:
            raise CheckpointError("Checkpoint model config differs from the run config")
        if checkpoint.diffusion_config != self.diffusion_config:
            raise CheckpointError("Checkpoint diffusion config differs from the run config")
        load_parameters(self.model, checkpoint.model_tensors())
        if checkpoint.optimizer is not None:
            restore_optimizer(self.optimizer, checkpoint.optimizer, checkpoint.tensors)
        self.step = checkpoint.step
        logger.info(f"Resumed training at step {self.step}")
