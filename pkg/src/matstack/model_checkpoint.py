"""Named-tensor checkpoint files.

Layout::

    uint32 little-endian   header length N
    N bytes UTF-8 JSON     {format_version, model_config, diffusion_config, step, rng_state,
                            optimizer, tensors: {name: {shape, dtype: "f32", offset}}}
    blobs                  little-endian float32, in table order

Offsets are relative to the first byte after the header. AdamW moments are stored as
ordinary tensors named ``optimizer.<index>.exp_avg`` and ``optimizer.<index>.exp_avg_sq``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from .dit_model import MaterialDiT
from .errors import CheckpointError
from .run_config import DiffusionConfig, ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<I")
_MAX_HEADER = 64 * 1024 * 1024

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and, optionally, resume training."""

    model_config: ModelConfig
    diffusion_config: DiffusionConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0
    rng_state: Dict[str, Any] = field(default_factory=dict)
    optimizer: Optional[Dict[str, Any]] = None

    def model_tensors(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optimizer.")}

    def to_model(self) -> MaterialDiT:
        """Build a model from the stored config and load the stored parameters."""
        model = MaterialDiT(self.model_config, self.diffusion_config.num_timesteps)
        load_parameters(model, self.model_tensors())
        return model


def model_to_tensors(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().to(torch.float32).numpy().copy()
        for name, tensor in model.state_dict().items()
    }


def load_parameters(model: torch.nn.Module, tensors: Dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``model``; names and shapes must match exactly."""
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        raise CheckpointError(
            f"Checkpoint does not match the model config (missing: {missing[:5]}, "
            f"unexpected: {unexpected[:5]})"
        )
    state = {}
    for name, target in expected.items():
        array = tensors[name]
        if tuple(array.shape) != tuple(target.shape):
            raise CheckpointError(
                f"Tensor {name} has shape {tuple(array.shape)}, model expects {tuple(target.shape)}"
            )
        state[name] = torch.from_numpy(np.array(array, dtype=np.float32)).to(target.dtype)
    model.load_state_dict(state)


def optimizer_to_tensors(optimizer: torch.optim.Optimizer) -> tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Split AdamW state into a JSON-able description and named moment tensors."""
    group = optimizer.param_groups[0]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    steps = []
    tensors: Dict[str, np.ndarray] = {}
    for index, param in enumerate(params):
        state = optimizer.state.get(param, {})
        if not state:
            steps.append(0)
            continue
        steps.append(int(float(state["step"])))
        for key in ("exp_avg", "exp_avg_sq"):
            tensors[f"optimizer.{index}.{key}"] = state[key].detach().cpu().to(torch.float32).numpy().copy()
    info = {
        "kind": type(optimizer).__name__.lower(),
        "lr": group["lr"],
        "betas": list(group["betas"]),
        "weight_decay": group["weight_decay"],
        "eps": group["eps"],
        "param_steps": steps,
    }
    return info, tensors


def restore_optimizer(
    optimizer: torch.optim.Optimizer, info: Dict[str, Any], tensors: Dict[str, np.ndarray]
) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    steps = info.get("param_steps", [])
    if len(steps) != len(params):
        raise CheckpointError(
            f"Optimizer state covers {len(steps)} parameters, model has {len(params)}"
        )
    for index, (param, step) in enumerate(zip(params, steps)):
        if step == 0:
            continue
        moments = {}
        for key in ("exp_avg", "exp_avg_sq"):
            name = f"optimizer.{index}.{key}"
            if name not in tensors:
                raise CheckpointError(f"Checkpoint lacks optimizer tensor {name}")
            moments[key] = torch.from_numpy(np.array(tensors[name], dtype=np.float32)).to(param.dtype)
        optimizer.state[param] = {"step": torch.tensor(float(step)), **moments}


def save_checkpoint(
    path: PathLike,
    model: torch.nn.Module,
    model_config: ModelConfig,
    diffusion_config: DiffusionConfig,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng_state: Optional[Dict[str, Any]] = None,
) -> Path:
    tensors = model_to_tensors(model)
    optimizer_info = None
    if optimizer is not None:
        optimizer_info, moments = optimizer_to_tensors(optimizer)
        tensors.update(moments)
    return write_checkpoint(
        path,
        Checkpoint(
            model_config=model_config,
            diffusion_config=diffusion_config,
            tensors=tensors,
            step=step,
            rng_state=rng_state or {},
            optimizer=optimizer_info,
        ),
    )


def write_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table: Dict[str, Dict[str, Any]] = {}
    offset = 0
    blobs = []
    for name, array in checkpoint.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        table[name] = {"shape": list(data.shape), "dtype": "f32", "offset": offset}
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": checkpoint.model_config.model_dump(mode="json"),
        "diffusion_config": checkpoint.diffusion_config.model_dump(mode="json"),
        "step": checkpoint.step,
        "rng_state": checkpoint.rng_state,
        "optimizer": checkpoint.optimizer,
        "tensors": table,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER_LEN.pack(len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)
    logger.info(f"Saved checkpoint at step {checkpoint.step} to {path}")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER_LEN.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    (header_len,) = _HEADER_LEN.unpack_from(raw, 0)
    if header_len > min(_MAX_HEADER, len(raw) - _HEADER_LEN.size):
        raise CheckpointError(f"{path} declares an impossible header length {header_len}")
    try:
        header = json.loads(raw[_HEADER_LEN.size : _HEADER_LEN.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a malformed header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    try:
        model_config = ModelConfig.model_validate(header["model_config"])
        diffusion_config = DiffusionConfig.model_validate(header["diffusion_config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path} carries an invalid config: {e}") from e

    body = memoryview(raw)[_HEADER_LEN.size + header_len :]
    tensors: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, entry in header.get("tensors", {}).items():
        if entry.get("dtype") != "f32" or entry.get("offset") != expected_offset:
            raise CheckpointError(f"{path}: tensor {name} has an invalid table entry {entry}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = expected_offset + 4 * count
        if end > len(body):
            raise CheckpointError(f"{path} is truncated inside tensor {name}")
        tensors[name] = (
            np.frombuffer(body, dtype="<f4", count=count, offset=expected_offset)
            .reshape(shape)
            .astype(np.float32)
        )
        expected_offset = end
    if expected_offset != len(body):
        raise CheckpointError(f"{path} has {len(body) - expected_offset} trailing bytes")

    return Checkpoint(
        model_config=model_config,
        diffusion_config=diffusion_config,
        tensors=tensors,
        step=int(header.get("step", 0)),
        rng_state=header.get("rng_state") or {},
        optimizer=header.get("optimizer"),
    )
