"""
Sampler instrumentation: audits that clean frames stay noise-free at every DDIM step.

``ddim_sample(..., step_hook=hook)`` calls the hook as
``hook(original_denoise, "denoise", step_index, x_t=..., t=..., clean_flags=..., condition=..., offset=...)``
right before the denoiser runs, with the (possibly rolled) state the denoiser is about to see.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Sequence, Tuple

import torch

from ..diffusion_process import noise_unroll

logger = logging.getLogger(__name__)


class CleanFrameAuditHook:
    """Counts sampler steps at which a clean frame is not bit-identical to its condition."""

    def __init__(self, raise_on_violation: bool = False):
        self.raise_on_violation = raise_on_violation
        self.steps_checked = 0
        self.violations: List[int] = []

    @property
    def ok(self) -> bool:
        return self.steps_checked > 0 and not self.violations

    def on_denoise(
        self,
        step_index: int,
        x_t: torch.Tensor,
        clean_flags: Sequence[bool],
        condition: Sequence[torch.Tensor],
        offset: Tuple[int, int] = (0, 0),
    ) -> bool:
        self.steps_checked += 1
        state = noise_unroll(x_t, offset)
        clean = [i for i, flag in enumerate(clean_flags) if flag]
        intact = all(torch.equal(state[0, slot], frame) for slot, frame in zip(clean, condition))
        if not intact:
            self.violations.append(step_index)
            logger.warning(f"Clean frame altered at sampler step {step_index}")
            if self.raise_on_violation:
                raise AssertionError(f"Clean frame altered at sampler step {step_index}")
        return intact


def create_clean_frame_audit_hook(raise_on_violation: bool = False) -> Callable:
    """
    Create a sampler step hook that verifies clean frames bit-for-bit.

    Args:
        raise_on_violation: Raise instead of only counting altered steps

    Returns:
        Hook function for ``ddim_sample(step_hook=...)``; the audit object is available as
        ``hook.audit``
    """
    audit = CleanFrameAuditHook(raise_on_violation=raise_on_violation)

    def clean_frame_audit_wrapper(original_func, action: str, step_index: int, **kwargs):
        if action == "denoise":
            audit.on_denoise(
                step_index,
                kwargs["x_t"],
                kwargs["clean_flags"],
                kwargs["condition"],
                kwargs.get("offset", (0, 0)),
            )
        return original_func(kwargs["x_t"], kwargs["t"])

    clean_frame_audit_wrapper.audit = audit  # type: ignore[attr-defined]
    return clean_frame_audit_wrapper
