"""
Matstack Hooks - pluggable callbacks for training and sampling.

Available Hooks:
    - training_hooks: Loss CSV logging and periodic checkpoints for ``DiffusionTrainer``
    - sampler_hooks: Clean-frame audit for ``ddim_sample``

Hooks use the wrapper interface ``hook(original_func, action, step, **kwargs)``: the wrapper
calls the original function, performs its side effect and returns the original result.
"""

try:
    from .training_hooks import (
        CheckpointHook,
        LossCSVHook,
        create_checkpoint_hook,
        create_loss_csv_hook,
        read_loss_csv,
    )

    training_hooks_available = True
except ImportError:
    training_hooks_available = False
    CheckpointHook = None
    LossCSVHook = None
    create_checkpoint_hook = None
    create_loss_csv_hook = None
    read_loss_csv = None

try:
    from .sampler_hooks import CleanFrameAuditHook, create_clean_frame_audit_hook

    sampler_hooks_available = True
except ImportError:
    sampler_hooks_available = False
    CleanFrameAuditHook = None
    create_clean_frame_audit_hook = None

__all__ = []

if training_hooks_available:
    __all__.extend(
        [
            "CheckpointHook",
            "LossCSVHook",
            "create_checkpoint_hook",
            "create_loss_csv_hook",
            "read_loss_csv",
        ]
    )

if sampler_hooks_available:
    __all__.extend(["CleanFrameAuditHook", "create_clean_frame_audit_hook"])
