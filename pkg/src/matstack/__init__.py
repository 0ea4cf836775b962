"""Frame-stacked diffusion for SVBRDF material maps, with its dataset factory, renderer and metrics."""

from .brdf_renderer import Camera, Light, LightRig, PlaneSpec, ShadePoint, eval_brdf, relight_preview, render_plane
from .ddim_sampler import SampleCondition, ddim_coefficients, ddim_sample, ddim_timesteps
from .diffusion_process import (
    NoiseSchedule,
    forward_noise,
    make_schedule,
    noise_roll,
    noise_unroll,
    training_loss,
)
from .diffusion_trainer import DiffusionTrainer, TrainingExample, examples_from_manifest
from .dit_model import MaterialDiT, build_model
from .errors import (
    CheckpointError,
    ConditionError,
    ConfigurationError,
    DimensionError,
    DominanceError,
    EmbedderTimeoutError,
    EmbedderTransportError,
    EmbeddingDimensionError,
    GenerationStuckError,
    GeometryError,
    MalformedEmbeddingError,
    MatstackError,
    ModeError,
    SpecError,
    StructureError,
    TrainingDivergedError,
    VisibilityError,
)
from .image_warps import DistortionSpec, random_distortion, warp_image, warp_mask
from .material_generator import MaterialGenerator
from .material_maps import FrameMode, FrameStack, MaterialMaps, MaterialMask, pack_frames, unpack_frames
from .model_checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .procedural_materials import measure_period, synth_material
from .run_config import (
    DatasetConfig,
    DiffusionConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
    load_run_config,
)
from .scene_dataset import (
    DatasetManifest,
    SceneSpec,
    align_uv_scale,
    build_dataset,
    make_robustness_set,
    mix_batches,
    render_scene_crop,
)
from .similarity_eval import (
    BuiltinEmbedder,
    RemoteEmbedder,
    SimilarityReport,
    pairwise_cosine_score,
    rerender_score,
)

# Hook imports - wrapped in try/except like the hooks package itself
try:
    from .hooks.training_hooks import (
        CheckpointHook,
        LossCSVHook,
        create_checkpoint_hook,
        create_loss_csv_hook,
    )
    from .hooks.sampler_hooks import CleanFrameAuditHook, create_clean_frame_audit_hook

    _hooks_available = True
except ImportError:
    _hooks_available = False
    CheckpointHook = None
    LossCSVHook = None
    create_checkpoint_hook = None
    create_loss_csv_hook = None
    CleanFrameAuditHook = None
    create_clean_frame_audit_hook = None

__version__ = "0.3.0"

__all__ = [
    # Material data
    "FrameMode",
    "FrameStack",
    "MaterialMaps",
    "MaterialMask",
    "pack_frames",
    "unpack_frames",
    "synth_material",
    "measure_period",
    # Rendering and warps
    "Camera",
    "Light",
    "LightRig",
    "PlaneSpec",
    "ShadePoint",
    "eval_brdf",
    "render_plane",
    "relight_preview",
    "DistortionSpec",
    "random_distortion",
    "warp_image",
    "warp_mask",
    # Datasets
    "DatasetManifest",
    "SceneSpec",
    "align_uv_scale",
    "build_dataset",
    "make_robustness_set",
    "mix_batches",
    "render_scene_crop",
    # Model and diffusion
    "MaterialDiT",
    "build_model",
    "NoiseSchedule",
    "make_schedule",
    "forward_noise",
    "training_loss",
    "noise_roll",
    "noise_unroll",
    "SampleCondition",
    "ddim_coefficients",
    "ddim_sample",
    "ddim_timesteps",
    "DiffusionTrainer",
    "TrainingExample",
    "examples_from_manifest",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "MaterialGenerator",
    # Evaluation
    "BuiltinEmbedder",
    "RemoteEmbedder",
    "SimilarityReport",
    "pairwise_cosine_score",
    "rerender_score",
    # Configuration
    "RunConfig",
    "DatasetConfig",
    "ModelConfig",
    "DiffusionConfig",
    "TrainConfig",
    "SamplerConfig",
    "EvalConfig",
    "load_run_config",
    # Errors
    "MatstackError",
    "ConfigurationError",
    "DimensionError",
    "ModeError",
    "StructureError",
    "ConditionError",
    "VisibilityError",
    "GeometryError",
    "SpecError",
    "DominanceError",
    "GenerationStuckError",
    "CheckpointError",
    "TrainingDivergedError",
    "EmbedderTransportError",
    "EmbedderTimeoutError",
    "MalformedEmbeddingError",
    "EmbeddingDimensionError",
]

if _hooks_available:
    __all__.extend(
        [
            "CheckpointHook",
            "LossCSVHook",
            "create_checkpoint_hook",
            "create_loss_csv_hook",
            "CleanFrameAuditHook",
            "create_clean_frame_audit_hook",
        ]
    )
