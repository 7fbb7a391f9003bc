"""Segmentation-guided GAN training for sketch colorization and
label-to-photo translation: paired/unpaired baselines augmented with
adversarial losses over frozen-backend segmentation maps, plus FID/mIoU
evaluation and a weight-ablation harness.
"""

from .core import (
    BaselineKind,
    DataConfig,
    Domain,
    FrameworkConfig,
    GanMode,
    ImageBatch,
    NetworkConfig,
    ObjectiveConfig,
    RunConfig,
    SeedHandle,
    SegKind,
    SegmentationMap,
    Task,
    Variant,
    seed_all,
    validate_config,
)
from .objectives import LossBreakdown, Side, total_objective

__all__ = [
    "BaselineKind",
    "DataConfig",
    "Domain",
    "FrameworkConfig",
    "GanMode",
    "ImageBatch",
    "LossBreakdown",
    "NetworkConfig",
    "ObjectiveConfig",
    "RunConfig",
    "SeedHandle",
    "SegKind",
    "SegmentationMap",
    "Side",
    "Task",
    "Variant",
    "seed_all",
    "total_objective",
    "validate_config",
]

__version__ = "0.1.0"
