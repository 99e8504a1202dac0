"""Multi-turn, instruction-guided image creation and editing at desk scale."""

from .cu import (
    ConditionUnit,
    ConditionUnitError,
    FrameRole,
    IndicatorAssignment,
    LongContextConditionUnit,
    MAX_IMAGE_NUMBER,
    TaskKind,
    VisualFrame,
    WireFormatError,
    build_cu,
    build_lcu,
    parse_lcu,
    serialize_lcu,
)
from .diffusion import NoiseSchedule, StageConfig, TrainConfig, Trainer, q_sample, run_stages, sample
from .model import LongContextTransformer, ModelConfig, load_checkpoint, rope3d, save_checkpoint
from .tasks import TrainSample, generate, generate_chain

__version__ = "0.1.0"

__all__ = [
    "ConditionUnit",
    "ConditionUnitError",
    "FrameRole",
    "IndicatorAssignment",
    "LongContextConditionUnit",
    "LongContextTransformer",
    "MAX_IMAGE_NUMBER",
    "ModelConfig",
    "NoiseSchedule",
    "StageConfig",
    "TaskKind",
    "TrainConfig",
    "TrainSample",
    "Trainer",
    "VisualFrame",
    "WireFormatError",
    "build_cu",
    "build_lcu",
    "generate",
    "generate_chain",
    "load_checkpoint",
    "parse_lcu",
    "q_sample",
    "rope3d",
    "run_stages",
    "sample",
    "save_checkpoint",
    "serialize_lcu",
]
