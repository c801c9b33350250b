"""Batch preprocessing that turns long, unlabeled recordings into
quality-filtered, segmented, speaker-labeled, transcribed corpus shards.

All neural models are externalized behind pluggable backends; see
:mod:`autoprep.backends`.
"""

from .core import (
    AudioBuffer,
    ConfigError,
    PipelineConfig,
    Segment,
    SpeakerEmbedding,
    StageToggles,
    TimeRange,
    load_config,
    validate_config,
)
from .pipeline import (
    CorpusStats,
    InputRecord,
    ManifestRecord,
    RunResult,
    compute_stats,
    run_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer",
    "ConfigError",
    "CorpusStats",
    "InputRecord",
    "ManifestRecord",
    "PipelineConfig",
    "RunResult",
    "Segment",
    "SpeakerEmbedding",
    "StageToggles",
    "TimeRange",
    "compute_stats",
    "load_config",
    "run_pipeline",
    "validate_config",
    "__version__",
]
