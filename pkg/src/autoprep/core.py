"""Domain types, configuration, and shared helpers used by every stage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration document is invalid; names the offending key."""


def seconds_to_samples(t_s: float, sample_rate: int) -> int:
    """Convert a time in seconds to a sample index (round half up).

    All stage logic works in seconds; conversion to sample indices happens
    only at operation edges so results are sample-rate-independent.
    """
    return int(math.floor(t_s * sample_rate + 0.5))


@dataclass(frozen=True, order=True)
class TimeRange:
    """Half-open interval [start_s, end_s) in recording time."""

    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValueError("time range bounds must be finite")
        if self.start_s < 0:
            raise ValueError(f"time range start must be >= 0, got {self.start_s}")
        if self.end_s <= self.start_s:
            raise ValueError(
                f"time range end must exceed start, got [{self.start_s}, {self.end_s})"
            )

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def to_pair(self) -> tuple[float, float]:
        return (self.start_s, self.end_s)


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio: float32 samples at a fixed native sample rate.

    Buffers keep whatever rate they were ingested at (8k-48kHz end to end);
    nothing in the pipeline resamples.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        data = np.asarray(self.samples)
        if data.ndim != 1:
            raise ValueError(
                f"audio buffers are mono; got array with shape {data.shape}"
            )
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if data.size and not np.all(np.isfinite(data)):
            raise ValueError("audio samples must all be finite")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "samples", data)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice_range(self, span: TimeRange) -> "AudioBuffer":
        """Extract the samples covering ``span`` (round-half-up boundaries)."""
        a = seconds_to_samples(span.start_s, self.sample_rate)
        b = seconds_to_samples(span.end_s, self.sample_rate)
        a = max(0, min(a, len(self.samples)))
        b = max(a, min(b, len(self.samples)))
        return AudioBuffer(self.samples[a:b], self.sample_rate)


@dataclass(frozen=True)
class Segment:
    """Speech interval within one recording, annotated stage by stage.

    ``speaker_label`` and ``cluster_similarity`` are attached together by the
    clustering stage; a label without a similarity is invalid.
    """

    recording_id: str
    span: TimeRange
    chunk_ranges: tuple[TimeRange, ...] = ()
    speaker_label: str | None = None
    cluster_similarity: float | None = None
    ovrl_score: float | None = None
    pdnsmos_score: float | None = None
    transcript: str | None = None

    def __post_init__(self) -> None:
        if self.speaker_label is not None and self.cluster_similarity is None:
            raise ValueError(
                "segment with a speaker label must carry a cluster similarity"
            )
        if self.cluster_similarity is not None and not (
            -1.0 - 1e-9 <= self.cluster_similarity <= 1.0 + 1e-9
        ):
            raise ValueError(
                f"cluster similarity must lie in [-1, 1], got {self.cluster_similarity}"
            )

    @property
    def duration_s(self) -> float:
        return self.span.duration_s


@dataclass(frozen=True)
class SpeakerEmbedding:
    """Unit-norm voice vector computed from one sub-chunk of a segment."""

    vector: np.ndarray
    source_chunk: TimeRange

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError("embedding vector must be one-dimensional and non-empty")
        norm = float(np.linalg.norm(vec))
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("embedding vector must have a finite, nonzero norm")
        vec = vec / norm
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


STAGE_NAMES = ("enhance", "segment", "cluster", "tse", "filter", "asr")


@dataclass(frozen=True)
class StageToggles:
    """Which pipeline stages run; persist always runs."""

    enhance: bool = True
    segment: bool = True
    cluster: bool = True
    tse: bool = True
    filter: bool = True
    asr: bool = True

    def enabled(self) -> tuple[str, ...]:
        return tuple(name for name in STAGE_NAMES if getattr(self, name))


@dataclass(frozen=True)
class PipelineConfig:
    """All tunable thresholds and durations, in the units the rules use."""

    enhance_window_s: float = 12.0
    enhance_shift_s: float = 4.0
    vad_threshold: float = 0.76
    silence_split_s: float = 1.0
    pad_s: float = 0.4
    min_segment_s: float = 1.5
    soft_max_segment_s: float = 30.0
    hard_max_segment_s: float = 40.0
    embed_window_s: float = 1.5
    embed_shift_s: float = 0.75
    cluster_merge_threshold: float = 0.75
    batch_max_hours: float = 2.0
    seg_sim_threshold: float = 0.5
    cluster_avg_threshold: float = 0.55
    cluster_max_threshold: float = 0.6
    ovrl_threshold: float = 2.4
    k_max: int = 20
    rng_seed: int = 0
    stages: StageToggles = field(default_factory=StageToggles)

    def __post_init__(self) -> None:
        positive = (
            "enhance_window_s",
            "enhance_shift_s",
            "silence_split_s",
            "pad_s",
            "min_segment_s",
            "soft_max_segment_s",
            "hard_max_segment_s",
            "embed_window_s",
            "embed_shift_s",
            "batch_max_hours",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.enhance_window_s <= self.enhance_shift_s:
            raise ConfigError(
                "enhance_window_s must exceed enhance_shift_s "
                f"(got window {self.enhance_window_s}, shift {self.enhance_shift_s})"
            )
        if self.embed_window_s < self.embed_shift_s:
            raise ConfigError(
                "embed_window_s must be at least embed_shift_s "
                f"(got window {self.embed_window_s}, shift {self.embed_shift_s})"
            )
        if not self.min_segment_s <= self.soft_max_segment_s:
            raise ConfigError(
                "min_segment_s must not exceed soft_max_segment_s "
                f"(got {self.min_segment_s} > {self.soft_max_segment_s})"
            )
        if not self.soft_max_segment_s < self.hard_max_segment_s:
            raise ConfigError(
                "soft_max_segment_s must be below hard_max_segment_s "
                f"(got {self.soft_max_segment_s} >= {self.hard_max_segment_s})"
            )
        if not 0.0 <= self.vad_threshold <= 1.0:
            raise ConfigError(
                f"vad_threshold must lie in [0, 1], got {self.vad_threshold}"
            )
        for name in (
            "cluster_merge_threshold",
            "seg_sim_threshold",
            "cluster_avg_threshold",
            "cluster_max_threshold",
        ):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1], got {value}")
        if not 0.0 <= self.ovrl_threshold <= 5.0:
            raise ConfigError(
                f"ovrl_threshold must lie in [0, 5], got {self.ovrl_threshold}"
            )
        if self.k_max < 1:
            raise ConfigError(f"k_max must be a positive integer, got {self.k_max}")


def _coerce_number(key: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"config key {key!r} must be finite, got {value!r}")
    return float(value)


def _coerce_int(key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
    return value


def validate_config(raw: Mapping[str, Any]) -> PipelineConfig:
    """Build a PipelineConfig from a parsed JSON document.

    Missing keys get defaults; unknown keys are errors (a silently ignored
    typo in a threshold name would corrupt corpora).
    """
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config document must be an object, got {type(raw).__name__}")
    float_fields = {
        f.name for f in fields(PipelineConfig) if f.type in ("float", float)
    }
    int_fields = {"k_max", "rng_seed"}
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "stages":
            if not isinstance(value, Mapping):
                raise ConfigError("config key 'stages' must be an object of booleans")
            toggles: dict[str, bool] = {}
            for stage, flag in value.items():
                if stage not in STAGE_NAMES:
                    raise ConfigError(f"unknown stage toggle {stage!r} in 'stages'")
                if not isinstance(flag, bool):
                    raise ConfigError(
                        f"stage toggle {stage!r} must be a boolean, got {flag!r}"
                    )
                toggles[stage] = flag
            kwargs["stages"] = StageToggles(**toggles)
        elif key in float_fields:
            kwargs[key] = _coerce_number(key, value)
        elif key in int_fields:
            kwargs[key] = _coerce_int(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return PipelineConfig(**kwargs)


def config_to_dict(config: PipelineConfig) -> dict[str, Any]:
    """Serialize a config to the JSON document shape validate_config accepts."""
    doc: dict[str, Any] = {}
    for f in fields(PipelineConfig):
        value = getattr(config, f.name)
        if f.name == "stages":
            doc["stages"] = {name: getattr(value, name) for name in STAGE_NAMES}
        else:
            doc[f.name] = value
    return doc


def load_config(path: str | Path) -> PipelineConfig:
    """Read and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return validate_config(raw)


def sorted_segments(segments: Iterator[Segment] | list[Segment]) -> list[Segment]:
    """Canonical segment order: (recording_id, start time)."""
    return sorted(segments, key=lambda s: (s.recording_id, s.span.start_s, s.span.end_s))
