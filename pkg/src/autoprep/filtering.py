"""Discard unreliable speaker assignments, unreliable clusters, and
low-quality segments.

The order is part of the contract: segment-level similarity first, then
cluster reliability over the survivors, then perceptual quality. Swapping
the first two would change cluster statistics and therefore outcomes.

Every threshold keeps the boundary value: "lower than X" is discarded, so
X itself survives.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .core import AudioBuffer, PipelineConfig, Segment
from .diarize import _as_matrix, _normalized_mean

DROP_RULES = (
    "unlabeled",
    "segment_similarity",
    "cluster_reliability",
    "quality_score",
    "scorer_error",
)


def segment_similarity(chunk_embeddings, center: np.ndarray) -> float:
    """Cosine between the normalized mean of a segment's chunk embeddings
    and its cluster center."""
    matrix = _as_matrix(chunk_embeddings)
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (matrix.shape[1],):
        raise ValueError(
            f"center of dimension {center.shape} does not match embeddings "
            f"of dimension {matrix.shape[1]}"
        )
    pooled = _normalized_mean(matrix)
    return float(np.dot(pooled, center))


def filter_by_segment_similarity(
    segments: Sequence[Segment], threshold: float
) -> tuple[list[Segment], list[Segment], list[Segment]]:
    """Split into (retained, dropped unlabeled, dropped low-similarity).

    Unlabeled segments have no cluster to compare against; they leave the
    labeled corpus here and are counted under their own rule.
    """
    retained: list[Segment] = []
    unlabeled: list[Segment] = []
    low: list[Segment] = []
    for segment in segments:
        if segment.speaker_label is None:
            unlabeled.append(segment)
        elif segment.cluster_similarity >= threshold:
            retained.append(segment)
        else:
            low.append(segment)
    return retained, unlabeled, low


def cluster_stats(segments: Sequence[Segment]) -> dict[str, dict[str, float]]:
    """Per-cluster average/max similarity and size over labeled segments."""
    grouped: dict[str, list[float]] = defaultdict(list)
    for segment in segments:
        if segment.speaker_label is not None:
            grouped[segment.speaker_label].append(segment.cluster_similarity)
    return {
        label: {
            "avg_similarity": float(np.mean(sims)),
            "max_similarity": float(np.max(sims)),
            "size": len(sims),
        }
        for label, sims in grouped.items()
    }


def filter_by_cluster_reliability(
    segments: Sequence[Segment], avg_threshold: float, max_threshold: float
) -> tuple[list[Segment], list[Segment], dict[str, dict[str, float]]]:
    """Drop whole clusters that look like they hold more than one person.

    A cluster is dropped only when BOTH its average similarity is below the
    average threshold AND its maximum is below the maximum threshold; all of
    its segments go with it. Statistics are computed over the segments that
    survived the segment-level filter.
    """
    stats = cluster_stats(segments)
    dropped_labels = {
        label
        for label, s in stats.items()
        if s["avg_similarity"] < avg_threshold and s["max_similarity"] < max_threshold
    }
    retained = [s for s in segments if s.speaker_label not in dropped_labels]
    dropped = [s for s in segments if s.speaker_label in dropped_labels]
    return retained, dropped, stats


def filter_by_quality(
    segments: Sequence[Segment],
    scorer,
    audio_provider: Callable[[Segment], AudioBuffer],
    threshold: float,
) -> tuple[list[Segment], list[Segment], list[Segment]]:
    """Score each segment once and keep those at or above the OVRL threshold.

    Returns (retained, dropped low-quality, dropped scorer-error). Scores
    are stored on the returned segments; the PDNSMOS value, when the scorer
    provides one, is recorded for reporting and never used as a filter.
    """
    retained: list[Segment] = []
    low: list[Segment] = []
    errors: list[Segment] = []
    for segment in segments:
        try:
            result = scorer.score(
                audio_provider(segment),
                recording_id=segment.recording_id,
                span=segment.span,
            )
        except Exception:
            errors.append(segment)
            continue
        scored = replace(
            segment, ovrl_score=float(result.ovrl), pdnsmos_score=result.pdnsmos
        )
        if scored.ovrl_score >= threshold:
            retained.append(scored)
        else:
            low.append(scored)
    return retained, low, errors


@dataclass
class FilterReport:
    """Bookkeeping for one filter run; counts always reconcile."""

    input_count: int = 0
    retained_count: int = 0
    dropped_by_rule: dict[str, int] = field(
        default_factory=lambda: {rule: 0 for rule in DROP_RULES}
    )
    cluster_stats: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        total = self.retained_count + sum(self.dropped_by_rule.values())
        if total != self.input_count:
            raise ValueError(
                f"filter report does not reconcile: {self.input_count} in, "
                f"{self.retained_count} retained, "
                f"{sum(self.dropped_by_rule.values())} dropped"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_count": self.input_count,
            "retained_count": self.retained_count,
            "dropped_by_rule": dict(self.dropped_by_rule),
            "cluster_stats": self.cluster_stats,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "FilterReport":
        dropped = {rule: 0 for rule in DROP_RULES}
        dropped.update(doc.get("dropped_by_rule", {}))
        return cls(
            input_count=doc["input_count"],
            retained_count=doc["retained_count"],
            dropped_by_rule=dropped,
            cluster_stats=doc.get("cluster_stats", {}),
        )


def run_filter_chain(
    segments: Sequence[Segment],
    scorer,
    audio_provider: Callable[[Segment], AudioBuffer],
    config: PipelineConfig,
) -> tuple[list[Segment], list[Segment], FilterReport]:
    """Full chain in contract order; returns (retained, unlabeled, report).

    Unlabeled segments are excluded from the speaker-labeled output but
    returned separately (still quality-scored) since they can remain useful
    as unlabeled training data.
    """
    kept, unlabeled, low_sim = filter_by_segment_similarity(
        segments, config.seg_sim_threshold
    )
    kept, bad_clusters, stats = filter_by_cluster_reliability(
        kept, config.cluster_avg_threshold, config.cluster_max_threshold
    )
    kept, low_quality, errors = filter_by_quality(
        kept, scorer, audio_provider, config.ovrl_threshold
    )
    unlabeled_kept, unlabeled_low, unlabeled_errors = filter_by_quality(
        unlabeled, scorer, audio_provider, config.ovrl_threshold
    )
    report = FilterReport(
        input_count=len(segments),
        retained_count=len(kept),
        dropped_by_rule={
            "unlabeled": len(unlabeled),
            "segment_similarity": len(low_sim),
            "cluster_reliability": len(bad_clusters),
            "quality_score": len(low_quality),
            "scorer_error": len(errors),
        },
        cluster_stats=stats,
    )
    return kept, unlabeled_kept, report
