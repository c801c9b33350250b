"""Turn frame-level speech probabilities into duration-bounded segments.

The rules, applied in order:

1. binarize: a frame is speech when its probability is at or above the
   active threshold.
2. raw_regions: silence gaps of at most the split length are bridged, so
   continuous speech is not truncated.
3. pad_regions: each region keeps a margin of audio on both sides; regions
   that collide after padding merge.
4. enforce_min_length: regions shorter than the minimum absorb their
   successor (gap included) until long enough; a short tail merges backward;
   a recording whose entire speech is too short yields nothing.
5. enforce_max_length: a region longer than the soft cap splits at the first
   silent frame past the cap, or exactly at the hard cap when no silent
   frame appears before it; remainders re-enter rule 4 with the hard cap as
   a merge bound (a remainder that cannot merge without breaching the cap
   is dropped).

Everything here is pure and operates in seconds; frame times are always the
product ``frame_index * frame_hop_s`` so independent implementations of the
same rules agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PipelineConfig, Segment, TimeRange


@dataclass(frozen=True)
class FrameTrack:
    """Per-frame speech probabilities as produced by a VAD backend."""

    probs: np.ndarray
    frame_hop_s: float

    def __post_init__(self) -> None:
        if self.frame_hop_s <= 0:
            raise ValueError(f"frame hop must be positive, got {self.frame_hop_s}")
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise ValueError("probability track must be one-dimensional")
        if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def duration_s(self) -> float:
        return len(self.probs) * self.frame_hop_s


@dataclass(frozen=True)
class SpeechMask:
    """Boolean speech/silence decision per frame."""

    flags: np.ndarray
    frame_hop_s: float

    def __post_init__(self) -> None:
        if self.frame_hop_s <= 0:
            raise ValueError(f"frame hop must be positive, got {self.frame_hop_s}")
        flags = np.asarray(self.flags, dtype=bool)
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)


def binarize(track: FrameTrack, threshold: float) -> SpeechMask:
    """Threshold the track; a probability equal to the threshold is speech."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return SpeechMask(track.probs >= threshold, track.frame_hop_s)


def _speech_runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of speech frames as half-open frame index pairs."""
    if len(flags) == 0:
        return []
    edges = np.flatnonzero(flags[1:] != flags[:-1]) + 1
    bounds = np.concatenate(([0], edges, [len(flags)]))
    return [
        (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if flags[a]
    ]


def raw_regions(mask: SpeechMask, silence_split_s: float) -> list[TimeRange]:
    """Speech runs with short silence gaps bridged.

    A silence gap between two speech runs is absorbed when its duration is
    at most ``silence_split_s``; longer gaps split the speech.
    """
    if silence_split_s <= 0:
        raise ValueError(f"silence split must be positive, got {silence_split_s}")
    hop = mask.frame_hop_s
    merged: list[list[int]] = []
    for a, b in _speech_runs(mask.flags):
        if merged and (a - merged[-1][1]) * hop <= silence_split_s:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    return [TimeRange(a * hop, b * hop) for a, b in merged]


def pad_regions(
    regions: list[TimeRange], pad_s: float, total_duration_s: float
) -> list[TimeRange]:
    """Expand every region by ``pad_s`` on both sides, clamped to the
    recording; regions that touch or overlap after padding merge."""
    out: list[list[float]] = []
    for region in regions:
        a = max(0.0, region.start_s - pad_s)
        b = min(total_duration_s, region.end_s + pad_s)
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [TimeRange(a, b) for a, b in out]


def enforce_min_length(
    regions: list[TimeRange], min_s: float, max_span_s: float | None = None
) -> list[TimeRange]:
    """Merge regions shorter than ``min_s`` into their neighbours.

    A short region absorbs successors (gaps included) until its span reaches
    ``min_s``; a short tail merges backward into its predecessor. When
    ``max_span_s`` is set, a merge that would push the span past it is
    refused and a region that still cannot reach ``min_s`` is dropped.
    Without a bound, the only droppable case is a whole list merging into a
    single region that is still too short.
    """
    out: list[list[float]] = []
    i = 0
    n = len(regions)
    while i < n:
        start = regions[i].start_s
        end = regions[i].end_s
        j = i
        while (end - start) < min_s and j + 1 < n:
            candidate_end = regions[j + 1].end_s
            if max_span_s is not None and (candidate_end - start) > max_span_s:
                break
            end = candidate_end
            j += 1
        if (end - start) >= min_s:
            out.append([start, end])
        elif out and (max_span_s is None or (end - out[-1][0]) <= max_span_s):
            out[-1][1] = end
        # else: unmergeable short span, dropped
        i = j + 1
    return [TimeRange(a, b) for a, b in out]


def _first_silent_frame(
    flags: np.ndarray, hop: float, lo_s: float, hi_s: float
) -> float | None:
    """Start time of the first silent frame with lo_s <= start < hi_s.

    The time comparisons define the boundary semantics; index arithmetic is
    only a fast-forward over frames certainly outside [lo_s, hi_s).
    """
    n = len(flags)
    j_lo = max(0, int(lo_s / hop) - 2)
    j_hi = min(n, int(hi_s / hop) + 2)
    window = np.flatnonzero(~flags[j_lo:j_hi]) + j_lo
    for j in window:
        t = j * hop
        if t >= hi_s:
            return None
        if t >= lo_s:
            return float(t)
    return None


def enforce_max_length(
    regions: list[TimeRange],
    mask: SpeechMask,
    soft_max_s: float,
    hard_max_s: float,
) -> list[TimeRange]:
    """Split over-long regions at silence, or at the hard cap as a last resort.

    A region longer than ``soft_max_s`` splits at the start of the first
    silent frame at or past ``start + soft_max_s``. If no silent frame occurs
    before ``start + hard_max_s`` and the region is longer than the hard cap,
    it is cut exactly there. The remainder is processed the same way.
    """
    if soft_max_s >= hard_max_s:
        raise ValueError(
            f"soft cap must be below hard cap, got {soft_max_s} >= {hard_max_s}"
        )
    hop = mask.frame_hop_s
    out: list[TimeRange] = []
    for region in regions:
        start = region.start_s
        end = region.end_s
        while end - start > soft_max_s:
            hard_limit = start + hard_max_s
            cut = _first_silent_frame(
                mask.flags, hop, start + soft_max_s, min(hard_limit, end)
            )
            if cut is None:
                if end - start > hard_max_s:
                    cut = hard_limit
                else:
                    break  # between the caps with no silence: leave intact
            out.append(TimeRange(start, cut))
            start = cut
        out.append(TimeRange(start, end))
    return out


def segment_recording(
    track: FrameTrack, config: PipelineConfig, recording_id: str = ""
) -> list[Segment]:
    """Apply all five rules and wrap the surviving regions as segments.

    May legitimately return nothing (all-silence input, or speech shorter
    than the minimum). Every emitted segment has a duration within
    [min_segment_s, hard_max_segment_s].
    """
    if len(track.probs) == 0:
        return []
    mask = binarize(track, config.vad_threshold)
    regions = raw_regions(mask, config.silence_split_s)
    regions = pad_regions(regions, config.pad_s, track.duration_s)
    regions = enforce_min_length(regions, config.min_segment_s)
    regions = enforce_max_length(
        regions, mask, config.soft_max_segment_s, config.hard_max_segment_s
    )
    regions = enforce_min_length(
        regions, config.min_segment_s, max_span_s=config.hard_max_segment_s
    )
    return [Segment(recording_id=recording_id, span=region) for region in regions]
