"""Chunk-wise enhancement of long recordings.

A fixed-context enhancement backend cannot ingest arbitrarily long audio, so
recordings are processed in overlapping windows (12s window, 4s shift by
default) and only the interior of each window's output is kept. Emit regions
tile the recording exactly, so stitching is hard concatenation with no
crossfade.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import AudioBuffer, TimeRange, seconds_to_samples


class EnhancementError(RuntimeError):
    """Backend failure or contract violation while enhancing one chunk."""


@dataclass(frozen=True)
class ChunkPlan:
    """Inference windows and the sub-ranges of their output that get emitted.

    Emit ranges are pairwise disjoint, each is contained in its infer range,
    and together they cover [0, total_duration_s) exactly.
    """

    entries: tuple[tuple[TimeRange, TimeRange], ...]
    total_duration_s: float
    window_s: float


def plan_chunks(duration_s: float, window_s: float, shift_s: float) -> ChunkPlan:
    """Lay out inference windows at multiples of the shift.

    Interior windows emit their middle ``shift_s`` seconds. The first window
    additionally emits its leading half-margin, and the last window emits
    through the recording end, so the emit regions partition the recording.
    A recording no longer than one window becomes a single chunk.
    """
    if duration_s <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if shift_s <= 0 or window_s <= shift_s:
        raise ValueError(
            f"need window_s > shift_s > 0, got window {window_s}, shift {shift_s}"
        )
    if duration_s <= window_s:
        whole = TimeRange(0.0, duration_s)
        return ChunkPlan(((whole, whole),), duration_s, window_s)

    lead = (window_s - shift_s) / 2.0
    n = max(1, int(math.ceil((duration_s - window_s) / shift_s)))
    while n * shift_s + window_s < duration_s:
        n += 1

    # Each boundary is computed once and shared by its two neighbours so the
    # partition is exact in floating point, not just mathematically.
    bounds = [0.0] + [j * shift_s + lead for j in range(1, n + 1)] + [duration_s]
    entries = []
    for i in range(n + 1):
        start = i * shift_s
        infer_end = start + window_s if i < n else duration_s
        entries.append(
            (TimeRange(start, infer_end), TimeRange(bounds[i], bounds[i + 1]))
        )
    return ChunkPlan(tuple(entries), duration_s, window_s)


def _run_chunk(
    index: int,
    infer: TimeRange,
    audio: AudioBuffer,
    window_samples: int,
    enhancer,
) -> np.ndarray:
    rate = audio.sample_rate
    a = seconds_to_samples(infer.start_s, rate)
    b = min(seconds_to_samples(infer.end_s, rate), len(audio.samples))
    chunk = audio.samples[a:b]
    pad = window_samples - len(chunk)
    if pad > 0:
        # Trailing partial window: pad to full window length for the backend,
        # then discard the padded tail of its output.
        chunk = np.concatenate([chunk, np.zeros(pad, dtype=np.float32)])
    try:
        result = enhancer.enhance(AudioBuffer(chunk, rate))
    except Exception as exc:
        raise EnhancementError(f"enhancement backend failed on chunk {index}: {exc}") from exc
    if result.sample_rate != rate:
        raise EnhancementError(
            f"backend changed sample rate on chunk {index}: "
            f"{rate} -> {result.sample_rate}"
        )
    if len(result.samples) != len(chunk):
        raise EnhancementError(
            f"backend returned {len(result.samples)} samples for chunk {index}, "
            f"expected {len(chunk)}"
        )
    return result.samples[: b - a]


def enhance_recording(
    audio: AudioBuffer, plan: ChunkPlan, enhancer, workers: int = 1
) -> AudioBuffer:
    """Run the backend over every planned chunk and stitch the emit regions.

    Output has the same sample count and rate as the input. Chunks may run
    concurrently; assembly is by emit offset, so the result does not depend
    on completion order.
    """
    rate = audio.sample_rate
    n_samples = len(audio.samples)
    if seconds_to_samples(plan.total_duration_s, rate) != n_samples:
        raise ValueError(
            f"plan covers {plan.total_duration_s}s but audio has {n_samples} samples "
            f"at {rate}Hz"
        )
    window_samples = seconds_to_samples(plan.window_s, rate)
    out = np.empty(n_samples, dtype=np.float32)

    if workers > 1 and len(plan.entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda item: _run_chunk(
                        item[0], item[1][0], audio, window_samples, enhancer
                    ),
                    enumerate(plan.entries),
                )
            )
    else:
        results = [
            _run_chunk(i, infer, audio, window_samples, enhancer)
            for i, (infer, _emit) in enumerate(plan.entries)
        ]

    for (infer, emit), chunk_out in zip(plan.entries, results):
        a = seconds_to_samples(infer.start_s, rate)
        ea = seconds_to_samples(emit.start_s, rate)
        eb = min(seconds_to_samples(emit.end_s, rate), n_samples)
        out[ea:eb] = chunk_out[ea - a : eb - a]
    return AudioBuffer(out, rate)
