"""Straightforward reference implementation of the segmentation rules.

Deliberately structured differently from the library: merge rules run as
fixpoint rewrites over a plain list of (start, end) pairs, and silence
lookup goes through a precomputed sorted array of silent-frame times. Frame
times are always ``frame_index * hop`` and every rule threshold is compared
with the same expression the rules define, so a correct implementation must
agree bit for bit.
"""

from __future__ import annotations

import numpy as np


def _runs(speech: np.ndarray) -> list[tuple[int, int]]:
    changes = np.flatnonzero(speech[1:] != speech[:-1]) + 1
    starts = np.concatenate(([0], changes))
    ends = np.concatenate((changes, [len(speech)]))
    return [(int(a), int(b)) for a, b in zip(starts, ends) if speech[a]]


def _min_rule_fixpoint(
    spans: list[tuple[float, float]], min_len: float, cap: float | None
) -> list[tuple[float, float]]:
    spans = list(spans)
    while True:
        for i, (a, b) in enumerate(spans):
            if (b - a) >= min_len:
                continue
            if i + 1 < len(spans) and (
                cap is None or (spans[i + 1][1] - a) <= cap
            ):
                spans[i : i + 2] = [(a, spans[i + 1][1])]
            elif i > 0 and (cap is None or (b - spans[i - 1][0]) <= cap):
                spans[i - 1 : i + 1] = [(spans[i - 1][0], b)]
            else:
                del spans[i]
            break
        else:
            return spans


def _max_rule(
    spans: list[tuple[float, float]],
    silent_times: np.ndarray,
    soft_max: float,
    hard_max: float,
) -> list[tuple[float, float]]:
    done: list[tuple[float, float]] = []
    todo = list(spans)
    while todo:
        a, b = todo.pop(0)
        if b - a <= soft_max:
            done.append((a, b))
            continue
        lo = a + soft_max
        hi = min(a + hard_max, b)
        pos = int(np.searchsorted(silent_times, lo, side="left"))
        cut = None
        if pos < len(silent_times) and silent_times[pos] < hi:
            cut = float(silent_times[pos])
        if cut is None:
            if b - a > hard_max:
                cut = a + hard_max
            else:
                done.append((a, b))
                continue
        done.append((a, cut))
        todo.insert(0, (cut, b))
    return done


def reference_segments(
    probs,
    hop: float,
    *,
    threshold: float = 0.76,
    silence_split: float = 1.0,
    pad: float = 0.4,
    min_len: float = 1.5,
    soft_max: float = 30.0,
    hard_max: float = 40.0,
) -> list[tuple[float, float]]:
    """All five rules applied in order; returns (start, end) pairs."""
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if n == 0:
        return []
    speech = probs >= threshold
    total = n * hop

    regions: list[tuple[int, int]] = []
    for a, b in _runs(speech):
        if regions and (a - regions[-1][1]) * hop <= silence_split:
            regions[-1] = (regions[-1][0], b)
        else:
            regions.append((a, b))

    padded: list[tuple[float, float]] = []
    for fa, fb in regions:
        a = max(0.0, fa * hop - pad)
        b = min(total, fb * hop + pad)
        if padded and a <= padded[-1][1]:
            padded[-1] = (padded[-1][0], max(padded[-1][1], b))
        else:
            padded.append((a, b))

    spans = _min_rule_fixpoint(padded, min_len, None)
    silent_times = np.flatnonzero(~speech) * hop
    spans = _max_rule(spans, silent_times, soft_max, hard_max)
    spans = _min_rule_fixpoint(spans, min_len, hard_max)
    return spans
