"""Shared fixtures-in-code for the test suite."""

from __future__ import annotations

import numpy as np

from autoprep.core import Segment, SpeakerEmbedding, TimeRange


def make_cones(
    rng: np.random.Generator,
    k: int,
    n: int,
    dim: int = 32,
    spread: float = 0.04,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic unit vectors in k tight cones around orthogonal axes.

    Guarantees intra-cone cosine > 0.9 and inter-cone cosine < 0.3 for the
    spreads used in tests. Returns (vectors, labels, axes).
    """
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    axes = basis[:, :k].T
    labels = rng.integers(0, k, size=n)
    # Guarantee every cone is populated.
    labels[:k] = np.arange(k)
    noise = rng.standard_normal((n, dim)) * spread
    vectors = axes[labels] + noise
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors, labels, axes


def make_segment(
    rid: str,
    start: float,
    end: float,
    label: str | None = None,
    similarity: float | None = None,
    **extra,
) -> Segment:
    return Segment(
        recording_id=rid,
        span=TimeRange(start, end),
        speaker_label=label,
        cluster_similarity=similarity,
        **extra,
    )


def embeddings_for(vectors: np.ndarray, start: float = 0.0) -> list[SpeakerEmbedding]:
    """Wrap raw vectors as embeddings with synthetic source chunks."""
    return [
        SpeakerEmbedding(vec, TimeRange(start + 0.75 * i, start + 0.75 * i + 1.5))
        for i, vec in enumerate(np.atleast_2d(vectors))
    ]
