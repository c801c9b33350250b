"""Speaker labeling within a bounded batch of segments.

Segments are cut into 1.5s/0.75s sub-chunks, each chunk gets a speaker
embedding, and the chunks are grouped by spectral clustering: cosine
affinity (negative similarities clamped to zero), normalized graph
Laplacian, speaker count from the largest eigenvalue gap, then K-Means in
the spectral embedding. Clusters whose centers are more similar than the
merge threshold collapse into one. A segment is labeled only when all of
its chunks agree; mixed segments abstain.

Cluster centers live in the original embedding space (unit-normalized
member mean) because downstream stages use them for enrollment and compare
against them in cosine units.

One clustering operation never covers more than a bounded amount of audio
(2 hours by default); labels are scoped to their batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .core import PipelineConfig, Segment, SpeakerEmbedding, TimeRange

# Dense eigendecomposition cost grows cubically; batches beyond this many
# chunks are uniformly subsampled and the remainder assigned to the nearest
# center.
MAX_EIG_CHUNKS = 12_000

_KMEANS_RESTARTS = 10
_KMEANS_MAX_ITER = 300
_KMEANS_TOL = 1e-6


def window_chunks(segment: Segment, window_s: float, shift_s: float) -> list[TimeRange]:
    """Sub-chunk a segment: windows at multiples of the shift, plus one
    end-aligned window when the last regular window falls short of the end."""
    duration = segment.duration_s
    if duration < window_s:
        raise ValueError(
            f"segment of {duration:.3f}s is shorter than the {window_s}s window"
        )
    base = segment.span.start_s
    chunks: list[TimeRange] = []
    offset = 0.0
    index = 0
    while offset + window_s <= duration:
        chunks.append(TimeRange(base + offset, base + offset + window_s))
        index += 1
        offset = index * shift_s
    if segment.span.end_s - chunks[-1].end_s > 1e-9:  # tolerance absorbs fp drift
        chunks.append(TimeRange(segment.span.end_s - window_s, segment.span.end_s))
    return chunks


def _as_matrix(embeddings) -> np.ndarray:
    """Stack embeddings into an (n, d) float64 matrix of unit rows."""
    if isinstance(embeddings, np.ndarray):
        matrix = np.asarray(embeddings, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError(f"expected an (n, d) matrix, got shape {matrix.shape}")
        return matrix
    vectors = [
        e.vector if isinstance(e, SpeakerEmbedding) else np.asarray(e, dtype=np.float64)
        for e in embeddings
    ]
    if not vectors:
        raise ValueError("need at least one embedding")
    dims = {v.shape[0] for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"embedding dimensions disagree: {sorted(dims)}")
    return np.vstack(vectors)


def build_affinity(embeddings) -> np.ndarray:
    """Pairwise cosine similarity with negatives clamped to zero.

    Clamping keeps the graph weights nonnegative so the normalized
    Laplacian is well defined. The diagonal is exactly one.
    """
    matrix = _as_matrix(embeddings)
    affinity = matrix @ matrix.T
    affinity = (affinity + affinity.T) * 0.5  # exact symmetry despite BLAS rounding
    np.clip(affinity, 0.0, 1.0, out=affinity)
    np.fill_diagonal(affinity, 1.0)
    return affinity


def check_affinity(affinity: np.ndarray) -> np.ndarray:
    """Validate the affinity invariants; returns the matrix for chaining."""
    A = np.asarray(affinity, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"affinity must be square, got shape {A.shape}")
    if A.size:
        if np.abs(A - A.T).max() > 1e-9:
            raise ValueError("affinity must be symmetric within 1e-9")
        if A.min() < 0.0 or A.max() > 1.0:
            raise ValueError("affinity entries must lie in [0, 1]")
        if np.abs(np.diag(A) - 1.0).max() > 1e-9:
            raise ValueError("affinity diagonal must be 1")
    return A


def _normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    degrees = affinity.sum(axis=1)
    if np.any(degrees <= 0):
        # Unreachable for a valid affinity (unit diagonal), kept as a guard.
        raise ValueError("affinity has a zero row sum (isolated node)")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    laplacian = -(affinity * inv_sqrt[np.newaxis, :]) * inv_sqrt[:, np.newaxis]
    laplacian[np.diag_indices_from(laplacian)] += 1.0
    return laplacian


def _eigengap_k(eigenvalues: np.ndarray, k_max: int) -> int:
    """Index of the largest first-order difference among sorted eigenvalues,
    searched over [1, min(k_max, n-1)]; ties break toward smaller k."""
    n = len(eigenvalues)
    limit = min(k_max, n - 1)
    gaps = eigenvalues[1 : limit + 1] - eigenvalues[:limit]
    return int(np.argmax(gaps)) + 1


def estimate_k(affinity: np.ndarray, k_max: int) -> int:
    """Estimate the speaker count from the Laplacian eigenvalue gaps."""
    A = check_affinity(affinity)
    if A.shape[0] < 2:
        raise ValueError("need at least two chunks to estimate a speaker count")
    if k_max < 1:
        raise ValueError(f"k_max must be positive, got {k_max}")
    eigenvalues = np.linalg.eigvalsh(_normalized_laplacian(A))
    return _eigengap_k(eigenvalues, k_max)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = points[idx]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


def _lloyd(
    points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, float]:
    n, _ = points.shape
    k = centers.shape[0]
    sq_points = (points * points).sum(axis=1)
    labels = np.zeros(n, dtype=np.intp)
    for _ in range(max_iter):
        d2 = sq_points[:, None] - 2.0 * (points @ centers.T) + (centers * centers).sum(axis=1)
        labels = np.argmin(d2, axis=1)
        own = d2[np.arange(n), labels].copy()
        new_centers = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = points[members].mean(axis=0)
            else:
                # Relocate an empty cluster to the worst-fit point.
                idx = int(np.argmax(own))
                new_centers[c] = points[idx]
                own[idx] = -1.0
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = sq_points[:, None] - 2.0 * (points @ centers.T) + (centers * centers).sum(axis=1)
    labels = np.argmin(d2, axis=1)
    inertia = float(np.maximum(d2[np.arange(n), labels], 0.0).sum())
    return labels, inertia


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Best-inertia K-Means over k-means++ restarts; fully deterministic
    given the generator state."""
    best_labels: np.ndarray | None = None
    best_inertia = np.inf
    for _ in range(_KMEANS_RESTARTS):
        init = _kmeans_pp_init(points, k, rng)
        labels, inertia = _lloyd(points, init, _KMEANS_MAX_ITER, _KMEANS_TOL)
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    assert best_labels is not None
    return best_labels


def _spectral_embedding(laplacian: np.ndarray, k: int) -> np.ndarray:
    _, vectors = np.linalg.eigh(laplacian)
    embedding = vectors[:, :k].copy()
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    np.divide(embedding, norms, out=embedding, where=norms > 0.0)
    return embedding


def spectral_assign(affinity: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Cluster chunks into k groups via the spectral embedding.

    Rows of the k smallest Laplacian eigenvectors are L2-normalized (zero
    rows stay zero) and clustered with seeded K-Means.
    """
    A = check_affinity(affinity)
    n = A.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == 1:
        return np.zeros(n, dtype=np.intp)
    embedding = _spectral_embedding(_normalized_laplacian(A), k)
    return _kmeans(embedding, k, np.random.default_rng(seed))


def _normalized_mean(members: np.ndarray) -> np.ndarray:
    mean = members.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        # Degenerate (for example antipodal members): fall back to the member
        # closest to the unnormalized mean so the operation stays total.
        idx = int(np.argmin(np.linalg.norm(members - mean, axis=1)))
        return members[idx]
    return mean / norm


def compute_centers(embeddings, assignments: Sequence[int]) -> np.ndarray:
    """Unit-normalized mean of each cluster's member embeddings."""
    matrix = _as_matrix(embeddings)
    labels = np.asarray(assignments, dtype=np.intp)
    if labels.shape[0] != matrix.shape[0]:
        raise ValueError(
            f"{matrix.shape[0]} embeddings but {labels.shape[0]} assignments"
        )
    k = int(labels.max()) + 1 if labels.size else 0
    centers = np.empty((k, matrix.shape[1]))
    for c in range(k):
        members = matrix[labels == c]
        if members.shape[0] == 0:
            raise ValueError(f"cluster {c} has no members")
        centers[c] = _normalized_mean(members)
    return centers


def merge_clusters(
    embeddings,
    centers: np.ndarray,
    assignments: Sequence[int],
    threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Repeatedly merge the most similar center pair above the threshold.

    After each merge the surviving center is recomputed from all member
    embeddings, so later merge decisions see the true combined cluster.
    Assignments are renumbered compactly. Idempotent: once no pair exceeds
    the threshold, the clustering is a fixed point.
    """
    matrix = _as_matrix(embeddings)
    labels = np.asarray(assignments, dtype=np.intp).copy()
    current = [np.asarray(c, dtype=np.float64) for c in centers]
    ids = list(range(len(current)))

    while len(current) > 1:
        stacked = np.vstack(current)
        sims = stacked @ stacked.T
        np.fill_diagonal(sims, -np.inf)
        flat = int(np.argmax(sims))
        i, j = divmod(flat, sims.shape[1])
        if sims[i, j] <= threshold:
            break
        keep, drop = (i, j) if i < j else (j, i)
        labels[labels == ids[drop]] = ids[keep]
        members = matrix[labels == ids[keep]]
        current[keep] = _normalized_mean(members)
        del current[drop]
        del ids[drop]

    # ids stays ascending under deletion, so enumerating renumbers compactly.
    remap = {old: new for new, old in enumerate(ids)}
    merged_centers = (
        np.vstack(current) if current else np.empty((0, matrix.shape[1]))
    )
    new_labels = np.array([remap[int(v)] for v in labels], dtype=np.intp)
    return merged_centers, new_labels


def label_segments(
    segments: Sequence[Segment], chunk_assignments: Sequence[int]
) -> list[int | None]:
    """Per-segment label: the unanimous cluster of its chunks, else abstain."""
    flat = np.asarray(chunk_assignments, dtype=np.intp)
    labels: list[int | None] = []
    cursor = 0
    for segment in segments:
        count = len(segment.chunk_ranges)
        if count == 0:
            raise ValueError(
                f"segment at {segment.span.start_s:.3f}s in {segment.recording_id!r} "
                "has no chunks"
            )
        values = flat[cursor : cursor + count]
        cursor += count
        first = int(values[0])
        labels.append(first if bool(np.all(values == first)) else None)
    if cursor != flat.shape[0]:
        raise ValueError(
            f"segments account for {cursor} chunks but {flat.shape[0]} assignments given"
        )
    return labels


def _split_oversized(
    segments: list[Segment], total_s: float, max_s: float
) -> list[list[Segment]]:
    parts = int(total_s // max_s) + 1
    cumulative = np.cumsum([s.duration_s for s in segments])
    split_after: list[int] = []
    previous = -1
    for j in range(1, parts):
        target = total_s * j / parts
        idx = int(np.argmin(np.abs(cumulative - target)))
        idx = max(idx, previous + 1)
        if idx >= len(segments) - 1:
            break
        split_after.append(idx)
        previous = idx
    pieces: list[list[Segment]] = []
    start = 0
    for idx in split_after:
        pieces.append(segments[start : idx + 1])
        start = idx + 1
    pieces.append(segments[start:])
    return [piece for piece in pieces if piece]


def batch_segments(segments: Sequence[Segment], max_hours: float) -> list[list[Segment]]:
    """Greedy in-order packing of whole recordings under the duration cap.

    A batch closes as soon as adding the next recording would reach or
    exceed the cap. A recording that alone reaches the cap is split at the
    segment boundaries nearest to an even division, each piece forming its
    own batch.
    """
    if max_hours <= 0:
        raise ValueError(f"batch cap must be positive, got {max_hours}")
    max_s = max_hours * 3600.0
    ordered = sorted(segments, key=lambda s: (s.recording_id, s.span.start_s, s.span.end_s))
    recordings: list[tuple[str, list[Segment], float]] = []
    for segment in ordered:
        if recordings and recordings[-1][0] == segment.recording_id:
            recordings[-1][1].append(segment)
        else:
            recordings.append((segment.recording_id, [segment], 0.0))
    recordings = [
        (rid, segs, float(sum(s.duration_s for s in segs))) for rid, segs, _ in recordings
    ]

    batches: list[list[Segment]] = []
    current: list[Segment] = []
    current_s = 0.0

    def flush() -> None:
        nonlocal current, current_s
        if current:
            batches.append(current)
            current = []
            current_s = 0.0

    for _rid, segs, rec_s in recordings:
        if rec_s >= max_s:
            flush()
            batches.extend(_split_oversized(segs, rec_s, max_s))
            continue
        if current and current_s + rec_s >= max_s:
            flush()
        current.extend(segs)
        current_s += rec_s
    flush()
    return batches


@dataclass(frozen=True)
class ClusterModel:
    """Result of one clustering operation over one batch."""

    batch_id: int
    k: int
    centers: np.ndarray
    chunk_assignments: np.ndarray
    segment_labels: tuple[int | None, ...]

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=np.float64)
        assignments = np.asarray(self.chunk_assignments, dtype=np.intp)
        if centers.shape[0] != self.k:
            raise ValueError(f"{centers.shape[0]} centers for k={self.k}")
        if assignments.size and (assignments.min() < 0 or assignments.max() >= self.k):
            raise ValueError("chunk assignment outside [0, k)")
        if centers.size:
            norms = np.linalg.norm(centers, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("cluster centers must be unit-norm within 1e-6")
        centers.flags.writeable = False
        assignments.flags.writeable = False
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "chunk_assignments", assignments)


def batch_seed(rng_seed: int, batch_id: int) -> int:
    """Stable per-batch seed derived from the run seed."""
    seq = np.random.SeedSequence([rng_seed & 0xFFFFFFFF, batch_id])
    return int(seq.generate_state(1)[0])


def cluster_batch(
    segments: Sequence[Segment],
    chunk_embeddings: Sequence[Sequence[SpeakerEmbedding]],
    config: PipelineConfig,
    batch_id: int,
    max_eig_chunks: int = MAX_EIG_CHUNKS,
) -> ClusterModel:
    """Cluster every chunk of a batch and derive per-segment labels.

    Segments without chunks (too short to window, or skipped upstream)
    abstain. Beyond ``max_eig_chunks`` chunks, the eigendecomposition runs
    on a uniform subsample and remaining chunks go to the nearest center.
    """
    if len(segments) != len(chunk_embeddings):
        raise ValueError(
            f"{len(segments)} segments but {len(chunk_embeddings)} embedding groups"
        )
    flat: list[SpeakerEmbedding] = [e for group in chunk_embeddings for e in group]
    n = len(flat)
    if n == 0:
        return ClusterModel(
            batch_id=batch_id,
            k=0,
            centers=np.empty((0, 0)),
            chunk_assignments=np.empty(0, dtype=np.intp),
            segment_labels=tuple(None for _ in segments),
        )

    matrix = _as_matrix(flat)
    rng = np.random.default_rng(batch_seed(config.rng_seed, batch_id))

    if n == 1:
        assignments = np.zeros(1, dtype=np.intp)
        centers = matrix.copy()
    else:
        if n > max_eig_chunks:
            sample_idx = np.sort(rng.choice(n, size=max_eig_chunks, replace=False))
        else:
            sample_idx = np.arange(n)
        sample = matrix[sample_idx]
        laplacian = _normalized_laplacian(build_affinity(sample))
        eigenvalues, eigenvectors = np.linalg.eigh(laplacian)
        k = _eigengap_k(eigenvalues, config.k_max)
        if k == 1:
            sample_labels = np.zeros(len(sample_idx), dtype=np.intp)
        else:
            embedding = eigenvectors[:, :k].copy()
            norms = np.linalg.norm(embedding, axis=1, keepdims=True)
            np.divide(embedding, norms, out=embedding, where=norms > 0.0)
            sample_labels = _kmeans(embedding, k, rng)
        centers = compute_centers(sample, sample_labels)
        centers, sample_labels = merge_clusters(
            sample, centers, sample_labels, config.cluster_merge_threshold
        )
        assignments = np.empty(n, dtype=np.intp)
        assignments[sample_idx] = sample_labels
        rest = np.setdiff1d(np.arange(n), sample_idx, assume_unique=True)
        if rest.size:
            assignments[rest] = np.argmax(matrix[rest] @ centers.T, axis=1)

    labels: list[int | None] = []
    cursor = 0
    for group in chunk_embeddings:
        count = len(group)
        if count == 0:
            labels.append(None)
            continue
        values = assignments[cursor : cursor + count]
        cursor += count
        first = int(values[0])
        labels.append(first if bool(np.all(values == first)) else None)

    return ClusterModel(
        batch_id=batch_id,
        k=centers.shape[0],
        centers=centers,
        chunk_assignments=assignments,
        segment_labels=tuple(labels),
    )


def export_rows(
    segments: Sequence[Segment],
    chunk_embeddings: Sequence[Sequence[SpeakerEmbedding]],
    model: ClusterModel,
) -> Iterator[str]:
    """Sidecar rows ``chunk_id<TAB>cluster<TAB>v1,v2,...`` for offline
    projection and visualization of a batch's embedding space."""
    cursor = 0
    for segment, group in zip(segments, chunk_embeddings):
        for embedding in group:
            cluster = int(model.chunk_assignments[cursor])
            cursor += 1
            chunk_id = f"{segment.recording_id}:{embedding.source_chunk.start_s:.3f}"
            values = ",".join(f"{v:.6g}" for v in embedding.vector)
            yield f"{chunk_id}\t{cluster}\t{values}"
