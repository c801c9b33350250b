"""Adapter layer for the six externalized model roles.

Every neural model the pipeline consumes (enhancement, VAD, speaker
embedding, target extraction, quality scoring, ASR) sits behind one of the
role interfaces here. In-process mocks provide deterministic stand-ins for
tests and dry runs; real model runtimes attach through the framed stream
protocol in :mod:`autoprep.backends.remote`.

Capabilities (supported sample rates, embedding dimension, VAD frame hop)
are fixed per session. A sample-rate mismatch is an immediate error; nothing
here resamples.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Protocol, runtime_checkable

import numpy as np

from ..core import AudioBuffer, TimeRange
from ..segmenter import FrameTrack

ROLE_NAMES = ("enhancer", "vad", "embedder", "extractor", "scorer", "transcriber")


class BackendError(RuntimeError):
    """A backend failed to produce a result."""


class CapabilityError(RuntimeError):
    """A backend cannot serve the requested audio (for example, its rate)."""


@dataclass(frozen=True)
class QualityScore:
    ovrl: float
    pdnsmos: float | None = None


def ensure_rate(supported: tuple[int, ...] | None, rate: int, role: str) -> None:
    """Reject unsupported sample rates up front; resampling is never silent."""
    if supported is not None and rate not in supported:
        raise CapabilityError(
            f"{role} backend does not support {rate}Hz (supported: {sorted(supported)})"
        )


@runtime_checkable
class Enhancer(Protocol):
    supported_sample_rates: tuple[int, ...] | None

    def enhance(self, audio: AudioBuffer) -> AudioBuffer: ...


@runtime_checkable
class VoiceActivityDetector(Protocol):
    supported_sample_rates: tuple[int, ...] | None
    frame_hop_s: float

    def detect(self, audio: AudioBuffer) -> FrameTrack: ...


@runtime_checkable
class SpeakerEmbedder(Protocol):
    supported_sample_rates: tuple[int, ...] | None
    embedding_dim: int

    def embed_chunk(
        self, audio: AudioBuffer, *, recording_id: str, chunk: TimeRange
    ) -> np.ndarray: ...


@runtime_checkable
class TargetExtractor(Protocol):
    supported_sample_rates: tuple[int, ...] | None

    def extract(self, audio: AudioBuffer, enrollment: np.ndarray) -> AudioBuffer: ...


@runtime_checkable
class QualityScorer(Protocol):
    supported_sample_rates: tuple[int, ...] | None

    def score(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> QualityScore: ...


@runtime_checkable
class Transcriber(Protocol):
    supported_sample_rates: tuple[int, ...] | None

    def transcribe(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> str: ...


def fixture_key(recording_id: str, start_s: float) -> tuple[str, int]:
    """Key used by fixture-backed mocks: recording plus millisecond start."""
    return (recording_id, int(round(start_s * 1000)))


def _load_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


# ---------------------------------------------------------------------------
# Deterministic in-process mocks
# ---------------------------------------------------------------------------


class IdentityEnhancer:
    """Returns its input unchanged."""

    supported_sample_rates = None

    def enhance(self, audio: AudioBuffer) -> AudioBuffer:
        return audio


class GainEnhancer:
    """Scales every sample by a constant gain."""

    supported_sample_rates = None

    def __init__(self, gain: float):
        self.gain = float(gain)

    def enhance(self, audio: AudioBuffer) -> AudioBuffer:
        return AudioBuffer(audio.samples * np.float32(self.gain), audio.sample_rate)


class EnergyVAD:
    """Frame RMS scaled against a threshold, capped at 1. Test stand-in only."""

    supported_sample_rates = None

    def __init__(self, frame_hop_s: float = 0.01, rms_threshold: float = 0.05):
        if frame_hop_s <= 0 or rms_threshold <= 0:
            raise ValueError("frame hop and RMS threshold must be positive")
        self.frame_hop_s = float(frame_hop_s)
        self.rms_threshold = float(rms_threshold)

    def detect(self, audio: AudioBuffer) -> FrameTrack:
        hop = int(round(self.frame_hop_s * audio.sample_rate))
        if hop <= 0:
            raise BackendError(
                f"frame hop {self.frame_hop_s}s is below one sample at "
                f"{audio.sample_rate}Hz"
            )
        n_frames = len(audio.samples) // hop
        if n_frames == 0:
            return FrameTrack(np.zeros(0), self.frame_hop_s)
        frames = audio.samples[: n_frames * hop].astype(np.float64).reshape(n_frames, hop)
        rms = np.sqrt((frames * frames).mean(axis=1))
        probs = np.minimum(1.0, rms / self.rms_threshold)
        return FrameTrack(probs, self.frame_hop_s)


class FixtureEmbedder:
    """Replays embeddings from a fixture keyed by (recording_id, chunk start).

    Fixture rows: ``{"recording_id": str, "start_s": float, "vector": [...]}``.
    A missing key is an error, which makes clustering tests exact.
    """

    supported_sample_rates = None

    def __init__(
        self,
        table: Mapping[tuple[str, int], np.ndarray] | None = None,
        path: str | Path | None = None,
    ):
        vectors: dict[tuple[str, int], np.ndarray] = {}
        if table is not None:
            vectors.update(
                {key: np.asarray(vec, dtype=np.float64) for key, vec in table.items()}
            )
        if path is not None:
            for row in _load_jsonl(path):
                key = fixture_key(row["recording_id"], row["start_s"])
                vectors[key] = np.asarray(row["vector"], dtype=np.float64)
        if not vectors:
            raise ValueError("fixture embedder needs at least one embedding")
        dims = {vec.shape[0] for vec in vectors.values()}
        if len(dims) != 1:
            raise ValueError(f"fixture embeddings have mixed dimensions: {sorted(dims)}")
        self._vectors = vectors
        self.embedding_dim = dims.pop()

    def embed_chunk(
        self, audio: AudioBuffer, *, recording_id: str, chunk: TimeRange
    ) -> np.ndarray:
        key = fixture_key(recording_id, chunk.start_s)
        try:
            return self._vectors[key]
        except KeyError:
            raise BackendError(
                f"no fixture embedding for recording {recording_id!r} "
                f"chunk at {chunk.start_s:.3f}s"
            ) from None


class HashEmbedder:
    """Pseudo-embedding derived from a digest of the chunk samples.

    Deterministic and seed-free: the same audio always maps to the same
    unit vector. Useful for load tests where only volume matters.
    """

    supported_sample_rates = None

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.embedding_dim = int(dim)

    def embed_chunk(
        self, audio: AudioBuffer, *, recording_id: str, chunk: TimeRange
    ) -> np.ndarray:
        digest = hashlib.sha256()
        digest.update(struct.pack("<ii", audio.sample_rate, self.embedding_dim))
        digest.update(np.ascontiguousarray(audio.samples, dtype="<f4").tobytes())
        seed = int.from_bytes(digest.digest()[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.embedding_dim)
        return vec / np.linalg.norm(vec)


class SpectralPeakEmbedder:
    """Maps a chunk's dominant frequency to a smooth point on the unit sphere.

    Same-pitch audio lands on the same vector and distinct pitches land far
    apart, so synthetic corpora built from tones cluster the way real voices
    would. Deterministic and seed-free.
    """

    supported_sample_rates = None

    def __init__(self, dim: int = 32):
        if dim < 2:
            raise ValueError(f"embedding dimension must be at least 2, got {dim}")
        self.embedding_dim = int(dim)

    def embed_chunk(
        self, audio: AudioBuffer, *, recording_id: str, chunk: TimeRange
    ) -> np.ndarray:
        spectrum = np.abs(np.fft.rfft(np.asarray(audio.samples, dtype=np.float64)))
        if spectrum.size < 2 or not spectrum[1:].any():
            peak_hz = 0.0
        else:
            peak_bin = 1 + int(np.argmax(spectrum[1:]))  # skip DC
            peak_hz = peak_bin * audio.sample_rate / len(audio.samples)
        position = np.log1p(peak_hz) / np.log1p(24000.0) * (self.embedding_dim - 1)
        bins = np.arange(self.embedding_dim, dtype=np.float64)
        vec = np.exp(-0.5 * ((bins - position) / 0.75) ** 2)
        vec += 1e-9  # keep the norm nonzero for silent chunks
        return vec / np.linalg.norm(vec)


class PassthroughExtractor:
    """Ignores the enrollment and returns the mixture unchanged."""

    supported_sample_rates = None

    def extract(self, audio: AudioBuffer, enrollment: np.ndarray) -> AudioBuffer:
        return audio


class ScriptedScorer:
    """Replays quality scores from a fixture table, with an optional default.

    Fixture rows: ``{"recording_id", "start_s", "ovrl", "pdnsmos"?}``.
    """

    supported_sample_rates = None

    def __init__(
        self,
        table: Mapping[tuple[str, int], QualityScore] | None = None,
        path: str | Path | None = None,
        default: float | QualityScore | None = None,
    ):
        scores: dict[tuple[str, int], QualityScore] = {}
        if table is not None:
            scores.update(table)
        if path is not None:
            for row in _load_jsonl(path):
                key = fixture_key(row["recording_id"], row["start_s"])
                scores[key] = QualityScore(float(row["ovrl"]), row.get("pdnsmos"))
        if isinstance(default, (int, float)):
            default = QualityScore(float(default))
        self._scores = scores
        self._default = default

    def score(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> QualityScore:
        key = fixture_key(recording_id, span.start_s)
        hit = self._scores.get(key)
        if hit is not None:
            return hit
        if self._default is not None:
            return self._default
        raise BackendError(
            f"no scripted score for recording {recording_id!r} "
            f"segment at {span.start_s:.3f}s"
        )


class ScriptedTranscriber:
    """Replays transcripts from a fixture table, with an optional default.

    Fixture rows: ``{"recording_id", "start_s", "text"}``.
    """

    supported_sample_rates = None

    def __init__(
        self,
        table: Mapping[tuple[str, int], str] | None = None,
        path: str | Path | None = None,
        default: str | None = None,
    ):
        texts: dict[tuple[str, int], str] = {}
        if table is not None:
            texts.update(table)
        if path is not None:
            for row in _load_jsonl(path):
                key = fixture_key(row["recording_id"], row["start_s"])
                texts[key] = str(row["text"])
        self._texts = texts
        self._default = default

    def transcribe(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> str:
        key = fixture_key(recording_id, span.start_s)
        hit = self._texts.get(key)
        if hit is not None:
            return hit
        if self._default is not None:
            return self._default
        raise BackendError(
            f"no scripted transcript for recording {recording_id!r} "
            f"segment at {span.start_s:.3f}s"
        )


@dataclass
class BackendSet:
    """One backend per role; roles for disabled stages may stay empty."""

    enhancer: Enhancer | None = None
    vad: VoiceActivityDetector | None = None
    embedder: SpeakerEmbedder | None = None
    extractor: TargetExtractor | None = None
    scorer: QualityScorer | None = None
    transcriber: Transcriber | None = None

    def require(self, role: str):
        backend = getattr(self, role)
        if backend is None:
            raise CapabilityError(f"no {role} backend configured")
        return backend


def _resolve(path_value: str, base_dir: Path | None) -> Path:
    path = Path(path_value)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return path


def backend_set_from_spec(
    doc: Mapping[str, Any], base_dir: str | Path | None = None
) -> BackendSet:
    """Construct a backend set from a JSON description.

    Each role maps to ``{"kind": ..., ...}``. Mock kinds: identity, gain,
    energy, fixture, hash, passthrough, scripted. Kind ``process`` spawns an
    external command speaking the framed protocol on its stdio.
    """
    base = Path(base_dir) if base_dir is not None else None
    backends = BackendSet()
    for role, spec in doc.items():
        if role not in ROLE_NAMES:
            raise ValueError(f"unknown backend role {role!r}")
        if not isinstance(spec, Mapping) or "kind" not in spec:
            raise ValueError(f"backend role {role!r} needs an object with a 'kind'")
        kind = spec["kind"]
        if kind == "process":
            from .remote import remote_backend  # deferred: avoids import cycle

            backend = remote_backend(role, list(spec["cmd"]))
        elif role == "enhancer" and kind == "identity":
            backend = IdentityEnhancer()
        elif role == "enhancer" and kind == "gain":
            backend = GainEnhancer(spec["gain"])
        elif role == "vad" and kind == "energy":
            backend = EnergyVAD(
                frame_hop_s=spec.get("frame_hop_s", 0.01),
                rms_threshold=spec.get("rms_threshold", 0.05),
            )
        elif role == "embedder" and kind == "fixture":
            backend = FixtureEmbedder(path=_resolve(spec["path"], base))
        elif role == "embedder" and kind == "hash":
            backend = HashEmbedder(dim=spec.get("dim", 64))
        elif role == "embedder" and kind == "spectral":
            backend = SpectralPeakEmbedder(dim=spec.get("dim", 32))
        elif role == "extractor" and kind == "passthrough":
            backend = PassthroughExtractor()
        elif role == "scorer" and kind == "scripted":
            backend = ScriptedScorer(
                path=_resolve(spec["path"], base) if "path" in spec else None,
                default=spec.get("default"),
            )
        elif role == "transcriber" and kind == "scripted":
            backend = ScriptedTranscriber(
                path=_resolve(spec["path"], base) if "path" in spec else None,
                default=spec.get("default"),
            )
        else:
            raise ValueError(f"unknown kind {kind!r} for backend role {role!r}")
        setattr(backends, role, backend)
    return backends


def load_backend_spec(path: str | Path) -> BackendSet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return backend_set_from_spec(doc, base_dir=Path(path).parent)
