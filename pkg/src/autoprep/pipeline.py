"""End-to-end orchestration with persistence, resumability, and statistics.

Stages run in a fixed order: enhance, segment, cluster, target extraction,
filter, transcribe, persist. Each stage is toggleable; disabled stages pass
their input through. Recordings are the checkpoint unit (clustering batches
checkpoint per batch), all checkpoint files are written atomically, and
every stochastic step is seeded from the config, so any interrupt/resume
schedule reproduces the byte-identical final manifest.

Output layout under the run directory:

    <recording_id>/<segment_id>.wav   float32 WAV at native rate
    manifest.jsonl                    one record per retained segment
    manifest.unlabeled.jsonl          high-quality segments without a label
    filter_report.json
    stats.json
    work/                             per-stage checkpoints
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .audio_io import AudioReadError, read_wav, read_wav_rate, write_wav
from .backends import BackendSet, ensure_rate
from .core import (
    AudioBuffer,
    PipelineConfig,
    Segment,
    SpeakerEmbedding,
    TimeRange,
)
from .diarize import batch_segments, cluster_batch, window_chunks
from .enhance import plan_chunks, enhance_recording
from .filtering import (
    FilterReport,
    filter_by_cluster_reliability,
    filter_by_segment_similarity,
    segment_similarity,
)
from .segmenter import segment_recording

logger = logging.getLogger("autoprep")

STAGE_ORDER = ("enhance", "segment", "cluster", "tse", "filter", "asr", "persist")


@dataclass(frozen=True)
class InputRecord:
    """One row of the input manifest."""

    recording_id: str
    path: Path
    segments: tuple[TimeRange, ...] | None = None


def read_input_manifest(path: str | Path) -> list[InputRecord]:
    """Parse the JSONL input manifest; relative audio paths resolve against
    the manifest's directory."""
    manifest_path = Path(path)
    base = manifest_path.parent
    records: list[InputRecord] = []
    seen: set[str] = set()
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            rid = row["recording_id"]
            # recording ids become output path components
            if not rid or rid in (".", "..") or "/" in rid or "\\" in rid:
                raise ValueError(f"invalid recording_id {rid!r} at line {line_no}")
            if rid in seen:
                raise ValueError(f"duplicate recording_id {rid!r} at line {line_no}")
            seen.add(rid)
            audio_path = Path(row["path"])
            if not audio_path.is_absolute():
                audio_path = base / audio_path
            spans = None
            if row.get("segments") is not None:
                spans = tuple(TimeRange(float(a), float(b)) for a, b in row["segments"])
            records.append(InputRecord(rid, audio_path, spans))
    return records


@dataclass(frozen=True)
class ManifestRecord:
    """One output row per retained segment."""

    recording_id: str
    segment_id: str
    start_s: float
    end_s: float
    speaker_label: str | None
    cluster_similarity: float | None
    ovrl_score: float | None
    pdnsmos_score: float | None
    transcript: str | None
    audio_path: str
    stage_flags: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.end_s <= self.start_s:
            raise ValueError(f"empty manifest span [{self.start_s}, {self.end_s})")
        if (self.speaker_label is None) != (self.cluster_similarity is None):
            raise ValueError("speaker label and cluster similarity must be set together")

    def to_dict(self) -> dict[str, Any]:
        return {
            "recording_id": self.recording_id,
            "segment_id": self.segment_id,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "speaker_label": self.speaker_label,
            "cluster_similarity": self.cluster_similarity,
            "ovrl_score": self.ovrl_score,
            "pdnsmos_score": self.pdnsmos_score,
            "transcript": self.transcript,
            "audio_path": self.audio_path,
            "stage_flags": list(self.stage_flags),
        }

    @classmethod
    def from_dict(cls, row: Mapping[str, Any]) -> "ManifestRecord":
        return cls(
            recording_id=row["recording_id"],
            segment_id=row["segment_id"],
            start_s=row["start_s"],
            end_s=row["end_s"],
            speaker_label=row.get("speaker_label"),
            cluster_similarity=row.get("cluster_similarity"),
            ovrl_score=row.get("ovrl_score"),
            pdnsmos_score=row.get("pdnsmos_score"),
            transcript=row.get("transcript"),
            audio_path=row["audio_path"],
            stage_flags=tuple(row.get("stage_flags", ())),
        )


@dataclass(frozen=True)
class CorpusStats:
    """Corpus duration, speaker count, quality score moments, and the
    per-stage retention funnel."""

    total_duration_h: float
    num_segments: int
    num_speakers: int
    ovrl_mean: float | None
    ovrl_std: float | None
    pdnsmos_mean: float | None
    pdnsmos_std: float | None
    per_stage_retention: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_duration_h": self.total_duration_h,
            "num_segments": self.num_segments,
            "num_speakers": self.num_speakers,
            "ovrl_mean": self.ovrl_mean,
            "ovrl_std": self.ovrl_std,
            "pdnsmos_mean": self.pdnsmos_mean,
            "pdnsmos_std": self.pdnsmos_std,
            "per_stage_retention": dict(self.per_stage_retention),
        }


def _moments(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())  # population standard deviation


def compute_stats(
    records: Sequence[ManifestRecord],
    per_stage_retention: Mapping[str, int] | None = None,
) -> CorpusStats:
    """Table-style corpus statistics for a manifest.

    When no retention funnel is supplied, one is derived from stage flags:
    a record counts for every stage at or before the latest stage it
    reached, which keeps the funnel nonincreasing even when per-segment
    skips leave gaps in the flags.
    """
    total_s = sum(r.end_s - r.start_s for r in records)
    labels = {r.speaker_label for r in records if r.speaker_label is not None}
    ovrl_mean, ovrl_std = _moments([r.ovrl_score for r in records if r.ovrl_score is not None])
    pd_mean, pd_std = _moments(
        [r.pdnsmos_score for r in records if r.pdnsmos_score is not None]
    )
    if per_stage_retention is None:
        index = {name: i for i, name in enumerate(STAGE_ORDER)}
        reached = [
            max((index[flag] for flag in r.stage_flags if flag in index), default=-1)
            for r in records
        ]
        per_stage_retention = {
            name: sum(1 for top in reached if top >= i)
            for i, name in enumerate(STAGE_ORDER)
        }
    return CorpusStats(
        total_duration_h=total_s / 3600.0,
        num_segments=len(records),
        num_speakers=len(labels),
        ovrl_mean=ovrl_mean,
        ovrl_std=ovrl_std,
        pdnsmos_mean=pd_mean,
        pdnsmos_std=pd_std,
        per_stage_retention=dict(per_stage_retention),
    )


def extract_target(audio: AudioBuffer, center: np.ndarray, extractor) -> AudioBuffer:
    """Run target extraction with the cluster center as enrollment.

    The output must keep the input's duration and rate; it replaces the
    segment audio for every downstream stage.
    """
    out = extractor.extract(audio, np.asarray(center, dtype=np.float64))
    if out.sample_rate != audio.sample_rate or len(out.samples) != len(audio.samples):
        raise RuntimeError(
            f"extractor changed shape: {len(audio.samples)}@{audio.sample_rate} -> "
            f"{len(out.samples)}@{out.sample_rate}"
        )
    return out


def transcribe_segments(
    segments: Sequence[Segment],
    transcriber,
    audio_provider: Callable[[Segment], AudioBuffer],
) -> tuple[list[Segment], list[str | None]]:
    """Attach transcripts; a backend failure leaves the transcript null and
    keeps the segment. Returns (segments, per-segment error reasons)."""
    out: list[Segment] = []
    reasons: list[str | None] = []
    for segment in segments:
        try:
            text = transcriber.transcribe(
                audio_provider(segment),
                recording_id=segment.recording_id,
                span=segment.span,
            )
        except Exception as exc:
            out.append(segment)
            reasons.append(f"asr_error: {exc}")
            continue
        out.append(replace(segment, transcript=str(text)))
        reasons.append(None)
    return out, reasons


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_write_wav(path: Path, audio: AudioBuffer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write_wav(tmp, audio)
    os.replace(tmp, path)


def _write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> None:
    _atomic_write_text(path, "".join(json.dumps(row) + "\n" for row in rows))


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


@dataclass
class RunResult:
    manifest: list[ManifestRecord]
    unlabeled: list[ManifestRecord]
    report: FilterReport | None
    stats: CorpusStats
    skipped_recordings: list[dict[str, str]]
    out_dir: Path


@dataclass
class _SegmentState:
    """Mutable per-segment bookkeeping while a run is in flight."""

    segment_id: str
    segment: Segment
    embeddings: list[SpeakerEmbedding] = field(default_factory=list)
    tse_ok: bool = False
    dropped: str | None = None


class _Runner:
    def __init__(
        self,
        records: Sequence[InputRecord],
        config: PipelineConfig,
        backends: BackendSet,
        out_dir: Path,
        resume: bool,
        workers: int,
    ):
        self.records = list(records)
        self.config = config
        self.backends = backends
        self.out = Path(out_dir)
        self.work = self.out / "work"
        self.resume = resume
        self.workers = max(1, workers)
        self.skipped: list[dict[str, str]] = []
        self.retention: dict[str, int] = {}
        self._audio_cache: dict[str, AudioBuffer] = {}
        self._cache_lock = threading.Lock()

    # -- plumbing ----------------------------------------------------------

    def _map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _fresh_start(self) -> None:
        if self.work.exists():
            shutil.rmtree(self.work)
        for name in (
            "manifest.jsonl",
            "manifest.unlabeled.jsonl",
            "filter_report.json",
            "stats.json",
        ):
            (self.out / name).unlink(missing_ok=True)
        for record in self.records:
            target = self.out / record.recording_id
            if target.is_dir():
                shutil.rmtree(target)

    def _preflight(self) -> None:
        stages = self.config.stages
        needed = []
        if stages.enhance:
            needed.append("enhancer")
        if stages.segment:
            needed.append("vad")
        if stages.cluster:
            needed.append("embedder")
        if stages.tse:
            needed.append("extractor")
        if stages.filter:
            needed.append("scorer")
        if stages.asr:
            needed.append("transcriber")
        for role in needed:
            self.backends.require(role)
        readable: list[InputRecord] = []
        for record in self.records:
            try:
                rate = read_wav_rate(record.path)
            except AudioReadError as exc:
                logger.warning("skipping recording %s: %s", record.recording_id, exc)
                self.skipped.append(
                    {"recording_id": record.recording_id, "reason": str(exc)}
                )
                continue
            for role in needed:
                backend = getattr(self.backends, role)
                ensure_rate(getattr(backend, "supported_sample_rates", None), rate, role)
            readable.append(record)
        self.records = readable

    def _raw_audio(self, record: InputRecord) -> AudioBuffer:
        return read_wav(record.path)

    def _current_recording_audio(self, record: InputRecord) -> AudioBuffer:
        """Post-enhancement audio for a recording, cached in memory."""
        rid = record.recording_id
        with self._cache_lock:
            cached = self._audio_cache.get(rid)
        if cached is not None:
            return cached
        enhanced_path = self._enhanced_path(rid)
        audio = read_wav(enhanced_path) if enhanced_path.exists() else self._raw_audio(record)
        with self._cache_lock:
            if len(self._audio_cache) >= 8:
                self._audio_cache.pop(next(iter(self._audio_cache)))
            self._audio_cache[rid] = audio
        return audio

    def _enhanced_path(self, rid: str) -> Path:
        return self.work / "enhanced" / f"{rid}.wav"

    # -- stages ------------------------------------------------------------

    def _stage_enhance(self) -> None:
        if not self.config.stages.enhance:
            return

        def enhance_one(record: InputRecord) -> None:
            target = self._enhanced_path(record.recording_id)
            if self.resume and target.exists():
                return
            audio = self._raw_audio(record)
            if len(audio.samples) == 0:
                _atomic_write_wav(target, audio)
                return
            plan = plan_chunks(
                audio.duration_s,
                self.config.enhance_window_s,
                self.config.enhance_shift_s,
            )
            enhanced = enhance_recording(audio, plan, self.backends.require("enhancer"))
            _atomic_write_wav(target, enhanced)

        self._map(enhance_one, self.records)

    def _segments_path(self, rid: str) -> Path:
        return self.work / "segments" / f"{rid}.jsonl"

    def _stage_segment(self) -> dict[str, list[_SegmentState]]:
        def segment_one(record: InputRecord) -> tuple[str, list[_SegmentState]]:
            rid = record.recording_id
            path = self._segments_path(rid)
            if self.resume and path.exists():
                rows = _read_jsonl(path)
            else:
                rows = self._compute_segments(record)
                _write_jsonl(path, rows)
            states = [
                _SegmentState(
                    segment_id=row["segment_id"],
                    segment=Segment(
                        recording_id=rid,
                        span=TimeRange(row["start_s"], row["end_s"]),
                    ),
                )
                for row in rows
            ]
            return rid, states

        return dict(self._map(segment_one, self.records))

    def _compute_segments(self, record: InputRecord) -> list[dict[str, Any]]:
        rid = record.recording_id
        audio = self._current_recording_audio(record)
        duration = audio.duration_s
        if self.config.stages.segment:
            track = self.backends.require("vad").detect(audio)
            segments = segment_recording(track, self.config, recording_id=rid)
            spans = [s.span for s in segments]
            source = "vad"
        elif record.segments is not None:
            spans, source = [], "external"
            for span in sorted(record.segments, key=lambda r: (r.start_s, r.end_s)):
                end = min(span.end_s, duration)
                if end > span.start_s:
                    spans.append(TimeRange(span.start_s, end))
        else:
            # No segmentation available at all: the recording is one segment.
            spans = [TimeRange(0.0, duration)] if duration > 0 else []
            source = "whole"
        return [
            {
                "segment_id": f"{rid}-{i:04d}",
                "start_s": span.start_s,
                "end_s": span.end_s,
                "source": source,
            }
            for i, span in enumerate(spans)
        ]

    def _embeddings_path(self, rid: str) -> Path:
        return self.work / "embeddings" / f"{rid}.jsonl"

    def _stage_embeddings(self, by_recording: dict[str, list[_SegmentState]]) -> None:
        embedder = self.backends.require("embedder")

        def embed_one(record: InputRecord) -> None:
            rid = record.recording_id
            states = by_recording[rid]
            path = self._embeddings_path(rid)
            if self.resume and path.exists():
                rows = _read_jsonl(path)
            else:
                audio = self._current_recording_audio(record)
                rows = []
                for state in states:
                    segment = state.segment
                    if segment.duration_s < self.config.embed_window_s - 1e-9:
                        rows.append({"segment_id": state.segment_id, "chunks": []})
                        continue
                    chunks = window_chunks(
                        segment, self.config.embed_window_s, self.config.embed_shift_s
                    )
                    chunk_rows = []
                    for chunk in chunks:
                        vector = embedder.embed_chunk(
                            audio.slice_range(chunk), recording_id=rid, chunk=chunk
                        )
                        # Raw backend vectors are checkpointed; normalization
                        # happens on load so fresh and resumed runs agree bit
                        # for bit.
                        chunk_rows.append(
                            {
                                "start_s": chunk.start_s,
                                "end_s": chunk.end_s,
                                "vector": [float(x) for x in np.asarray(vector).ravel()],
                            }
                        )
                    rows.append({"segment_id": state.segment_id, "chunks": chunk_rows})
                _write_jsonl(path, rows)
            by_id = {state.segment_id: state for state in states}
            for row in rows:
                state = by_id[row["segment_id"]]
                ranges = []
                embeddings = []
                for chunk_row in row["chunks"]:
                    span = TimeRange(chunk_row["start_s"], chunk_row["end_s"])
                    ranges.append(span)
                    embeddings.append(SpeakerEmbedding(np.asarray(chunk_row["vector"]), span))
                state.segment = replace(state.segment, chunk_ranges=tuple(ranges))
                state.embeddings = embeddings

        self._map(embed_one, self.records)

    def _cluster_path(self, batch_id: int) -> Path:
        return self.work / "clusters" / f"batch-{batch_id:04d}.json"

    def _stage_cluster(self, by_recording: dict[str, list[_SegmentState]]) -> None:
        self._stage_embeddings(by_recording)
        all_states = [state for states in by_recording.values() for state in states]
        state_by_key = {
            (s.segment.recording_id, s.segment.span.start_s, s.segment.span.end_s): s
            for s in all_states
        }
        batches = batch_segments(
            [s.segment for s in all_states], self.config.batch_max_hours
        )

        for batch_id, batch in enumerate(batches):
            states = [
                state_by_key[(seg.recording_id, seg.span.start_s, seg.span.end_s)]
                for seg in batch
            ]
            path = self._cluster_path(batch_id)
            if self.resume and path.exists():
                doc = json.loads(path.read_text(encoding="utf-8"))
            else:
                doc = self._cluster_one_batch(batch_id, states)
                _atomic_write_text(path, json.dumps(doc))
            label_by_id = {
                row["segment_id"]: (row["label"], row["similarity"])
                for row in doc["segments"]
            }
            for state in states:
                label, similarity = label_by_id[state.segment_id]
                if label is not None:
                    state.segment = replace(
                        state.segment,
                        speaker_label=f"{batch_id}.{label}",
                        cluster_similarity=similarity,
                    )

    def _cluster_one_batch(
        self, batch_id: int, states: list[_SegmentState]
    ) -> dict[str, Any]:
        model = cluster_batch(
            [s.segment for s in states],
            [s.embeddings for s in states],
            self.config,
            batch_id,
        )
        rows = []
        for state, label in zip(states, model.segment_labels):
            similarity = None
            if label is not None:
                similarity = segment_similarity(state.embeddings, model.centers[label])
            rows.append(
                {
                    "segment_id": state.segment_id,
                    "label": label,
                    "similarity": similarity,
                }
            )
        return {
            "batch_id": batch_id,
            "k": model.k,
            "centers": [[float(x) for x in row] for row in model.centers],
            "chunk_assignments": [int(x) for x in model.chunk_assignments],
            "segments": rows,
        }

    def _tse_status_path(self, rid: str) -> Path:
        return self.work / "tse" / f"{rid}.jsonl"

    def _tse_audio_path(self, rid: str, segment_id: str) -> Path:
        return self.work / "tse_audio" / rid / f"{segment_id}.wav"

    def _stage_tse(self, by_recording: dict[str, list[_SegmentState]]) -> None:
        extractor = self.backends.require("extractor")
        centers = self._centers_by_label()

        def tse_one(record: InputRecord) -> None:
            rid = record.recording_id
            states = by_recording[rid]
            path = self._tse_status_path(rid)
            status = None
            if self.resume and path.exists():
                status = {row["segment_id"]: row for row in _read_jsonl(path)}
                # the status file is the marker, but the extracted audio is
                # the payload: a missing wav invalidates the checkpoint
                if any(
                    row["status"] == "ok"
                    and not self._tse_audio_path(rid, sid).exists()
                    for sid, row in status.items()
                ):
                    status = None
            if status is None:
                status = {}
                audio = self._current_recording_audio(record)
                for state in states:
                    segment = state.segment
                    if segment.speaker_label is None:
                        status[state.segment_id] = {
                            "segment_id": state.segment_id,
                            "status": "skipped",
                        }
                        continue
                    try:
                        extracted = extract_target(
                            audio.slice_range(segment.span),
                            centers[segment.speaker_label],
                            extractor,
                        )
                    except Exception as exc:
                        status[state.segment_id] = {
                            "segment_id": state.segment_id,
                            "status": "error",
                            "reason": str(exc),
                        }
                        continue
                    _atomic_write_wav(self._tse_audio_path(rid, state.segment_id), extracted)
                    status[state.segment_id] = {
                        "segment_id": state.segment_id,
                        "status": "ok",
                    }
                _write_jsonl(path, [status[s.segment_id] for s in states])
            for state in states:
                row = status.get(state.segment_id, {"status": "skipped"})
                if row["status"] == "ok":
                    state.tse_ok = True
                elif row["status"] == "error":
                    state.dropped = "tse_error"

        self._map(tse_one, self.records)

    def _centers_by_label(self) -> dict[str, np.ndarray]:
        centers: dict[str, np.ndarray] = {}
        cluster_dir = self.work / "clusters"
        if not cluster_dir.is_dir():
            return centers
        for path in sorted(cluster_dir.glob("batch-*.json")):
            doc = json.loads(path.read_text(encoding="utf-8"))
            for index, row in enumerate(doc["centers"]):
                centers[f"{doc['batch_id']}.{index}"] = np.asarray(row, dtype=np.float64)
        return centers

    def _segment_audio(
        self, record: InputRecord, state: _SegmentState
    ) -> AudioBuffer:
        """Current audio for a segment: extracted speech if present, else a
        slice of the (possibly enhanced) recording."""
        tse_path = self._tse_audio_path(record.recording_id, state.segment_id)
        if state.tse_ok and tse_path.exists():
            return read_wav(tse_path)
        return self._current_recording_audio(record).slice_range(state.segment.span)

    def _scores_path(self, rid: str) -> Path:
        return self.work / "scores" / f"{rid}.jsonl"

    def _score_segments(
        self, by_recording: dict[str, list[_SegmentState]], wanted: set[str]
    ) -> dict[str, dict[str, Any]]:
        """Ensure every wanted segment has a checkpointed score; returns
        segment_id -> {ovrl, pdnsmos} | {error}."""
        scorer = self.backends.require("scorer")

        def score_one(record: InputRecord) -> list[dict[str, Any]]:
            rid = record.recording_id
            states = [
                s for s in by_recording[rid] if s.segment_id in wanted
            ]
            path = self._scores_path(rid)
            existing = (
                {row["segment_id"]: row for row in _read_jsonl(path)}
                if (self.resume and path.exists())
                else {}
            )
            rows = []
            changed = False
            for state in states:
                row = existing.get(state.segment_id)
                if row is None:
                    changed = True
                    try:
                        result = scorer.score(
                            self._segment_audio(record, state),
                            recording_id=rid,
                            span=state.segment.span,
                        )
                        row = {
                            "segment_id": state.segment_id,
                            "ovrl": float(result.ovrl),
                            "pdnsmos": result.pdnsmos,
                        }
                    except Exception as exc:
                        row = {"segment_id": state.segment_id, "error": str(exc)}
                rows.append(row)
            if changed or not path.exists():
                _write_jsonl(path, rows)
            return rows

        table: dict[str, dict[str, Any]] = {}
        for rows in self._map(score_one, self.records):
            for row in rows:
                table[row["segment_id"]] = row
        return table

    def _stage_filter(
        self, by_recording: dict[str, list[_SegmentState]]
    ) -> tuple[list[_SegmentState], list[_SegmentState], FilterReport]:
        alive = [
            state
            for states in by_recording.values()
            for state in states
            if state.dropped is None
        ]
        state_of = {id(state.segment): state for state in alive}
        segments = [state.segment for state in alive]
        kept, unlabeled, low_sim = filter_by_segment_similarity(
            segments, self.config.seg_sim_threshold
        )
        kept, bad_clusters, stats = filter_by_cluster_reliability(
            kept, self.config.cluster_avg_threshold, self.config.cluster_max_threshold
        )
        for segment in low_sim:
            state_of[id(segment)].dropped = "segment_similarity"
        for segment in bad_clusters:
            state_of[id(segment)].dropped = "cluster_reliability"

        kept_states = [state_of[id(s)] for s in kept]
        unlabeled_states = [state_of[id(s)] for s in unlabeled]
        wanted = {s.segment_id for s in kept_states + unlabeled_states}
        table = self._score_segments(by_recording, wanted)

        def apply_quality(states: list[_SegmentState], rule: str | None):
            retained, low, errors = [], 0, 0
            for state in states:
                row = table[state.segment_id]
                if "error" in row:
                    state.dropped = "scorer_error"
                    errors += 1
                    continue
                state.segment = replace(
                    state.segment,
                    ovrl_score=row["ovrl"],
                    pdnsmos_score=row.get("pdnsmos"),
                )
                if state.segment.ovrl_score >= self.config.ovrl_threshold:
                    retained.append(state)
                else:
                    if rule is not None:
                        state.dropped = rule
                    low += 1
            return retained, low, errors

        main, low_quality, errors = apply_quality(kept_states, "quality_score")
        # Unlabeled segments already left the labeled corpus; quality only
        # decides whether they reach the unlabeled side manifest.
        unlabeled_kept, _, _ = apply_quality(unlabeled_states, None)

        report = FilterReport(
            input_count=len(alive),
            retained_count=len(main),
            dropped_by_rule={
                "unlabeled": len(unlabeled),
                "segment_similarity": len(low_sim),
                "cluster_reliability": len(bad_clusters),
                "quality_score": low_quality,
                "scorer_error": errors,
            },
            cluster_stats=stats,
        )
        return main, unlabeled_kept, report

    def _asr_path(self, rid: str) -> Path:
        return self.work / "asr" / f"{rid}.jsonl"

    def _stage_asr(self, main: list[_SegmentState]) -> None:
        transcriber = self.backends.require("transcriber")
        wanted: dict[str, list[_SegmentState]] = {}
        for state in main:
            wanted.setdefault(state.segment.recording_id, []).append(state)

        def asr_one(record: InputRecord) -> None:
            rid = record.recording_id
            states = wanted.get(rid, [])
            if not states:
                return
            path = self._asr_path(rid)
            existing = (
                {row["segment_id"]: row for row in _read_jsonl(path)}
                if (self.resume and path.exists())
                else {}
            )
            rows = []
            changed = False
            for state in states:
                row = existing.get(state.segment_id)
                if row is None:
                    changed = True
                    try:
                        text = transcriber.transcribe(
                            self._segment_audio(record, state),
                            recording_id=rid,
                            span=state.segment.span,
                        )
                        row = {"segment_id": state.segment_id, "text": str(text)}
                    except Exception as exc:
                        row = {
                            "segment_id": state.segment_id,
                            "text": None,
                            "error": f"asr_error: {exc}",
                        }
                rows.append(row)
                if row.get("text") is not None:
                    state.segment = replace(state.segment, transcript=row["text"])
            if changed or not path.exists():
                _write_jsonl(path, rows)

        self._map(asr_one, self.records)

    def _stage_flags(self, state: _SegmentState, passed_filter: bool) -> tuple[str, ...]:
        stages = self.config.stages
        flags = []
        if stages.enhance:
            flags.append("enhance")
        if stages.segment:
            flags.append("segment")
        if stages.cluster:
            flags.append("cluster")
        if stages.tse and state.tse_ok:
            flags.append("tse")
        if stages.filter and passed_filter:
            flags.append("filter")
        if stages.asr and state.segment.transcript is not None:
            flags.append("asr")
        flags.append("persist")
        return tuple(flags)

    def _persist(
        self, main: list[_SegmentState], unlabeled: list[_SegmentState]
    ) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
        passed_filter = self.config.stages.filter
        by_rid: dict[str, list[_SegmentState]] = {}
        for state in (*main, *unlabeled):
            by_rid.setdefault(state.segment.recording_id, []).append(state)

        def persist_one(record: InputRecord) -> None:
            for state in by_rid.get(record.recording_id, []):
                audio = self._segment_audio(record, state)
                _atomic_write_wav(
                    self.out / record.recording_id / f"{state.segment_id}.wav", audio
                )

        self._map(persist_one, self.records)

        def to_record(state: _SegmentState, in_filtered: bool) -> ManifestRecord:
            segment = state.segment
            return ManifestRecord(
                recording_id=segment.recording_id,
                segment_id=state.segment_id,
                start_s=segment.span.start_s,
                end_s=segment.span.end_s,
                speaker_label=segment.speaker_label,
                cluster_similarity=segment.cluster_similarity,
                ovrl_score=segment.ovrl_score,
                pdnsmos_score=segment.pdnsmos_score,
                transcript=segment.transcript,
                audio_path=f"{segment.recording_id}/{state.segment_id}.wav",
                stage_flags=self._stage_flags(state, in_filtered),
            )

        def key(record: ManifestRecord):
            return (record.recording_id, record.start_s, record.end_s)

        main_records = sorted((to_record(s, passed_filter) for s in main), key=key)
        unlabeled_records = sorted(
            (to_record(s, passed_filter) for s in unlabeled), key=key
        )
        return main_records, unlabeled_records

    # -- top level -----------------------------------------------------------

    def run(self) -> RunResult:
        self.out.mkdir(parents=True, exist_ok=True)
        if not self.resume:
            self._fresh_start()
        self.work.mkdir(parents=True, exist_ok=True)
        self._preflight()
        stages = self.config.stages

        self._stage_enhance()
        by_recording = self._stage_segment()
        total = sum(len(states) for states in by_recording.values())
        if stages.enhance:
            self.retention["enhance"] = total
        if stages.segment:
            self.retention["segment"] = total

        if stages.cluster:
            self._stage_cluster(by_recording)
            self.retention["cluster"] = total
        if stages.tse:
            self._stage_tse(by_recording)
        alive = [
            state
            for states in by_recording.values()
            for state in states
            if state.dropped is None
        ]
        if stages.tse:
            self.retention["tse"] = len(alive)

        report: FilterReport | None = None
        if stages.filter:
            main, unlabeled_kept, report = self._stage_filter(by_recording)
            self.retention["filter"] = len(main)
        else:
            main, unlabeled_kept = alive, []

        if stages.asr:
            self._stage_asr(main)
            self.retention["asr"] = len(main)

        main_records, unlabeled_records = self._persist(main, unlabeled_kept)
        self.retention["persist"] = len(main_records)

        stats = compute_stats(main_records, per_stage_retention=self.retention)
        _atomic_write_text(
            self.out / "manifest.jsonl",
            "".join(json.dumps(r.to_dict()) + "\n" for r in main_records),
        )
        _atomic_write_text(
            self.out / "manifest.unlabeled.jsonl",
            "".join(json.dumps(r.to_dict()) + "\n" for r in unlabeled_records),
        )
        if report is not None:
            _atomic_write_text(
                self.out / "filter_report.json", json.dumps(report.to_dict(), indent=2)
            )
        _atomic_write_text(self.out / "stats.json", json.dumps(stats.to_dict(), indent=2))
        return RunResult(
            manifest=main_records,
            unlabeled=unlabeled_records,
            report=report,
            stats=stats,
            skipped_recordings=self.skipped,
            out_dir=self.out,
        )


def run_pipeline(
    records: Sequence[InputRecord] | str | Path,
    config: PipelineConfig,
    backends: BackendSet,
    out_dir: str | Path,
    resume: bool = False,
    workers: int = 1,
) -> RunResult:
    """Run every enabled stage over the input manifest and persist results."""
    if isinstance(records, (str, Path)):
        records = read_input_manifest(records)
    runner = _Runner(records, config, backends, Path(out_dir), resume, workers)
    return runner.run()


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read an output manifest back into records."""
    return [ManifestRecord.from_dict(row) for row in _read_jsonl(Path(path))]


def export_embeddings(out_dir: str | Path) -> list[Path]:
    """Write the per-batch embedding sidecar files from run checkpoints.

    Each row is ``chunk_id<TAB>cluster<TAB>v1,v2,...`` so the embedding
    space of a batch can be projected and inspected offline. Returns the
    written paths.
    """
    out = Path(out_dir)
    work = out / "work"
    cluster_dir = work / "clusters"
    if not cluster_dir.is_dir():
        raise FileNotFoundError(f"no clustering checkpoints under {work}")

    chunks_by_segment: dict[str, tuple[str, list[dict[str, Any]]]] = {}
    embeddings_dir = work / "embeddings"
    if embeddings_dir.is_dir():
        for path in sorted(embeddings_dir.glob("*.jsonl")):
            rid = path.stem
            for row in _read_jsonl(path):
                chunks_by_segment[row["segment_id"]] = (rid, row["chunks"])

    written: list[Path] = []
    target_dir = out / "embeddings"
    target_dir.mkdir(parents=True, exist_ok=True)
    for path in sorted(cluster_dir.glob("batch-*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        assignments = doc["chunk_assignments"]
        lines = []
        cursor = 0
        for row in doc["segments"]:
            rid, chunks = chunks_by_segment.get(row["segment_id"], ("", []))
            for chunk in chunks:
                vector = SpeakerEmbedding(
                    np.asarray(chunk["vector"]),
                    TimeRange(chunk["start_s"], chunk["end_s"]),
                ).vector
                values = ",".join(f"{v:.6g}" for v in vector)
                lines.append(
                    f"{rid}:{chunk['start_s']:.3f}\t{assignments[cursor]}\t{values}"
                )
                cursor += 1
        target = target_dir / f"batch-{doc['batch_id']:04d}.tsv"
        _atomic_write_text(target, "".join(line + "\n" for line in lines))
        written.append(target)
    return written
