"""Stream adapters that put real inference processes behind the role APIs.

A connection is a byte stream (the stdio of a spawned process, or any
socket-like pair) carrying the framed protocol. Exactly one request is in
flight per connection; parallelism comes from pooling connections. Audio
crosses the boundary as little-endian float32 at its native rate.
"""

from __future__ import annotations

import subprocess
import threading
from typing import Any, BinaryIO, Callable, Sequence

import numpy as np

from ..core import AudioBuffer, TimeRange
from ..segmenter import FrameTrack
from . import (
    BackendError,
    BackendSet,
    QualityScore,
    ROLE_NAMES,
)
from .protocol import (
    floats_to_payload,
    payload_to_floats,
    read_frame,
    write_frame,
)


class StreamConnection:
    """One request/response channel over a reader/writer byte-stream pair."""

    def __init__(self, reader: BinaryIO, writer: BinaryIO):
        self._reader = reader
        self._writer = writer
        self._lock = threading.Lock()

    def request(
        self, header: dict[str, Any], payload: bytes = b""
    ) -> tuple[dict[str, Any], bytes]:
        with self._lock:
            write_frame(self._writer, header, payload)
            frame = read_frame(self._reader)
        if frame is None:
            raise BackendError("backend stream closed before responding")
        response, response_payload = frame
        error = response.get("error")
        if error is not None:
            raise BackendError(f"backend error: {error}")
        return response, response_payload

    def close(self) -> None:
        for stream in (self._writer, self._reader):
            try:
                stream.close()
            except OSError:
                pass


class SubprocessConnection(StreamConnection):
    """Spawns a backend process and frames requests over its stdio."""

    def __init__(self, cmd: Sequence[str]):
        self._proc = subprocess.Popen(
            list(cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )
        super().__init__(self._proc.stdout, self._proc.stdin)

    def close(self) -> None:
        super().close()
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


class ConnectionPool:
    """Hands out connections to workers; each connection serves one request
    at a time."""

    def __init__(self, factory: Callable[[], StreamConnection], size: int = 1):
        if size < 1:
            raise ValueError(f"pool size must be positive, got {size}")
        self._connections = [factory() for _ in range(size)]
        self._free = list(self._connections)
        self._cond = threading.Condition()

    def acquire(self) -> StreamConnection:
        with self._cond:
            while not self._free:
                self._cond.wait()
            return self._free.pop()

    def release(self, conn: StreamConnection) -> None:
        with self._cond:
            self._free.append(conn)
            self._cond.notify()

    def close(self) -> None:
        for conn in self._connections:
            conn.close()


def _audio_header(role: str, audio: AudioBuffer, aux: dict[str, Any] | None = None) -> dict[str, Any]:
    header: dict[str, Any] = {
        "role": role,
        "op": "process",
        "sample_rate": audio.sample_rate,
        "num_samples": len(audio.samples),
    }
    if aux:
        header["aux"] = aux
    return header


class _RemoteBase:
    role = ""

    def __init__(self, connection: StreamConnection):
        self._conn = connection
        caps, _ = connection.request({"role": self.role, "op": "capabilities"})
        aux = caps.get("aux") or {}
        rates = aux.get("sample_rates")
        self.supported_sample_rates = tuple(rates) if rates is not None else None
        self._capabilities = aux

    def close(self) -> None:
        self._conn.close()


class RemoteEnhancer(_RemoteBase):
    role = "enhancer"

    def enhance(self, audio: AudioBuffer) -> AudioBuffer:
        header, payload = self._conn.request(
            _audio_header(self.role, audio), floats_to_payload(audio.samples)
        )
        return AudioBuffer(payload_to_floats(payload), audio.sample_rate)


class RemoteVoiceActivityDetector(_RemoteBase):
    role = "vad"

    def __init__(self, connection: StreamConnection):
        super().__init__(connection)
        hop = self._capabilities.get("frame_hop_s")
        if hop is None:
            raise BackendError("VAD backend did not declare its frame hop")
        self.frame_hop_s = float(hop)

    def detect(self, audio: AudioBuffer) -> FrameTrack:
        header, payload = self._conn.request(
            _audio_header(self.role, audio), floats_to_payload(audio.samples)
        )
        hop = float(header.get("aux", {}).get("frame_hop_s", self.frame_hop_s))
        return FrameTrack(payload_to_floats(payload).astype(np.float64), hop)


class RemoteSpeakerEmbedder(_RemoteBase):
    role = "embedder"

    def __init__(self, connection: StreamConnection):
        super().__init__(connection)
        dim = self._capabilities.get("dim")
        if dim is None:
            raise BackendError("embedder backend did not declare its dimension")
        self.embedding_dim = int(dim)

    def embed_chunk(
        self, audio: AudioBuffer, *, recording_id: str, chunk: TimeRange
    ) -> np.ndarray:
        aux = {"recording_id": recording_id, "chunk": [chunk.start_s, chunk.end_s]}
        header, payload = self._conn.request(
            _audio_header(self.role, audio, aux), floats_to_payload(audio.samples)
        )
        vector = payload_to_floats(payload).astype(np.float64)
        if vector.shape[0] != self.embedding_dim:
            raise BackendError(
                f"embedder returned dimension {vector.shape[0]}, "
                f"declared {self.embedding_dim}"
            )
        return vector


class RemoteTargetExtractor(_RemoteBase):
    role = "extractor"

    def extract(self, audio: AudioBuffer, enrollment: np.ndarray) -> AudioBuffer:
        aux = {"enrollment": [float(x) for x in np.asarray(enrollment).ravel()]}
        header, payload = self._conn.request(
            _audio_header(self.role, audio, aux), floats_to_payload(audio.samples)
        )
        return AudioBuffer(payload_to_floats(payload), audio.sample_rate)


class RemoteQualityScorer(_RemoteBase):
    role = "scorer"

    def score(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> QualityScore:
        aux = {"recording_id": recording_id, "span": [span.start_s, span.end_s]}
        header, _ = self._conn.request(
            _audio_header(self.role, audio, aux), floats_to_payload(audio.samples)
        )
        result = header.get("aux", {})
        if "ovrl" not in result:
            raise BackendError("scorer backend response lacks an OVRL value")
        pdnsmos = result.get("pdnsmos")
        return QualityScore(float(result["ovrl"]), None if pdnsmos is None else float(pdnsmos))


class RemoteTranscriber(_RemoteBase):
    role = "transcriber"

    def transcribe(
        self, audio: AudioBuffer, *, recording_id: str, span: TimeRange
    ) -> str:
        aux = {"recording_id": recording_id, "span": [span.start_s, span.end_s]}
        header, _ = self._conn.request(
            _audio_header(self.role, audio, aux), floats_to_payload(audio.samples)
        )
        result = header.get("aux", {})
        if "text" not in result:
            raise BackendError("transcriber backend response lacks a text value")
        return str(result["text"])


_ADAPTERS = {
    "enhancer": RemoteEnhancer,
    "vad": RemoteVoiceActivityDetector,
    "embedder": RemoteSpeakerEmbedder,
    "extractor": RemoteTargetExtractor,
    "scorer": RemoteQualityScorer,
    "transcriber": RemoteTranscriber,
}


def remote_backend(role: str, cmd: Sequence[str]):
    """Spawn ``cmd`` and wrap its stdio in the adapter for ``role``."""
    if role not in _ADAPTERS:
        raise ValueError(f"unknown backend role {role!r}")
    return _ADAPTERS[role](SubprocessConnection(cmd))


# ---------------------------------------------------------------------------
# Server side: expose a BackendSet over a frame stream
# ---------------------------------------------------------------------------


def _capabilities_aux(role: str, backend) -> dict[str, Any]:
    rates = getattr(backend, "supported_sample_rates", None)
    aux: dict[str, Any] = {"sample_rates": list(rates) if rates is not None else None}
    if role == "embedder":
        aux["dim"] = backend.embedding_dim
    if role == "vad":
        aux["frame_hop_s"] = backend.frame_hop_s
    return aux


def _handle_process(role: str, backend, header: dict[str, Any], payload: bytes):
    rate = int(header["sample_rate"])
    audio = AudioBuffer(payload_to_floats(payload), rate)
    aux = header.get("aux") or {}
    if role == "enhancer":
        out = backend.enhance(audio)
        return {"num_samples": len(out.samples)}, floats_to_payload(out.samples)
    if role == "vad":
        track = backend.detect(audio)
        return (
            {"num_samples": len(track.probs), "aux": {"frame_hop_s": track.frame_hop_s}},
            floats_to_payload(track.probs),
        )
    if role == "embedder":
        chunk = TimeRange(*aux["chunk"])
        vector = backend.embed_chunk(audio, recording_id=aux["recording_id"], chunk=chunk)
        return {"dim": int(vector.shape[0])}, floats_to_payload(vector)
    if role == "extractor":
        enrollment = np.asarray(aux["enrollment"], dtype=np.float64)
        out = backend.extract(audio, enrollment)
        return {"num_samples": len(out.samples)}, floats_to_payload(out.samples)
    if role == "scorer":
        span = TimeRange(*aux["span"])
        result = backend.score(audio, recording_id=aux["recording_id"], span=span)
        return {"aux": {"ovrl": result.ovrl, "pdnsmos": result.pdnsmos}}, b""
    if role == "transcriber":
        span = TimeRange(*aux["span"])
        text = backend.transcribe(audio, recording_id=aux["recording_id"], span=span)
        return {"aux": {"text": text}}, b""
    raise BackendError(f"unknown role {role!r}")


def serve_backend_set(backends: BackendSet, reader: BinaryIO, writer: BinaryIO) -> None:
    """Serve requests against in-process backends until end-of-stream.

    Handler failures become error responses; the loop keeps serving.
    """
    while True:
        frame = read_frame(reader)
        if frame is None:
            return
        header, payload = frame
        try:
            role = header.get("role")
            if role not in ROLE_NAMES:
                raise BackendError(f"unknown role {role!r}")
            backend = backends.require(role)
            op = header.get("op")
            if op == "capabilities":
                response, out_payload = (
                    {"aux": _capabilities_aux(role, backend)},
                    b"",
                )
            elif op == "process":
                response, out_payload = _handle_process(role, backend, header, payload)
            else:
                raise BackendError(f"unknown op {op!r}")
        except Exception as exc:
            response, out_payload = {"error": str(exc)}, b""
        write_frame(writer, response, out_payload)
