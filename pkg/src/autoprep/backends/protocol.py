"""Framed binary protocol for external inference processes.

Wire form of one frame:

    [4-byte LE header length][UTF-8 JSON header][4-byte LE payload length][payload]

The header is a small JSON object ({role, op, sample_rate, num_samples,
dim, aux, ...}); the payload carries raw little-endian float32 samples or
vector data. When the header declares an element count (``num_samples`` or
``dim``), the payload must be exactly four bytes per element.
"""

from __future__ import annotations

import json
import struct
from typing import Any, BinaryIO

import numpy as np

_LEN = struct.Struct("<I")
MAX_SECTION_BYTES = 1 << 30  # sanity bound on declared lengths


class ProtocolError(RuntimeError):
    """Base class for framing faults."""


class TruncatedFrameError(ProtocolError):
    """Fewer bytes available than the frame's length fields claim."""


class MalformedHeaderError(ProtocolError):
    """Header bytes are not a JSON object."""


class PayloadLengthError(ProtocolError):
    """Payload size disagrees with the declared element count or framing."""


def _declared_elements(header: dict[str, Any]) -> int | None:
    for key in ("num_samples", "dim"):
        value = header.get(key)
        if value is not None:
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise MalformedHeaderError(f"header field {key!r} must be a non-negative integer")
            return value
    return None


def encode_frame(header: dict[str, Any], payload: bytes = b"") -> bytes:
    """Serialize one frame; rejects payloads that contradict the header."""
    count = _declared_elements(header)
    if count is not None and len(payload) != 4 * count:
        raise PayloadLengthError(
            f"payload is {len(payload)} bytes but header declares {count} "
            f"4-byte elements"
        )
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return b"".join(
        (_LEN.pack(len(header_bytes)), header_bytes, _LEN.pack(len(payload)), payload)
    )


def decode_frame(data: bytes) -> tuple[dict[str, Any], bytes]:
    """Exact inverse of encode_frame for a single complete frame."""
    if len(data) < 4:
        raise TruncatedFrameError(f"frame shorter than header length field ({len(data)} bytes)")
    (header_len,) = _LEN.unpack_from(data, 0)
    if header_len > MAX_SECTION_BYTES:
        raise MalformedHeaderError(f"header length {header_len} exceeds sanity bound")
    if len(data) < 4 + header_len:
        raise TruncatedFrameError(
            f"header claims {header_len} bytes, only {len(data) - 4} present"
        )
    try:
        header = json.loads(data[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"header must be a JSON object, got {type(header).__name__}")
    offset = 4 + header_len
    if len(data) < offset + 4:
        raise TruncatedFrameError("frame ends before payload length field")
    (payload_len,) = _LEN.unpack_from(data, offset)
    if payload_len > MAX_SECTION_BYTES:
        raise PayloadLengthError(f"payload length {payload_len} exceeds sanity bound")
    end = offset + 4 + payload_len
    if len(data) < end:
        raise TruncatedFrameError(
            f"payload claims {payload_len} bytes, only {len(data) - offset - 4} present"
        )
    if len(data) > end:
        raise PayloadLengthError(f"{len(data) - end} trailing bytes after frame")
    payload = data[offset + 4 : end]
    count = _declared_elements(header)
    if count is not None and payload_len != 4 * count:
        raise PayloadLengthError(
            f"payload is {payload_len} bytes but header declares {count} 4-byte elements"
        )
    return header, payload


def write_frame(stream: BinaryIO, header: dict[str, Any], payload: bytes = b"") -> None:
    stream.write(encode_frame(header, payload))
    stream.flush()


def _read_exact(stream: BinaryIO, count: int, allow_eof: bool) -> bytes | None:
    chunks: list[bytes] = []
    remaining = count
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            if allow_eof and not chunks:
                return None
            raise TruncatedFrameError(
                f"stream ended with {remaining} of {count} bytes outstanding"
            )
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream: BinaryIO) -> tuple[dict[str, Any], bytes] | None:
    """Read one frame from a blocking stream; None on clean end-of-stream."""
    head = _read_exact(stream, 4, allow_eof=True)
    if head is None:
        return None
    (header_len,) = _LEN.unpack(head)
    if header_len > MAX_SECTION_BYTES:
        raise MalformedHeaderError(f"header length {header_len} exceeds sanity bound")
    rest = _read_exact(stream, header_len + 4, allow_eof=False)
    (payload_len,) = _LEN.unpack_from(rest, header_len)
    if payload_len > MAX_SECTION_BYTES:
        raise PayloadLengthError(f"payload length {payload_len} exceeds sanity bound")
    payload = _read_exact(stream, payload_len, allow_eof=False) if payload_len else b""
    frame = head + rest + (payload or b"")
    return decode_frame(frame)


def floats_to_payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def payload_to_floats(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise PayloadLengthError(f"float payload of {len(payload)} bytes is not a multiple of 4")
    return np.frombuffer(payload, dtype="<f4").copy()
