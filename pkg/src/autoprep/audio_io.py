"""WAV ingest and export.

Reads PCM and IEEE-float WAV at any rate, downmixes multichannel input by
channel averaging, and writes 32-bit float WAV at the buffer's native rate.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .core import AudioBuffer


class AudioReadError(RuntimeError):
    """Raised when an audio file cannot be decoded."""


_INT_SCALES = {
    np.dtype(np.int16): 32768.0,
    np.dtype(np.int32): 2147483648.0,
}


def read_wav(path: str | Path) -> AudioBuffer:
    """Load a WAV file as a mono float32 buffer at its native rate."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise AudioReadError(f"cannot read audio file {path}: {exc}") from exc
    if data.ndim not in (1, 2):
        raise AudioReadError(f"unsupported channel layout in {path}: shape {data.shape}")
    if data.dtype == np.uint8:
        scaled = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in _INT_SCALES:
        scaled = data.astype(np.float64) / _INT_SCALES[data.dtype]
    else:
        scaled = data.astype(np.float64)
    if scaled.ndim == 2:
        scaled = scaled.mean(axis=1)
    return AudioBuffer(scaled.astype(np.float32), int(rate))


def write_wav(path: str | Path, audio: AudioBuffer) -> None:
    """Write a buffer as 32-bit float WAV, creating parent directories."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(out), audio.sample_rate, np.asarray(audio.samples, dtype=np.float32))


def read_wav_rate(path: str | Path) -> int:
    """Sample rate from the WAV header alone, without decoding samples.

    Used for capability pre-flight so rate mismatches abort before any
    processing starts.
    """
    try:
        with open(path, "rb") as fh:
            riff = fh.read(12)
            if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
                raise AudioReadError(f"{path} is not a RIFF/WAVE file")
            while True:
                head = fh.read(8)
                if len(head) < 8:
                    raise AudioReadError(f"no fmt chunk found in {path}")
                chunk_id, size = head[:4], struct.unpack("<I", head[4:])[0]
                if chunk_id == b"fmt ":
                    body = fh.read(size)
                    if len(body) < 8:
                        raise AudioReadError(f"truncated fmt chunk in {path}")
                    return struct.unpack_from("<I", body, 4)[0]
                fh.seek(size + (size & 1), 1)  # chunks are word-aligned
    except OSError as exc:
        raise AudioReadError(f"cannot read audio file {path}: {exc}") from exc
