"""File carriers: VRAW grayscale video and 16 kHz mono PCM16 WAV.

VRAW layout: ``b"VRAW"`` then u32 LE width, height, frame count, then the
frames as row-major u8.  Pixel values are mapped to [0, 1] on read.
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .frontends import SAMPLE_RATE

__all__ = ["MediaError", "read_vraw", "write_vraw", "read_wav", "write_wav"]

VRAW_MAGIC = b"VRAW"
_HEADER = struct.Struct("<4sIII")


class MediaError(ValueError):
    """A media file is malformed; ``field`` names the offending header field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def read_vraw(path: str | Path) -> np.ndarray:
    """Return ``count x height x width`` float32 frames in [0, 1]."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MediaError(f"{path}: file shorter than the {_HEADER.size}-byte header", "header")
    magic, width, height, count = _HEADER.unpack_from(data)
    if magic != VRAW_MAGIC:
        raise MediaError(f"{path}: bad magic {magic!r}, expected {VRAW_MAGIC!r}", "magic")
    expected = _HEADER.size + width * height * count
    if len(data) != expected:
        raise MediaError(f"{path}: {len(data)} bytes but header declares {width}x{height}x{count} "
                         f"({expected} bytes)", "frame_count")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    return pixels.reshape(count, height, width).astype(np.float32) / np.float32(255)


def write_vraw(path: str | Path, frames: np.ndarray) -> None:
    """Write frames given either as u8 or as floats in [0, 1]."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise MediaError("frames must be count x height x width", "shape")
    if frames.dtype != np.uint8:
        frames = np.clip(np.rint(frames.astype(np.float64) * 255), 0, 255).astype(np.uint8)
    count, height, width = frames.shape
    Path(path).write_bytes(_HEADER.pack(VRAW_MAGIC, width, height, count) + frames.tobytes())


def read_wav(path: str | Path) -> np.ndarray:
    """Mono 16-bit 16 kHz WAV -> float32 samples in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise MediaError(f"{path}: not a readable WAV file ({exc})", "header") from exc
    if channels != 1:
        raise MediaError(f"{path}: {channels} channels, expected mono", "channels")
    if width != 2:
        raise MediaError(f"{path}: {8 * width}-bit samples, expected PCM16", "sample_width")
    if rate != SAMPLE_RATE:
        raise MediaError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}", "sample_rate")
    if len(raw) != 2 * n:
        raise MediaError(f"{path}: header declares {n} samples but data holds {len(raw) // 2}",
                         "data_size")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / np.float32(32768)


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.rint(samples * 32768), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SAMPLE_RATE)
        f.writeframes(pcm.tobytes())
