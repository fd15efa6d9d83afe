"""Waveform container, 16-bit PCM WAV I/O and active-level normalization."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_RATE = 16000
PCM_SCALE = 32768.0

# activity gate for the simplified active speech level
LEVEL_FRAME_MS = 10.0
LEVEL_GATE_DB = 35.0
ACTIVITY_FLOOR_DB = -100.0


class WavFormatError(ValueError):
    pass


class NoActiveSpeech(ValueError):
    pass


class ClippingWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono signal with samples in [-1, 1] stored as a read-only float64 array."""

    samples: np.ndarray
    sample_rate_hz: int = CANONICAL_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if x.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1.0:
            raise ValueError("samples must be finite and lie in [-1, 1]")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"truncated chunk {cid!r}")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> Waveform:
    """Decode a mono 16-bit PCM RIFF/WAVE file; chunks may appear in any order."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and pcm is None:
            pcm = body
    if fmt is None or pcm is None:
        raise WavFormatError("missing fmt or data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if codec != 1:
        raise WavFormatError(f"unsupported compression codec {codec}")
    if channels != 1:
        raise WavFormatError("multi-channel unsupported")
    if bits != 16 or block_align != 2:
        raise WavFormatError(f"unsupported bit depth {bits}")
    if rate <= 0:
        raise WavFormatError("invalid sample rate")
    if len(pcm) % 2:
        raise WavFormatError("data chunk is not a whole number of samples")
    ints = np.frombuffer(pcm, dtype="<i2")
    return Waveform(ints.astype(np.float64) / PCM_SCALE, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    if len(w) < 1:
        raise ValueError("cannot write an empty waveform")
    pcm = quantize_pcm16(w.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, w.sample_rate_hz, 2 * w.sample_rate_hz, 2, 16,
        b"data", len(pcm),
    )
    Path(path).write_bytes(header + pcm)


def _frame_energies(x: np.ndarray, frame: int):
    n = -(-x.size // frame)
    padded = np.zeros(n * frame)
    padded[: x.size] = x
    sq = (padded**2).reshape(n, frame).sum(axis=1)
    lengths = np.full(n, frame)
    lengths[-1] = x.size - (n - 1) * frame
    return sq, lengths


def active_speech_level_db(w: Waveform) -> float:
    """RMS level in dBov over 10 ms frames lying within 35 dB of the loudest frame.

    A simplified stand-in for ITU-T P.56: good enough to bring spliced sources
    to a common level, not a certified measurement.
    """
    frame = max(1, int(round(w.sample_rate_hz * LEVEL_FRAME_MS / 1000)))
    sq, lengths = _frame_energies(w.samples, frame)
    with np.errstate(divide="ignore"):
        frame_db = 10 * np.log10(sq / lengths)
    peak = frame_db.max()
    if not np.isfinite(peak) or peak <= ACTIVITY_FLOOR_DB:
        raise NoActiveSpeech("no active speech")
    active = (frame_db > peak - LEVEL_GATE_DB) & (frame_db > ACTIVITY_FLOOR_DB)
    mean_sq = sq[active].sum() / lengths[active].sum()
    return float(10 * np.log10(mean_sq))


def level_gain(w: Waveform, target_dbov: float = -26.0) -> float:
    return float(10 ** ((target_dbov - active_speech_level_db(w)) / 20))


def normalize_with_info(w: Waveform, target_dbov: float = -26.0) -> tuple[Waveform, float, bool]:
    """Scale ``w`` to ``target_dbov``; returns (waveform, gain, clipped)."""
    gain = level_gain(w, target_dbov)
    y = w.samples * gain
    clipped = bool(np.max(np.abs(y)) > 1.0)
    if clipped:
        y = np.clip(y, -1.0, 1.0)
    return Waveform(y, w.sample_rate_hz), gain, clipped


def normalize_level(w: Waveform, target_dbov: float = -26.0) -> Waveform:
    out, gain, clipped = normalize_with_info(w, target_dbov)
    if clipped:
        warnings.warn(
            f"gain {gain:.3f} exceeds full scale; samples were peak-limited",
            ClippingWarning,
            stacklevel=2,
        )
    return out
