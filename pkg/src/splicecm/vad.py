"""Three frame-level voice activity detectors, their majority vote, and segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform

FRAME_MS = 10
ABS_FLOOR_DB = -60.0
BONAFIDE = "bonafide"
SPOOF = "spoof"


@dataclass(frozen=True, eq=False)
class FrameDecisions:
    flags: np.ndarray
    frame_len: int
    n_samples: int

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool).reshape(-1).copy()
        if flags.size != -(-self.n_samples // self.frame_len):
            raise ValueError("flag count does not match waveform length")
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return self.flags.size


@dataclass(frozen=True, order=True)
class SpeechSegment:
    start_sample: int
    end_sample: int
    label: str = BONAFIDE

    def __post_init__(self):
        if not 0 <= self.start_sample < self.end_sample:
            raise ValueError(f"invalid segment [{self.start_sample}, {self.end_sample})")

    def __len__(self):
        return self.end_sample - self.start_sample


def _frames(w: Waveform):
    hop = int(round(w.sample_rate_hz * FRAME_MS / 1000))
    n = -(-len(w) // hop)
    padded = np.zeros(n * hop)
    padded[: len(w)] = w.samples
    return padded.reshape(n, hop), hop


def _frame_db(frames: np.ndarray) -> np.ndarray:
    power = np.mean(frames**2, axis=1)
    with np.errstate(divide="ignore"):
        return 10 * np.log10(power)


def _adaptive_threshold(db: np.ndarray, margin: float) -> float:
    finite = db[np.isfinite(db)]
    if finite.size == 0:
        return np.inf
    noise = np.percentile(finite, 10)
    peak = finite.max()
    # a stationary input has noise == peak; fall back to a fixed drop below the peak
    return max(ABS_FLOOR_DB, min(noise + margin, peak - 3.0))


def vad_energy(w: Waveform) -> FrameDecisions:
    frames, hop = _frames(w)
    db = _frame_db(frames)
    return FrameDecisions(db > _adaptive_threshold(db, 10.0), hop, len(w))


def vad_zero_crossing(w: Waveform) -> FrameDecisions:
    """Low-ZCR frames above a soft energy gate, or any frame well above it."""
    frames, hop = _frames(w)
    db = _frame_db(frames)
    signs = np.signbit(frames)
    zcr = np.mean(signs[:, 1:] != signs[:, :-1], axis=1)
    thr = _adaptive_threshold(db, 6.0)
    flags = (db > thr) & ((zcr < 0.35) | (db > thr + 10.0))
    return FrameDecisions(flags, hop, len(w))


def vad_spectral_entropy(w: Waveform, entropy_thr: float = 0.85) -> FrameDecisions:
    """Frames whose normalized spectral entropy (250 Hz - 6 kHz) is low."""
    frames, hop = _frames(w)
    db = _frame_db(frames)
    nfft = 1 << int(np.ceil(np.log2(max(hop, 2))))
    spec = np.abs(np.fft.rfft(frames * np.hanning(hop), n=nfft, axis=1)) ** 2
    freqs = np.fft.rfftfreq(nfft, 1.0 / w.sample_rate_hz)
    band = (freqs >= 250) & (freqs <= 6000)
    spec = spec[:, band]
    total = spec.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = spec / total
        h = -np.nansum(np.where(p > 0, p * np.log(p), 0.0), axis=1) / np.log(band.sum())
    flags = (db > ABS_FLOOR_DB) & (total[:, 0] > 0) & (h < entropy_thr)
    return FrameDecisions(flags, hop, len(w))


def majority_vote(d1: FrameDecisions, d2: FrameDecisions, d3: FrameDecisions) -> FrameDecisions:
    if not len(d1) == len(d2) == len(d3):
        raise ValueError("decision sequences differ in length")
    votes = d1.flags.astype(int) + d2.flags.astype(int) + d3.flags.astype(int)
    return FrameDecisions(votes >= 2, d1.frame_len, d1.n_samples)


def _runs(flags: np.ndarray) -> list[list[int]]:
    edges = np.diff(np.concatenate([[0], flags.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [[int(s), int(e)] for s, e in zip(starts, ends)]


def decisions_to_segments(
    d: FrameDecisions,
    min_dur_ms: float = 100,
    merge_gap_ms: float = 30,
    label: str = BONAFIDE,
) -> list[SpeechSegment]:
    runs = _runs(d.flags)
    merged: list[list[int]] = []
    for run in runs:
        if merged and (run[0] - merged[-1][1]) * FRAME_MS <= merge_gap_ms:
            merged[-1][1] = run[1]
        else:
            merged.append(run)
    return [
        SpeechSegment(s * d.frame_len, min(e * d.frame_len, d.n_samples), label)
        for s, e in merged
        if (e - s) * FRAME_MS >= min_dur_ms
    ]


def detect_segments(w: Waveform, label: str = BONAFIDE, **kwargs) -> list[SpeechSegment]:
    """Majority vote of the three detectors followed by segmentation."""
    vote = majority_vote(vad_energy(w), vad_zero_crossing(w), vad_spectral_entropy(w))
    return decisions_to_segments(vote, label=label, **kwargs)


def format_debug(d1: FrameDecisions, d2: FrameDecisions, d3: FrameDecisions) -> str:
    vote = majority_vote(d1, d2, d3)
    lines = [
        f"{i}\t{int(a)} {int(b)} {int(c)} {int(v)}"
        for i, (a, b, c, v) in enumerate(zip(d1.flags, d2.flags, d3.flags, vote.flags))
    ]
    return "\n".join(lines) + "\n"
