"""LFCC front-end with a 20 ms frame shift."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

from .audio_io import Waveform

CACHE_MAGIC = b"LFCC"
CACHE_VERSION = 1
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class LFCCConfig:
    win: int = 512
    hop: int = 320
    nfft: int = 512
    n_filters: int = 20
    n_ceps: int = 20
    fmin: float = 0.0
    fmax: float = 8000.0
    deltas: bool = True

    @property
    def dim(self) -> int:
        return self.n_ceps * (3 if self.deltas else 1)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: float = 20.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def linear_filterbank(cfg: LFCCConfig, sample_rate: int = 16000) -> np.ndarray:
    """Triangular filters with equally spaced edges on a linear frequency axis."""
    edges = np.linspace(cfg.fmin, cfg.fmax, cfg.n_filters + 2)
    freqs = np.fft.rfftfreq(cfg.nfft, 1.0 / sample_rate)
    fb = np.zeros((cfg.n_filters, freqs.size))
    for m in range(cfg.n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def deltas(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames, replicating edge frames."""
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    n = x.shape[0]
    num = sum(k * (padded[width + k : width + k + n] - padded[width - k : width - k + n]) for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    if x.size < win:
        raise ValueError(f"waveform shorter than one analysis window ({x.size} < {win})")
    n = (x.size - win + hop) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def log_filterbank(w: Waveform, cfg: LFCCConfig = LFCCConfig(), samples: np.ndarray | None = None) -> np.ndarray:
    x = w.samples if samples is None else samples
    frames = frame_signal(x, cfg.win, cfg.hop) * get_window("hann", cfg.win)
    power = np.abs(np.fft.rfft(frames, n=cfg.nfft, axis=1)) ** 2
    energies = power @ linear_filterbank(cfg, w.sample_rate_hz).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def label_aligned_samples(x: np.ndarray, cfg: LFCCConfig = LFCCConfig()) -> np.ndarray:
    """Zero-pad so that frame i is centred on the i-th hop and N = ceil(T / hop)."""
    n = -(-x.size // cfg.hop)
    lead = (cfg.win - cfg.hop) // 2
    total = (n - 1) * cfg.hop + cfg.win
    out = np.zeros(total)
    out[lead : lead + x.size] = x
    return out


def lfcc(w: Waveform, cfg: LFCCConfig = LFCCConfig(), align_to_labels: bool = False) -> FeatureSequence:
    """LFCC (+ deltas) matrix of shape N x D.

    Without ``align_to_labels`` N = floor((T - win + hop) / hop). With it the
    signal is padded so there is one frame per 20 ms label frame.
    """
    x = label_aligned_samples(w.samples, cfg) if align_to_labels else w.samples
    logfb = log_filterbank(w, cfg, x)
    ceps = dct(logfb, type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    if cfg.deltas:
        d1 = deltas(ceps)
        ceps = np.hstack([ceps, d1, deltas(d1)])
    return FeatureSequence(ceps, 1000.0 * cfg.hop / w.sample_rate_hz)


def write_feature_cache(feats: FeatureSequence, path) -> None:
    n, d = feats.frames.shape
    header = struct.pack("<4sHIIH", CACHE_MAGIC, CACHE_VERSION, n, d, int(round(feats.frame_shift_ms)))
    Path(path).write_bytes(header + feats.frames.astype("<f4").tobytes())


def read_feature_cache(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    size = struct.calcsize("<4sHIIH")
    magic, version, n, d, shift = struct.unpack_from("<4sHIIH", data, 0)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ValueError("not a feature cache file")
    body = np.frombuffer(data, dtype="<f4", offset=size)
    if body.size != n * d:
        raise ValueError("feature cache truncated")
    return FeatureSequence(body.reshape(n, d).astype(np.float64), float(shift))
