"""Speech-like synthetic utterance pools for tests and toy experiments.

Bona fide utterances are harmonic bursts ("syllables") separated by pauses.
Spoofed utterances are drawn the same way and carry an additive narrowband
tone (default 3.7 kHz, 20 dB below the speech level) over every sample, which
gives a detector something learnable.

Run ``python -m splicecm.synthetic OUTDIR`` to write a pool directory with a
``pool.tsv`` protocol usable by ``splicecm forge``.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .audio_io import Waveform, normalize_level, write_wav
from .vad import BONAFIDE, SPOOF

SR = 16000
DITHER = 10 ** (-70 / 20)


def speech_like(rng: np.random.Generator, duration_s: float = 2.0, sr: int = SR) -> np.ndarray:
    n = int(duration_s * sr)
    x = np.zeros(n)
    pos = int(rng.uniform(0.1, 0.2) * sr)
    while True:
        length = int(rng.uniform(0.15, 0.45) * sr)
        if pos + length > n - int(0.1 * sr):
            break
        t = np.arange(length) / sr
        f0 = rng.uniform(100, 220) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
        phase = 2 * np.pi * np.cumsum(f0) / sr
        burst = np.zeros(length)
        for h in range(1, int(4000 / 220) + 1):
            burst += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h**2
        env = np.sin(np.pi * np.arange(length) / length) ** 0.5
        x[pos : pos + length] = burst * env * rng.uniform(0.5, 1.0)
        pos += length + int(rng.uniform(0.06, 0.25) * sr)
    x /= max(np.max(np.abs(x)), 1e-12) * 2
    return x + DITHER * rng.standard_normal(n)


def add_tone(x: np.ndarray, rng, tone_hz: float = 3700.0, rel_db: float = -20.0, sr: int = SR):
    """Add a sine whose RMS sits ``rel_db`` below the active level of ``x``."""
    from .audio_io import active_speech_level_db

    level = active_speech_level_db(Waveform(np.clip(x, -1, 1), sr))
    amp = np.sqrt(2) * 10 ** ((level + rel_db) / 20)
    t = np.arange(x.size) / sr
    return x + amp * np.sin(2 * np.pi * tone_hz * t + rng.uniform(0, 2 * np.pi))


def make_pool_entries(
    seed: int,
    n_speakers: int = 4,
    bona_per_speaker: int = 4,
    spoof_per_speaker: int = 4,
    methods=("A01", "A02", "A03"),
    duration_range=(1.5, 3.0),
    tone_hz: float = 3700.0,
    tone_db: float = -20.0,
    prefix: str = "U",
):
    """Return a list of dicts with utterance_id, speaker_id, class, method_id, waveform."""
    rng = np.random.default_rng(seed)
    entries = []
    for spk in range(n_speakers):
        speaker = f"{prefix}SPK{spk:02d}"
        for i in range(bona_per_speaker + spoof_per_speaker):
            spoof = i >= bona_per_speaker
            x = speech_like(rng, rng.uniform(*duration_range))
            method = "-"
            if spoof:
                method = methods[(spk + i) % len(methods)]
                x = add_tone(x, rng, tone_hz, tone_db)
            w = normalize_level(Waveform(np.clip(x, -1, 1), SR))
            entries.append(
                {
                    "utterance_id": f"{speaker}_{i:03d}",
                    "speaker_id": speaker,
                    "class": SPOOF if spoof else BONAFIDE,
                    "method_id": method,
                    "waveform": w,
                }
            )
    return entries


def write_pool(out_dir, entries) -> Path:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for e in entries:
        rel = f"wav/{e['utterance_id']}.wav"
        write_wav(e["waveform"], out / rel)
        lines.append("\t".join([e["utterance_id"], e["speaker_id"], e["class"], e["method_id"], rel]))
    proto = out / "pool.tsv"
    proto.write_text("\n".join(lines) + "\n")
    return proto


def main(argv=None):
    ap = argparse.ArgumentParser(description="write a synthetic utterance pool")
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--speakers", type=int, default=4)
    ap.add_argument("--bona", type=int, default=4)
    ap.add_argument("--spoof", type=int, default=4)
    args = ap.parse_args(argv)
    proto = write_pool(args.out, make_pool_entries(args.seed, args.speakers, args.bona, args.spoof))
    print(proto)


if __name__ == "__main__":
    main()
