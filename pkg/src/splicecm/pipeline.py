"""Corpus-level glue: pool preparation, batch forging, and feature/label pairing."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .audio_io import NoActiveSpeech, Waveform, normalize_with_info
from .backend import ScoreSet, forward
from .features import LFCCConfig, lfcc
from .forge import (
    ForgedTrial,
    ForgeParams,
    NoAdmissibleSegment,
    PoolEntry,
    Provenance,
    UtterancePool,
    balance_sample,
    forge_trial,
    trial_rng,
)
from .labeling import MultiResLabels, build_multires
from .vad import BONAFIDE, detect_segments

log = logging.getLogger(__name__)


def prepare_entry(utterance_id, speaker_id, cls, method_id, waveform: Waveform, target_dbov=-26.0) -> PoolEntry:
    """Level-normalize one utterance and attach its majority-vote VAD segments."""
    w, _, clipped = normalize_with_info(waveform, target_dbov)
    if clipped:
        log.warning("%s: clipped during level normalization", utterance_id)
    return PoolEntry(utterance_id, speaker_id, cls, method_id, w, detect_segments(w, label=cls), clipped)


def prepare_pool(records, target_dbov=-26.0) -> UtterancePool:
    """``records`` are dicts with utterance_id, speaker_id, class, method_id, waveform."""
    entries = []
    for r in records:
        try:
            entries.append(prepare_entry(r["utterance_id"], r["speaker_id"], r["class"], r["method_id"], r["waveform"], target_dbov))
        except NoActiveSpeech:
            log.warning("%s: no active speech, dropped", r["utterance_id"])
    return UtterancePool(entries)


def _forge_one(args):
    pool, entry, trial_id, seed, params = args
    rng = trial_rng(seed, trial_id)
    lo, hi = params.n_sub_range
    n = int(rng.integers(lo, hi + 1))
    try:
        return forge_trial(pool, entry, n, rng, params, trial_id)
    except NoAdmissibleSegment:
        return None


def forge_corpus(
    pool: UtterancePool,
    seed: int,
    params: ForgeParams | None = None,
    trials_per_target: int = 1,
    total: int | None = None,
    jobs: int = 1,
) -> list[ForgedTrial]:
    """Forge trials from every pool utterance, then balance them over ratio levels.

    Targets with no admissible substitution are skipped. Raises
    NoAdmissibleSegment when nothing at all could be forged.
    """
    params = params or ForgeParams()
    tasks = [(pool, e, f"{e.utterance_id}-{j}", seed, params) for e in pool for j in range(trials_per_target)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_forge_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_forge_one(t) for t in tasks]
    trials = [t for t in results if t is not None]
    if not trials:
        raise NoAdmissibleSegment()
    skipped = len(results) - len(trials)
    if skipped:
        log.warning("%d targets had no admissible segment", skipped)
    total = len(trials) if total is None else min(total, len(trials))
    return balance_sample(trials, total, np.random.default_rng([seed, 0x5EED]))


def bonafide_trials(pool: UtterancePool) -> list[ForgedTrial]:
    """Unmodified bona fide utterances, kept as the bona fide class of a corpus."""
    return [
        ForgedTrial(e.utterance_id, e.utterance_id, e.waveform, Provenance.uniform(len(e.waveform), BONAFIDE), e.clipped)
        for e in pool
        if e.cls == BONAFIDE
    ]


def trial_example(w: Waveform, mask: np.ndarray, cfg: LFCCConfig = LFCCConfig()):
    """Label-aligned features and labels for one trial."""
    feats = lfcc(w, cfg, align_to_labels=True)
    labels = build_multires(mask, w.sample_rate_hz)
    return feats, labels


def score_all(examples, params) -> list[ScoreSet]:
    return [forward(a, params) for a, _ in examples]


def stack_frames(examples) -> np.ndarray:
    return np.vstack([getattr(a, "frames", a) for a, _ in examples])


def labels_of(trial: ForgedTrial) -> MultiResLabels:
    return build_multires(trial.provenance, trial.waveform.sample_rate_hz)


def toy_corpus(seed: int, n_trials: int, bona_fraction: float = 0.25, n_speakers: int | None = None,
               duration_range=(1.0, 2.0), prefix: str = "T"):
    """Synthetic partially spoofed corpus: forged trials plus untouched bona fide utterances.

    Spoofed samples carry a 3.7 kHz tone 20 dB below the speech level.
    """
    from .synthetic import make_pool_entries

    n_bona = int(round(n_trials * bona_fraction))
    n_spoof = n_trials - n_bona
    n_speakers = n_speakers or max(2, -(-n_bona // 4))
    pool = prepare_pool(make_pool_entries(seed, n_speakers, 4, 4, duration_range=duration_range, prefix=prefix))
    forged = forge_corpus(pool, seed, trials_per_target=max(1, -(-2 * n_spoof // len(pool))), total=n_spoof)
    bona = bonafide_trials(pool)
    rng = np.random.default_rng([seed, 0xB0A])
    bona = [bona[i] for i in sorted(rng.choice(len(bona), min(n_bona, len(bona)), replace=False))]
    return sorted(forged + bona, key=lambda t: t.trial_id)
