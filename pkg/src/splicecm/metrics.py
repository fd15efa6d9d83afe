"""Equal error rate and the diagnostic breakdowns used to analyse detectors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import RESOLUTIONS_MS
from .backend import ScoreSet
from .forge import N_LEVELS
from .labeling import MultiResLabels

FRAME_SAMPLES = 320
BUCKETS = ("0", "1", "2", "3+")


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float


def _rates(bona: np.ndarray, spoof: np.ndarray):
    """FAR/FRR at thresholds below all scores, between consecutive distinct scores, and above all."""
    uniq = np.unique(np.concatenate([bona, spoof]))
    thr = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    bona_sorted = np.sort(bona)
    spoof_sorted = np.sort(spoof)
    frr = np.searchsorted(bona_sorted, thr, side="left") / bona.size
    far = 1.0 - np.searchsorted(spoof_sorted, thr, side="left") / spoof.size
    return thr, far, frr


def eer(bona_scores, spoof_scores) -> EERResult:
    """EER with higher scores meaning bona fide.

    FAR(t) is the fraction of spoof scores >= t, FRR(t) the fraction of bona
    fide scores < t. Both are evaluated at midpoint thresholds and the
    crossing is linearly interpolated. When FAR == FRR on a run of
    thresholds the reported threshold is the mean of the run's ends.
    """
    bona = np.asarray(bona_scores, dtype=np.float64).ravel()
    spoof = np.asarray(spoof_scores, dtype=np.float64).ravel()
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("both classes need at least one score")
    thr, far, frr = _rates(bona, spoof)
    diff = far - frr
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        first, last = zero[0], zero[-1]
        return EERResult(float(far[first]), float((thr[first] + thr[last]) / 2))
    # diff starts at +1 (FAR = 1, FRR = 0) and ends at -1, so a sign change exists
    i = int(np.flatnonzero(diff < 0)[0]) - 1
    alpha = diff[i] / (diff[i] - diff[i + 1])
    e = far[i] + alpha * (far[i + 1] - far[i])
    return EERResult(float(e), float(thr[i] + alpha * (thr[i + 1] - thr[i])))


# --- scored trial sets ----------------------------------------------------------


@dataclass
class ScoredTrial:
    trial_id: str
    scores: ScoreSet
    labels: MultiResLabels
    methods: frozenset = frozenset()
    boundaries: tuple[int, ...] = ()
    ratio_level: int = 0

    def __post_init__(self):
        for k, s in enumerate(self.scores.segments):
            if s is not None and len(s) != self.labels.at(k).size:
                raise ValueError(f"{self.trial_id}: {len(s)} scores vs {self.labels.at(k).size} labels at k={k}")

    @property
    def boundary_count(self) -> int:
        return len(self.boundaries)


def _pool(trials, k):
    bona, spoof = [], []
    for t in trials:
        s = t.scores.at(k)
        y = t.labels.at(k)
        bona.append(s[~y])
        spoof.append(s[y])
    return np.concatenate(bona), np.concatenate(spoof)


def segment_eer(trials, k: int) -> float:
    """Pooled EER over all segment scores at resolution index ``k``."""
    bona, spoof = _pool(list(trials), k)
    return eer(bona, spoof).eer


def utterance_eer(trials) -> float:
    trials = list(trials)
    bona = [t.scores.utterance for t in trials if not t.labels.utterance]
    spoof = [t.scores.utterance for t in trials if t.labels.utterance]
    return eer(bona, spoof).eer


def _eer_at(trials, k):
    return utterance_eer(trials) if k is None or k == "utt" else segment_eer(trials, k)


@dataclass(frozen=True)
class LeaveOneOut:
    method: str
    full_eer: float
    loo_eer: float

    @property
    def delta(self) -> float:
        return self.loo_eer - self.full_eer


def leave_one_out(trials, method: str, k=None) -> LeaveOneOut:
    """EER after dropping every trial with a segment from ``method`` (k=None: utterance level)."""
    trials = list(trials)
    full = _eer_at(trials, k)
    kept = [t for t in trials if method not in t.methods]
    if len(kept) == len(trials):
        return LeaveOneOut(method, full, full)
    try:
        loo = _eer_at(kept, k)
    except ValueError as exc:
        raise ValueError(f"excluding {method} leaves a class empty") from exc
    return LeaveOneOut(method, full, loo)


def segment_span(j: int, k: int, frame_samples: int = FRAME_SAMPLES) -> tuple[int, int]:
    size = frame_samples << k
    return j * size, (j + 1) * size


def boundaries_per_segment(boundaries, n_segments: int, k: int, frame_samples: int = FRAME_SAMPLES) -> np.ndarray:
    """Number of boundary samples b with start <= b < end for each segment."""
    size = frame_samples << k
    idx = np.asarray(boundaries, dtype=np.int64) // size
    idx = idx[idx < n_segments]
    return np.bincount(idx, minlength=n_segments)


def bucket_of(count: int) -> str:
    return BUCKETS[min(int(count), 3)]


def boundary_buckets(trial: ScoredTrial, k: int) -> list[str | None]:
    """Bucket name for each spoofed segment at resolution k; None for bona fide segments."""
    y = trial.labels.at(k)
    counts = boundaries_per_segment(trial.boundaries, y.size, k)
    return [bucket_of(c) if spoof else None for c, spoof in zip(counts, y)]


def boundary_breakdown(trials, k: int) -> dict[str, float]:
    """EER per boundary-count bucket; bona fide segments form a shared negative set."""
    trials = list(trials)
    bona, _ = _pool(trials, k)
    groups: dict[str, list] = {b: [] for b in BUCKETS}
    for t in trials:
        s = t.scores.at(k)
        for score, b in zip(s, boundary_buckets(t, k)):
            if b is not None:
                groups[b].append(score)
    return {b: eer(bona, v).eer for b, v in groups.items() if v}


def ratio_group_eer(trials, equalize: bool = False, rng: np.random.Generator | None = None) -> dict[int, float]:
    """Utterance EER of each ratio level's spoofed trials against all bona fide trials."""
    trials = list(trials)
    bona = [t.scores.utterance for t in trials if not t.labels.utterance]
    levels = {lvl: [t.scores.utterance for t in trials if t.labels.utterance and t.ratio_level == lvl] for lvl in range(N_LEVELS)}
    for lvl, v in levels.items():
        if not v:
            warnings.warn(f"ratio level {lvl} has no spoofed trials; omitted")
    levels = {lvl: np.asarray(v) for lvl, v in levels.items() if v}
    if equalize and levels:
        rng = rng if rng is not None else np.random.default_rng(0)
        size = min(v.size for v in levels.values())
        levels = {lvl: v[np.sort(rng.choice(v.size, size, replace=False))] for lvl, v in levels.items()}
    return {lvl: eer(bona, v).eer for lvl, v in levels.items()}


# --- reports ---------------------------------------------------------------------


def res_key(k) -> str:
    return "utt" if k is None or k == "utt" else f"{RESOLUTIONS_MS[k]}ms"


def format_table(title: str, rows: dict, value_fmt: str = "{:.2f}", scale: float = 100.0) -> str:
    lines = [title]
    for key, v in rows.items():
        lines.append(f"  {key:>8}  {value_fmt.format(v * scale)}")
    return "\n".join(lines) + "\n"


def machine_lines(metric: str, rows: dict) -> str:
    return "".join(f"{metric}\t{key}\t{v:.6f}\n" for key, v in rows.items())
