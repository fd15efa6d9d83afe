import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splicecm.backend import ScoreSet
from splicecm.labeling import MultiResLabels
from splicecm.metrics import (
    ScoredTrial,
    boundaries_per_segment,
    boundary_breakdown,
    boundary_buckets,
    bucket_of,
    eer,
    format_table,
    leave_one_out,
    machine_lines,
    ratio_group_eer,
    segment_eer,
    segment_span,
    utterance_eer,
)

scores = st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=40)


def _bracket(bona, spoof):
    """Loop over every midpoint threshold; return the FAR/FRR values around the crossing."""
    vals = sorted(set(bona) | set(spoof))
    thr = [vals[0] - 1] + [(a + b) / 2 for a, b in zip(vals, vals[1:])] + [vals[-1] + 1]
    rows = []
    for t in thr:
        far = sum(s >= t for s in spoof) / len(spoof)
        frr = sum(b < t for b in bona) / len(bona)
        rows.append((far, frr))
    for (f0, r0), (f1, r1) in zip(rows, rows[1:]):
        if f0 >= r0 and f1 <= r1:
            return min(r0, f1, f0, r1), max(f0, r1, r0, f1)
    raise AssertionError("no crossing")


def _trial(tid, frames, score_fn, methods=(), boundaries=(), level=0, utt=None):
    lab = MultiResLabels(np.array(frames, bool))
    segs = [np.asarray([score_fn(k, j, y) for j, y in enumerate(lab.at(k))], float) for k in range(6)]
    su = utt if utt is not None else (-1.0 if lab.utterance else 1.0)
    return ScoredTrial(tid, ScoreSet(segs, su), lab, frozenset(methods), tuple(boundaries), level)


# --- EER ---------------------------------------------------------------------


@pytest.mark.parametrize(
    "bona, spoof, want",
    [([1, 2], [-1, 0], 0.0), ([-1, 0], [1, 2], 1.0), ([0], [0], 0.5), ([1, 2, 3, 4], [0, 5], 0.5)],
)
def test_eer_cases(bona, spoof, want):
    assert eer(bona, spoof).eer == pytest.approx(want)


def test_eer_threshold_between_classes():
    r = eer([2.0, 3.0], [0.0, 1.0])
    assert 1.0 < r.threshold < 2.0


def test_eer_empty():
    with pytest.raises(ValueError):
        eer([], [1.0])


@settings(max_examples=300)
@given(scores, scores)
def test_eer_within_bruteforce_bracket(bona, spoof):
    lo, hi = _bracket(bona, spoof)
    e = eer(bona, spoof).eer
    assert lo - 1e-12 <= e <= hi + 1e-12
    assert 0.0 <= e <= 1.0


@settings(max_examples=200)
@given(scores, scores)
def test_eer_monotone_invariance(bona, spoof):
    f = lambda v: np.exp(np.asarray(v) / 7.0) * 3 - 2
    assert eer(f(bona), f(spoof)).eer == pytest.approx(eer(bona, spoof).eer, abs=1e-12)


@settings(max_examples=200)
@given(scores, scores)
def test_eer_swap_symmetry(bona, spoof):
    assert eer(spoof, bona).eer == pytest.approx(1.0 - eer(bona, spoof).eer, abs=1e-12)


# --- pooled EERs -----------------------------------------------------------------


def _random_trials(n=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = int(rng.integers(3, 40))
        frames = rng.random(m) < 0.3 if i % 3 else np.zeros(m, bool)
        out.append(_trial(f"t{i}", frames, lambda k, j, y: float(rng.normal(-0.5 if y else 0.5)), utt=float(rng.normal())))
    return out


def test_segment_eer_equals_concatenation():
    trials = _random_trials()
    for k in range(6):
        bona, spoof = [], []
        for t in trials:
            for s, y in zip(t.scores.at(k), t.labels.at(k)):
                (spoof if y else bona).append(s)
        assert segment_eer(trials, k) == pytest.approx(eer(bona, spoof).eer)
    b = [t.scores.utterance for t in trials if not t.labels.utterance]
    s = [t.scores.utterance for t in trials if t.labels.utterance]
    assert utterance_eer(trials) == pytest.approx(eer(b, s).eer)


def test_length_mismatch_rejected():
    lab = MultiResLabels(np.zeros(4, bool))
    with pytest.raises(ValueError):
        ScoredTrial("x", ScoreSet([np.zeros(3)] + [np.zeros(2)] * 5, 0.0), lab)


# --- leave one out ------------------------------------------------------------------


def _loo_set():
    trials = [_trial(f"b{i}", [0] * 4, lambda k, j, y: 1.0 + 0.1 * j, utt=1.0 + 0.1 * i) for i in range(5)]
    trials += [_trial(f"s{i}", [1] * 4, lambda k, j, y: -1.0, methods={"A01"}, utt=-1.0 - 0.1 * i) for i in range(5)]
    # A09 produces spoofs that score like bona fide speech
    trials += [_trial(f"h{i}", [1] * 4, lambda k, j, y: 5.0, methods={"A09"}, utt=5.0) for i in range(2)]
    return trials


def test_loo_absent_method():
    r = leave_one_out(_loo_set(), "A17")
    assert r.delta == 0.0


def test_loo_hard_method_lowers_eer():
    trials = _loo_set()
    r = leave_one_out(trials, "A09")
    assert r.delta < 0 and r.loo_eer == 0.0
    assert leave_one_out(trials, "A09", k=0).delta < 0


def test_loo_excluding_all_spoofs():
    trials = [t for t in _loo_set() if "A09" not in t.methods]
    with pytest.raises(ValueError, match="empty"):
        leave_one_out(trials, "A01")


# --- boundary buckets -----------------------------------------------------------------


def test_segment_span():
    assert segment_span(0, 0) == (0, 320)
    assert segment_span(3, 2) == (3840, 5120)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 20000), max_size=8).map(sorted), st.integers(0, 5))
def test_boundary_counts_match_intervals(bounds, k):
    n_frames = 63
    n = n_frames
    for _ in range(k):
        n = -(-n // 2)
    got = boundaries_per_segment(bounds, n, k)
    for j in range(n):
        a, b = segment_span(j, k)
        assert got[j] == sum(a <= x < b for x in bounds)


def test_boundary_on_segment_edge_goes_right():
    np.testing.assert_array_equal(boundaries_per_segment([320], 3, 0), [0, 1, 0])


@pytest.mark.parametrize("c, name", [(0, "0"), (1, "1"), (2, "2"), (3, "3+"), (7, "3+")])
def test_bucket_names(c, name):
    assert bucket_of(c) == name


def test_boundary_breakdown():
    frames = [0, 1, 1, 0, 1, 1, 1, 0]
    t = _trial("x", frames, lambda k, j, y: (-1.0 - j if y else 1.0), boundaries=(330, 960, 1290, 2240))
    assert boundary_buckets(t, 0) == [None, "1", "0", None, "1", "0", "0", None]
    bona = _trial("b", [0] * 8, lambda k, j, y: 0.5)
    out = boundary_breakdown([t, bona], 0)
    assert set(out) == {"0", "1"} and all(v == 0.0 for v in out.values())


# --- ratio groups ----------------------------------------------------------------------


def test_ratio_groups_monotone():
    trials = [_trial(f"b{i}", [0] * 4, lambda k, j, y: 0.0, utt=float(i) / 10) for i in range(20)]
    for lvl in range(10):
        for i in range(5):
            # higher spoof ratio -> lower score -> easier to detect
            trials.append(_trial(f"s{lvl}_{i}", [1] * 4, lambda k, j, y: 0.0, level=lvl, utt=1.5 - 0.2 * lvl - 0.05 * i))
    out = ratio_group_eer(trials)
    vals = [out[l] for l in range(10)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[0] > vals[-1] == 0.0


def test_ratio_groups_empty_level_warns():
    trials = [_trial("b", [0] * 2, lambda k, j, y: 0.0, utt=1.0), _trial("s", [1] * 2, lambda k, j, y: 0.0, level=4, utt=0.0)]
    with pytest.warns(UserWarning) as rec:
        out = ratio_group_eer(trials)
    assert len(rec) == 9 and any("level 0" in str(w.message) for w in rec)
    assert list(out) == [4]


def test_ratio_groups_equalized():
    trials = [_trial(f"b{i}", [0] * 2, lambda k, j, y: 0.0, utt=1.0) for i in range(3)]
    trials += [_trial(f"s{l}{i}", [1] * 2, lambda k, j, y: 0.0, level=l, utt=-1.0) for l in range(10) for i in range(l + 1)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = ratio_group_eer(trials, equalize=True, rng=np.random.default_rng(1))
    assert set(a) == set(range(10)) and all(v == 0.0 for v in a.values())


def test_report_formats():
    assert machine_lines("eer", {"20ms": 0.125}) == "eer\t20ms\t0.125000\n"
    assert "12.50" in format_table("EER (%)", {"20ms": 0.125})
