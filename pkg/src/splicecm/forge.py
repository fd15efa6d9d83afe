"""Construction of partially spoofed trials by segment substitution.

A trial starts from a target utterance of one class and receives segments of
the opposite class from other utterances of the same speaker. Each junction
is aligned by normalized cross-correlation and joined with a linear
cross-fade; a per-sample class mask records where every sample came from.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .audio_io import Waveform
from .vad import BONAFIDE, SPOOF, SpeechSegment

N_LEVELS = 10


class NoAdmissibleSegment(RuntimeError):
    def __init__(self, msg="no admissible segment"):
        super().__init__(msg)


class SpliceError(ValueError):
    pass


def opposite(cls: str) -> str:
    return BONAFIDE if cls == SPOOF else SPOOF


@dataclass
class PoolEntry:
    utterance_id: str
    speaker_id: str
    cls: str
    method_id: str
    waveform: Waveform
    segments: list[SpeechSegment] = field(default_factory=list)
    clipped: bool = False


class UtterancePool:
    def __init__(self, entries):
        entries = list(entries)
        ids = [e.utterance_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        rates = {e.waveform.sample_rate_hz for e in entries}
        if len(rates) > 1:
            raise ValueError(f"mixed sample rates in pool: {sorted(rates)}")
        for e in entries:
            if e.cls not in (BONAFIDE, SPOOF):
                raise ValueError(f"unknown class {e.cls!r}")
            if e.cls == SPOOF and e.method_id in ("", "-"):
                raise ValueError(f"spoof entry {e.utterance_id} lacks a method id")
        self.entries = entries
        self._by_id = {e.utterance_id: e for e in entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, utterance_id) -> PoolEntry:
        return self._by_id[utterance_id]

    @property
    def sample_rate_hz(self) -> int:
        return self.entries[0].waveform.sample_rate_hz if self.entries else 16000


@dataclass(frozen=True)
class Substitution:
    target_start: int
    target_end: int
    source_id: str
    source_start: int
    source_end: int

    def encode(self) -> str:
        return f"{self.target_start}:{self.target_end}@{self.source_id}:{self.source_start}:{self.source_end}"

    @classmethod
    def decode(cls, text: str) -> "Substitution":
        tgt, src = text.split("@")
        ts, te = tgt.split(":")
        sid, ss, se = src.rsplit(":", 2)
        return cls(int(ts), int(te), sid, int(ss), int(se))


@dataclass(frozen=True, eq=False)
class Provenance:
    """Per-sample spoof mask (True = spoof) plus splice bookkeeping."""

    mask: np.ndarray
    boundaries: tuple[int, ...] = ()
    methods: frozenset = frozenset()
    substitution_log: tuple[Substitution, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).reshape(-1).copy()
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)
        b = tuple(int(i) for i in self.boundaries)
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "methods", frozenset(self.methods))
        if bool(self.methods) != bool(m.any()):
            raise ValueError("methods must be nonempty exactly when the mask has spoof samples")

    @classmethod
    def uniform(cls, n: int, cls_name: str, method_id: str = "-") -> "Provenance":
        spoof = cls_name == SPOOF
        return cls(np.full(n, spoof), (), {method_id} if spoof else (), ())

    def __len__(self):
        return self.mask.size


def intra_ratio(p: Provenance) -> float:
    if p.mask.size == 0:
        raise ValueError("empty mask")
    return float(np.count_nonzero(p.mask) / p.mask.size)


def quantize_ratio(r: float) -> int:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio {r} outside [0, 1]")
    return min(int(np.floor(r * N_LEVELS)), N_LEVELS - 1)


@dataclass(frozen=True, eq=False)
class ForgedTrial:
    trial_id: str
    target_id: str
    waveform: Waveform
    provenance: Provenance
    clipped: bool = False

    @property
    def intra_ratio(self) -> float:
        return intra_ratio(self.provenance)

    @property
    def ratio_level(self) -> int:
        return quantize_ratio(self.intra_ratio)

    @property
    def is_spoof(self) -> bool:
        return bool(self.provenance.mask.any())


@dataclass
class ForgeParams:
    dur_tolerance: float = 0.2
    xfade_ms: float = 10.0
    search_ms: float = 40.0
    n_sub_range: tuple[int, int] = (1, 3)


def trial_rng(seed: int, trial_id: str) -> np.random.Generator:
    """Independent stream per trial so forging order does not matter."""
    return np.random.default_rng([int(seed), zlib.crc32(trial_id.encode())])


def _overlaps(a0, a1, spans) -> bool:
    return any(a0 < s1 and s0 < a1 for s0, s1 in spans)


def select_substitution(
    pool: UtterancePool,
    target: PoolEntry,
    rng: np.random.Generator,
    dur_tolerance: float = 0.2,
    used: set | None = None,
    target_segments: list[SpeechSegment] | None = None,
):
    """Pick (target segment, source entry, source segment) for one substitution.

    ``used`` holds (source utterance_id, segment index) pairs already injected
    into this target and is updated in place. ``target_segments`` overrides the
    target's own segments (positions shift as a trial is edited).
    """
    used = set() if used is None else used
    segs = list(target.segments if target_segments is None else target_segments)
    sources = [
        e
        for e in pool
        if e.speaker_id == target.speaker_id
        and e.cls == opposite(target.cls)
        and e.utterance_id != target.utterance_id
    ]
    for ti in rng.permutation(len(segs)):
        tseg = segs[ti]
        n = len(tseg)
        cands = [
            (e, si)
            for e in sources
            for si, sseg in enumerate(e.segments)
            if (e.utterance_id, si) not in used and abs(len(sseg) - n) <= dur_tolerance * n
        ]
        if cands:
            e, si = cands[rng.integers(len(cands))]
            used.add((e.utterance_id, si))
            return tseg, e, e.segments[si]
    raise NoAdmissibleSegment()


@dataclass(frozen=True)
class Alignment:
    offset: int
    peak_corr: float
    degenerate: bool = False


def align_point(t: np.ndarray, tp: int, s: np.ndarray, sp: int, search: int, half: int | None = None) -> Alignment:
    """Lag maximizing normalized cross-correlation of neighborhoods around t[tp] and s[sp+lag].

    The target neighborhood is t[tp-half : tp+half] clipped to the signal;
    source samples outside ``s`` count as zeros. Ties go to the smallest |lag|.
    """
    half = search if half is None else half
    half = max(half, 1)
    lo = max(-half, -tp)
    hi = min(half, t.size - tp)
    a = t[tp + lo : tp + hi]
    ea = float(a @ a)
    if a.size == 0 or ea <= 0:
        return Alignment(0, 0.0, True)
    # source samples s[sp + lag + j] for lag in [-search, search], j in [lo, hi)
    first = sp - search + lo
    span = 2 * search + a.size
    window = np.zeros(span)
    src_lo, src_hi = max(first, 0), min(first + span, s.size)
    if src_lo < src_hi:
        window[src_lo - first : src_hi - first] = s[src_lo:src_hi]
    num = np.correlate(window, a, mode="valid")
    csum = np.concatenate([[0.0], np.cumsum(window * window)])
    eb = csum[a.size :] - csum[: -a.size]
    valid = eb > 1e-300
    if not valid.any():
        return Alignment(0, 0.0, True)
    corr = np.zeros_like(num)
    corr[valid] = num[valid] / np.sqrt(ea * eb[valid])
    corr[~valid] = -np.inf
    lags = np.arange(-search, search + 1)
    best = corr.max()
    cands = lags[corr == best]
    lag = int(cands[np.argmin(np.abs(cands) * 2 + (cands > 0))])
    return Alignment(lag, float(np.clip(best, -1.0, 1.0)))


def align_boundary(target: Waveform, target_span, source: Waveform, source_span, search_ms: float = 40.0) -> Alignment:
    """Align the start junction of ``source_span`` against ``target_span``.

    A positive offset means the source span should start ``offset`` samples later.
    """
    search = int(round(search_ms * target.sample_rate_hz / 1000))
    return align_point(target.samples, int(target_span[0]), source.samples, int(source_span[0]), search)


def splice(
    target: Waveform,
    target_prov: Provenance,
    target_span,
    source: Waveform,
    source_span,
    source_class: str,
    source_method: str,
    xfade_ms: float = 10.0,
    source_id: str = "?",
):
    """Replace ``target_span`` with ``source_span`` using linear cross-fades.

    Cross-fades lie inside the inserted region and use the replaced target
    samples, so the output length is ``len(target) - len(target_span) +
    len(source_span)``. Fade samples take the incoming class from the fade
    midpoint onward.
    """
    a, b = int(target_span[0]), int(target_span[1])
    c, d = int(source_span[0]), int(source_span[1])
    n_t = len(target)
    if not (0 <= a < b <= n_t and 0 <= c < d <= len(source)):
        raise SpliceError("span out of bounds")
    if len(target_prov) != n_t:
        raise SpliceError("provenance does not match target length")
    if source.sample_rate_hz != target.sample_rate_hz:
        raise SpliceError("sample rates differ")
    fade = int(round(xfade_ms * target.sample_rate_hz / 1000))
    ins = d - c
    left = a > 0
    right = b < n_t
    if fade * (left + right) > min(ins, b - a):
        raise SpliceError("cross-fade longer than span")
    spans = [(s.target_start, s.target_end) for s in target_prov.substitution_log]
    if _overlaps(a, b, spans):
        raise SpliceError("span overlaps a previous substitution")

    t = target.samples
    mid = source.samples[c:d].copy()
    mmask = np.full(ins, source_class == SPOOF)
    half = fade // 2
    ramp = (np.arange(fade) + 0.5) / fade
    new_bounds = []
    if left and fade:
        mid[:fade] = (1 - ramp) * t[a : a + fade] + ramp * mid[:fade]
        mmask[:half] = target_prov.mask[a : a + half]
    if right and fade:
        mid[ins - fade :] = (1 - ramp) * mid[ins - fade :] + ramp * t[b - fade : b]
        mmask[ins - fade + half :] = target_prov.mask[b - fade + half : b]
    out = np.concatenate([t[:a], mid, t[b:]])
    mask = np.concatenate([target_prov.mask[:a], mmask, target_prov.mask[b:]])
    if left:
        new_bounds.append(a + (half if fade else 0))
    if right:
        new_bounds.append(a + ins - (fade - half if fade else 0))

    shift = ins - (b - a)
    old = [x if x < b else x + shift for x in target_prov.boundaries]
    log = []
    for s in target_prov.substitution_log:
        if s.target_start >= b:
            s = Substitution(s.target_start + shift, s.target_end + shift, s.source_id, s.source_start, s.source_end)
        log.append(s)
    log.append(Substitution(a, a + ins, source_id, c, d))
    log.sort(key=lambda s: s.target_start)
    methods = set(target_prov.methods)
    if source_class == SPOOF:
        methods.add(source_method)
    if not mask.any():
        methods.clear()
    prov = Provenance(mask, sorted(old + new_bounds), methods, tuple(log))
    return Waveform(np.clip(out, -1.0, 1.0), target.sample_rate_hz), prov


def _shift_segments(segs, a, b, shift):
    out = []
    for s in segs:
        if s.end_sample <= a:
            out.append(s)
        elif s.start_sample >= b:
            out.append(SpeechSegment(s.start_sample + shift, s.end_sample + shift, s.label))
    return out


def forge_trial(
    pool: UtterancePool,
    target: PoolEntry,
    n_substitutions: int,
    rng: np.random.Generator,
    params: ForgeParams | None = None,
    trial_id: str | None = None,
) -> ForgedTrial:
    params = params or ForgeParams()
    w = target.waveform
    sr = w.sample_rate_hz
    prov = Provenance.uniform(len(w), target.cls, target.method_id)
    fade = int(round(params.xfade_ms * sr / 1000))
    search = int(round(params.search_ms * sr / 1000))
    segs = list(target.segments)
    used: set = set()
    for _ in range(n_substitutions):
        tseg, src, sseg = select_substitution(pool, target, rng, params.dur_tolerance, used, segs)
        a, b = tseg.start_sample, tseg.end_sample
        s = src.waveform.samples
        c, d = sseg.start_sample, sseg.end_sample
        # align each junction separately; keep the inserted span long enough for both fades
        if a > 0:
            c += align_point(w.samples, a, s, c, search).offset
        if b < len(w):
            d += align_point(w.samples, b, s, d, search).offset
        c = min(max(c, 0), len(s) - 1)
        d = min(max(d, c + 1), len(s))
        if d - c < 2 * fade + 1:
            c, d = sseg.start_sample, sseg.end_sample
        w, prov = splice(w, prov, (a, b), src.waveform, (c, d), src.cls, src.method_id, params.xfade_ms, src.utterance_id)
        segs = _shift_segments(segs, a, b, (d - c) - (b - a))
    return ForgedTrial(trial_id or target.utterance_id, target.utterance_id, w, prov, target.clipped)


def _allocate(total: int, capacity: list[int]) -> list[int]:
    n = len(capacity)
    quota = [total // n + (1 if i < total % n else 0) for i in range(n)]
    alloc = [min(q, c) for q, c in zip(quota, capacity)]
    deficit = total - sum(alloc)
    while deficit > 0:
        open_ = [i for i in range(n) if alloc[i] < capacity[i]]
        if not open_:
            break
        weights = np.array([quota[i] for i in open_], dtype=float)
        if weights.sum() == 0:
            weights[:] = 1.0
        share = np.floor(deficit * weights / weights.sum()).astype(int)
        rem = deficit - int(share.sum())
        for j in range(rem):
            share[j % len(open_)] += 1
        moved = 0
        for i, extra in zip(open_, share):
            take = min(int(extra), capacity[i] - alloc[i])
            alloc[i] += take
            moved += take
        deficit -= moved
        if moved == 0:
            break
    return alloc


def balance_sample(trials, total_target: int, rng: np.random.Generator):
    """Sample ``total_target`` trials spread evenly over the ten ratio levels."""
    trials = list(trials)
    if total_target > len(trials):
        raise ValueError("total_target exceeds the number of trials")
    by_level = [[] for _ in range(N_LEVELS)]
    for t in sorted(trials, key=lambda t: t.trial_id):
        by_level[t.ratio_level].append(t)
    alloc = _allocate(total_target, [len(v) for v in by_level])
    chosen = []
    for group, k in zip(by_level, alloc):
        if k:
            idx = rng.choice(len(group), size=k, replace=False)
            chosen.extend(group[i] for i in idx)
    return sorted(chosen, key=lambda t: t.trial_id)


# --- manifest and mask sidecar -------------------------------------------------

MANIFEST_COLUMNS = ("trial_id", "target_id", "class", "intra_ratio", "ratio_level", "boundaries", "methods", "substitutions")


def manifest_row(t: ForgedTrial) -> str:
    p = t.provenance
    fields = [
        t.trial_id,
        t.target_id,
        SPOOF if t.is_spoof else BONAFIDE,
        f"{t.intra_ratio:.6f}",
        str(t.ratio_level),
        ",".join(map(str, p.boundaries)) or "-",
        ",".join(sorted(p.methods)) or "-",
        ";".join(s.encode() for s in p.substitution_log) or "-",
    ]
    return "\t".join(fields)


@dataclass
class ManifestRecord:
    trial_id: str
    target_id: str
    cls: str
    intra_ratio: float
    ratio_level: int
    boundaries: tuple[int, ...]
    methods: frozenset
    substitutions: tuple[Substitution, ...]


def parse_manifest_row(line: str) -> ManifestRecord:
    f = line.rstrip("\n").split("\t")
    if len(f) != len(MANIFEST_COLUMNS):
        raise ValueError(f"manifest row has {len(f)} fields, expected {len(MANIFEST_COLUMNS)}")
    return ManifestRecord(
        f[0],
        f[1],
        f[2],
        float(f[3]),
        int(f[4]),
        tuple(int(x) for x in f[5].split(",")) if f[5] != "-" else (),
        frozenset(f[6].split(",")) if f[6] != "-" else frozenset(),
        tuple(Substitution.decode(x) for x in f[7].split(";")) if f[7] != "-" else (),
    )


def mask_to_rle(mask: np.ndarray) -> str:
    mask = np.asarray(mask, dtype=bool)
    change = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [mask.size]])
    return "".join(f"{s}\t{e}\t{SPOOF if mask[s] else BONAFIDE}\n" for s, e in zip(starts, ends))


def rle_to_mask(text: str) -> np.ndarray:
    runs = [line.split("\t") for line in text.splitlines() if line and not line.startswith("#")]
    n = int(runs[-1][1]) if runs else 0
    mask = np.zeros(n, dtype=bool)
    pos = 0
    for s, e, cls in runs:
        s, e = int(s), int(e)
        if s != pos or e <= s:
            raise ValueError("mask runs must be contiguous and nonempty")
        mask[s:e] = cls == SPOOF
        pos = e
    return mask
