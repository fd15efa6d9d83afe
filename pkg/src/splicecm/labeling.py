"""Hierarchical segment labels (20 ms to 640 ms) derived from a spoof mask."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import RESOLUTIONS_MS
from .forge import Provenance

LABEL_HEADER = "#partialspoof-labels v1 polarity=1-is-spoof"
FRAME_MS = RESOLUTIONS_MS[0]


def frame_labels(p: Provenance | np.ndarray, sample_rate_hz: int = 16000) -> np.ndarray:
    """20 ms frames; a frame is spoof if any of its samples is spoof. The tail frame is kept."""
    mask = p.mask if isinstance(p, Provenance) else np.asarray(p, dtype=bool)
    hop = sample_rate_hz * FRAME_MS // 1000
    n = -(-mask.size // hop)
    padded = np.zeros(n * hop, dtype=bool)
    padded[: mask.size] = mask
    return padded.reshape(n, hop).any(axis=1)


def coarsen(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        raise ValueError("cannot coarsen an empty label vector")
    if labels.size % 2:
        labels = np.append(labels, False)
    return labels.reshape(-1, 2).any(axis=1)


@dataclass(frozen=True, eq=False)
class MultiResLabels:
    """Only the 20 ms vector is stored; coarser vectors are always derived from it."""

    frames: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=bool).reshape(-1).copy()
        if f.size == 0:
            raise ValueError("empty label vector")
        f.flags.writeable = False
        object.__setattr__(self, "frames", f)

    @cached_property
    def levels(self) -> tuple[np.ndarray, ...]:
        out = [self.frames]
        for _ in RESOLUTIONS_MS[1:]:
            out.append(coarsen(out[-1]))
        return tuple(out)

    def at(self, k: int) -> np.ndarray:
        return self.levels[k]

    def by_ms(self, res_ms: int) -> np.ndarray:
        return self.levels[RESOLUTIONS_MS.index(res_ms)]

    @property
    def utterance(self) -> bool:
        return bool(self.frames.any())

    def __eq__(self, other):
        return isinstance(other, MultiResLabels) and np.array_equal(self.frames, other.frames)


def build_multires(p: Provenance | np.ndarray, sample_rate_hz: int = 16000) -> MultiResLabels:
    return MultiResLabels(frame_labels(p, sample_rate_hz))


def _columns(labels):
    labels = list(labels)
    if not labels:
        raise ValueError("empty label collection")
    cols = {}
    for k, r in enumerate(RESOLUTIONS_MS):
        vecs = [lab.at(k) for lab in labels]
        cols[f"{r}ms"] = (sum(int(v.sum()) for v in vecs), sum(v.size for v in vecs))
    cols["utt"] = (sum(lab.utterance for lab in labels), len(labels))
    return cols


def class_ratio_report(labels) -> dict[str, float]:
    """Percentage of spoof labels per resolution column and at utterance level."""
    return {k: 100.0 * s / n for k, (s, n) in _columns(labels).items()}


def count_report(labels) -> dict[str, int]:
    return {k: n for k, (_, n) in _columns(labels).items()}


def format_report(title: str, row: dict, fmt: str = "{:.2f}") -> str:
    head = "\t".join(["", *row.keys()])
    body = "\t".join([title, *(fmt.format(v) for v in row.values())])
    return head + "\n" + body + "\n"


def _bits(v: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in v)


def format_label_line(trial_id: str, labels: MultiResLabels) -> str:
    fields = [trial_id, str(int(labels.utterance))]
    fields += [f"{r}={_bits(labels.at(k))}" for k, r in enumerate(RESOLUTIONS_MS)]
    return "\t".join(fields)


def parse_label_line(line: str) -> tuple[str, MultiResLabels]:
    """Parse one label row; coarser fields must agree with the 20 ms field."""
    f = line.rstrip("\n").split("\t")
    trial_id, utt = f[0], f[1]
    fields = dict(x.split("=", 1) for x in f[2:])
    if str(FRAME_MS) not in fields:
        raise ValueError(f"{trial_id}: missing {FRAME_MS} ms segment labels")
    frames = np.array([c == "1" for c in fields[str(FRAME_MS)]], dtype=bool)
    labels = MultiResLabels(frames)
    for k, r in enumerate(RESOLUTIONS_MS):
        if str(r) in fields and fields[str(r)] != _bits(labels.at(k)):
            raise ValueError(f"{trial_id}: {r} ms labels violate the hierarchy")
    if int(utt) != int(labels.utterance):
        raise ValueError(f"{trial_id}: utterance label disagrees with segment labels")
    return trial_id, labels


def read_label_file(path) -> dict[str, MultiResLabels]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            tid, lab = parse_label_line(line)
            out[tid] = lab
    return out
