"""Multi-resolution countermeasure back-end with hand-written gradients.

Architecture, fine to coarse::

    h0 = standardized features                      -> tower 0 -> s0  (20 ms)
    h1 = downsample(h0)                             -> tower 1 -> s1  (40 ms)
    ...
    h5 = downsample(h4)                             -> tower 5 -> s5  (640 ms)
    e  = mean_t(h5)                                 -> linear  -> su  (utterance)

Each tower is a stack of gMLP blocks followed by a per-position linear head.
Downsampling is a stride-2 max-pool followed by a kernel-size-1 channel mix.
Scores are real-valued, higher meaning more bona fide.

Everything is float64 numpy; every layer has an explicit backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from . import RESOLUTIONS_MS
from .labeling import MultiResLabels

N_RES = len(RESOLUTIONS_MS)
LN_EPS = 1e-5
CKPT_MAGIC = b"SCMP"
CKPT_VERSION = 1


# --- parameters -----------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    dim: int = 60
    n_blocks: int = 5
    kernel: int = 7
    n_res: int = N_RES


class BackendParams:
    """Named float64 tensors. Names under ``norm.`` are fixed buffers, never trained."""

    def __init__(self, tensors: dict[str, np.ndarray], config: BackendConfig):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.config = config
        self.check()

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def names(self):
        return list(self.tensors)

    def trainable(self):
        return [k for k in self.tensors if not k.startswith("norm.")]

    def copy(self) -> "BackendParams":
        return BackendParams({k: v.copy() for k, v in self.tensors.items()}, self.config)

    def check(self):
        d = self.config.dim
        for name, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in {name}")
        for name in ("norm.mean", "norm.std"):
            if self.tensors[name].shape != (d,):
                raise ValueError(f"{name} has shape {self.tensors[name].shape}, expected ({d},)")

    @classmethod
    def init(cls, config: BackendConfig, seed: int = 0) -> "BackendParams":
        rng = np.random.default_rng(seed)
        d, r = config.dim, config.kernel
        t: dict[str, np.ndarray] = {"norm.mean": np.zeros(d), "norm.std": np.ones(d)}
        for k in range(config.n_res):
            for j in range(config.n_blocks):
                p = f"tower{k}.block{j}."
                t[p + "ln_g"] = np.ones(d)
                t[p + "ln_b"] = np.zeros(d)
                t[p + "w1"] = rng.normal(0, 1 / np.sqrt(d), (d, 2 * d))
                t[p + "b1"] = np.zeros(2 * d)
                t[p + "gate_g"] = np.ones(d)
                t[p + "gate_b"] = np.zeros(d)
                t[p + "kern"] = rng.uniform(-1e-3, 1e-3, r)
                t[p + "kbias"] = np.ones(1)
                t[p + "w2"] = rng.normal(0, 0.1 / np.sqrt(d), (d, d))
                t[p + "b2"] = np.zeros(d)
            t[f"tower{k}.head_w"] = rng.normal(0, 0.1 / np.sqrt(d), d)
            t[f"tower{k}.head_b"] = np.zeros(1)
        for k in range(1, config.n_res):
            t[f"down{k}.w"] = np.eye(d) + rng.normal(0, 0.01, (d, d))
            t[f"down{k}.b"] = np.zeros(d)
        t["utt.w"] = rng.normal(0, 0.1 / np.sqrt(d), d)
        t["utt.b"] = np.zeros(1)
        return cls(t, config)

    def set_normalization(self, frames: np.ndarray):
        """Fix the input standardization from a stack of training frames."""
        self.tensors["norm.mean"] = frames.mean(axis=0)
        self.tensors["norm.std"] = np.maximum(frames.std(axis=0), 1e-3)


def path_params(params: BackendParams, strategy: "Strategy") -> list[str]:
    """Trainable tensors on the computation path of the strategy's losses."""
    cfg = params.config
    keep = set()
    for k in strategy.resolutions(cfg.n_res):
        keep.add(f"tower{k}.")
        keep.update(f"down{j}." for j in range(1, k + 1))
    if strategy.uses_utterance:
        keep.add("utt.")
        keep.update(f"down{j}." for j in range(1, cfg.n_res))
    return [n for n in params.trainable() if any(n.startswith(p) for p in keep)]


# --- layers ---------------------------------------------------------------------


def layernorm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, dg, db


def gelu(x):
    """Exact GELU; also returns the normal CDF for the backward pass."""
    cdf = 0.5 * (1.0 + erf(x * (1.0 / np.sqrt(2.0))))
    return x * cdf, cdf


def gelu_grad(x, cdf):
    return cdf + x * np.exp(-0.5 * x * x) * (1.0 / np.sqrt(2 * np.pi))


def temporal_conv(x, kern, bias):
    """Channel-shared temporal projection: y[i] = bias + sum_o kern[o + r] * x[i + o], zero padded."""
    r = kern.size // 2
    m = x.shape[0]
    padded = np.pad(x, ((r, r), (0, 0)))
    y = np.full_like(x, bias[0])
    for j in range(kern.size):
        y += kern[j] * padded[j : j + m]
    return y, padded


def temporal_conv_backward(dy, padded, kern):
    r = kern.size // 2
    m = dy.shape[0]
    dkern = np.array([np.sum(dy * padded[j : j + m]) for j in range(kern.size)])
    dpad = np.zeros_like(padded)
    for j in range(kern.size):
        dpad[j : j + m] += kern[j] * dy
    return dpad[r : r + m], dkern, np.array([dy.sum()])


def gmlp_block(x, p: dict, prefix: str):
    d = x.shape[1]
    z, ln_cache = layernorm(x, p[prefix + "ln_g"], p[prefix + "ln_b"])
    u = z @ p[prefix + "w1"] + p[prefix + "b1"]
    a, cdf = gelu(u)
    a1, a2 = a[:, :d], a[:, d:]
    n2, gate_cache = layernorm(a2, p[prefix + "gate_g"], p[prefix + "gate_b"])
    v, padded = temporal_conv(n2, p[prefix + "kern"], p[prefix + "kbias"])
    gated = a1 * v
    y = x + gated @ p[prefix + "w2"] + p[prefix + "b2"]
    return y, (z, ln_cache, u, cdf, a1, gate_cache, v, padded, gated)


def gmlp_block_backward(dy, p: dict, prefix: str, cache, grads: dict):
    z, ln_cache, u, cdf, a1, gate_cache, v, padded, gated = cache
    grads[prefix + "w2"] = gated.T @ dy
    grads[prefix + "b2"] = dy.sum(axis=0)
    dgated = dy @ p[prefix + "w2"].T
    da1 = dgated * v
    dv = dgated * a1
    dn2, grads[prefix + "kern"], grads[prefix + "kbias"] = temporal_conv_backward(dv, padded, p[prefix + "kern"])
    da2, grads[prefix + "gate_g"], grads[prefix + "gate_b"] = layernorm_backward(dn2, gate_cache)
    du = np.hstack([da1, da2]) * gelu_grad(u, cdf)
    grads[prefix + "w1"] = z.T @ du
    grads[prefix + "b1"] = du.sum(axis=0)
    dz = du @ p[prefix + "w1"].T
    dx, grads[prefix + "ln_g"], grads[prefix + "ln_b"] = layernorm_backward(dz, ln_cache)
    return dx + dy


def tower_forward(h, p: dict, k: int, n_blocks: int):
    caches = []
    x = h
    for j in range(n_blocks):
        x, c = gmlp_block(x, p, f"tower{k}.block{j}.")
        caches.append(c)
    s = x @ p[f"tower{k}.head_w"] + p[f"tower{k}.head_b"][0]
    return s, (x, caches)


def tower_backward(ds, p: dict, k: int, n_blocks: int, cache, grads: dict):
    x, caches = cache
    grads[f"tower{k}.head_w"] = x.T @ ds
    grads[f"tower{k}.head_b"] = np.array([ds.sum()])
    dx = np.outer(ds, p[f"tower{k}.head_w"])
    for j in reversed(range(n_blocks)):
        dx = gmlp_block_backward(dx, p, f"tower{k}.block{j}.", caches[j], grads)
    return dx


def maxpool2(h):
    """Stride-2 temporal max-pool; an odd trailing frame passes through unchanged."""
    m, d = h.shape
    if m % 2:
        h = np.vstack([h, np.full((1, d), -np.inf)])
    pairs = h.reshape(-1, 2, d)
    idx = pairs.argmax(axis=1)
    return np.take_along_axis(pairs, idx[:, None, :], axis=1)[:, 0, :], (idx, m)


def maxpool2_backward(dy, cache):
    idx, m = cache
    n, d = dy.shape
    dpairs = np.zeros((n, 2, d))
    np.put_along_axis(dpairs, idx[:, None, :], dy[:, None, :], axis=1)
    return dpairs.reshape(-1, d)[:m]


def downsample(h, w, b):
    pooled, pool_cache = maxpool2(h)
    return pooled @ w + b, (pooled, pool_cache)


def downsample_backward(dy, w, cache):
    pooled, pool_cache = cache
    return maxpool2_backward(dy @ w.T, pool_cache), pooled.T @ dy, dy.sum(axis=0)


def rescore(w, h) -> np.ndarray:
    """Segment scores as the inner product of each hidden vector with ``w``."""
    return np.asarray(h, dtype=np.float64) @ np.asarray(w, dtype=np.float64)


def utterance_from_min(s) -> float:
    return float(np.min(s))


# --- forward / backward ---------------------------------------------------------


@dataclass
class ScoreSet:
    segments: list[np.ndarray | None]
    utterance: float | None

    def at(self, k: int) -> np.ndarray:
        s = self.segments[k]
        if s is None:
            raise KeyError(f"resolution {k} was not computed")
        return s


@dataclass
class _Trace:
    hidden: list = field(default_factory=list)
    down: list = field(default_factory=list)
    towers: dict = field(default_factory=dict)
    n_pooled: int = 0


def _as_frames(a) -> np.ndarray:
    frames = getattr(a, "frames", a)
    return np.asarray(frames, dtype=np.float64)


def forward(a, params: BackendParams, towers=None, utterance: bool = True, trace: bool = False):
    """Score a feature sequence at every resolution (or only the requested ones)."""
    cfg = params.config
    x = _as_frames(a)
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ValueError(f"features of shape {x.shape} do not match back-end dim {cfg.dim}")
    if x.shape[0] < 1:
        raise ValueError("empty feature sequence")
    towers = set(range(cfg.n_res)) if towers is None else set(towers)
    p = params.tensors
    depth = max(towers | ({cfg.n_res - 1} if utterance else set()), default=-1)
    tr = _Trace()
    h = (x - p["norm.mean"]) / p["norm.std"]
    tr.hidden.append(h)
    for k in range(1, depth + 1):
        h, c = downsample(h, p[f"down{k}.w"], p[f"down{k}.b"])
        tr.hidden.append(h)
        tr.down.append(c)
    segments: list = [None] * cfg.n_res
    for k in sorted(towers):
        segments[k], tr.towers[k] = tower_forward(tr.hidden[k], p, k, cfg.n_blocks)
    su = None
    if utterance:
        su = float(tr.hidden[-1].mean(axis=0) @ p["utt.w"] + p["utt.b"][0])
    out = ScoreSet(segments, su)
    return (out, tr) if trace else out


def backward(dscores: dict, params: BackendParams, tr: _Trace) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its derivatives w.r.t. scores.

    ``dscores`` maps resolution index -> d loss / d s^k and "utt" -> d loss / d s^u.
    Parameters off the path of the given scores get no entry.
    """
    cfg = params.config
    p = params.tensors
    grads: dict[str, np.ndarray] = {}
    dh = [np.zeros_like(h) for h in tr.hidden]
    for k, ds in dscores.items():
        if k == "utt":
            h5 = tr.hidden[-1]
            grads["utt.w"] = ds * h5.mean(axis=0)
            grads["utt.b"] = np.array([ds])
            dh[-1] += np.tile(ds * p["utt.w"] / h5.shape[0], (h5.shape[0], 1))
        else:
            dh[k] += tower_backward(np.asarray(ds, dtype=np.float64), p, k, cfg.n_blocks, tr.towers[k], grads)
    for k in range(len(tr.hidden) - 1, 0, -1):
        dprev, grads[f"down{k}.w"], grads[f"down{k}.b"] = downsample_backward(dh[k], p[f"down{k}.w"], tr.down[k - 1])
        dh[k - 1] += dprev
    return grads


def align_score_to_frames(s, k: int, n_frames: int) -> np.ndarray:
    """Repeat each resolution-k score over its 2**k frames; the tail uses the last segment."""
    s = np.asarray(s)
    idx = np.minimum(np.arange(n_frames) >> k, s.size - 1)
    return s[idx]


# --- loss -------------------------------------------------------------------------


def sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def mse_term(scores, spoof_labels):
    """Mean of (sigmoid(s) - target)^2 with target 1 for bona fide, 0 for spoof."""
    s = np.asarray(scores, dtype=np.float64)
    y = 1.0 - np.asarray(spoof_labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"score/label length mismatch: {s.shape} vs {y.shape}")
    q = sigmoid(s)
    diff = q - y
    return float(np.mean(diff * diff)), 2.0 * diff * q * (1.0 - q) / s.size


@dataclass(frozen=True)
class Strategy:
    """multi: all resolutions plus utterance; single(k): resolution k only; utterance: s^u only."""

    kind: str = "multi"
    k: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        text = text.strip()
        if text == "multi":
            return cls("multi")
        if text in ("utterance", "utterance-only"):
            return cls("utterance")
        if text.startswith("single"):
            k = int(text.split(":")[1] if ":" in text else text[text.index("(") + 1 : text.index(")")])
            return cls("single", k)
        raise ValueError(f"unknown strategy {text!r}")

    def resolutions(self, n_res: int = N_RES):
        if self.kind == "multi":
            return list(range(n_res))
        if self.kind == "single":
            if not 0 <= self.k < n_res:
                raise ValueError(f"resolution index {self.k} out of range")
            return [self.k]
        return []

    @property
    def uses_utterance(self) -> bool:
        return self.kind in ("multi", "utterance")

    def __str__(self):
        return f"single:{self.k}" if self.kind == "single" else self.kind


def loss(scores: ScoreSet, labels: MultiResLabels, strategy: Strategy = Strategy()):
    """Sum of per-resolution terms (and the utterance term) selected by ``strategy``.

    Returns (total, per-term values, gradients w.r.t. scores).
    """
    n_res = len(scores.segments)
    terms: dict = {}
    grads: dict = {}
    for k in strategy.resolutions(n_res):
        terms[k], grads[k] = mse_term(scores.at(k), labels.at(k))
    if strategy.uses_utterance:
        if scores.utterance is None:
            raise ValueError("utterance score not computed")
        val, g = mse_term(np.array([scores.utterance]), np.array([labels.utterance]))
        terms["utt"], grads["utt"] = val, float(g[0])
    return float(sum(terms.values())), terms, grads


def loss_and_grads(a, labels: MultiResLabels, params: BackendParams, strategy: Strategy = Strategy()):
    towers = strategy.resolutions(params.config.n_res)
    scores, tr = forward(a, params, towers=towers, utterance=strategy.uses_utterance, trace=True)
    total, _, dscores = loss(scores, labels, strategy)
    return total, backward(dscores, params, tr)


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-5
    halve_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


class Adam:
    def __init__(self, names, params: BackendParams, cfg: TrainConfig):
        self.names = list(names)
        self.cfg = cfg
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params: BackendParams, grads: dict, lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * g
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * g * g
            params[n] = params[n] - lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + c.eps)


def check_labels(labels: MultiResLabels, n_frames: int):
    if labels.frames.size != n_frames:
        raise ValueError(f"label length {labels.frames.size} does not match {n_frames} feature frames")


def train(dataset, params: BackendParams, cfg: TrainConfig = TrainConfig(), strategy: Strategy = Strategy(), log=None):
    """Adam on single-utterance batches; returns (trained params, per-epoch mean loss).

    Only tensors on the strategy's computation path are updated. The learning
    rate is halved every ``cfg.halve_every`` epochs.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    for a, labels in dataset:
        if labels is None:
            raise ValueError(f"strategy {strategy} needs labels for every trial")
        check_labels(labels, _as_frames(a).shape[0])
    params = params.copy()
    names = path_params(params, strategy)
    opt = Adam(names, params, cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 ** (epoch // cfg.halve_every) if cfg.halve_every else cfg.lr
        total = 0.0
        for i in rng.permutation(len(dataset)):
            a, labels = dataset[i]
            value, grads = loss_and_grads(a, labels, params, strategy)
            total += value
            if lr != 0.0:
                opt.step(params, grads, lr)
        history.append(total / len(dataset))
        if log is not None:
            log(epoch, history[-1], lr)
    params.check()
    return params, history


# --- checkpoint -----------------------------------------------------------------


def save_checkpoint(params: BackendParams, path, header: str = "") -> None:
    """Text header line, then magic, config, a shape table and little-endian float64 data."""
    cfg = params.config
    out = bytearray()
    out += (header.rstrip("\n") + "\n").encode() if header else b"#splicecm-checkpoint\n"
    out += CKPT_MAGIC + struct.pack("<HIIII", CKPT_VERSION, cfg.dim, cfg.n_blocks, cfg.kernel, cfg.n_res)
    names = params.names()
    out += struct.pack("<I", len(names))
    for name in names:
        arr = params[name]
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in names:
        out += np.ascontiguousarray(params[name], dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> BackendParams:
    data = Path(path).read_bytes()
    pos = data.index(b"\n") + 1
    if data[pos : pos + 4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, dim, n_blocks, kernel, n_res = struct.unpack_from("<HIIII", data, pos + 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 4 + struct.calcsize("<HIIII")
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + ln].decode()
        pos += 2 + ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return BackendParams(tensors, BackendConfig(dim, n_blocks, kernel, n_res))
