"""Plain-text ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

import hashlib
from pathlib import Path

from . import __version__

DEFAULTS = {
    "seed": "0",
    # forging
    "target_dbov": "-26",
    "sub_range": "1-3",
    "dur_tolerance": "0.2",
    "xfade_ms": "10",
    "search_ms": "40",
    "trials_per_target": "1",
    "total": "",
    "include_bonafide": "true",
    # features
    "n_ceps": "20",
    "deltas": "true",
    # training
    "epochs": "50",
    "lr": "1e-5",
    "halve_every": "10",
    "strategy": "multi",
    "n_blocks": "5",
    "kernel": "7",
    # evaluation
    "equalize_ratio_groups": "false",
}

# keys naming files or directories; excluded from the config hash so reruns in
# another directory produce identical headers
PATH_KEYS = {"pool", "out", "manifest", "labels", "wav_dir", "checkpoint", "scores", "list", "config", "jobs"}


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    cfg = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


class RunConfig(dict):
    """String-valued mapping with typed accessors."""

    @classmethod
    def build(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls(DEFAULTS)
        if path:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {path}")
            cfg.update(parse_text(p.read_text()))
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg[k] = str(v)
        return cfg

    def int(self, key) -> int:
        try:
            return int(self[key])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{key}: expected an integer") from exc

    def float(self, key) -> float:
        try:
            return float(self[key])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a number") from exc

    def bool(self, key) -> bool:
        v = self.get(key, "").lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off", ""):
            return False
        raise ConfigError(f"{key}: expected a boolean")

    def range(self, key) -> tuple[int, int]:
        v = self[key]
        lo, _, hi = v.partition("-")
        try:
            lo_i, hi_i = int(lo), int(hi or lo)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected LO-HI") from exc
        if not 0 <= lo_i <= hi_i:
            raise ConfigError(f"{key}: invalid range {v}")
        return lo_i, hi_i

    def path(self, key, must_exist: bool = True) -> Path:
        if not self.get(key):
            raise ConfigError(f"missing required setting: {key}")
        p = Path(self[key])
        if must_exist and not p.exists():
            raise ConfigError(f"{key}: path does not exist: {p}")
        return p

    def digest(self) -> str:
        items = sorted((k, v) for k, v in self.items() if k not in PATH_KEYS)
        text = "\n".join(f"{k}={v}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def header(self, kind: str = "splicecm") -> str:
        return f"#{kind} tool=splicecm-{__version__} config={self.digest()} seed={self.get('seed', '0')}"
