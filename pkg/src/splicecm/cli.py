"""Batch command line: ``splicecm {forge,label,train,score,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import RESOLUTIONS_MS
from .audio_io import NoActiveSpeech, WavFormatError, read_wav, write_wav
from .backend import (
    BackendConfig,
    BackendParams,
    ScoreSet,
    Strategy,
    TrainConfig,
    forward,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .config import ConfigError, RunConfig
from .features import LFCCConfig, lfcc
from .forge import (
    MANIFEST_COLUMNS,
    ForgeParams,
    NoAdmissibleSegment,
    mask_to_rle,
    manifest_row,
    parse_manifest_row,
    rle_to_mask,
)
from .labeling import LABEL_HEADER, build_multires, format_label_line, read_label_file
from .metrics import (
    ScoredTrial,
    boundary_breakdown,
    format_table,
    leave_one_out,
    machine_lines,
    ratio_group_eer,
    res_key,
    segment_eer,
    utterance_eer,
)
from .pipeline import bonafide_trials, forge_corpus, prepare_pool

log = logging.getLogger("splicecm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class InvariantError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


# --- file helpers ---------------------------------------------------------------


def read_pool_protocol(path: Path):
    """Rows: utterance_id speaker_id class method_id wav_path (relative to the protocol file)."""
    records = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 5:
            raise ValueError(f"pool protocol row needs 5 fields: {line!r}")
        wav = Path(f[4])
        wav = wav if wav.is_absolute() else path.parent / wav
        records.append({"utterance_id": f[0], "speaker_id": f[1], "class": f[2], "method_id": f[3], "waveform": read_wav(wav)})
    return records


def read_manifest(path: Path):
    rows = [line for line in path.read_text().splitlines() if line and not line.startswith("#")]
    return [parse_manifest_row(r) for r in rows]


def lfcc_config(cfg: RunConfig) -> LFCCConfig:
    return LFCCConfig(n_ceps=cfg.int("n_ceps"), deltas=cfg.bool("deltas"))


def trial_features(wav_dir: Path, trial_id: str, fcfg: LFCCConfig):
    return lfcc(read_wav(wav_dir / f"{trial_id}.wav"), fcfg, align_to_labels=True)


def format_score_line(trial_id: str, s: ScoreSet) -> str:
    fields = [trial_id, f"{s.utterance:.6f}" if s.utterance is not None else "nan"]
    for k, r in enumerate(RESOLUTIONS_MS):
        if s.segments[k] is not None:
            fields.append(f"{r}=" + ",".join(f"{v:.6f}" for v in s.segments[k]))
    return "\t".join(fields)


def parse_score_line(line: str) -> tuple[str, ScoreSet]:
    f = line.rstrip("\n").split("\t")
    segs: list = [None] * len(RESOLUTIONS_MS)
    for field in f[2:]:
        r, vals = field.split("=", 1)
        segs[RESOLUTIONS_MS.index(int(r))] = np.array([float(v) for v in vals.split(",")])
    utt = None if f[1] == "nan" else float(f[1])
    return f[0], ScoreSet(segs, utt)


def read_scores(path: Path) -> dict[str, ScoreSet]:
    out = {}
    for line in path.read_text().splitlines():
        if line and not line.startswith("#"):
            tid, s = parse_score_line(line)
            out[tid] = s
    return out


# --- commands -------------------------------------------------------------------


def cmd_forge(cfg: RunConfig, jobs: int) -> None:
    pool_path = cfg.path("pool")
    out = cfg.path("out", must_exist=False)
    seed = cfg.int("seed")
    params = ForgeParams(
        dur_tolerance=cfg.float("dur_tolerance"),
        xfade_ms=cfg.float("xfade_ms"),
        search_ms=cfg.float("search_ms"),
        n_sub_range=cfg.range("sub_range"),
    )
    pool = prepare_pool(read_pool_protocol(pool_path), cfg.float("target_dbov"))
    if not len(pool):
        raise NoAdmissibleSegment("no admissible segment: empty pool")
    total = cfg.int("total") if cfg.get("total") else None
    trials = forge_corpus(pool, seed, params, cfg.int("trials_per_target"), total, jobs)
    if cfg.bool("include_bonafide"):
        trials = sorted(trials + bonafide_trials(pool), key=lambda t: t.trial_id)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    lines = [cfg.header(), "#" + "\t".join(MANIFEST_COLUMNS)]
    for t in trials:
        if t.provenance.mask.size != len(t.waveform):
            raise InvariantError(f"{t.trial_id}: mask length differs from waveform length")
        write_wav(t.waveform, out / "wav" / f"{t.trial_id}.wav")
        (out / "masks" / f"{t.trial_id}.rle").write_text(mask_to_rle(t.provenance.mask))
        lines.append(manifest_row(t))
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    clipped = sum(t.clipped for t in trials)
    log.info("forged %d trials (%d from clipped sources) into %s", len(trials), clipped, out)


def cmd_label(cfg: RunConfig) -> None:
    manifest = cfg.path("manifest")
    out = cfg.path("out", must_exist=False)
    masks = manifest.parent / "masks"
    lines = [LABEL_HEADER + " " + cfg.header("").lstrip("# ")]
    for rec in read_manifest(manifest):
        mask = rle_to_mask((masks / f"{rec.trial_id}.rle").read_text())
        labels = build_multires(mask)
        if labels.utterance != (rec.cls == "spoof"):
            raise InvariantError(f"{rec.trial_id}: mask disagrees with manifest class")
        lines.append(format_label_line(rec.trial_id, labels))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")


def _dataset(cfg: RunConfig, labels: dict, wav_dir: Path):
    fcfg = lfcc_config(cfg)
    data = []
    for tid in sorted(labels):
        feats = trial_features(wav_dir, tid, fcfg)
        if feats.n_frames != labels[tid].frames.size:
            raise ValueError(f"{tid}: {feats.n_frames} feature frames vs {labels[tid].frames.size} labels")
        data.append((feats, labels[tid]))
    return data


def cmd_train(cfg: RunConfig) -> None:
    labels = read_label_file(cfg.path("labels"))
    wav_dir = cfg.path("wav_dir")
    out = cfg.path("out", must_exist=False)
    strategy = Strategy.parse(cfg["strategy"])
    data = _dataset(cfg, labels, wav_dir)
    seed = cfg.int("seed")
    bcfg = BackendConfig(dim=lfcc_config(cfg).dim, n_blocks=cfg.int("n_blocks"), kernel=cfg.int("kernel"))
    params = BackendParams.init(bcfg, seed)
    params.set_normalization(np.vstack([a.frames for a, _ in data]))
    tcfg = TrainConfig(epochs=cfg.int("epochs"), lr=cfg.float("lr"), halve_every=cfg.int("halve_every"), seed=seed)
    log_lines = [cfg.header(), "#epoch\tlr\tloss"]

    def record(epoch, value, lr):
        log_lines.append(f"{epoch}\t{lr:.6g}\t{value:.6f}")
        log.info("epoch %d lr %.3g loss %.6f", epoch, lr, value)

    params, _ = train(data, params, tcfg, strategy, record)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.bin", header=cfg.header("splicecm-checkpoint v1"))
    (out / "loss.log").write_text("\n".join(log_lines) + "\n")


def _score_one(args):
    params, wav_dir, tid, fcfg = args
    return tid, forward(trial_features(wav_dir, tid, fcfg), params)


def cmd_score(cfg: RunConfig, jobs: int) -> None:
    params = load_checkpoint(cfg.path("checkpoint"))
    wav_dir = cfg.path("wav_dir")
    out = cfg.path("out", must_exist=False)
    list_path = cfg.path("list")
    if list_path.suffix == ".tsv":
        ids = [r.trial_id for r in read_manifest(list_path)]
    else:
        ids = list(read_label_file(list_path))
    fcfg = lfcc_config(cfg)
    if fcfg.dim != params.config.dim:
        raise ValueError(f"feature dim {fcfg.dim} does not match checkpoint dim {params.config.dim}")
    tasks = [(params, wav_dir, tid, fcfg) for tid in sorted(ids)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_score_one, tasks))
    else:
        results = [_score_one(t) for t in tasks]
    lines = [cfg.header()] + [format_score_line(tid, s) for tid, s in sorted(results)]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")


def build_scored_set(scores: dict, labels: dict, manifest=None) -> list[ScoredTrial]:
    meta = {r.trial_id: r for r in (manifest or [])}
    trials = []
    for tid in sorted(scores):
        if tid not in labels:
            raise ValueError(f"no labels for scored trial {tid}")
        rec = meta.get(tid)
        trials.append(
            ScoredTrial(
                tid,
                scores[tid],
                labels[tid],
                rec.methods if rec else frozenset(),
                rec.boundaries if rec else (),
                rec.ratio_level if rec else 0,
            )
        )
    return trials


def evaluation_report(trials, cfg: RunConfig, analyses=("eer", "loo", "boundary", "ratio")) -> tuple[str, str]:
    """Plain-text and machine-readable reports for a scored trial set."""
    text, machine = [], []
    n_res = len(RESOLUTIONS_MS)
    available = [k for k in range(n_res) if all(t.scores.segments[k] is not None for t in trials)]
    has_utt = all(t.scores.utterance is not None for t in trials)
    levels = (["utt"] if has_utt else []) + available

    def safe(fn, *a):
        try:
            return fn(*a)
        except ValueError as exc:
            log.warning("skipped: %s", exc)
            return None

    if "eer" in analyses:
        rows = {}
        for k in levels:
            v = safe(utterance_eer, trials) if k == "utt" else safe(segment_eer, trials, k)
            if v is not None:
                rows[res_key(k)] = v
        text.append(format_table("EER (%)", rows))
        machine.append(machine_lines("eer", rows))
    if "loo" in analyses:
        methods = sorted(set().union(*[t.methods for t in trials])) if trials else []
        rows = {}
        for m in methods:
            for k in levels:
                r = safe(leave_one_out, trials, m, None if k == "utt" else k)
                if r is not None:
                    rows[f"{m}@{res_key(k)}"] = r.delta
        text.append(format_table("Leave-one-out EER change (percentage points)", rows, "{:+.2f}"))
        machine.append(machine_lines("loo_delta", rows))
    if "boundary" in analyses:
        rows = {}
        for k in available:
            res = safe(boundary_breakdown, trials, k)
            for bucket, v in (res or {}).items():
                rows[f"{res_key(k)}:{bucket}"] = v
        text.append(format_table("EER by concatenation boundaries in segment (%)", rows))
        machine.append(machine_lines("boundary_eer", rows))
    if "ratio" in analyses and has_utt:
        rng = np.random.default_rng(cfg.int("seed"))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = safe(ratio_group_eer, trials, cfg.bool("equalize_ratio_groups"), rng) or {}
        for w in caught:
            log.warning("%s", w.message)
        rows = {str(k): v for k, v in res.items()}
        text.append(format_table("Utterance EER by intra-ratio level (%)", rows))
        machine.append(machine_lines("ratio_eer", rows))
    header = cfg.header() + "\n"
    return header + "\n".join(text), header + "".join(machine)


def cmd_eval(cfg: RunConfig, analyses) -> None:
    scores = read_scores(cfg.path("scores"))
    labels = read_label_file(cfg.path("labels"))
    manifest = read_manifest(cfg.path("manifest")) if cfg.get("manifest") else None
    trials = build_scored_set(scores, labels, manifest)
    out = cfg.path("out", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    text, machine = evaluation_report(trials, cfg, analyses)
    (out / "report.txt").write_text(text)
    (out / "report.tsv").write_text(machine)


# --- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "out", "pool", "manifest", "labels", "wav_dir", "checkpoint", "scores", "list", "strategy", "epochs", "lr"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = _Parser(prog="splicecm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("forge", parents=[common], help="build partially spoofed trials from a pool")
    p.add_argument("--pool", help="pool protocol file")
    p = sub.add_parser("label", parents=[common], help="write multi-resolution labels for a manifest")
    p.add_argument("--manifest")
    p = sub.add_parser("train", parents=[common], help="train the back-end")
    p.add_argument("--labels")
    p.add_argument("--wav-dir", dest="wav_dir")
    p.add_argument("--strategy", help="multi | single:K | utterance")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p = sub.add_parser("score", parents=[common], help="score trials with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--wav-dir", dest="wav_dir")
    p.add_argument("--list", help="label file or manifest listing the trials")
    p = sub.add_parser("eval", parents=[common], help="EER reports and breakdowns")
    p.add_argument("--scores")
    p.add_argument("--labels")
    p.add_argument("--manifest")
    p.add_argument("--analyses", default="eer,loo,boundary,ratio")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.build(args.config, _overrides(args))
        jobs = max(1, args.jobs)
        if args.command == "forge":
            cmd_forge(cfg, jobs)
        elif args.command == "label":
            cmd_label(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "score":
            cmd_score(cfg, jobs)
        elif args.command == "eval":
            cmd_eval(cfg, tuple(a.strip() for a in args.analyses.split(",")))
    except (ConfigError, UsageError) as exc:
        print(f"splicecm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoAdmissibleSegment as exc:
        print(f"splicecm: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantError, AssertionError) as exc:
        print(f"splicecm: internal invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (WavFormatError, NoActiveSpeech, ValueError, KeyError, OSError) as exc:
        print(f"splicecm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
