import numpy as np
import pytest

from splicecm.audio_io import read_wav
from splicecm.backend import BackendConfig, BackendParams, forward, load_checkpoint
from splicecm.cli import format_score_line, main, read_manifest, read_scores
from splicecm.features import lfcc
from splicecm.forge import rle_to_mask
from splicecm.labeling import build_multires, read_label_file
from splicecm.synthetic import make_pool_entries, write_pool


def _run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pool(tmp_path_factory):
    d = tmp_path_factory.mktemp("pool")
    return write_pool(d, make_pool_entries(5, n_speakers=2, bona_per_speaker=3, spoof_per_speaker=3, duration_range=(1.0, 1.6)))


@pytest.fixture(scope="module")
def run(pool, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert _run("forge", "--pool", pool, "--out", d, "--seed", 4, "--jobs", 1) == 0
    assert _run("label", "--manifest", d / "manifest.tsv", "--out", d / "labels.txt", "--seed", 4) == 0
    assert _run("train", "--labels", d / "labels.txt", "--wav-dir", d / "wav", "--out", d / "model",
                "--epochs", 3, "--lr", 1e-3, "--seed", 4) == 0
    assert _run("score", "--checkpoint", d / "model" / "checkpoint.bin", "--wav-dir", d / "wav",
                "--list", d / "labels.txt", "--out", d / "scores.txt", "--seed", 4, "--jobs", 1) == 0
    assert _run("eval", "--scores", d / "scores.txt", "--labels", d / "labels.txt",
                "--manifest", d / "manifest.tsv", "--out", d / "eval", "--seed", 4) == 0
    return d


def test_outputs_carry_header(run):
    files = ["manifest.tsv", "labels.txt", "model/loss.log", "model/checkpoint.bin", "scores.txt", "eval/report.txt", "eval/report.tsv"]
    for name in files:
        first = (run / name).read_bytes().split(b"\n", 1)[0].decode()
        assert first.startswith("#") and "tool=splicecm-0.1.0" in first and "seed=4" in first, name
        assert "config=" in first


def test_labels_rederived_from_masks(run):
    labels = read_label_file(run / "labels.txt")
    recs = read_manifest(run / "manifest.tsv")
    assert set(labels) == {r.trial_id for r in recs}
    for r in recs:
        mask = rle_to_mask((run / "masks" / f"{r.trial_id}.rle").read_text())
        assert mask.size == len(read_wav(run / "wav" / f"{r.trial_id}.wav"))
        assert labels[r.trial_id] == build_multires(mask)
        assert labels[r.trial_id].utterance == (r.cls == "spoof")


def test_scores_match_in_process_forward(run):
    params = load_checkpoint(run / "model" / "checkpoint.bin")
    lines = [l for l in (run / "scores.txt").read_text().splitlines() if not l.startswith("#")]
    scores = read_scores(run / "scores.txt")
    for line in lines:
        tid = line.split("\t", 1)[0]
        feats = lfcc(read_wav(run / "wav" / f"{tid}.wav"), align_to_labels=True)
        s = forward(feats, params)
        assert format_score_line(tid, s) == line
        n = feats.n_frames
        for k in range(6):
            assert scores[tid].at(k).size == -(-n // 2**k)


def test_loss_log_decreases(run):
    rows = [l.split("\t") for l in (run / "model" / "loss.log").read_text().splitlines() if not l.startswith("#")]
    losses = [float(r[2]) for r in rows]
    assert len(losses) == 3 and all(b < a for a, b in zip(losses, losses[1:]))


def test_reports(run):
    tsv = [l for l in (run / "eval" / "report.tsv").read_text().splitlines() if not l.startswith("#")]
    metrics = {l.split("\t")[0] for l in tsv}
    assert {"eer", "loo_delta", "boundary_eer", "ratio_eer"} <= metrics
    assert all(len(l.split("\t")) == 3 for l in tsv)
    assert "EER (%)" in (run / "eval" / "report.txt").read_text()


def test_forge_rerun_identical(pool, run, tmp_path):
    assert _run("forge", "--pool", pool, "--out", tmp_path, "--seed", 4, "--jobs", 2) == 0
    assert (tmp_path / "manifest.tsv").read_bytes() == (run / "manifest.tsv").read_bytes()
    for wav in (run / "wav").iterdir():
        assert (tmp_path / "wav" / wav.name).read_bytes() == wav.read_bytes()


def test_score_jobs_independent(run, tmp_path):
    assert _run("score", "--checkpoint", run / "model" / "checkpoint.bin", "--wav-dir", run / "wav",
                "--list", run / "labels.txt", "--out", tmp_path / "s.txt", "--seed", 4, "--jobs", 3) == 0
    assert (tmp_path / "s.txt").read_bytes() == (run / "scores.txt").read_bytes()


def test_forge_total_respected(pool, tmp_path):
    assert _run("forge", "--pool", pool, "--out", tmp_path, "--seed", 4, "--jobs", 1,
                "--set", "total=5", "--set", "include_bonafide=false") == 0
    recs = read_manifest(tmp_path / "manifest.tsv")
    assert 0 < len(recs) <= 5


def test_empty_spoof_pool(tmp_path, capsys):
    entries = [e for e in make_pool_entries(1, 2, 2, 0, duration_range=(1.0, 1.2))]
    proto = write_pool(tmp_path / "pool", entries)
    assert _run("forge", "--pool", proto, "--out", tmp_path / "out", "--jobs", 1) != 0
    assert "no admissible segment" in capsys.readouterr().err


def test_zero_lr_is_noop(run, tmp_path):
    assert _run("train", "--labels", run / "labels.txt", "--wav-dir", run / "wav", "--out", tmp_path,
                "--epochs", 1, "--lr", 0, "--seed", 9) == 0
    p = load_checkpoint(tmp_path / "checkpoint.bin")
    init = BackendParams.init(BackendConfig(), 9)
    for n in init.trainable():
        np.testing.assert_array_equal(p[n], init[n])


def test_single_strategy_rejects_missing_labels(run, tmp_path, capsys):
    lines = (run / "labels.txt").read_text().splitlines()
    # keep the utterance label but drop the segment labels of one trial
    first = next(i for i, l in enumerate(lines) if not l.startswith("#"))
    lines[first] = "\t".join(lines[first].split("\t")[:2])
    (tmp_path / "labels.txt").write_text("\n".join(lines) + "\n")
    code = _run("train", "--labels", tmp_path / "labels.txt", "--wav-dir", run / "wav", "--out", tmp_path / "m",
                "--epochs", 1, "--strategy", "single:2")
    assert code == 2 and "segment labels" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 1
    assert _run("forge", "--out", tmp_path) == 1
    assert _run("forge", "--config", tmp_path / "missing.cfg", "--out", tmp_path) == 1
    assert _run("forge", "--pool", tmp_path / "nope.tsv", "--out", tmp_path) == 1
    assert _run("train", "--labels", tmp_path, "--wav-dir", tmp_path, "--out", tmp_path, "--set", "oops") == 1


def test_config_file_and_override(pool, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# forge settings\npool = {pool}\nseed = 4\nsub_range = 1-1\n")
    assert _run("forge", "--config", cfg, "--out", tmp_path / "a", "--jobs", 1) == 0
    assert _run("forge", "--config", cfg, "--out", tmp_path / "b", "--jobs", 1, "--seed", 5) == 0
    ha = (tmp_path / "a" / "manifest.tsv").read_text().splitlines()[0]
    hb = (tmp_path / "b" / "manifest.tsv").read_text().splitlines()[0]
    assert "seed=4" in ha and "seed=5" in hb
    for r in read_manifest(tmp_path / "a" / "manifest.tsv"):
        assert len(r.substitutions) <= 1
