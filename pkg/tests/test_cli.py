import json

import numpy as np
import pytest

from cclm import autograd as ag
from cclm import checkpoint as ckpt
from cclm.cli import main
from cclm.gradcheck import PRIMITIVES
from conftest import TINY

SMALL = {
    **{f"model.{k}": v for k, v in TINY.to_dict().items()},
    "data.n_train": 24, "data.n_dev": 4, "data.n_test": 12, "data.n_parallel": 16,
    "pretrain.steps": 8, "pretrain.warmup_steps": 2, "pretrain.batch_size": 4, "pretrain.checkpoint_every": 2,
    "finetune.steps": 4, "finetune.warmup_steps": 1, "finetune.batch_size": 4,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.json"
    cfg.write_text(json.dumps(SMALL, indent=2))
    assert main(["gen-data", "--config", str(cfg), "--out", str(d / "corpus")]) == 0
    return d, cfg


def _train(d, cfg, out, *extra):
    return main(["train", "--config", str(cfg), "--corpus", str(d / "corpus"), "--out", str(out), *extra])


# ---------------------------------------------------------------- gen-data


def test_gen_data_is_reproducible_and_creates_dirs(workspace, tmp_path):
    d, cfg = workspace
    out = tmp_path / "nested" / "again"
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    a = json.loads((d / "corpus" / "manifest.json").read_text())
    b = json.loads((out / "manifest.json").read_text())
    assert a["digest"] == b["digest"]
    assert json.loads((out / "config.resolved.json").read_text())["data.n_train"] == 24


def test_malformed_config_names_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "seed": 0,\n  "data.n_train": 8,,\n}\n')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "line 3" in capsys.readouterr().err


# ---------------------------------------------------------------- train


def test_training_is_deterministic(workspace):
    d, cfg = workspace
    for run in ("r1", "r2"):
        assert _train(d, cfg, d / run) == 0
    assert (d / "r1" / "loss_log.tsv").read_text() == (d / "r2" / "loss_log.tsv").read_text()
    assert ckpt.checkpoint_digest(d / "r1" / "checkpoint") == ckpt.checkpoint_digest(d / "r2" / "checkpoint")
    assert len((d / "r1" / "loss_log.tsv").read_text().splitlines()) == 8


def test_resume_matches_uninterrupted_run(workspace):
    d, cfg = workspace
    if not (d / "r1").exists():
        assert _train(d, cfg, d / "r1") == 0
    out = d / "resumed"
    assert _train(d, cfg, out, "--stop-at", "3") == 0
    # the interrupted run leaves a loadable checkpoint at its last step
    _, state, meta = ckpt.load_checkpoint(out / "checkpoint")
    assert state.step == 3 and meta["step"] == 3
    assert _train(d, cfg, out, "--resume") == 0
    full = (d / "r1" / "loss_log.tsv").read_text().splitlines()
    resumed = (out / "loss_log.tsv").read_text().splitlines()
    assert resumed == full
    assert ckpt.checkpoint_digest(out / "checkpoint") == ckpt.checkpoint_digest(d / "r1" / "checkpoint")


def test_resume_truncates_log_after_checkpoint(workspace):
    d, cfg = workspace
    out = d / "crash"
    assert _train(d, cfg, out, "--stop-at", "4") == 0
    # a crash between checkpoint and log flush leaves extra lines behind
    with (out / "loss_log.tsv").open("a") as f:
        f.write("5\tcross_modal\t9\t9\t9\t27\t0.001\n")
    assert _train(d, cfg, out, "--resume") == 0
    steps = [int(l.split("\t")[0]) for l in (out / "loss_log.tsv").read_text().splitlines()]
    assert steps == list(range(1, 9))


def test_finetune_stage(workspace):
    d, cfg = workspace
    if not (d / "r1").exists():
        assert _train(d, cfg, d / "r1") == 0
    out = d / "ft"
    assert _train(d, cfg, out, "--stage", "finetune", "--init", str(d / "r1" / "checkpoint")) == 0
    lines = (out / "loss_log.tsv").read_text().splitlines()
    assert len(lines) == 4 and all(l.split("\t")[4] == "-" for l in lines)
    assert _train(d, cfg, d / "ft2", "--stage", "finetune") == 2


def test_mismatched_corpus_is_rejected(workspace, tmp_path):
    d, _ = workspace
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "seed": 9}))
    assert main(["train", "--config", str(other), "--corpus", str(d / "corpus"), "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------- eval and export


def test_eval_is_repeatable(workspace, capsys):
    d, cfg = workspace
    if not (d / "r1").exists():
        assert _train(d, cfg, d / "r1") == 0
    args = ["eval", "--checkpoint", str(d / "r1" / "checkpoint"), "--corpus", str(d / "corpus")]
    assert main(args + ["--out", str(d / "e1.json")]) == 0
    assert main(args + ["--out", str(d / "e2.json")]) == 0
    assert (d / "e1.json").read_text() == (d / "e2.json").read_text()
    report = json.loads((d / "e1.json").read_text())
    for dirs in report["recalls"].values():
        for r in dirs.values():
            assert r["1"] <= r["5"] <= r["10"]
    assert "L1" in capsys.readouterr().out


def test_eval_at_larger_resolution(workspace):
    d, cfg = workspace
    if not (d / "r1").exists():
        assert _train(d, cfg, d / "r1") == 0
    out = d / "e48.json"
    assert main(["eval", "--checkpoint", str(d / "r1" / "checkpoint"), "--corpus", str(d / "corpus"),
                 "--out", str(out), "--image-size", "48"]) == 0
    assert json.loads(out.read_text())["size"] == 12


def test_bad_checkpoint_path_fails(workspace, tmp_path):
    d, _ = workspace
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--corpus", str(d / "corpus"),
                 "--out", str(tmp_path / "e.json")]) != 0


def test_export_embeddings(workspace, tmp_path):
    d, cfg = workspace
    if not (d / "r1").exists():
        assert _train(d, cfg, d / "r1") == 0
    args = ["export-embeddings", "--checkpoint", str(d / "r1" / "checkpoint"), "--corpus", str(d / "corpus")]
    assert main(args + ["--out", str(tmp_path / "a.tsv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.tsv")]) == 0
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert lines[0].startswith("item_id\tmodality\tlanguage\texample_id\td0")
    assert len(lines) - 1 == 12 * (1 + 3)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_lists_every_primitive(workspace, capsys):
    _, cfg = workspace
    assert main(["gradcheck", "--config", str(cfg), "--coords", "1"]) == 0
    out = capsys.readouterr().out
    for name in PRIMITIVES:
        assert f"{name} " in out
    assert "total_loss[cross_lingual]" in out


def test_gradcheck_catches_a_broken_backward_rule(workspace, monkeypatch, capsys):
    _, cfg = workspace

    def broken_exp(a):
        a = ag.as_tensor(a)
        y = np.exp(a.data)
        return ag._make(y, (a,), lambda g: (0.5 * g * y,), "exp")

    monkeypatch.setattr(ag, "exp", broken_exp)
    assert main(["gradcheck", "--config", str(cfg), "--coords", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_unknown_ablation_is_an_argparse_error(workspace):
    d, cfg = workspace
    with pytest.raises(SystemExit):
        _train(d, cfg, d / "x", "--ablation", "bogus")
