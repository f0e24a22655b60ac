"""End-to-end smoke tests for the training loop and the command line.

Everything runs in-process through cli.main with temp paths, on a small
config (4 identities, 2 epochs) so the whole module stays in the
seconds range.
"""

import csv
import os
from types import SimpleNamespace

import numpy as np
import pytest

from ccreid import cli
from ccreid.config import RunConfig
from ccreid.datagen import read_dataset
from ccreid.train import NumericAbort, train

SMOKE_KEYS = """
data.train_ids = 4
data.test_ids = 2
data.per_modality = 3
train.epochs = 2
train.iters_per_epoch = 2
train.batch_identities = 3
train.neg_ratio = 1
"""


def _write_config(path, extra=""):
    body = SMOKE_KEYS + extra
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(body)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cliwork")
    paths = {
        "dataset": str(root / "train.cmds"),
        "checkpoint": str(root / "model.ckpt"),
        "report": str(root / "report"),
    }
    paths["config"] = _write_config(
        root / "run.cfg",
        f"paths.dataset = {paths['dataset']}\n"
        f"paths.checkpoint = {paths['checkpoint']}\n"
        f"paths.report = {paths['report']}\n")
    rc = cli.main(["gen-data", "--ids", "4", "--per-modality", "3",
                   "--seed", "7", "--out", paths["dataset"]])
    assert rc == cli.EXIT_OK
    rc = cli.main(["train", "--config", paths["config"]])
    assert rc == cli.EXIT_OK
    return paths


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_report(workspace):
    assert os.path.exists(workspace["checkpoint"])
    csv_path = os.path.join(workspace["report"], "train_log.csv")
    with open(csv_path, newline="", encoding="utf-8") as fp:
        rows = list(csv.reader(fp))
    assert rows[0] == ["epoch", "lr", "pbce", "id", "total", "seconds"]
    assert len(rows) == 3  # header + one line per epoch
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    # epochs = 2 puts the drop after epoch 1
    assert float(rows[1][1]) == pytest.approx(0.1)
    assert float(rows[2][1]) == pytest.approx(0.01)
    png = os.path.join(workspace["report"], "loss_curves.png")
    assert os.path.getsize(png) > 1000


def test_train_generates_split_when_dataset_file_missing(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.train_ids = 2\n"
                   "data.test_ids = 2\n"
                   "data.per_modality = 2\n"
                   "train.epochs = 1\n"
                   "train.iters_per_epoch = 1\n"
                   "train.batch_identities = 2\n"
                   "train.neg_ratio = 1\n"
                   f"paths.dataset = {tmp_path / 'absent.cmds'}\n"
                   f"paths.checkpoint = {tmp_path / 'm.ckpt'}\n"
                   f"paths.report = {tmp_path / 'rep'}\n",
                   encoding="utf-8")
    assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "not found; generated 8 samples" in out
    assert os.path.exists(tmp_path / "m.ckpt")


def test_train_rejects_corrupt_dataset(tmp_path, capsys):
    bad = tmp_path / "bad.cmds"
    bad.write_bytes(b"not a dataset at all")
    cfg = _write_config(
        tmp_path / "run.cfg",
        f"paths.dataset = {bad}\n"
        f"paths.checkpoint = {tmp_path / 'm.ckpt'}\n"
        f"paths.report = {tmp_path / 'rep'}\n")
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_DATA
    assert "data error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort_exit_code(tmp_path, capsys):
    cfg = _write_config(
        tmp_path / "run.cfg",
        "train.lr = 1e300\n"
        f"paths.dataset = {tmp_path / 'absent.cmds'}\n"
        f"paths.checkpoint = {tmp_path / 'm.ckpt'}\n"
        f"paths.report = {tmp_path / 'rep'}\n")
    assert cli.main(["train", "--config", cfg]) == cli.EXIT_NUMERIC
    assert "numeric abort" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_function_abort_names_epoch_and_batch(tmp_path):
    cfg = RunConfig(train_ids=4, per_modality=3, batch_identities=3,
                    neg_ratio=1, epochs=1, iters_per_epoch=2, lr=1e300,
                    checkpoint_path=str(tmp_path / "m.ckpt"))
    with pytest.raises(NumericAbort, match=r"epoch 1, batch 1"):
        train(cfg)
    # the run aborted, so nothing may be checkpointed
    assert not os.path.exists(tmp_path / "m.ckpt")


def test_train_log_records_lr_schedule(tmp_path):
    cfg = RunConfig(train_ids=2, per_modality=2, batch_identities=2,
                    neg_ratio=1, epochs=3, iters_per_epoch=1, lr_drop_epoch=2,
                    checkpoint_path=str(tmp_path / "m.ckpt"))
    _model, _opt, log = train(cfg)
    assert [r.epoch for r in log.records] == [1, 2, 3]
    assert [r.lr for r in log.records] == [0.1, 0.1, pytest.approx(0.01)]
    assert log.final_total() == log.records[-1].total


# ---------------------------------------------------------------------------
# eval


def test_eval_both_modes_reports_and_costs(workspace, tmp_path, capsys):
    rep = str(tmp_path / "evalrep")
    rc = cli.main(["eval", "--config", workspace["config"], "--mode", "both",
                   "--report-dir", rep, "--threads", "1"])
    assert rc == cli.EXIT_OK
    out = capsys.readouterr().out
    # 2 held-out ids x 3 images per modality: 6 queries, 6 gallery
    assert "backbone_evals 12" in out
    assert "ccn_evals 0" in out
    assert "ccn_evals 36" in out
    for mode in ("simplified", "full"):
        for suffix in (".txt", "_cmc.csv", "_cmc.png"):
            assert os.path.exists(os.path.join(rep, f"eval_{mode}{suffix}"))
    with open(os.path.join(rep, "eval_full.txt"), encoding="utf-8") as fp:
        text = fp.read()
    assert "queries x gallery: 6 x 6" in text
    assert "ccn_evals: 36" in text


def test_eval_missing_checkpoint_is_data_error(workspace, tmp_path, capsys):
    rc = cli.main(["eval", "--config", workspace["config"],
                   "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--report-dir", str(tmp_path)])
    assert rc == cli.EXIT_DATA
    assert "data error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_first_id_offsets_labels(tmp_path):
    out = str(tmp_path / "held.cmds")
    rc = cli.main(["gen-data", "--ids", "2", "--per-modality", "3",
                   "--seed", "7", "--first-id", "5", "--out", out])
    assert rc == cli.EXIT_OK
    samples = read_dataset(out)
    assert len(samples) == 12
    assert {s.identity for s in samples} == {5, 6}


# ---------------------------------------------------------------------------
# config errors through the cli


def test_missing_config_file_is_config_error(tmp_path, capsys):
    rc = cli.main(["train", "--config", str(tmp_path / "nope.cfg")])
    assert rc == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_config_key_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.warp_speed = 9\n", encoding="utf-8")
    rc = cli.main(["eval", "--config", str(cfg)])
    assert rc == cli.EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck exit logic (the suite itself is exercised elsewhere)


def test_gradcheck_exit_codes(monkeypatch, capsys):
    def fake_suite(dtype, eps=None):
        return [SimpleNamespace(name="op_a", error=1e-9),
                SimpleNamespace(name="op_b", error=5e-4)]
    monkeypatch.setattr(cli, "run_suite", fake_suite)
    # 5e-4 passes the 32-bit tolerance but fails the 64-bit one
    assert cli.main(["gradcheck", "--width", "32"]) == cli.EXIT_OK
    out32 = capsys.readouterr().out
    assert "ok" in out32 and "FAIL" not in out32
    assert cli.main(["gradcheck", "--width", "64"]) == cli.EXIT_NUMERIC
    out64 = capsys.readouterr().out
    assert "FAIL" in out64
    assert "tolerance 1e-06" in out64


# ---------------------------------------------------------------------------
# inspection commands


def test_inspect_kernels_counts(capsys):
    assert cli.main(["inspect-kernels"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    # 8x4 map, 3x3 kernels, stride 1: both variants enumerate 6*2
    assert out.count("12 kernels") == 2

    assert cli.main(["inspect-kernels", "--stride-v", "2"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "plain grid: 6 kernels" in out
    assert "edge-snapped: 8 kernels" in out


def test_dump_contrast_writes_channel_files(workspace, tmp_path):
    out_dir = str(tmp_path / "contrast")
    rc = cli.main(["dump-contrast", "--config", workspace["config"],
                   "--out-dir", out_dir])
    assert rc == cli.EXIT_OK
    # default grid on the 8x4 common map gives 12 kernels per pair
    for tag in ("query", "gallery"):
        assert os.path.exists(os.path.join(out_dir, f"contrast_{tag}_ch00.csv"))
        assert os.path.exists(os.path.join(out_dir, f"contrast_{tag}_ch11.pgm"))
        assert os.path.exists(os.path.join(out_dir, f"contrast_{tag}_panel.png"))


def test_dump_contrast_index_out_of_range(workspace, tmp_path, capsys):
    rc = cli.main(["dump-contrast", "--config", workspace["config"],
                   "--query-index", "99", "--out-dir", str(tmp_path)])
    assert rc == cli.EXIT_DATA
    assert "out of range" in capsys.readouterr().err
