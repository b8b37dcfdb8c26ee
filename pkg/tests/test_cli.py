from __future__ import annotations

import csv

import numpy as np
import pytest

from traceprop.cli import main
from traceprop.data import load_container
from traceprop.network import read_checkpoint

CFG = """input = 40
classes = 4
layers = dense:16, dense:12
epochs = 2
batch_size = 8
eta = 1e-3
readout_eta = 5e-2
units = 40
steps = 10
samples_per_class = 20
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(CFG)
    return path


def kv(line):
    return dict(part.split("=", 1) for part in line.split())


class TestTrainEval:
    def test_train_then_eval(self, cfg, tmp_path, capsys):
        ck, met = tmp_path / "a.ckpt", tmp_path / "out" / "train.txt"
        rc = main(["train", "--config", str(cfg), "--seed", "1", "--checkpoint-out", str(ck),
                   "--metrics-out", str(met), "--deterministic", "--silhouette"])
        assert rc == 0
        out = capsys.readouterr().out.splitlines()
        assert kv(out[-1])["status"] == "done"
        assert len(met.read_text().splitlines()) == 2
        assert (tmp_path / "out" / "train.csv").exists()
        assert (tmp_path / "out" / "train_training.png").stat().st_size > 0
        assert (tmp_path / "out" / "train_silhouette.png").exists()
        n_layers, tensors = read_checkpoint(ck)
        assert n_layers == 2 and len(tensors) == 4

        rc = main(["eval", "--config", str(cfg), "--checkpoint-in", str(ck),
                   "--metrics-out", str(tmp_path / "ev.txt")])
        assert rc == 0
        res = kv(capsys.readouterr().out.splitlines()[-1])
        assert float(res["accuracy"]) == pytest.approx(float(kv(out[-2])["accuracy"]))
        conf = np.loadtxt(tmp_path / "ev_confusion.csv", delimiter=",")
        assert conf.sum() == int(res["samples"])

    def test_deterministic_checkpoints(self, cfg, tmp_path):
        for name in ("x", "y"):
            assert main(["train", "--config", str(cfg), "--seed", "4", "--deterministic",
                         "--checkpoint-out", str(tmp_path / name)]) == 0
        assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()

    def test_finetune(self, cfg, tmp_path, capsys):
        ck = tmp_path / "a.ckpt"
        assert main(["train", "--config", str(cfg), "--checkpoint-out", str(ck)]) == 0
        shift = tmp_path / "shift.cfg"
        shift.write_text(CFG + "task = shift\n")
        rc = main(["finetune", "--config", str(shift), "--checkpoint-in", str(ck), "--k", "1,all",
                   "--epochs", "1", "--metrics-out", str(tmp_path / "ft.txt"),
                   "--checkpoint-out", str(tmp_path / "t.ckpt")])
        assert rc == 0
        lines = [kv(l) for l in capsys.readouterr().out.splitlines() if l.startswith("k=")]
        assert [l["k"] for l in lines] == ["1", "all"]
        assert all(float(l["forgetting"]) >= 0 for l in lines)
        assert (tmp_path / "ft_finetune.png").exists() and (tmp_path / "t.ckpt").exists()
        rows = list(csv.DictReader(open(tmp_path / "ft.csv")))
        assert len(rows) == 2

    def test_finetune_needs_checkpoint(self, cfg):
        assert main(["finetune", "--config", str(cfg)]) == 2


class TestCost:
    def test_sweep_csv(self, cfg, tmp_path):
        out = tmp_path / "cost.csv"
        rc = main(["cost", "--config", str(cfg), "--sweep-classes", "2,8,100",
                   "--sweep-batch", "4,8", "--out", str(out)])
        assert rc == 0
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 6
        for r in rows:
            B, O = int(r["batch"]), int(r["classes"])
            assert float(r["relative_memory_cost_approx"]) == pytest.approx((3 * B + O) / (4 * B), abs=1e-9)
        assert out.with_suffix(".png").exists()

    def test_bad_sweep(self, cfg):
        assert main(["cost", "--config", str(cfg), "--sweep-batch", "a,b"]) == 2


class TestGradcheck:
    def test_pass(self, tmp_path, capsys):
        rep = tmp_path / "g.csv"
        assert main(["gradcheck", "--instances", "10", "--seed", "2", "--h", "1e-5",
                     "--report", str(rep)]) == 0
        assert kv(capsys.readouterr().out.splitlines()[-1])["result"] == "pass"
        assert len(rep.read_text().splitlines()) == 4 + 10

    def test_fail_exit_code(self):
        assert main(["gradcheck", "--instances", "3", "--tol", "1e-14"]) == 4

    def test_bad_args(self):
        assert main(["gradcheck", "--instances", "0"]) == 2


class TestConvert:
    def test_convert(self, tmp_path):
        src = tmp_path / "ev.csv"
        src.write_text("sample,label,t_us,unit,polarity\n0,0,5,0,1\n0,0,6,0,1\n1,1,1200,1,1\n")
        out = tmp_path / "d.bin"
        assert main(["convert-events", str(src), str(out), "--window-us", "1000", "--steps", "2",
                     "--mode", "count", "--clip", "2"]) == 0
        d = load_container(out)
        assert d.data.shape == (2, 2, 2)
        np.testing.assert_allclose(d.data[0, 0], [1.0, 0.0])
        np.testing.assert_allclose(d.data[1, 1], [0.0, 0.5])

    def test_bad_event_file(self, tmp_path):
        src = tmp_path / "ev.csv"
        src.write_text("a,b\n1,2\n")
        assert main(["convert-events", str(src), str(tmp_path / "o"), "--window-us", "10",
                     "--steps", "2"]) == 3

    def test_bad_window(self, tmp_path):
        assert main(["convert-events", "x.csv", "o", "--window-us", "0", "--steps", "2"]) == 2


class TestExitCodes:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope")]) == 2
        assert main(["train"]) == 2

    def test_batch_one(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(CFG + "batch_size = 1\n")
        assert main(["train", "--config", str(p)]) == 2

    def test_bad_container(self, tmp_path, cfg):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXXXXX")
        assert main(["eval", "--config", str(cfg), "--data", str(bad)]) == 3

    def test_bad_checkpoint(self, tmp_path, cfg):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE")
        assert main(["eval", "--config", str(cfg), "--checkpoint-in", str(bad)]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(CFG + "eta = 1e300\nreadout_eta = 1e300\n")
        assert main(["train", "--config", str(p)]) == 4

    def test_unknown_command(self):
        assert main(["bogus"]) == 2
