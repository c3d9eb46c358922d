import csv
import json

import numpy as np
import pytest

import trisim.attention as att_mod
import trisim.tensor as T
from trisim.cli import main
from trisim.data import write_manifest
from trisim.encoder import write_block_stack

from conftest import tiny_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_matrix(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0][1:]
    return header, [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


@pytest.fixture
def workspace(tmp_path, capsys):
    cfg = tiny_config(**{"train.epochs": 2})
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert run(capsys, "gen-data", "--out", tmp_path / "data", "--pairs", 120, "--vocab", 12,
               "--min-len", 3, "--max-len", 6, "--seed", 3, "--quiet")[0] == 0
    return tmp_path


@pytest.fixture
def trained(workspace, capsys):
    code, out, _ = run(capsys, "train", "--config", workspace / "cfg.json", "--data", workspace / "data",
                       "--out", workspace / "run", "--quiet")
    assert code == 0, out
    return workspace


class TestGenData:
    def test_byte_identical_and_sizes(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--out", tmp_path / name, "--pairs", 2000, "--seed", 7)[0] == 0
        for split, n in (("train", 1600), ("val", 200), ("test", 200)):
            a = (tmp_path / "a" / f"{split}.jsonl").read_bytes()
            assert a == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
            assert a.count(b"\n") == n

    def test_too_few_pairs(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path / "d", "--pairs", 9)
        assert code == 1 and "pairs" in err
        assert not (tmp_path / "d").exists()


class TestTrainEval:
    def test_train_outputs(self, trained):
        run_dir = trained / "run"
        assert (run_dir / "checkpoint.tsc").read_bytes()[:4] == b"TSC1"
        rows = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2]

    def test_rerun_reproduces_log_and_checkpoint(self, trained, capsys):
        assert run(capsys, "train", "--config", trained / "cfg.json", "--data", trained / "data",
                   "--out", trained / "run2", "--quiet")[0] == 0
        for name in ("metrics.jsonl", "checkpoint.tsc"):
            assert (trained / "run" / name).read_bytes() == (trained / "run2" / name).read_bytes()

    def test_seed_flag_overrides(self, trained, capsys):
        assert run(capsys, "train", "--config", trained / "cfg.json", "--data", trained / "data",
                   "--out", trained / "run3", "--seed", 5, "--quiet")[0] == 0
        assert (trained / "run" / "checkpoint.tsc").read_bytes() != \
            (trained / "run3" / "checkpoint.tsc").read_bytes()

    def test_missing_key_writes_nothing(self, workspace, capsys):
        cfg = json.loads((workspace / "cfg.json").read_text())
        del cfg["fusion"]["d_dprime"]
        (workspace / "bad.json").write_text(json.dumps(cfg))
        code, _, err = run(capsys, "train", "--config", workspace / "bad.json", "--data", workspace / "data",
                           "--out", workspace / "nope")
        assert code == 1 and "fusion.d_dprime" in err
        assert not (workspace / "nope").exists()

    def test_missing_data_is_data_error(self, workspace, capsys):
        code, _, _ = run(capsys, "train", "--config", workspace / "cfg.json", "--data", workspace / "void",
                         "--out", workspace / "r")
        assert code == 2

    def test_eval(self, trained, capsys):
        code, out, _ = run(capsys, "eval", "--checkpoint", trained / "run" / "checkpoint.tsc",
                           "--data", trained / "data", "--split", "val")
        metrics = json.loads(out)
        assert code == 0 and 0 <= metrics["accuracy"] <= 1 and metrics["loss"] >= 0

    def test_eval_config_mismatch(self, trained, capsys):
        cfg = json.loads((trained / "cfg.json").read_text())
        cfg["head"]["hidden"] = 9
        (trained / "other.json").write_text(json.dumps(cfg))
        code, _, err = run(capsys, "eval", "--checkpoint", trained / "run" / "checkpoint.tsc",
                           "--data", trained / "data", "--config", trained / "other.json")
        assert code == 2 and "does not match" in err

    def test_usage_errors(self, capsys):
        assert run(capsys, "frobnicate")[0] == 1
        assert run(capsys, "train", "--data", "x")[0] == 1
        assert run(capsys)[0] == 1


class TestDumpSim:
    def test_matrices(self, trained, capsys):
        out = trained / "sim"
        code, _, _ = run(capsys, "dump-sim", "--checkpoint", trained / "run" / "checkpoint.tsc",
                         "--data", trained / "data", "--split", "test", "--index", 0, "--out", out)
        assert code == 0
        N = 2 * 6
        for name in ("scores", "map_x", "map_y"):
            header, labels, m = read_matrix(out / f"{name}.csv")
            assert m.shape == (N, N) and len(header) == N
            assert header[0].endswith("h0_l0") and header[-1].endswith("h1_l5")
        np.testing.assert_allclose(read_matrix(out / "map_x.csv")[2].sum(axis=0), 1, atol=1e-6)
        np.testing.assert_allclose(read_matrix(out / "map_y.csv")[2].sum(axis=0), 1, atol=1e-6)

    def test_identical_pair_symmetric(self, trained, capsys):
        x = np.random.default_rng(0).standard_normal((2, 6, 8)).astype(np.float32)
        write_block_stack(trained / "x.tsb", x)
        code, _, _ = run(capsys, "dump-sim", "--checkpoint", trained / "run" / "checkpoint.tsc",
                         "--pair", trained / "x.tsb", trained / "x.tsb", "--out", trained / "sym")
        assert code == 0
        s = read_matrix(trained / "sym" / "scores.csv")[2]
        np.testing.assert_allclose(s, s.T, rtol=1e-6, atol=1e-6)

    def test_incompatible_pair(self, trained, capsys):
        write_block_stack(trained / "bad.tsb", np.zeros((2, 5, 8), np.float32))
        code, _, err = run(capsys, "dump-sim", "--checkpoint", trained / "run" / "checkpoint.tsc",
                           "--pair", trained / "bad.tsb", trained / "bad.tsb", "--out", trained / "o")
        assert code == 2 and "incompatible" in err

    def test_needs_a_pair(self, trained, capsys):
        assert run(capsys, "dump-sim", "--checkpoint", trained / "run" / "checkpoint.tsc",
                   "--out", trained / "o")[0] == 1


class TestFileMode:
    def test_manifest_training(self, tmp_path, capsys):
        cfg = tiny_config(**{"encoder.mode": "file", "train.epochs": 1})
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        rng = np.random.default_rng(0)
        data = tmp_path / "emb"
        data.mkdir()
        for split in ("train", "val", "test"):
            rows = []
            for i in range(6):
                for side in ("x", "y"):
                    write_block_stack(data / f"{split}{i}{side}.tsb",
                                      rng.standard_normal((2, 6, 8)).astype(np.float32))
                rows.append((f"{split}{i}x.tsb", f"{split}{i}y.tsb", i % 2))
            write_manifest(data / f"{split}.csv", rows)
        assert run(capsys, "train", "--config", tmp_path / "cfg.json", "--data", data,
                   "--out", tmp_path / "run", "--quiet")[0] == 0
        write_block_stack(data / "test0x.tsb", np.zeros((2, 6, 7), np.float32))
        assert run(capsys, "eval", "--checkpoint", tmp_path / "run" / "checkpoint.tsc", "--data", data)[0] == 2


class TestExperiments:
    def test_ablate_rows(self, workspace, capsys):
        code, out, _ = run(capsys, "ablate", "--config", workspace / "cfg.json", "--data", workspace / "data",
                           "--grid", "pooling:sa,rfm:sa,rfm:sa+fa3", "--seeds", 1, "--bench-reps", 1,
                           "--out", workspace / "abl")
        assert code == 0
        rows = list(csv.DictReader(open(workspace / "abl" / "ablation.csv")))
        assert [r["cell"] for r in rows] == ["pooling:sa", "rfm:sa", "rfm:sa+fa3"]
        assert int(rows[1]["params"]) > int(rows[0]["params"])
        assert "rfm>=pooling [sa]" in out

    def test_ablate_unknown_cell(self, workspace, capsys):
        code, _, err = run(capsys, "ablate", "--config", workspace / "cfg.json", "--data", workspace / "data",
                           "--grid", "rfm:sa,rfm:bogus")
        assert code == 1 and "bogus" in err

    def test_robust_rows(self, workspace, capsys):
        code, out, _ = run(capsys, "robust", "--config", workspace / "cfg.json", "--data", workspace / "data",
                           "--seeds", 1, "--out", workspace / "rob")
        assert code == 0
        rows = list(csv.DictReader(open(workspace / "rob" / "robust.csv")))
        assert len(rows) == 8
        assert {r["adaptive"] for r in rows if r["cell"].startswith("FE:")} == {"False"}
        assert "AFE across-strategy spread" in out

    def test_bench_grid(self, workspace, capsys):
        code, out, _ = run(capsys, "bench", "--config", workspace / "cfg.json", "--data", workspace / "data",
                           "--repetitions", 1, "--out", workspace / "b")
        assert code == 0
        rows = list(csv.DictReader(open(workspace / "b" / "bench.csv")))
        assert len(rows) == 8 and all(float(r["ms_per_pair"]) > 0 for r in rows)


def flip_backward(fn):
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        if out._backward is not None:
            inner = out._backward
            out._backward = lambda g: tuple(-v for v in inner(g))
        return out
    return wrapped


class TestGradcheckCommand:
    def test_passes(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gradcheck", "--out", tmp_path)
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
        kinds = {r["kind"] for r in rows}
        assert kinds == {"primitive", "module", "model"}
        names = [r["check"] for r in rows]
        for expected in ("affine", "conv2d_dilated[r=2]", "instance_norm", "afe", "sa", "fa3", "rfm",
                         "classify_head", "model[fa3+rfm]", "model[fa1+pooling]"):
            assert expected in names
        assert all(r["status"] == "pass" for r in rows)

    def test_wrong_sign_primitive(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(T, "sigmoid", flip_backward(T.sigmoid))
        (tmp_path / "cfg.json").write_text(json.dumps(tiny_config()))
        code, _, err = run(capsys, "gradcheck", "--config", tmp_path / "cfg.json")
        assert code == 3 and "sigmoid" in err

    def test_wrong_sign_module(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(att_mod, "softmax", flip_backward(att_mod.softmax))
        (tmp_path / "cfg.json").write_text(json.dumps(tiny_config()))
        code, _, err = run(capsys, "gradcheck", "--config", tmp_path / "cfg.json")
        failed = [name.strip() for name in err.split(":")[-1].split(",")]
        assert code == 3 and "sa" in failed and "sigmoid" not in failed
