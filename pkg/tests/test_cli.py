import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dacd import cli
from dacd.data import read_label_map, read_raster, write_raster
from dacd.evaluation import metrics_report
from dacd.network import load_checkpoint

SMALL = {
    "seed": 7,
    "network": {"patch_size": 5, "conv_widths": [4, 4], "dense_widths": [8, 6]},
    "train": {"epochs": 2, "batch_size": 16, "lam": 1.0},
    "sampling": {"finetune_count": 40},
    "finetune": {"epochs": 30},
    "synth": {"height": 40, "width": 40, "blob_scale": 4.0, "changed_blobs": 3, "changed_fraction": 0.15},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "paths": {"data_dir": str(root / "data")}}))
    assert run("synth", "--config", cfg, "--out", root / "data") == 0
    return root, cfg


def files(directory):
    return sorted(os.listdir(directory))


class TestSynth:
    def test_file_set(self, workspace):
        root, _ = workspace
        names = files(root / "data")
        assert len([n for n in names if n.endswith(".mtr")]) == 6
        assert len([n for n in names if n.endswith(".json")]) == 1
        assert not [n for n in names if n.endswith(".partial")]

    def test_rerun_identical(self, workspace, tmp_path):
        root, cfg = workspace
        assert run("synth", "--config", cfg, "--out", tmp_path) == 0
        for name in files(tmp_path):
            assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()

    def test_seed_flag(self, workspace, tmp_path):
        _, cfg = workspace
        assert run("synth", "--config", cfg, "--seed", 8, "--out", tmp_path) == 0
        assert json.loads((tmp_path / "synth_spec.json").read_text())["seed"] == 8

    def test_zero_extent_writes_nothing(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"synth": {"height": 0}}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1
        assert not (tmp_path / "out").exists()

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"lamda": 1.0}}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1
        cfg.write_text(json.dumps({"extra": 1}))
        assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1

    def test_bad_json_and_missing_config(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert run("synth", "--config", cfg, "--out", tmp_path / "out") == 1
        assert run("synth", "--config", tmp_path / "missing.json", "--out", tmp_path / "out") == 2

    def test_bad_arguments(self, tmp_path):
        assert run("synth") == 1
        assert run("train", "--mode", "v9", "--out", tmp_path) == 1
        assert run("synth", "--seed", -1, "--out", tmp_path) == 1


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    out = {}
    for mode in ("dsdanet", "v1", "v2"):
        assert run("train", "--config", cfg, "--mode", mode, "--out", root / f"train_{mode}") == 0
        out[mode] = root / f"train_{mode}"
    return out


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestTrain:
    def test_outputs(self, trained):
        assert files(trained["dsdanet"]) == ["checkpoint.dsda", "config.json", "train_log.jsonl"]

    def test_dsdanet_log(self, trained):
        log = read_log(trained["dsdanet"] / "train_log.jsonl")
        assert len(log) == 2
        assert all(rec["cd_loss"] >= 0 and rec["mode"] == "dsdanet" for rec in log)
        assert all(abs(rec["total"] - rec["cd_loss"] - sum(rec["mmd_penalties"])) < 1e-9 for rec in log)

    def test_v1_log(self, trained):
        log = read_log(trained["v1"] / "train_log.jsonl")
        assert all(rec["mmd_penalties"] == [0.0, 0.0] for rec in log)

    def test_resolved_config(self, trained):
        cfg = json.loads((trained["v2"] / "config.json").read_text())
        assert cfg["train"]["mode"] == "dscnet_v2"
        assert cfg["synth"]["height"] == 40 and cfg["network"]["bands"] == 4

    def test_identical_checkpoint_bytes(self, workspace, trained, tmp_path):
        _, cfg = workspace
        assert run("train", "--config", cfg, "--mode", "dsdanet", "--out", tmp_path) == 0
        assert (tmp_path / "checkpoint.dsda").read_bytes() == (trained["dsdanet"] / "checkpoint.dsda").read_bytes()

    def test_v2_needs_target_labels(self, workspace, tmp_path):
        root, cfg = workspace
        data = tmp_path / "data"
        data.mkdir()
        for name in files(root / "data"):
            if name != "target_labels.mtr":
                (data / name).write_bytes((root / "data" / name).read_bytes())
        assert run("train", "--config", cfg, "--mode", "v2", "--data", data, "--out", tmp_path / "o") == 1
        assert not (tmp_path / "o").exists()

    def test_missing_inputs(self, workspace, tmp_path):
        _, cfg = workspace
        assert run("train", "--config", cfg, "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 2


class TestFinetune:
    def test_only_classifier_changes(self, workspace, trained, tmp_path):
        _, cfg = workspace
        assert run("finetune", trained["dsdanet"] / "checkpoint.dsda", "--config", cfg, "--out", tmp_path) == 0
        before, _ = load_checkpoint(trained["dsdanet"] / "checkpoint.dsda")
        after, header = load_checkpoint(tmp_path / "checkpoint.dsda")
        assert header["extra"] == {"mode": "dsdanet", "stage": "finetune"}
        pa, pb = before.parameters(), after.parameters()
        assert all(x.tobytes() == y.tobytes() for x, y in zip(pa[:-2], pb[:-2]))
        assert not np.array_equal(pa[-2], pb[-2])
        assert len(read_log(tmp_path / "finetune_log.jsonl")) == 30

    def test_zero_epochs(self, workspace, trained, tmp_path):
        root, _ = workspace
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({**SMALL, "finetune": {"epochs": 0}, "paths": {"data_dir": str(root / "data")}}))
        assert run("finetune", trained["v1"] / "checkpoint.dsda", "--config", cfg, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "checkpoint.dsda").read_bytes().split(b"stage")[1:] != []
        a, _ = load_checkpoint(trained["v1"] / "checkpoint.dsda")
        b, _ = load_checkpoint(tmp_path / "o" / "checkpoint.dsda")
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        _, cfg = workspace
        (tmp_path / "bad.dsda").write_bytes(b"DSDA1garbage")
        assert run("finetune", tmp_path / "bad.dsda", "--config", cfg, "--out", tmp_path / "o") == 2


class TestInferEvaluate:
    def test_pipeline_consistency(self, workspace, trained, tmp_path, capsys):
        root, _ = workspace
        ckpt = trained["dsdanet"] / "checkpoint.dsda"
        t1, t2 = root / "data" / "target_t1.mtr", root / "data" / "target_t2.mtr"
        truth = root / "data" / "target_labels.mtr"
        assert run("infer", ckpt, t1, t2, "--out", tmp_path) == 0
        assert files(tmp_path) == ["change_map.mtr", "change_map.pgm"]
        change = read_label_map(tmp_path / "change_map.mtr")
        assert change.shape == (40, 40)
        capsys.readouterr()
        assert run("evaluate", tmp_path / "change_map.mtr", truth, "--method", "dsdanet", "--out", tmp_path) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == metrics_report("dsdanet", change, read_label_map(truth))
        assert json.loads((tmp_path / "metrics_dsdanet.json").read_text()) == printed

    def test_identical_dates_constant(self, workspace, trained, tmp_path):
        root, _ = workspace
        t1 = root / "data" / "target_t1.mtr"
        assert run("infer", trained["v1"] / "checkpoint.dsda", t1, t1, "--out", tmp_path) == 0
        assert len(np.unique(read_label_map(tmp_path / "change_map.mtr"))) == 1

    def test_deterministic_maps(self, workspace, trained, tmp_path):
        root, _ = workspace
        args = [trained["v1"] / "checkpoint.dsda", root / "data" / "target_t1.mtr", root / "data" / "target_t2.mtr"]
        assert run("infer", *args, "--out", tmp_path / "a") == 0
        assert run("infer", *args, "--out", tmp_path / "b") == 0
        for name in ("change_map.mtr", "change_map.pgm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_cva(self, workspace, tmp_path):
        root, _ = workspace
        assert run("infer", root / "data" / "target_t1.mtr", root / "data" / "target_t2.mtr", "--cva",
                   "--out", tmp_path) == 0
        assert read_label_map(tmp_path / "change_map.mtr").shape == (40, 40)

    def test_extent_mismatch(self, workspace, trained, tmp_path):
        root, _ = workspace
        write_raster(np.zeros((10, 10, 4)), tmp_path / "small.mtr")
        code = run("infer", trained["v1"] / "checkpoint.dsda", root / "data" / "target_t1.mtr",
                   tmp_path / "small.mtr", "--out", tmp_path / "o")
        assert code == 1

    def test_partial_is_quarantined(self, workspace, trained, tmp_path, monkeypatch):
        root, _ = workspace

        def broken(change, path):
            raise OSError("disk full")

        monkeypatch.setattr(cli, "write_pgm", broken)
        code = run("infer", trained["v1"] / "checkpoint.dsda", root / "data" / "target_t1.mtr",
                   root / "data" / "target_t2.mtr", "--out", tmp_path)
        assert code == 2
        assert files(tmp_path) == ["change_map.mtr.partial"]

    def test_evaluate_cases(self, tmp_path, capsys):
        truth = np.array([[1, 0, 255], [0, 1, 0]], dtype=np.uint8)
        from dacd.data import write_label_map

        write_label_map(truth, tmp_path / "truth.mtr")
        write_label_map(np.where(truth == 1, 1, 0), tmp_path / "perfect.mtr")
        write_label_map(np.where(truth == 1, 0, 1), tmp_path / "inverted.mtr")
        assert run("evaluate", tmp_path / "perfect.mtr", tmp_path / "truth.mtr") == 0
        perfect = json.loads(capsys.readouterr().out)
        assert perfect["oa"] == 1.0 and perfect["tp"] + perfect["tn"] == 5
        assert run("evaluate", tmp_path / "inverted.mtr", tmp_path / "truth.mtr") == 0
        assert json.loads(capsys.readouterr().out)["kappa"] <= 0
        assert run("evaluate", tmp_path / "truth.mtr", tmp_path / "truth.mtr") == 1
        assert run("evaluate", tmp_path / "missing.mtr", tmp_path / "truth.mtr") == 2


class TestMmdTest:
    def test_same_file(self, tmp_path, capsys):
        x = np.random.default_rng(0).normal(size=(200, 3))
        np.save(tmp_path / "a.npy", x)
        assert run("mmd-test", tmp_path / "a.npy", tmp_path / "a.npy") == 0
        res = json.loads(capsys.readouterr().out)
        assert set(res) >= {"d2_linear", "d2_full", "per_kernel", "beta"}
        assert abs(res["d2_linear"]) < 1e-12
        assert abs(res["d2_full"]) < 0.02

    def test_shifted(self, tmp_path, capsys):
        # recorded seed: N(0, I) vs N(1, I) in 2-D, 300 samples each
        rng = np.random.default_rng(42)
        np.savetxt(tmp_path / "a.txt", rng.normal(size=(300, 2)))
        np.savetxt(tmp_path / "b.csv", rng.normal(1.0, 1.0, size=(300, 2)), delimiter=",")
        assert run("mmd-test", tmp_path / "a.txt", tmp_path / "b.csv", "--out", tmp_path / "o") == 0
        res = json.loads(capsys.readouterr().out)
        assert res["d2_linear"] > 0 and res["d2_full"] > 0
        assert abs(sum(res["beta"]) - 1) < 1e-9 and min(res["beta"]) >= 0
        assert len(res["per_kernel"]) == len(res["beta"]) == 5
        assert json.loads((tmp_path / "o" / "mmd_test.json").read_text()) == res

    def test_errors(self, tmp_path):
        np.save(tmp_path / "a.npy", np.zeros((10, 2)))
        np.save(tmp_path / "b.npy", np.zeros((10, 3)))
        (tmp_path / "c.txt").write_text("1 2\nx y\n")
        assert run("mmd-test", tmp_path / "a.npy", tmp_path / "b.npy") == 1
        assert run("mmd-test", tmp_path / "a.npy", tmp_path / "c.txt") == 2
        assert run("mmd-test", tmp_path / "a.npy", tmp_path / "none.npy") == 2


def test_console_script_exit_codes(tmp_path):
    env = dict(os.environ, PYTHONWARNINGS="ignore")
    ok = subprocess.run([sys.executable, "-m", "dacd.cli", "evaluate", "--help"], capture_output=True, env=env)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "dacd.cli", "evaluate", str(tmp_path / "x"), str(tmp_path / "y")],
                         capture_output=True, env=env)
    assert bad.returncode == 2
    assert b"error" in bad.stderr
