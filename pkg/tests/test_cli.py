import json

import numpy as np
import pytest

from infkit import config as C
from infkit.cli import main, task_from_csv, task_to_csv
from infkit.errors import ConfigError
from infkit.influence import compute_influence
from infkit.seeding import derive_int
from infkit.trainer import flip_labels, gen_task, per_example_gradients, train

FAST = ["--set", "task.n_train=80", "--set", "task.n_val=20", "--set", "task.n_test=20",
        "--set", "task.feature_dim=6", "--set", "hyper.epochs=10"]


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("[hyper]\nlr = 0.5  # file\nepochs = 7\nrun.seed = 3\n")
        env = {"INFKIT_HYPER__LR": "0.25", "OTHER": "x"}
        cfg = C.resolve(path, environ=env, flags={"hyper.epochs": "9"})
        assert cfg["hyper.lr"] == 0.25 and cfg["hyper.epochs"] == 9 and cfg["run.seed"] == 3
        assert C.resolve(path, environ={})["hyper.lr"] == 0.5
        assert C.resolve(None, environ={})["hyper.lr"] == C.DEFAULTS["hyper.lr"]

    def test_unknown_keys(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("hyper.lrr = 1\n")
        with pytest.raises(ConfigError):
            C.resolve(path, environ={})
        with pytest.raises(ConfigError):
            C.resolve(None, environ={"INFKIT_NOPE": "1"})
        with pytest.raises(ConfigError):
            C.parse_assignments(["nope=1"])

    def test_types(self):
        cfg = C.parse_config_text("task.orthogonal_blocks = yes\ntask.latent_dim = none\nrun.r = 12\n")
        assert cfg == {"task.orthogonal_blocks": True, "task.latent_dim": None, "run.r": 12}
        with pytest.raises(ConfigError):
            C.parse_config_text("hyper.epochs = many")
        with pytest.raises(ConfigError):
            C.parse_config_text("just words")

    def test_seed_list(self):
        assert C.seed_list(3) == [0, 1, 2]
        assert C.seed_list("4,9") == [4, 9]

    def test_hash_stable(self):
        assert C.config_hash(dict(C.DEFAULTS)) == C.config_hash(dict(C.DEFAULTS))
        assert C.config_hash(dict(C.DEFAULTS)) != C.config_hash({**C.DEFAULTS, "run.seed": 1})


def test_task_csv_round_trip():
    data = flip_labels(gen_task(C.task_of(C.DEFAULTS, 2)), 0.2, 5)
    back = task_from_csv(task_to_csv(data))
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.flipped, data.flipped)
    assert list(back.split) == list(data.split)


class TestPipeline:
    def _files(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "g"), "--seed", "4"] + FAST) == 0
        assert main(["train", "--data", str(tmp_path / "g/data.csv"), "--out", str(tmp_path / "t"), "--seed", "4"]
                    + FAST) == 0
        assert main(["grads", "--data", str(tmp_path / "g/data.csv"), "--model", str(tmp_path / "t/model.json"),
                     "--out", str(tmp_path / "gr")] + FAST) == 0
        return tmp_path / "gr/grads.grds"

    def test_file_pipeline_equals_in_process(self, tmp_path):
        grds = self._files(tmp_path)
        assert main(["influence", "--grads", str(grds), "--method", "dropout", "--r", "3", "--seed", "7",
                     "--out", str(tmp_path / "i")]) == 0
        cfg = C.resolve(None, environ={}, flags=C.parse_assignments([a for a in FAST if a != "--set"]))
        data = flip_labels(gen_task(C.task_of(cfg, 4)), cfg["run.flip"], derive_int(4, "flip"))
        rec = train(C.model_of(cfg), data, C.hyper_of(cfg, 4))
        ds = per_example_gradients(rec.model, data, dtype="f32")
        rep = compute_influence(ds, "dropout", r=3, seed=7)
        assert (tmp_path / "i/influence.csv").read_text() == rep.to_csv()

    def test_compress_then_influence(self, tmp_path):
        grds = self._files(tmp_path)
        main(["compress", "--grads", str(grds), "--method", "gaussian", "--r", "4", "--seed", "2",
              "--out", str(tmp_path / "c")])
        main(["influence", "--grads", str(tmp_path / "c/compressed.grds"), "--out", str(tmp_path / "a")])
        main(["influence", "--grads", str(grds), "--method", "gaussian", "--r", "4", "--seed", "2",
              "--out", str(tmp_path / "b")])
        a = np.loadtxt(tmp_path / "a/influence.csv", delimiter=",", skiprows=1, usecols=(0, 1, 2))
        b = np.loadtxt(tmp_path / "b/influence.csv", delimiter=",", skiprows=1, usecols=(0, 1, 2))
        np.testing.assert_allclose(a, b, rtol=1e-10)

    def test_reruns_byte_identical(self, tmp_path):
        grds = self._files(tmp_path)
        for out in ("x", "y"):
            main(["influence", "--grads", str(grds), "--method", "lissa", "--out", str(tmp_path / out)])
        for name in ("influence.csv", "run.jsonl"):
            assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()
        rec = json.loads((tmp_path / "x/run.jsonl").read_text())
        assert rec["config"]["run.method"] == "lissa" and "run.out" not in rec["config"]


class TestCommands:
    def test_detect(self, tmp_path, capsys):
        assert main(["detect", "--methods", "orig,dropout", "--seeds", "2", "--out", str(tmp_path)] + FAST) == 0
        lines = (tmp_path / "detection.csv").read_text().splitlines()
        assert lines[0].startswith("method,") and [l.split(",")[0] for l in lines[1:]] == ["orig", "dropout"]
        echo = json.loads((tmp_path / "config.json").read_text())
        assert echo["command"] == "detect" and echo["config"]["task.n_train"] == 80

    def test_detect_deterministic(self, tmp_path):
        for out in ("a", "b"):
            main(["detect", "--methods", "gaussian,fjlt", "--seeds", "2", "--out", str(tmp_path / out)] + FAST)
        assert (tmp_path / "a/detection.csv").read_bytes() == (tmp_path / "b/detection.csv").read_bytes()

    def test_sweep_writes_svg(self, tmp_path):
        assert main(["sweep-r", "--r-values", "1,2", "--seeds", "2", "--out", str(tmp_path)] + FAST) == 0
        assert (tmp_path / "sweep_r.svg").read_text().count("<svg") == 1
        assert (tmp_path / "sweep.csv").exists()

    def test_retrain_eval(self, tmp_path):
        assert main(["retrain-eval", "--methods", "dropout", "--fractions", "0.1,0.3",
                     "--seeds", "2", "--with-random", "--out", str(tmp_path)] + FAST) == 0
        rows = (tmp_path / "retrain.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 3

    def test_retrieve(self, tmp_path):
        assert main(["retrieve", "--seeds", "1", "--set", "task.n_train=120", "--set", "task.n_test=12",
                     "--set", "hyper.epochs=10", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "retrieval.csv").read_text().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["random", "dropout", "orig"]

    def test_bench(self, tmp_path):
        assert main(["bench", "--n", "8", "--d", "512", "--r", "8", "--repeats", "1", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "bench.csv").read_text().startswith("method,n,d,r,compression_seconds,ihvp_seconds")

    def test_theory_check(self, tmp_path):
        assert main(["theory-check", "--cases", "3", "--d", "16", "--n", "4", "--r", "4", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "theory.json").read_text())["ok"]

    def test_default_run_dir(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["gen"] + FAST) == 0
        dirs = list((tmp_path / "runs").iterdir())
        assert len(dirs) == 1 and (dirs[0] / "data.csv").exists()
        assert len(dirs[0].name.split("-")[-1]) == 12


class TestErrors:
    def _err(self, capsys, argv, category):
        assert main(argv) != 0
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith(f"error: {category}:")

    def test_unknown_flag(self, capsys):
        self._err(capsys, ["detect", "--bogus"], "ConfigError")

    def test_unknown_key(self, capsys):
        self._err(capsys, ["detect", "--set", "foo.bar=1"], "ConfigError")

    def test_env_parse_error(self, capsys, monkeypatch):
        monkeypatch.setenv("INFKIT_HYPER__LR", "abc")
        self._err(capsys, ["gen"], "ConfigError")

    def test_missing_file(self, capsys, tmp_path):
        self._err(capsys, ["influence", "--grads", str(tmp_path / "none.grds"), "--out", str(tmp_path)],
                  "FileNotFoundError")

    def test_corrupt_grds(self, capsys, tmp_path):
        raw = bytearray(TestPipeline()._files(tmp_path).read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "x.grds").write_bytes(bytes(raw))
        capsys.readouterr()
        self._err(capsys, ["influence", "--grads", str(tmp_path / "x.grds"), "--out", str(tmp_path)],
                  "ChecksumMismatch")

    def test_bad_magic(self, capsys, tmp_path):
        (tmp_path / "x.grds").write_bytes(b"NOPE" + b"\x00" * 20)
        self._err(capsys, ["influence", "--grads", str(tmp_path / "x.grds"), "--out", str(tmp_path)],
                  "BadMagic")

    def test_budget_error(self, capsys, tmp_path):
        grds = TestPipeline()._files(tmp_path)
        capsys.readouterr()
        self._err(capsys, ["compress", "--grads", str(grds), "--r", "999", "--out", str(tmp_path / "c")],
                  "BudgetTooLarge")

    def test_no_command(self, capsys):
        self._err(capsys, [], "ConfigError")
