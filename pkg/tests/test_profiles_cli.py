import json
import struct

import numpy as np
import pytest

from cdcnn import cli
from cdcnn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, sidecar
from cdcnn.evaluation import read_report
from cdcnn.gradcheck import run_checks
from cdcnn.model import ModelConfig, init_params
from cdcnn.profiles import PROFILES, ProfileError, RunProfile, get_profile, save_profile

TINY_PROFILE = {
    "base": "desk-default",
    "name": "tiny",
    "gen": {"I": 8, "J": 8, "n_residents": 150, "n_validation": 40, "labeled_fraction": 0.3, "days": 3,
            "downtown_center": [3.5, 3.5], "ring_radius": 2.5,
            "industrial_zones": [[1, 1], [6, 6]], "kernel_scale": 1.0, "enclave_size": 1},
    "model": {"I": 8, "J": 8, "fusion_width": 8},
    "train": {"pretrain_epochs": 1, "finetune_epochs": 1, "cotrain_batch": 20, "max_rounds": 1,
              "cotrain_epochs": 1},
    "eval": {"seeds": [0, 1]},
}


@pytest.fixture
def tiny_profile(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_PROFILE))
    return str(path)


@pytest.fixture
def tiny_data(tmp_path, tiny_profile):
    out = tmp_path / "tiny.cdds"
    assert cli.main(["gen-data", "--profile", tiny_profile, "--out", str(out)]) == 0
    return str(out)


class TestProfiles:
    def test_builtins(self):
        assert set(PROFILES) == {"desk-default", "null-signal", "paper-scale"}
        assert get_profile("desk-default").gen.n_residents == 20000
        assert get_profile("null-signal").gen.spatial_asymmetry == 0.0

    def test_paper_scale_is_generation_only(self):
        p = get_profile("paper-scale")
        assert (p.gen.I, p.gen.J) == (88, 115) and (p.model.I, p.model.J) == (88, 115)
        with pytest.raises(ProfileError, match="generation only"):
            p.experiment()

    def test_file_overrides(self, tiny_profile):
        p = get_profile(tiny_profile)
        assert p.name == "tiny" and p.gen.I == 8 and p.train.max_rounds == 1
        assert p.train.learning_rate == PROFILES["desk-default"].train.learning_rate
        assert p.eval.seeds == (0, 1)

    @pytest.mark.parametrize("patch, match", [
        ({"colour": 1}, "unknown profile keys"),
        ({"train": {"lr": 0.1}}, "unknown keys in 'train'"),
        ({"gen": {"bogus": 1}}, "unknown keys in 'gen'"),
        ({"model": {"I": 9}}, "does not match"),
        ({"base": "nope"}, "unknown base"),
        ({"train": {"learning_rate": -1}}, "learning_rate"),
    ])
    def test_rejections(self, tmp_path, patch, match):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({**TINY_PROFILE, **patch}))
        with pytest.raises(ProfileError, match=match):
            get_profile(str(path))

    def test_invalid_json_and_missing(self, tmp_path):
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ProfileError, match="not valid JSON"):
            get_profile(str(tmp_path / "bad.json"))
        with pytest.raises(ProfileError, match="unknown profile"):
            get_profile("no-such-profile")

    def test_save_and_reload(self, tmp_path):
        p = PROFILES["null-signal"]
        save_profile(p, tmp_path / "n.json")
        assert get_profile(str(tmp_path / "n.json")) == p

    def test_with_seed(self):
        p = PROFILES["desk-default"].with_seed(7)
        assert p.gen.seed == 7 and p.train.seed == 7
        assert isinstance(p, RunProfile)


class TestCheckpoint:
    def _params(self):
        cfg = ModelConfig(I=6, J=6)
        return cfg, init_params(cfg, 3)

    def test_roundtrip(self, tmp_path):
        cfg, params = self._params()
        path = save_checkpoint(tmp_path / "c.ckpt", params, cfg, True, {"seed": 3})
        back, cfg2, balanced, meta = load_checkpoint(path)
        assert cfg2 == cfg and balanced and meta == {"seed": 3}
        assert all(np.array_equal(back[k], params[k]) for k in params)
        header = json.loads(sidecar(path).read_text())
        assert [n for n, _ in header["tensors"]][0] == "loc.conv.W"

    def test_errors(self, tmp_path):
        cfg, params = self._params()
        path = save_checkpoint(tmp_path / "c.ckpt", params, cfg)
        data = path.read_bytes()
        cases = {
            "magic": b"XXXX" + data[4:],
            "version": data[:4] + struct.pack("<I", 7) + data[8:],
            "truncated": data[:-16],
            "trailing": data + b"\0" * 8,
            "malformed": data[:12] + b"[" + data[13:],
        }
        for name, blob in cases.items():
            (tmp_path / name).write_bytes(blob)
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / name)

    def test_wrong_shapes_rejected_on_save(self, tmp_path):
        cfg, params = self._params()
        params["out.lr.b"] = np.zeros(3)
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "c", params, cfg)


class TestCli:
    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--data", "--profile", "--out-checkpoint", "--max-rounds", "--no-cotrain", "--no-balance"):
            assert flag in out

    def test_grad_check(self, capsys):
        assert cli.main(["grad-check", "--trials", "1"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 1 and "pass" in out[0]

    def test_grad_check_failure_exit(self, capsys):
        assert cli.main(["grad-check", "--trials", "1", "--tolerance", "0"]) == 1

    def test_gen_data_byte_identical(self, tmp_path, tiny_profile):
        for name in ("a", "b"):
            assert cli.main(["gen-data", "--profile", tiny_profile, "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_no_cotrain_equals_zero_rounds(self, tmp_path, tiny_profile, tiny_data):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        base = ["train", "--data", tiny_data, "--profile", tiny_profile]
        assert cli.main(base + ["--out-checkpoint", str(a), "--no-cotrain"]) == 0
        assert cli.main(base + ["--out-checkpoint", str(b), "--max-rounds", "0"]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.ckpt.log.jsonl").exists()

    def test_train_then_eval(self, tmp_path, tiny_profile, tiny_data, monkeypatch, capsys):
        monkeypatch.setenv("CDCNN_REPORT_DIR", str(tmp_path))
        ckpt = tmp_path / "m.ckpt"
        assert cli.main(["train", "--data", tiny_data, "--profile", tiny_profile, "--out-checkpoint", str(ckpt)]) == 0
        assert cli.main(["eval", "--data", tiny_data, "--checkpoint", str(ckpt), "--format", "json-lines"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[-1].startswith("eval: CD-CNN")
        rep = read_report(tmp_path / "eval.jsonl")
        assert rep.records[0].variant == "CD-CNN" and 0 in rep.calibration

    def test_ablate_and_sweep(self, tmp_path, tiny_profile, monkeypatch):
        monkeypatch.setenv("CDCNN_REPORT_DIR", str(tmp_path))
        assert cli.main(["ablate", "--profile", tiny_profile, "--seeds", "0"]) == 0
        assert len(read_report(tmp_path / "ablation.csv").records) == 5
        assert cli.main(["sweep", "--profile", tiny_profile, "--axis", "labels", "--points", "45,20", "--seeds", "0"]) == 0
        assert {r.label_size for r in read_report(tmp_path / "sweep-labels.csv").records} == {45, 20}

    @pytest.mark.parametrize("argv", [
        ["train", "--data", "/nonexistent.cdds", "--out-checkpoint", "/tmp/x"],
        ["ablate", "--profile", "no-such-profile"],
        ["ablate", "--profile", "paper-scale"],
        ["eval", "--data", "/nonexistent.cdds", "--checkpoint", "/nonexistent.ckpt"],
        ["grad-check", "--trials", "0"],
    ])
    def test_usage_errors(self, argv, capsys):
        assert cli.main(argv) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("cdcnn ")

    def test_sweep_points_too_large(self, tiny_profile, capsys):
        assert cli.main(["sweep", "--profile", tiny_profile, "--axis", "labels", "--points", "9999"]) == 2

    def test_bad_jobs_and_flags(self, capsys):
        for argv in (["ablate", "--jobs", "0"], ["sweep", "--axis", "time"], ["frobnicate"]):
            with pytest.raises(SystemExit) as exc:
                cli.main(argv)
            assert exc.value.code == 2

    def test_corrupt_checkpoint_is_usage_error(self, tmp_path, tiny_data, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"CDCN")
        assert cli.main(["eval", "--data", tiny_data, "--checkpoint", str(tmp_path / "bad.ckpt")]) == 2

    def test_jobs_env(self, monkeypatch):
        monkeypatch.setenv("CDCNN_JOBS", "3")
        args = cli.build_parser().parse_args(["ablate"])
        assert args.jobs == 3


def test_gradcheck_all_targets_small():
    results = run_checks(1, seed=11)
    assert {r.target for r in results} == {"conv2d", "conv1d", "pool2d", "pool1d", "dense", "cdcnn", "ln", "cn"}
    assert max(r.error for r in results) < 1e-6
