import json
import subprocess
import sys

import numpy as np
import pytest

from sddf.cli import main
from sddf.renderer import read_pfm
from sddf.residual import CHECKPOINT_MAGIC
from sddf.scene import Dataset
from sddf.viewopt import load_poses

CONFIG = {
    "seed": 7,
    "data": {"sensor": {"kind": "lidar", "shape": [36, 18]}, "pose_count": 2},
    "train": {"batch_rays": 256, "max_iters": 8, "epochs": 4, "prior_pretrain_iters": 2,
              "joint_iters": 2, "n_ellipsoids": 6, "latent_dim": 8,
              "widths": [16, 16, 16, 16, 16, 8, 8], "log_every": 4},
    "render": {"sensor": {"kind": "pinhole", "shape": [16, 12], "fov": [80, 60]}},
    "viewopt": {"steps": 0, "sensor": {"kind": "pinhole", "shape": [8, 6], "fov": [80, 60]}},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(CONFIG))
    cfg = str(d / "cfg.json")
    assert main(["data", "--config", cfg, "--out", str(d / "data.bin")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "data.bin"), "--out", str(d / "m.ckpt")]) == 0
    return d


def run(*argv):
    return main([str(a) for a in argv])


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "sddf", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "render" in out.stdout


def test_bad_flag_exits_usage(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["data", "--bogus", "--out", str(tmp_path / "x.bin")])
    assert exc.value.code == 1
    assert not (tmp_path / "x.bin").exists()


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"batch": 3}}))
    assert run("data", "--config", tmp_path / "c.json", "--out", tmp_path / "d.bin") == 1


def test_missing_dataset_is_usage_error(tmp_path):
    assert run("train", "--data", tmp_path / "nope.bin", "--out", tmp_path / "m.ckpt") == 1


def test_data_doubles_hits(workdir, capsys):
    run("data", "--config", workdir / "cfg.json", "--out", workdir / "again.bin")
    lines = dict(l.split(",") for l in capsys.readouterr().out.split())
    assert int(lines["samples"]) == 2 * int(lines["hits"])
    assert len(Dataset.load(workdir / "again.bin")) == int(lines["samples"])
    assert (workdir / "again.bin").read_bytes() == (workdir / "data.bin").read_bytes()


def test_empty_scene_reports_no_hits(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"primitives": []}))
    assert run("data", "--scene", tmp_path / "s.json", "--poses", 1, "--out", tmp_path / "d.bin") == 2
    assert "no hits" in capsys.readouterr().err


def test_sensor_inside_obstacle(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps(
        {"primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 5}]}))
    (tmp_path / "c.json").write_text(json.dumps({"data": {"poses": [[0, 0, 0]]}}))
    assert run("data", "--config", tmp_path / "c.json", "--scene", tmp_path / "s.json",
               "--out", tmp_path / "d.bin") == 2
    assert "inside" in capsys.readouterr().err


def test_train_outputs(workdir):
    assert (workdir / "m.ckpt").read_bytes().startswith(CHECKPOINT_MAGIC)
    rows = (workdir / "m.csv").read_text().splitlines()
    assert rows[0] == "iteration,phase,L_P,L_R,mae_val" and len(rows) == 9
    assert (workdir / "m.png").read_bytes().startswith(b"\x89PNG")


def test_train_zero_epochs_matches_init(workdir, tmp_path):
    cfg = workdir / "cfg.json"
    assert run("train", "--config", cfg, "--data", workdir / "data.bin", "--epochs", 0,
               "--out", tmp_path / "a.ckpt") == 0
    assert run("init", "--config", cfg, "--data", workdir / "data.bin", "--out", tmp_path / "e.json") == 0
    assert run("train", "--config", cfg, "--data", workdir / "data.bin", "--epochs", 0,
               "--ellipsoids", tmp_path / "e.json", "--out", tmp_path / "b.ckpt") == 0
    from sddf.residual import load_checkpoint

    a, b = load_checkpoint(tmp_path / "a.ckpt"), load_checkpoint(tmp_path / "b.ckpt")
    assert np.array_equal(a.latent, b.latent)
    for ea, eb in zip(a.ellipsoids, b.ellipsoids):
        assert np.allclose(ea.pose()[1], eb.pose()[1], atol=1e-6)


def test_train_is_deterministic(workdir, tmp_path):
    assert run("train", "--config", workdir / "cfg.json", "--data", workdir / "data.bin",
               "--out", tmp_path / "m.ckpt") == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_eval_writes_metrics(workdir, capsys):
    assert run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "data.bin",
               "--out", workdir / "metrics.csv") == 0
    header, values = (workdir / "metrics.csv").read_text().splitlines()
    assert header == "mae,miss_rate,sign_accuracy,count"
    assert float(values.split(",")[0]) >= 0
    assert (workdir / "metrics.png").exists()


def test_render_twice_identical(workdir, capsys):
    for stem in ("r1", "r2"):
        assert run("render", "--config", workdir / "cfg.json", "--checkpoint", workdir / "m.ckpt",
                   "--out", workdir / stem) == 0
    assert (workdir / "r1.pfm").read_bytes() == (workdir / "r2.pfm").read_bytes()
    assert (workdir / "r1.png").read_bytes() == (workdir / "r2.png").read_bytes()
    assert read_pfm(workdir / "r1.pfm").shape == (12, 16)
    assert (workdir / "r1_figure.png").exists()


def test_render_with_eye_and_target(workdir):
    assert run("render", "--config", workdir / "cfg.json", "--checkpoint", workdir / "m.ckpt",
               "--eye", 0, 0, 1.5, "--target", 1, 0, 1.5, "--out", workdir / "r3") == 0


def test_version_mismatch_exit(workdir, tmp_path, capsys):
    data = bytearray((workdir / "m.ckpt").read_bytes())
    data[len(CHECKPOINT_MAGIC)] = 42
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    assert run("render", "--checkpoint", tmp_path / "bad.ckpt", "--out", tmp_path / "r") == 2
    assert "version 42" in capsys.readouterr().err


def test_viewopt_zero_steps_keeps_poses(workdir, tmp_path):
    poses = {"poses": [{"R": np.eye(3).ravel().tolist(), "t": [0, 0, 1.5]},
                       {"R": [0, 0, 1, 1, 0, 0, 0, 1, 0], "t": [0.5, 0.3, 1.2]}]}
    (tmp_path / "w.json").write_text(json.dumps(poses))
    assert run("viewopt", "--config", workdir / "cfg.json", "--checkpoint", workdir / "m.ckpt",
               "--waypoints", tmp_path / "w.json", "--out", tmp_path / "o.json") == 0
    out = load_poses(tmp_path / "o.json")
    for got, want in zip(out, poses["poses"]):
        assert np.allclose(got[0].ravel(), want["R"]) and np.allclose(got[1], want["t"])
    assert (tmp_path / "o.csv").exists() and (tmp_path / "o.png").exists()


def test_viewopt_needs_two_waypoints(workdir, tmp_path):
    (tmp_path / "w.json").write_text(json.dumps({"poses": [{"R": np.eye(3).ravel().tolist(),
                                                            "t": [0, 0, 1.5]}]}))
    assert run("viewopt", "--checkpoint", workdir / "m.ckpt", "--waypoints", tmp_path / "w.json",
               "--out", tmp_path / "o.json") == 1
