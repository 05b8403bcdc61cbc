import json

import numpy as np

from gsgen import io
from gsgen.cli import main


def test_init_train_render_export(tmp_path, capsys):
    cloud_path = tmp_path / "cloud.ply"
    assert main(["init", "--synthetic", "blobs", "--n", "64", "--samples", "500", str(cloud_path)]) == 0
    assert len(io.read_gaussians(cloud_path)) == 64
    cfg = tmp_path / "c.txt"
    cfg.write_text("geometry.iterations = 2\nrefine.iterations = 2\ngeometry.resolution = 16\n"
                   "refine.resolution = 16\ncheckpoint_every = 2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--set", "refine.lambda_opacity=10.0", "--init", str(cloud_path),
                 "--out", str(run)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["iteration"] == 4
    assert "refine.lambda_opacity = 10.0" in (run / "config.txt").read_text()
    assert main(["render", str(run / "final.gsck"), "--frames", "2", "--size", "16", "--out", str(tmp_path / "tt")]) == 0
    assert len(list((tmp_path / "tt").glob("frame_*.png"))) == 2
    assert main(["export", str(run / "final.gsck"), str(tmp_path / "out.ply")]) == 0
    assert len(io.read_gaussians(tmp_path / "out.ply")) == summary["N"]


def test_init_from_mesh_is_normalized(tmp_path):
    (tmp_path / "m.obj").write_text("v 0 0 0\nv 10 0 0\nv 0 10 0\nv 0 0 10\nf 1 2 3\nf 1 2 4\nf 1 3 4\nf 2 3 4\n")
    assert main(["init", "--mesh", str(tmp_path / "m.obj"), "--n", "50", "--samples", "400",
                 str(tmp_path / "c.ply")]) == 0
    pos = io.read_gaussians(tmp_path / "c.ply").positions
    assert np.abs(pos).max() <= 1.0 + 1e-6


def test_check_grad_exit_codes(capsys):
    assert main(["check-grad", "--scenes", "1", "--n", "4", "--size", "12"]) == 0
    assert "PASS" in capsys.readouterr().out
    # an absurd tolerance forces a failing report
    assert main(["check-grad", "--scenes", "1", "--n", "4", "--size", "12", "--tolerance", "1e-30"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_fit_small(tmp_path, capsys):
    assert main(["fit", "--iterations", "20", "--views", "4", "--size", "24", "--n-init", "32",
                 "--eval-every", "10", "--out", str(tmp_path)]) == 0
    curve = json.loads((tmp_path / "psnr.json").read_text())
    assert [c[0] for c in curve] == [0, 10, 20]
