import numpy as np
import yaml

from meshmap.cli import main
from meshmap.geometry import Mesh
from meshmap.io import read_mesh_ply, read_poses, write_mesh_ply, \
    write_trajectory
from meshmap.geometry import PoseSE3

SCENE = {
    "rects": [
        {"center": [10, 0, 2], "axis": 0, "extents": [20, 8]},
        {"center": [-10, 0, 2], "axis": 0, "extents": [20, 8]},
        {"center": [0, 10, 2], "axis": 1, "extents": [20, 8]},
        {"center": [0, -10, 2], "axis": 1, "extents": [20, 8]},
        {"center": [0, 0, -1], "axis": 2, "extents": [20, 20]},
    ],
    "sensor": {"rows": 16, "cols": 360, "fov_up_deg": 15, "fov_down_deg": -15},
    "trajectory": {"type": "line", "start": [-4, 0, 0],
                   "velocity": [1.0, 0, 0]},
    "n_scans": 8,
    "rate_hz": 10.0,
}


def write_scene_yaml(tmp_path):
    path = tmp_path / "scene.yaml"
    path.write_text(yaml.safe_dump(SCENE))
    return path


def test_usage_error_exit_code(capsys):
    assert main([]) == 1
    assert main(["run", "--bogus"]) == 1
    capsys.readouterr()


def test_synth_writes_dataset(tmp_path, capsys):
    scene = write_scene_yaml(tmp_path)
    out = tmp_path / "data"
    assert main(["synth", str(scene), "--out", str(out)]) == 0
    assert len(list((out / "scans").glob("*.bin"))) == 8
    assert len(list((out / "labels").glob("*.npy"))) == 8
    assert len(read_poses(out / "poses_gt.txt", "tum")) == 8
    assert read_mesh_ply(out / "gt_mesh.ply").n_faces == 10
    capsys.readouterr()


def test_run_on_synth_dataset(tmp_path, capsys):
    scene = write_scene_yaml(tmp_path)
    out = tmp_path / "data"
    main(["synth", str(scene), "--out", str(out)])
    code = main(["run",
                 "--set", f"scan_dir={out / 'scans'}",
                 "--set", f"pose_file={out / 'poses_gt.txt'}",
                 "--set", "range_image_rows=16",
                 "--set", "range_image_cols=360",
                 "--set", "fov_up_deg=15.0",
                 "--set", "fov_down_deg=-15.0",
                 "--set", "min_inliers=30",
                 "--set", f"output_mesh={tmp_path / 'mesh.ply'}"])
    captured = capsys.readouterr()
    assert code == 0
    assert "n_scans: 8" in captured.out
    assert read_mesh_ply(tmp_path / "mesh.ply").n_faces > 0


def test_run_config_file_and_env(tmp_path, capsys, monkeypatch):
    scene = write_scene_yaml(tmp_path)
    out = tmp_path / "data"
    main(["synth", str(scene), "--out", str(out)])
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({
        "scan_dir": str(out / "scans"),
        "pose_file": str(out / "poses_gt.txt"),
        "range_image_rows": 16, "range_image_cols": 360,
        "fov_up_deg": 15.0, "fov_down_deg": -15.0, "min_inliers": 30,
    }))
    monkeypatch.setenv("MESHMAP_CONFIG", str(cfg))
    assert main(["run", "--json"]) == 0
    assert '"n_scans": 8' in capsys.readouterr().out


def test_run_unknown_config_key_exit_1(tmp_path, capsys):
    assert main(["run", "--set", "bogus_key=1"]) == 1
    assert "error" in capsys.readouterr().err


def test_run_missing_scan_dir_exit_2(tmp_path, capsys):
    assert main(["run", "--set", f"scan_dir={tmp_path / 'none'}"]) == 2
    capsys.readouterr()


def test_run_many_corrupt_scans_exit_3(tmp_path, capsys):
    scene = write_scene_yaml(tmp_path)
    out = tmp_path / "data"
    main(["synth", str(scene), "--out", str(out)])
    for k in range(4):
        (out / "scans" / f"{k:06d}.bin").write_bytes(b"\x01" * 7)
    code = main(["run",
                 "--set", f"scan_dir={out / 'scans'}",
                 "--set", f"pose_file={out / 'poses_gt.txt'}",
                 "--set", "range_image_rows=16",
                 "--set", "range_image_cols=360",
                 "--set", "fov_up_deg=15.0",
                 "--set", "fov_down_deg=-15.0",
                 "--set", "min_inliers=30"])
    capsys.readouterr()
    assert code == 3


def test_eval_mesh_identical(tmp_path, capsys):
    mesh = Mesh([[0, 0, 0], [4, 0, 0], [0, 4, 0]], [[0, 1, 2]])
    path = tmp_path / "m.ply"
    write_mesh_ply(mesh, path, binary=True)
    assert main(["eval-mesh", str(path), str(path), "--delta", "0.1",
                 "--density", "2000"]) == 0
    out = capsys.readouterr().out
    assert "precision: 100.00" in out
    assert "f1: 100.00" in out


def test_eval_mesh_missing_file_exit_2(tmp_path, capsys):
    assert main(["eval-mesh", str(tmp_path / "a.ply"),
                 str(tmp_path / "b.ply")]) == 2
    capsys.readouterr()


def test_eval_ape_identity(tmp_path, capsys):
    traj = [(k * 0.1, PoseSE3(np.eye(3), [k, 0, 0])) for k in range(5)]
    path = tmp_path / "t.txt"
    write_trajectory(traj, path, "tum")
    assert main(["eval-ape", str(path), str(path)]) == 0
    assert "ape_rmse: 0.0000" in capsys.readouterr().out
