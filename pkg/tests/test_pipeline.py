import numpy as np
import pytest
import yaml

from meshmap.config import ConfigError, PipelineConfig
from meshmap.evaluation import eval_mesh
from meshmap.geometry import PointCloud, PoseSE3
from meshmap.io import (read_mesh_ply, read_poses, sample_mesh_surface,
                        write_scan_bin, write_trajectory)
from meshmap.pipeline import (MeshMapper, MeshPipeline, PipelineError,
                              RunReport, run_pipeline)
from meshmap.synthetic import synth_scene

ROOM_SCRIPT = {
    "rects": [
        {"center": [10, 0, 2], "axis": 0, "extents": [20, 8]},
        {"center": [-10, 0, 2], "axis": 0, "extents": [20, 8]},
        {"center": [0, 10, 2], "axis": 1, "extents": [20, 8]},
        {"center": [0, -10, 2], "axis": 1, "extents": [20, 8]},
        {"center": [0, 0, -1], "axis": 2, "extents": [20, 20]},
    ],
    "sensor": {"rows": 16, "cols": 360, "fov_up_deg": 15, "fov_down_deg": -15},
    "trajectory": {"type": "line", "start": [-4, 0, 0], "velocity": [1.0, 0, 0]},
    "n_scans": 20,
    "rate_hz": 10.0,
}


def room_scene(**overrides):
    script = dict(ROOM_SCRIPT)
    script.update(overrides)
    return script, synth_scene(script, seed=0)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults_valid():
    cfg = PipelineConfig()
    assert cfg.voxel_size_m == 1.0
    assert cfg.keyframe_thresholds[0][0] == 20


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        PipelineConfig.from_dict({"voxel_sise_m": 0.5})


@pytest.mark.parametrize("bad", [
    {"alpha": 0.5, "beta": 0.3},
    {"p_hit": 1.5},
    {"axis_mode": "diagonal"},
    {"voxel_size_m": -1.0},
    {"grid_g": 1},
    {"pose_source": "gps"},
    {"scan_format": "csv"},
    {"fov_up_deg": -30.0, "fov_down_deg": 3.0},
])
def test_config_validation_failures(bad):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(bad)


def test_config_yaml_round_trip(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("voxel_size_m: 0.5\nenable_continuity: false\n")
    cfg = PipelineConfig.from_yaml(path)
    assert cfg.voxel_size_m == 0.5
    assert cfg.enable_continuity is False


def test_config_overrides_parse_yaml_scalars():
    cfg = PipelineConfig().with_overrides(
        ["voxel_size_m=0.25", "enable_fine_removal=false", "max_scans=7"])
    assert cfg.voxel_size_m == 0.25
    assert cfg.enable_fine_removal is False
    assert cfg.max_scans == 7


def test_config_override_errors():
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(["voxel_size_m"])
    with pytest.raises(ConfigError):
        PipelineConfig().with_overrides(["nope=1"])


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def pipeline_config(**kw):
    base = dict(range_image_rows=16, range_image_cols=360,
                fov_up_deg=15.0, fov_down_deg=-15.0,
                min_inliers=30)
    base.update(kw)
    return PipelineConfig.from_dict(base)


def test_pipeline_builds_map_from_static_room():
    script, scene = room_scene()
    pipe = MeshPipeline(pipeline_config())
    for (t, pose), scan in zip(scene.trajectory, scene.scans):
        pipe.process_scan(scan, pose, timestamp=t)
    assert pipe.report.n_scans == 20
    assert pipe.report.n_keyframes >= 1
    mesh = pipe.extract_mesh()
    assert mesh.n_faces > 0
    gt_samples = sample_mesh_surface(scene.gt_mesh, density=50.0, seed=1)
    cand = sample_mesh_surface(mesh, density=50.0, seed=2)
    precision, _, _ = eval_mesh(cand, gt_samples, delta=0.2)
    assert precision > 80.0


def test_pipeline_trajectory_follows_gt_poses():
    _, scene = room_scene()
    pipe = MeshPipeline(pipeline_config())
    for (t, pose), scan in zip(scene.trajectory, scene.scans):
        pipe.process_scan(scan, pose, timestamp=t)
    assert len(pipe.trajectory) == 20
    err = [np.linalg.norm(p.translation - q.translation)
           for (_, p), (_, q) in zip(pipe.trajectory, scene.trajectory)]
    assert max(err) < 0.2


def test_pipeline_constant_velocity_without_odometry():
    _, scene = room_scene(n_scans=12)
    pipe = MeshPipeline(pipeline_config(pose_source="constant_velocity"))
    for (t, _), scan in zip(scene.trajectory, scene.scans):
        pipe.process_scan(scan, None, timestamp=t)
    assert len(pipe.trajectory) == 12
    assert pipe.extract_mesh().n_faces > 0


def test_pipeline_stage_timing_accumulates():
    _, scene = room_scene(n_scans=5)
    pipe = MeshPipeline(pipeline_config())
    for (t, pose), scan in zip(scene.trajectory, scene.scans):
        pipe.process_scan(scan, pose, timestamp=t)
    assert pipe.report.stage_ms["total"] > 0
    assert pipe.report.stage_mean_ms("total") > 0
    text = pipe.report.to_text()
    assert "time_ms_meshing" in text and "n_keyframes" in text


def test_report_json_round_trips():
    import json
    report = RunReport(n_scans=3, n_keyframes=2)
    data = json.loads(report.to_json())
    assert data["n_scans"] == 3
    assert set(data["stage_ms"]) == set(report.stage_ms)


# ---------------------------------------------------------------------------
# batch runner
# ---------------------------------------------------------------------------

def write_scene_to_disk(tmp_path, script=None, n_scans=10):
    script = dict(script or ROOM_SCRIPT, n_scans=n_scans)
    scene = synth_scene(script, seed=0)
    scans = tmp_path / "scans"
    scans.mkdir()
    for k, scan in enumerate(scene.scans):
        write_scan_bin(scan, scans / f"{k:06d}.bin")
    write_trajectory(scene.trajectory, tmp_path / "poses.txt", "tum")
    return scene


def test_run_pipeline_writes_outputs(tmp_path):
    write_scene_to_disk(tmp_path)
    cfg = pipeline_config(
        scan_dir=str(tmp_path / "scans"), pose_file=str(tmp_path / "poses.txt"),
        output_mesh=str(tmp_path / "mesh.ply"),
        output_trajectory=str(tmp_path / "traj.txt"),
        report_path=str(tmp_path / "report.json"))
    mesh, traj, report = run_pipeline(cfg)
    assert report.n_scans == 10 and report.n_failures == 0
    assert read_mesh_ply(tmp_path / "mesh.ply").n_faces == mesh.n_faces
    assert len(read_poses(tmp_path / "traj.txt", "tum")) == 10
    assert "n_scans" in (tmp_path / "report.json").read_text()


def test_run_pipeline_missing_dir_raises(tmp_path):
    cfg = pipeline_config(scan_dir=str(tmp_path / "nope"))
    with pytest.raises(PipelineError):
        run_pipeline(cfg)


def test_run_pipeline_pose_count_mismatch(tmp_path):
    write_scene_to_disk(tmp_path)
    (tmp_path / "poses.txt").write_text("0.0 0 0 0 0 0 0 1\n")
    cfg = pipeline_config(scan_dir=str(tmp_path / "scans"),
                          pose_file=str(tmp_path / "poses.txt"))
    with pytest.raises(PipelineError, match="poses"):
        run_pipeline(cfg)


def test_run_pipeline_counts_corrupt_scans(tmp_path):
    write_scene_to_disk(tmp_path)
    (tmp_path / "scans" / "000003.bin").write_bytes(b"\x00" * 10)
    cfg = pipeline_config(scan_dir=str(tmp_path / "scans"),
                          pose_file=str(tmp_path / "poses.txt"))
    _, _, report = run_pipeline(cfg)
    assert report.n_failures == 1
    assert report.n_scans == 10


def test_run_pipeline_max_scans(tmp_path):
    write_scene_to_disk(tmp_path)
    cfg = pipeline_config(scan_dir=str(tmp_path / "scans"),
                          pose_file=str(tmp_path / "poses.txt"), max_scans=4)
    _, traj, report = run_pipeline(cfg)
    assert report.n_scans == 4 and len(traj) == 4


# ---------------------------------------------------------------------------
# estimator facade
# ---------------------------------------------------------------------------

def test_meshmapper_fit_attributes():
    _, scene = room_scene(n_scans=8)
    est = MeshMapper(range_image_rows=16, range_image_cols=360,
                     fov_up_deg=15.0, fov_down_deg=-15.0, min_inliers=30)
    est.fit(scene.scans, scene.trajectory)
    assert est.mesh_.n_faces > 0
    assert len(est.trajectory_) == 8
    assert est.report_.n_scans == 8
    assert len(est.map_) > 0


def test_meshmapper_accepts_raw_arrays():
    _, scene = room_scene(n_scans=4)
    arrays = [s.points for s in scene.scans]
    poses = [p for _, p in scene.trajectory]
    est = MeshMapper(range_image_rows=16, range_image_cols=360,
                     fov_up_deg=15.0, fov_down_deg=-15.0, min_inliers=30)
    est.fit(arrays, poses)
    assert est.report_.n_scans == 4


def test_meshmapper_sklearn_contract():
    from sklearn.base import clone
    est = MeshMapper(voxel_size_m=0.5)
    params = est.get_params()
    assert params["voxel_size_m"] == 0.5
    dup = clone(est)
    assert dup.get_params() == params
    est.set_params(grid_g=5)
    assert est.grid_g == 5
    assert est.transform([1, 2]) == [1, 2]


def test_meshmapper_invalid_param_rejected():
    with pytest.raises(ConfigError):
        MeshMapper(axis_mode="spiral").fit([PointCloud([[1.0, 0, 0]])])
