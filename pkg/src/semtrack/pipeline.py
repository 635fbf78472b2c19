"""End-to-end scenario runner and artifact I/O.

Executes simulate -> track -> evaluate from a JSON run config and writes
plot-ready artifacts: trajectory tables (CSV or JSON), a metrics JSON and
per-threshold curve CSVs.  All outputs are deterministic for a fixed
(config, seed) pair.

File formats:

* camera trajectory: columns ``t,x,y,z,qw,qx,qy,qz``
* object trajectory: columns ``t,x,y,z,yaw,dx,dy,dz,v,steer``
* metrics JSON keys: ``ate_rmse_m``, ``rpe_trans``, ``rpe_rot``,
  ``ap_bev``, ``ap_3d``, ``error_curve``

Detection records for the AP curves are expressed in the camera frame of
the respective trajectory (ground-truth boxes in the ground-truth camera
frame, estimated boxes in the estimated camera frame), evaluated per
instance frame.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import simulate as sim
from .errors import ConfigError, IoError
from .estimator import EstimatorConfig, WindowTracker
from .geometry import Box3D, ObjectState, Pose, heading
from .metrics import (DetectionRecord, Trajectory, ap_and_error_curves,
                      ate_rmse, rpe)

CAMERA_HEADER = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]
OBJECT_HEADER = ["t", "x", "y", "z", "yaw", "dx", "dy", "dz", "v", "steer"]

_ESTIMATOR_KEYS = {"feature_sigma", "box_sigma", "motion_sigmas",
                   "surface_sigma", "huber_scale", "window",
                   "max_iterations", "align_position_only"}


# ---------------------------------------------------------------------------
# trajectory serialization


def _camera_rows(trajectory: Trajectory):
    rows = []
    for t, pose in zip(trajectory.times, trajectory.poses):
        qx, qy, qz, qw = Rotation.from_matrix(pose.rotation).as_quat()
        rows.append([t, *pose.translation, qw, qx, qy, qz])
    return rows


def _object_rows(times, states):
    rows = []
    for t, s in zip(times, states):
        rows.append([t, *s.position, s.yaw, *s.dims, s.speed, s.steer])
    return rows


def _write_table(path, header, rows, fmt):
    path = Path(path)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                for row in rows:
                    writer.writerow([repr(float(v)) for v in row])
        elif fmt == "json":
            payload = [dict(zip(header, map(float, row))) for row in rows]
            with open(path, "w") as fh:
                json.dump(payload, fh, indent=1, sort_keys=True)
                fh.write("\n")
        else:
            raise ConfigError("format", f"unknown table format {fmt!r}")
    except OSError as exc:
        raise IoError(path, str(exc)) from exc


def _read_table(path, header):
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path) as fh:
                payload = json.load(fh)
            rows = [[rec[key] for key in header] for rec in payload]
        else:
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                got = next(reader, None)
                if got != header:
                    raise IoError(path, f"expected header {header}, "
                                  f"got {got}")
                rows = [[float(v) for v in row] for row in reader]
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    return rows


def write_camera_trajectory(path, trajectory: Trajectory, fmt="csv"):
    _write_table(path, CAMERA_HEADER, _camera_rows(trajectory), fmt)


def read_camera_trajectory(path) -> Trajectory:
    rows = _read_table(path, CAMERA_HEADER)
    times, poses = [], []
    for t, x, y, z, qw, qx, qy, qz in rows:
        times.append(t)
        rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        poses.append(Pose(rot, np.array([x, y, z])))
    return Trajectory(np.array(times), tuple(poses))


def write_object_trajectory(path, times, states, fmt="csv"):
    _write_table(path, OBJECT_HEADER, _object_rows(times, states), fmt)


def read_object_trajectory(path):
    rows = _read_table(path, OBJECT_HEADER)
    times, states = [], []
    for t, x, y, z, yaw, dx, dy, dz, v, steer in rows:
        times.append(t)
        states.append(ObjectState(np.array([x, y, z]), yaw,
                                  np.array([dx, dy, dz]), v, steer))
    return np.array(times), states


def _write_curve_csv(path, curves):
    rows = np.column_stack([curves.thresholds, curves.ap, curves.tp_rate,
                            curves.mean_position_error_pct])
    _write_table(path, ["threshold", "ap", "tp_rate", "position_error_pct"],
                 rows, "csv")


# ---------------------------------------------------------------------------
# config handling


def load_config(path):
    """Run config dict from a JSON file."""
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(path, str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc


def estimator_config_from(node, dt):
    if not isinstance(node, dict):
        raise ConfigError("estimator", "expected a mapping")
    unknown = set(node) - _ESTIMATOR_KEYS
    if unknown:
        raise ConfigError("estimator", f"unknown keys {sorted(unknown)}")
    kwargs = dict(node)
    if "motion_sigmas" in kwargs:
        kwargs["motion_sigmas"] = tuple(kwargs["motion_sigmas"])
    return EstimatorConfig(dt=dt, **kwargs)


def demo_config():
    """Bundled self-contained run config: forward drive past three cars."""
    return {
        "seed": 7,
        "scenario": {
            "n_frames": 25,
            "objects": [
                {"class": "car",
                 "init": {"x": 0.4, "z": 25.0, "yaw": -np.pi / 2, "v": 8.0}},
                {"class": "car",
                 "init": {"x": -10.0, "z": 18.0, "yaw": -np.pi / 2,
                          "v": 8.0}},
                {"class": "car",
                 "init": {"x": 14.0, "z": 20.0, "yaw": -np.pi / 2,
                          "v": 8.0}},
            ],
            "noise": {"feature_sigma_px": 0.5, "box_sigma_px": 1.0,
                      "seed": 7},
        },
        "evaluation": {"rpe_step": 1},
    }


# ---------------------------------------------------------------------------
# pipeline


def _camera_frame_box(state: ObjectState, cam: Pose) -> Box3D:
    center = cam.apply_inverse(state.position)
    h = cam.rotation.T @ heading(state.yaw)
    yaw = float(np.arctan2(-h[2], h[0]))
    return Box3D(center, yaw, state.dims)


def _detection_records(times, camera_poses, object_tracks):
    """Per-frame camera-frame boxes from world-frame object tracks.

    ``object_tracks`` maps an id to a list of (frame, ObjectState).
    """
    records = []
    for obj_id, track in sorted(object_tracks.items()):
        for t, state in track:
            records.append(DetectionRecord(
                t, obj_id, _camera_frame_box(state, camera_poses[t])))
    return records


def evaluate_run(est_traj, gt_traj, est_objects, gt_objects, rpe_step=1,
                 n_thresholds=40):
    """Metrics dict (JSON-ready) comparing estimate against ground truth."""
    rpe_trans, rpe_rot = rpe(est_traj, gt_traj, step=rpe_step)
    dets = _detection_records(est_traj.times, est_traj.poses, est_objects)
    gts = _detection_records(gt_traj.times, gt_traj.poses, gt_objects)
    bev = ap_and_error_curves(dets, gts, iou_kind="bev",
                              n_thresholds=n_thresholds)
    vol = ap_and_error_curves(dets, gts, iou_kind="3d",
                              n_thresholds=n_thresholds)
    metrics = {
        "ate_rmse_m": ate_rmse(est_traj, gt_traj),
        "rpe_trans": rpe_trans.tolist(),
        "rpe_rot": rpe_rot.tolist(),
        "ap_bev": bev.ap.tolist(),
        "ap_3d": vol.ap.tolist(),
        "error_curve": {
            "thresholds": bev.thresholds.tolist(),
            "tp_rate_bev": bev.tp_rate.tolist(),
            "tp_rate_3d": vol.tp_rate.tolist(),
            "position_error_pct_bev": bev.mean_position_error_pct.tolist(),
            "position_error_pct_3d": vol.mean_position_error_pct.tolist(),
        },
    }
    return metrics, bev, vol


def simulate_stage(config, seed):
    """Scenario plus its measurement stream (synthesized or from a log)."""
    scenario = sim.generate_scenario(config.get("scenario", {}), seed)
    log_path = config.get("measurements")
    if log_path is not None:
        if not Path(log_path).exists():
            raise IoError(log_path, "measurement log not found")
        frames = sim.read_measurements(log_path)
        if len(frames) != scenario.n_frames:
            raise ConfigError("measurements",
                              f"log has {len(frames)} frames, scenario "
                              f"has {scenario.n_frames}")
    else:
        frames = sim.synthesize_all(scenario)
    return scenario, frames


def track_stage(scenario, frames, config):
    """Run the sliding-window tracker over a measurement stream."""
    est_cfg = estimator_config_from(config.get("estimator", {}), scenario.dt)
    tracker = WindowTracker(scenario.rig, est_cfg,
                            initial_pose=scenario.camera[0])
    for frame in frames:
        tracker.process(frame)
    return tracker


def run_pipeline(config_path, out_dir, seed=None, fmt="csv"):
    """Full simulate -> track -> evaluate run; returns artifact paths."""
    if isinstance(config_path, dict):
        config = config_path
    elif isinstance(config_path, (str, Path)):
        config = load_config(config_path)
        if not isinstance(config, dict):
            raise ConfigError(str(config_path), "config must be a mapping")
    else:
        raise ConfigError("", "config must be a mapping or a path")
    if seed is None:
        seed = int(config.get("seed", 0))
    if fmt not in ("csv", "json"):
        raise ConfigError("format", f"unknown format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(out, str(exc)) from exc

    scenario, frames = simulate_stage(config, seed)
    tracker = track_stage(scenario, frames, config)

    times = scenario.timestamps()
    gt_traj = Trajectory(times, tuple(scenario.camera))
    est_traj = Trajectory(times, tuple(tracker.camera_trajectory))
    gt_objects = {o.object_id: list(enumerate(o.states))
                  for o in scenario.objects}
    eval_cfg = config.get("evaluation", {})
    rpe_step = int(eval_cfg.get("rpe_step", 1))
    metrics, bev, vol = evaluate_run(est_traj, gt_traj,
                                     tracker.object_trajectories,
                                     gt_objects, rpe_step=rpe_step)

    ext = fmt
    artifacts = {}
    measurements_path = out / "measurements.jsonl"
    sim.write_measurements(measurements_path, frames)
    artifacts["measurements"] = measurements_path

    for name, traj in (("camera_est", est_traj), ("camera_gt", gt_traj)):
        path = out / f"{name}.{ext}"
        write_camera_trajectory(path, traj, fmt)
        artifacts[name] = path
    for obj_id, track in sorted(gt_objects.items()):
        path = out / f"object_{obj_id}_gt.{ext}"
        write_object_trajectory(path, [times[t] for t, _ in track],
                                [s for _, s in track], fmt)
        artifacts[f"object_{obj_id}_gt"] = path
    for obj_id, track in sorted(tracker.object_trajectories.items()):
        path = out / f"object_{obj_id}_est.{ext}"
        write_object_trajectory(path, [times[t] for t, _ in track],
                                [s for _, s in track], fmt)
        artifacts[f"object_{obj_id}_est"] = path

    metrics_path = out / "metrics.json"
    try:
        with open(metrics_path, "w") as fh:
            json.dump(metrics, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(metrics_path, str(exc)) from exc
    artifacts["metrics"] = metrics_path

    for name, curves in (("curve_bev", bev), ("curve_3d", vol)):
        path = out / f"{name}.csv"
        _write_curve_csv(path, curves)
        artifacts[name] = path
    return artifacts
