"""Synthetic stereo scene simulator.

Generates ground-truth camera and object trajectories, landmarks anchored
to box surfaces, and noisy abstract measurements (2D semantic boxes with
viewpoint labels, stereo feature observations), so the estimator can be
verified end to end without images.

Conventions follow :mod:`semtrack.geometry`: world y points down, ground
plane y = 0, cameras are level unless waypoints say otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import geometry as geom
from .boxinfer import (BBox2D, DEFAULT_PRIORS, DimensionPrior, Viewpoint,
                       classify_viewpoint_world)
from .errors import ConfigError
from .geometry import Box3D, ObjectState, Pose, StereoRig, heading, rot_y

CAR_WHEELBASE_RATIO = 0.6  # wheelbase as a fraction of box length


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement corruption model; sigmas in normalized image units."""

    feature_sigma: float = 0.5 / 700.0
    box_sigma: float = 1.0 / 700.0
    viewpoint_error_rate: float = 0.0
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_sigma < 0 or self.box_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        for name in ("viewpoint_error_rate", "dropout_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def zero(cls, seed=0):
        return cls(0.0, 0.0, 0.0, 0.0, seed)


@dataclass(frozen=True)
class SemanticMeasurement:
    """One detected object in one frame: 2D box plus viewpoint class.

    ``valid_edges`` flags (u_min, v_min, u_max, v_max) edges that are
    genuine object boundaries; an edge clipped by the image border is
    invalid and ``truncated`` is set.
    """

    object_id: int
    label: str
    box: BBox2D
    viewpoint: Viewpoint
    truncated: bool = False
    valid_edges: tuple = (True, True, True, True)


@dataclass(frozen=True)
class FeatureObs:
    """Stereo observation of one landmark; anchor 0 means background."""

    feature_id: int
    anchor_id: int
    left: np.ndarray
    right: np.ndarray


@dataclass(frozen=True)
class FrameMeasurements:
    timestamp: float
    semantic: tuple
    features: tuple
    feature_sigma: float = 0.0
    box_sigma: float = 0.0

    def __post_init__(self):
        ids = [f.feature_id for f in self.features]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate feature id within a frame")


@dataclass(frozen=True)
class SimObject:
    """Ground-truth track of one object over the whole scenario."""

    object_id: int
    label: str
    states: tuple  # ObjectState per frame
    landmarks: np.ndarray  # object-frame points on the box surface
    prior: DimensionPrior


@dataclass(frozen=True)
class Scenario:
    """Complete synthetic world: ground truth plus measurement geometry."""

    dt: float
    rig: StereoRig
    camera: tuple  # Pose per frame
    objects: tuple  # SimObject
    background: np.ndarray  # world-frame landmarks (N, 3)
    noise: NoiseSpec

    def __post_init__(self):
        for obj in self.objects:
            if len(obj.states) != len(self.camera):
                raise ValueError("object track length != camera track length")
            box = Box3D(np.zeros(3), 0.0, obj.states[0].dims)
            for p in obj.landmarks:
                d = min(geom.point_to_box_face_distance(box, p, f)
                        for f in geom.FACES)
                if d > 1e-9:
                    raise ValueError("object landmark off the box surface")

    @property
    def n_frames(self):
        return len(self.camera)

    def timestamps(self):
        return np.arange(self.n_frames) * self.dt


# ---------------------------------------------------------------------------
# Object kinematics


def propagate_object(state: ObjectState, control, dt, label="car"):
    """One motion-model step; ``control`` = (speed, steer) overwrites the
    rates after propagating with the current ones.

    Cars follow a kinematic single-track model: the position advances
    along the heading and the yaw rate is v * tan(steer) / wheelbase with
    wheelbase 0.6 * length.  Pedestrians move at constant velocity along
    their heading (steer ignored).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    new_pos = state.position + heading(state.yaw) * (state.speed * dt)
    if label == "car":
        wheelbase = CAR_WHEELBASE_RATIO * state.dims[0]
        new_yaw = state.yaw + np.tan(state.steer) * state.speed * dt / wheelbase
    else:
        new_yaw = state.yaw
    speed, steer = control
    return ObjectState(new_pos, new_yaw, state.dims, float(speed), float(steer))


def rollout(init: ObjectState, controls, dt, label="car"):
    """States at every frame for a control sequence (first state included)."""
    states = [init]
    for control in controls:
        states.append(propagate_object(states[-1], control, dt, label))
    return states


# ---------------------------------------------------------------------------
# Scenario construction


def _cfg(node, path, key, expected=None, default=None, required=False):
    full = f"{path}.{key}" if path else key
    if key not in node:
        if required:
            raise ConfigError(full, "missing required field")
        return default
    value = node[key]
    if expected is not None and not isinstance(value, expected):
        raise ConfigError(full, f"expected {expected}, got {type(value).__name__}")
    return value


def _parse_vec(node, path, key, length, default=None, required=False):
    value = _cfg(node, path, key, (list, tuple), default, required)
    if value is default and not required:
        return None if default is None else np.asarray(default, dtype=float)
    if len(value) != length:
        raise ConfigError(f"{path}.{key}" if path else key,
                          f"expected {length} numbers")
    return np.asarray(value, dtype=float)


def _camera_trajectory(config, n_frames, dt):
    cam = _cfg(config, "", "camera", dict, {})
    waypoints = _cfg(cam, "camera", "waypoints", list)
    if waypoints is not None:
        if len(waypoints) != n_frames:
            raise ConfigError("camera.waypoints",
                              f"expected {n_frames} entries (one per frame)")
        poses = []
        for i, wp in enumerate(waypoints):
            vec = np.asarray(wp, dtype=float)
            if vec.shape != (4,):
                raise ConfigError(f"camera.waypoints[{i}]",
                                  "expected [x, y, z, yaw]")
            poses.append(Pose.from_yaw(vec[3], vec[:3]))
        return tuple(poses)
    start = _parse_vec(cam, "camera", "start", 3, default=[0.0, -1.5, 0.0])
    yaw = float(_cfg(cam, "camera", "yaw", (int, float), 0.0))
    speed = float(_cfg(cam, "camera", "speed", (int, float), 8.0))
    yaw_rate = float(_cfg(cam, "camera", "yaw_rate", (int, float), 0.0))
    poses = []
    pos = start.copy()
    for _ in range(n_frames):
        poses.append(Pose.from_yaw(yaw, pos))
        # a level camera advances along its optical axis (+z of rot_y(yaw))
        pos = pos + rot_y(yaw) @ np.array([0.0, 0.0, speed * dt])
        yaw = geom.wrap_angle(yaw + yaw_rate * dt)
    return tuple(poses)


def _sample_face_points(dims, count, rng):
    """Uniform points on the 4 vertical faces, weighted by face area."""
    length, height, width = dims
    areas = np.array([width * height, width * height,
                      length * height, length * height])
    faces = rng.choice(4, size=count, p=areas / areas.sum())
    pts = np.empty((count, 3))
    u = rng.uniform(-0.5, 0.5, count)
    v = rng.uniform(-0.5, 0.5, count)
    for i, f in enumerate(faces):
        if f < 2:  # +x / -x faces
            sign = 1.0 if f == 0 else -1.0
            pts[i] = [sign * length / 2.0, v[i] * height, u[i] * width]
        else:  # +z / -z faces
            sign = 1.0 if f == 2 else -1.0
            pts[i] = [u[i] * length, v[i] * height, sign * width / 2.0]
    return pts


def _parse_noise(node, focal):
    sigma_f = float(_cfg(node, "noise", "feature_sigma_px", (int, float), 0.5))
    sigma_b = float(_cfg(node, "noise", "box_sigma_px", (int, float), 1.0))
    vp_rate = float(_cfg(node, "noise", "viewpoint_error_rate", (int, float), 0.0))
    dropout = float(_cfg(node, "noise", "dropout_rate", (int, float), 0.0))
    seed = int(_cfg(node, "noise", "seed", int, 0))
    try:
        return NoiseSpec(sigma_f / focal, sigma_b / focal, vp_rate, dropout,
                         seed)
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from exc


def generate_scenario(config: dict, seed: int) -> Scenario:
    """Deterministic scenario from a JSON-compatible config dict."""
    if not isinstance(config, dict):
        raise ConfigError("", "config must be a mapping")
    rng = np.random.default_rng(seed)

    rig_cfg = _cfg(config, "", "rig", dict, {})
    baseline = float(_cfg(rig_cfg, "rig", "baseline_m", (int, float), 0.54))
    focal = float(_cfg(rig_cfg, "rig", "focal_px", (int, float), 700.0))
    img_w = float(_cfg(rig_cfg, "rig", "image_w_px", (int, float), 1240.0))
    img_h = float(_cfg(rig_cfg, "rig", "image_h_px", (int, float), 376.0))
    if baseline <= 0:
        raise ConfigError("rig.baseline_m", "must be positive")
    if focal <= 0:
        raise ConfigError("rig.focal_px", "must be positive")
    rig = StereoRig.horizontal(baseline, focal, img_w, img_h)

    dt = float(_cfg(config, "", "dt_s", (int, float), 0.1))
    if dt <= 0:
        raise ConfigError("dt_s", "must be positive")
    n_frames = int(_cfg(config, "", "n_frames", int, 50))
    if n_frames < 1:
        raise ConfigError("n_frames", "must be at least 1")

    camera = _camera_trajectory(config, n_frames, dt)

    lm_cfg = _cfg(config, "", "landmarks", dict, {})
    background_n = int(_cfg(lm_cfg, "landmarks", "background_n", int, 500))
    per_object_n = int(_cfg(lm_cfg, "landmarks", "per_object_n", int, 100))
    if background_n < 0 or per_object_n < 0:
        raise ConfigError("landmarks", "counts must be non-negative")

    # background landmarks fill a box around the camera path
    cam_pos = np.array([p.translation for p in camera])
    lo = cam_pos.min(axis=0) + np.array([-25.0, -6.0, -5.0])
    hi = cam_pos.max(axis=0) + np.array([25.0, 0.0, 70.0])
    hi[1] = min(hi[1] + 1.5, 0.0)  # keep landmarks at or above the ground
    background = rng.uniform(lo, hi, size=(background_n, 3))

    objects = []
    for i, obj_cfg in enumerate(_cfg(config, "", "objects", list, [])):
        path = f"objects[{i}]"
        if not isinstance(obj_cfg, dict):
            raise ConfigError(path, "expected a mapping")
        label = _cfg(obj_cfg, path, "class", str, "car")
        if label not in DEFAULT_PRIORS:
            raise ConfigError(f"{path}.class",
                              f"unknown class {label!r}")
        prior = DEFAULT_PRIORS[label]
        init_cfg = _cfg(obj_cfg, path, "init", dict, required=True)
        pos = np.array([
            float(_cfg(init_cfg, f"{path}.init", "x", (int, float), 0.0)),
            float(_cfg(init_cfg, f"{path}.init", "y", (int, float), 0.0)),
            float(_cfg(init_cfg, f"{path}.init", "z", (int, float), 20.0)),
        ])
        yaw = float(_cfg(init_cfg, f"{path}.init", "yaw", (int, float), 0.0))
        speed = float(_cfg(init_cfg, f"{path}.init", "v", (int, float), 0.0))
        steer = float(_cfg(init_cfg, f"{path}.init", "steer", (int, float), 0.0))
        dims = _parse_vec(obj_cfg, path, "dims", 3)
        if dims is None:
            dims = prior.mean
        elif np.any(dims <= 0):
            raise ConfigError(f"{path}.dims", "must be positive")
        # rest the box on the ground unless the config set a height
        if "y" not in init_cfg:
            pos[1] = -dims[1] / 2.0
        init = ObjectState(pos, yaw, dims, speed, steer)

        controls_cfg = _cfg(obj_cfg, path, "controls", (list, dict),
                            {"v": speed, "steer": steer})
        if isinstance(controls_cfg, dict):
            v = float(_cfg(controls_cfg, f"{path}.controls", "v",
                           (int, float), speed))
            d = float(_cfg(controls_cfg, f"{path}.controls", "steer",
                           (int, float), steer))
            controls = [(v, d)] * (n_frames - 1)
        else:
            if len(controls_cfg) != n_frames - 1:
                raise ConfigError(f"{path}.controls",
                                  f"expected {n_frames - 1} entries")
            controls = [(float(c[0]), float(c[1])) for c in controls_cfg]

        states = tuple(rollout(init, controls, dt, label))
        landmarks = _sample_face_points(dims, per_object_n, rng)
        objects.append(SimObject(i + 1, label, states, landmarks, prior))

    noise = _parse_noise(_cfg(config, "", "noise", dict, {}), focal)
    return Scenario(dt, rig, camera, tuple(objects), background, noise)


# ---------------------------------------------------------------------------
# Measurement synthesis


def _in_image(uv, rig: StereoRig):
    return (abs(uv[0]) <= rig.u_half_extent
            and abs(uv[1]) <= rig.v_half_extent)


def _ray_hits_box(origin, point, box: Box3D, margin=1e-6):
    """True if the open segment origin->point passes through the box."""
    pose = box.pose
    o = pose.apply_inverse(origin)
    d = pose.apply_inverse(point) - o
    half = box.dims / 2.0
    t_lo, t_hi = 0.0, 1.0 - margin
    for axis in range(3):
        if abs(d[axis]) < 1e-12:
            if abs(o[axis]) > half[axis]:
                return False
            continue
        t1 = (-half[axis] - o[axis]) / d[axis]
        t2 = (half[axis] - o[axis]) / d[axis]
        if t1 > t2:
            t1, t2 = t2, t1
        t_lo = max(t_lo, t1)
        t_hi = min(t_hi, t2)
        if t_lo > t_hi:
            return False
    return True


def _world_boxes(scenario: Scenario, t):
    return [Box3D(obj.states[t].position, obj.states[t].yaw,
                  obj.states[t].dims) for obj in scenario.objects]


def _occluded(world_point, cam_center, boxes, skip_index):
    for j, box in enumerate(boxes):
        if j == skip_index:
            continue
        if _ray_hits_box(cam_center, world_point, box):
            return True
    return False


def synthesize_frame(scenario: Scenario, t: int,
                     noise: NoiseSpec | None = None) -> FrameMeasurements:
    """Noisy measurements for frame ``t``; deterministic per (seed, t)."""
    if not 0 <= t < scenario.n_frames:
        raise ValueError(f"frame {t} outside scenario range")
    if noise is None:
        noise = scenario.noise
    rng = np.random.default_rng((noise.seed, t))
    rig = scenario.rig
    x_cam = scenario.camera[t]
    x_right = x_cam.compose(rig.extrinsic.inverse())
    boxes = _world_boxes(scenario, t)

    semantic = []
    for j, (obj, box) in enumerate(zip(scenario.objects, boxes)):
        state = obj.states[t]
        verts_cam = x_cam.apply_inverse(geom.box_vertices(box))
        if np.any(verts_cam[:, 2] <= geom.EPS_Z):
            continue
        uv = verts_cam[:, :2] / verts_cam[:, 2:]
        raw = np.array([uv[:, 0].min(), uv[:, 1].min(),
                        uv[:, 0].max(), uv[:, 1].max()])
        lo = np.array([-rig.u_half_extent, -rig.v_half_extent])
        hi = -lo
        clipped = np.clip(raw, np.concatenate([lo, lo]),
                          np.concatenate([hi, hi]))
        if clipped[0] >= clipped[2] or clipped[1] >= clipped[3]:
            continue  # entirely outside the image
        valid = tuple(bool(abs(c - r) < 1e-12)
                      for c, r in zip(clipped, raw))
        verts_world = geom.box_vertices(box)
        if all(_occluded(v, x_cam.translation, boxes, j)
               for v in verts_world):
            continue  # fully hidden behind a nearer object
        if rng.uniform() < noise.dropout_rate:
            continue
        edges = clipped.copy()
        for i in range(4):
            if valid[i]:
                edges[i] += rng.normal(0.0, noise.box_sigma)
        if edges[0] > edges[2] or edges[1] > edges[3]:
            continue  # noise collapsed the box; drop the detection
        vp = classify_viewpoint_world(x_cam, state)
        if rng.uniform() < noise.viewpoint_error_rate:
            shift = 1 if rng.uniform() < 0.5 else -1
            vp = Viewpoint((vp.horizontal + shift) % 8, vp.vertical)
        semantic.append(SemanticMeasurement(
            obj.object_id, obj.label, BBox2D(*edges), vp,
            truncated=not all(valid), valid_edges=valid))

    features = []
    next_id = 0
    groups = [(0, scenario.background, None)]
    for j, obj in enumerate(scenario.objects):
        world_pts = obj.states[t].pose.apply(obj.landmarks)
        groups.append((obj.object_id, world_pts, j))
    for anchor_id, pts, skip in groups:
        for p in np.atleast_2d(pts):
            fid = next_id
            next_id += 1
            pl = x_cam.apply_inverse(p)
            pr = x_right.apply_inverse(p)
            if pl[2] <= geom.EPS_Z or pr[2] <= geom.EPS_Z:
                continue
            uvl = pl[:2] / pl[2]
            uvr = pr[:2] / pr[2]
            if not (_in_image(uvl, rig) and _in_image(uvr, rig)):
                continue
            if (_occluded(p, x_cam.translation, boxes, skip)
                    or _occluded(p, x_right.translation, boxes, skip)):
                continue
            uvl = uvl + rng.normal(0.0, noise.feature_sigma, 2)
            uvr = uvr + rng.normal(0.0, noise.feature_sigma, 2)
            features.append(FeatureObs(fid, anchor_id, uvl, uvr))

    return FrameMeasurements(t * scenario.dt, tuple(semantic),
                             tuple(features), noise.feature_sigma,
                             noise.box_sigma)


def synthesize_all(scenario: Scenario, noise: NoiseSpec | None = None):
    return [synthesize_frame(scenario, t, noise)
            for t in range(scenario.n_frames)]


# ---------------------------------------------------------------------------
# Measurement log serialization (JSON lines, one frame per line)


def frame_to_dict(frame: FrameMeasurements) -> dict:
    return {
        "t": frame.timestamp,
        "feature_sigma": frame.feature_sigma,
        "box_sigma": frame.box_sigma,
        "semantic": [{
            "object_id": s.object_id,
            "label": s.label,
            "box": list(s.box.as_array()),
            "viewpoint": [s.viewpoint.horizontal, s.viewpoint.vertical],
            "truncated": s.truncated,
            "valid_edges": list(s.valid_edges),
        } for s in frame.semantic],
        "features": [{
            "id": f.feature_id,
            "anchor": f.anchor_id,
            "left": list(f.left),
            "right": list(f.right),
        } for f in frame.features],
    }


def frame_from_dict(record: dict) -> FrameMeasurements:
    semantic = tuple(SemanticMeasurement(
        s["object_id"], s["label"], BBox2D(*s["box"]),
        Viewpoint(*s["viewpoint"]), s["truncated"], tuple(s["valid_edges"]))
        for s in record["semantic"])
    features = tuple(FeatureObs(
        f["id"], f["anchor"], np.asarray(f["left"]), np.asarray(f["right"]))
        for f in record["features"])
    return FrameMeasurements(record["t"], semantic, features,
                             record.get("feature_sigma", 0.0),
                             record.get("box_sigma", 0.0))


def write_measurements(path, frames):
    with open(path, "w") as handle:
        for frame in frames:
            handle.write(json.dumps(frame_to_dict(frame), sort_keys=True))
            handle.write("\n")


def read_measurements(path):
    frames = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                frames.append(frame_from_dict(json.loads(line)))
    return frames
