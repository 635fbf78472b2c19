"""Sliding-window estimation of camera ego-motion and 3D object tracks.

The solve is staged: :func:`solve_ego` refines the camera window and the
background landmarks from static feature observations, then
:func:`solve_object` refines each object track independently with the
camera poses held fixed, fusing feature, semantic box, motion-model and
dimension-prior residuals.  :func:`align_point_cloud` snaps a box pose to
its anchored landmark cloud as a post-step.  :class:`WindowTracker`
chains the stages over a measurement stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import residuals as res
from .associate import associate_objects, reject_outliers
from .boxinfer import (DEFAULT_PRIORS, BBox2D, DimensionPrior, infer_pose,
                       selection_set)
from .errors import BehindCamera, DegenerateGroup, NoConvergence
from .geometry import (ObjectState, Pose, StereoRig, project_rotation, rot_y,
                       so3_exp, wrap_angle)
from .nls import DenseNormalEquations, SchurNormalEquations, SolveReport, \
    solve_nls

MIN_PARALLAX_DEG = 0.5


@dataclass(frozen=True)
class EstimatorConfig:
    """Covariances, loss parameters and window settings for both solvers."""

    feature_sigma: float = 0.5 / 700.0
    box_sigma: float = 1.0 / 700.0
    # motion sigmas over (position x, y, z, yaw, steer, speed), scaled by
    # sqrt(dt) when whitening
    motion_sigmas: tuple = (0.05, 0.05, 0.05, 0.02, 0.05, 0.5)
    surface_sigma: float = 0.05
    huber_scale: float = 3.0
    window: int = 10
    max_iterations: int = 50
    align_position_only: bool = False
    dt: float = 0.1


@dataclass(frozen=True)
class ResidualBlock:
    """One measurement term of a tracking problem.

    ``kind`` is one of "feature", "semantic", "motion", "prior".  The
    payload fields that apply depend on the kind; ``covariance`` is the
    full covariance of the residual and ``robust`` requests a Huber loss.
    """

    kind: str
    frame: int
    object_id: int | None = None
    landmark_id: int | None = None
    payload: dict = field(default_factory=dict)
    covariance: np.ndarray | None = None
    robust: bool = False


@dataclass
class ObjectTrack:
    """Window data of one tracked object."""

    label: str
    frames: list
    states: list
    landmarks: dict
    prior: DimensionPrior


@dataclass
class TrackProblem:
    """Window of camera poses, object tracks, landmarks and residuals."""

    camera_poses: list
    landmarks: dict
    objects: dict
    blocks: list
    gauge_index: int = 0

    def __post_init__(self):
        n = len(self.camera_poses)
        if not 0 <= self.gauge_index < n:
            raise ValueError("gauge index out of range")
        for block in self.blocks:
            if not 0 <= block.frame < n:
                raise ValueError("residual block references a missing frame")


@dataclass(frozen=True)
class EgoResult:
    poses: list
    landmarks: dict
    report: SolveReport
    insufficient_parallax: bool


@dataclass(frozen=True)
class ObjectResult:
    states: list
    dims: np.ndarray
    landmarks: dict
    report: SolveReport
    under_constrained: bool


def _sqrt_info(cov, dim, default_sigma):
    if cov is None:
        return 1.0 / default_sigma
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        return 1.0 / np.sqrt(cov)
    if np.allclose(cov, np.diag(np.diag(cov))):
        return 1.0 / np.sqrt(np.diag(cov))
    return np.linalg.cholesky(np.linalg.inv(cov)).T


def feature_block(frame, landmark_id, left, right, sigma, object_id=None):
    cov = sigma ** 2 * np.ones(4)
    return ResidualBlock("feature", frame, object_id, landmark_id,
                         {"left": np.asarray(left, dtype=float),
                          "right": np.asarray(right, dtype=float)},
                         cov, robust=True)


def semantic_block(frame, object_id, edges, valid, viewpoint, sigma):
    cov = sigma ** 2 * np.ones(4)
    return ResidualBlock("semantic", frame, object_id, None,
                         {"edges": np.asarray(edges, dtype=float),
                          "valid": tuple(valid), "viewpoint": viewpoint},
                         cov)


def motion_block(frame, prev_frame, object_id, dt, sigmas):
    cov = np.asarray(sigmas, dtype=float) ** 2 * dt
    return ResidualBlock("motion", frame, object_id, None,
                         {"prev_frame": prev_frame, "dt": dt}, cov)


def prior_block(frame, object_id, prior):
    return ResidualBlock("prior", frame, object_id, None, {"prior": prior},
                         np.asarray(prior.sigma, dtype=float) ** 2)


# ---------------------------------------------------------------------------
# ego-motion window


class _EgoProblem:
    """Adapter exposing the ego window to the NLS engine.

    State is (poses, landmark array); the gauge pose is constant.  Only
    landmarks observed in at least two frames are optimized; blocks of
    other landmarks carry no information about the relative poses beyond
    a stereo depth and are dropped.
    """

    def __init__(self, poses, landmarks, blocks, rig, config, gauge_index):
        self.rig = rig
        self.config = config
        self.gauge_index = gauge_index
        self.n_poses = len(poses)
        by_lm = {}
        for block in blocks:
            if block.kind != "feature" or block.object_id is not None:
                continue
            by_lm.setdefault(block.landmark_id, []).append(block)
        self.lm_ids = sorted(lm for lm, obs in by_lm.items()
                             if len({b.frame for b in obs}) >= 2
                             and lm in landmarks)
        self.lm_slot = {lm: i for i, lm in enumerate(self.lm_ids)}
        self.obs = [b for lm in self.lm_ids for b in by_lm[lm]]
        # batch the observations per frame for vectorized evaluation
        per_frame = {}
        for b in self.obs:
            per_frame.setdefault(b.frame, []).append(b)
        self.batches = []
        for frame in sorted(per_frame):
            bs = per_frame[frame]
            self.batches.append((
                frame,
                np.array([self.lm_slot[b.landmark_id] for b in bs]),
                np.array([b.payload["left"] for b in bs]),
                np.array([b.payload["right"] for b in bs])))
        self.initial = (list(poses),
                        np.array([landmarks[lm] for lm in self.lm_ids])
                        .reshape(len(self.lm_ids), 3))

    def _offset(self, frame):
        if frame == self.gauge_index:
            return None
        return 6 * (frame - 1 if frame > self.gauge_index else frame)

    def _evaluate(self, state, eq):
        poses, lms = state
        with_jac = isinstance(eq, SchurNormalEquations)
        info = 1.0 / self.config.feature_sigma
        delta = self.config.huber_scale
        for frame, lm_idx, left, right in self.batches:
            r, jac, valid = res.feature_residuals_batch(
                left, right, poses[frame], None, lms[lm_idx], self.rig,
                jacobians=with_jac)
            if len(r) == 0:
                continue
            if with_jac:
                offset = self._offset(frame)
                jac_cam = jac["camera"]
                if offset is None:
                    # the gauge frame contributes no dense columns
                    offset, jac_cam = 0, jac_cam[:, :, :0]
                eq.add_batch(offset, jac_cam, r, lm_idx[valid],
                             jac["landmark"], sqrt_info=info,
                             huber_delta=delta, tag="feature")
            else:
                eq.add_batch(0, None, r, sqrt_info=info, huber_delta=delta,
                             tag="feature")
        return eq

    def linearize(self, state):
        eq = SchurNormalEquations(6 * (self.n_poses - 1), len(self.lm_ids))
        return self._evaluate(state, eq)

    def cost(self, state):
        return self._evaluate(state, DenseNormalEquations(0)).cost

    def retract(self, state, step):
        poses, lms = state
        new_poses = []
        for f, pose in enumerate(poses):
            offset = self._offset(f)
            if offset is None:
                new_poses.append(pose)
                continue
            d = step[offset:offset + 6]
            rot = project_rotation(pose.rotation @ so3_exp(d[3:]))
            new_poses.append(Pose(rot, pose.translation + d[:3]))
        n_dense = 6 * (self.n_poses - 1)
        new_lms = lms + step[n_dense:].reshape(-1, 3)
        return new_poses, new_lms


def mean_triangulation_angle(poses, landmarks, blocks, lm_ids=None):
    """Mean ray angle (radians) between the first and last observation of
    each landmark; the parallax available to the window."""
    frames_by_lm = {}
    for block in blocks:
        if block.kind == "feature" and block.object_id is None:
            frames_by_lm.setdefault(block.landmark_id, set()).add(block.frame)
    angles = []
    for lm, frames in frames_by_lm.items():
        if lm_ids is not None and lm not in lm_ids:
            continue
        if len(frames) < 2 or lm not in landmarks:
            continue
        first, last = min(frames), max(frames)
        ray_a = landmarks[lm] - poses[first].translation
        ray_b = landmarks[lm] - poses[last].translation
        denom = np.linalg.norm(ray_a) * np.linalg.norm(ray_b)
        if denom < 1e-12:
            continue
        cos = np.clip(ray_a @ ray_b / denom, -1.0, 1.0)
        angles.append(math.acos(cos))
    return float(np.mean(angles)) if angles else 0.0


def solve_ego(problem: TrackProblem, rig: StereoRig,
              config: EstimatorConfig = EstimatorConfig()):
    """Refine the camera window and background landmarks.

    Only background feature blocks participate; the gauge pose stays
    fixed.  Returns an :class:`EgoResult`; the ``insufficient_parallax``
    flag is set when the mean triangulation angle over the optimized
    landmarks is below half a degree (the solve still runs).
    """
    if len(problem.camera_poses) < 2:
        raise ValueError("ego window needs at least two camera poses")
    ego = _EgoProblem(problem.camera_poses, problem.landmarks, problem.blocks,
                      rig, config, problem.gauge_index)
    parallax = mean_triangulation_angle(problem.camera_poses,
                                        problem.landmarks, problem.blocks,
                                        set(ego.lm_ids))
    flag = parallax < math.radians(MIN_PARALLAX_DEG)
    state, report = solve_nls(ego, ego.initial,
                              max_iterations=config.max_iterations)
    if not report.converged:
        raise NoConvergence("ego window failed to converge; state unchanged")
    poses, lms = state
    landmarks = dict(problem.landmarks)
    for lm_id, value in zip(ego.lm_ids, lms):
        landmarks[lm_id] = value
    return EgoResult(poses, landmarks, report, flag)


# ---------------------------------------------------------------------------
# per-object window


class _ObjectProblem:
    """Adapter exposing one object track to the NLS engine.

    State is (object states, dims, landmark array); camera poses are
    constants.  Dims can be locked (under-constrained tracks).  The dense
    parameter layout is one 6-slot per window state (position, yaw,
    steer, speed) followed by dims when free.
    """

    def __init__(self, track, blocks, camera_poses, rig, config,
                 lock_dims=False):
        self.track = track
        self.camera_poses = camera_poses
        self.rig = rig
        self.config = config
        self.lock_dims = lock_dims
        self.frame_slot = {f: i for i, f in enumerate(track.frames)}
        self.lm_ids = sorted(track.landmarks)
        self.lm_slot = {lm: i for i, lm in enumerate(self.lm_ids)}
        self.blocks = [b for b in blocks if b.kind != "feature"]
        per_frame = {}
        for b in blocks:
            if b.kind == "feature":
                per_frame.setdefault(b.frame, []).append(b)
        self.feature_batches = []
        for frame in sorted(per_frame):
            bs = [b for b in per_frame[frame]
                  if b.landmark_id in self.lm_slot]
            if not bs:
                continue
            self.feature_batches.append((
                frame,
                np.array([self.lm_slot[b.landmark_id] for b in bs]),
                np.array([b.payload["left"] for b in bs]),
                np.array([b.payload["right"] for b in bs])))
        self.n_states = len(track.frames)
        self.dims_offset = 6 * self.n_states
        self.dense_size = self.dims_offset + (0 if lock_dims else 3)
        lms = np.array([track.landmarks[lm] for lm in self.lm_ids])
        self.initial = (list(track.states),
                        np.asarray(track.states[0].dims, dtype=float),
                        lms.reshape(len(self.lm_ids), 3))

    def _with_dims(self, states, dims):
        return [s.replace(dims=dims) for s in states]

    def _pad(self, jac):
        """Embed a (k, 4) position+yaw Jacobian into the 6-wide slot."""
        out = np.zeros((jac.shape[0], 6))
        out[:, :4] = jac
        return out

    def _evaluate(self, state, eq):
        states, dims, lms = state
        states = self._with_dims(states, dims)
        with_jac = isinstance(eq, SchurNormalEquations)
        cfg = self.config
        info_feat = 1.0 / cfg.feature_sigma
        for frame, lm_idx, left, right in self.feature_batches:
            slot = self.frame_slot[frame]
            r, jac, valid = res.feature_residuals_batch(
                left, right, self.camera_poses[frame], states[slot],
                lms[lm_idx], self.rig, jacobians=with_jac)
            if len(r) == 0:
                continue
            if with_jac:
                jac_obj = np.zeros((len(r), 4, 6))
                jac_obj[:, :, :4] = jac["object"]
                eq.add_batch(6 * slot, jac_obj, r, lm_idx[valid],
                             jac["landmark"], sqrt_info=info_feat,
                             huber_delta=cfg.huber_scale, tag="feature")
            else:
                eq.add_batch(0, None, r, sqrt_info=info_feat,
                             huber_delta=cfg.huber_scale, tag="feature")
        for block in self.blocks:
            slot = self.frame_slot[block.frame]
            obj = states[slot]
            if block.kind == "semantic":
                sel = selection_set(block.payload["viewpoint"])
                try:
                    r, jac, mask = res.semantic_residual(
                        block.payload["edges"], block.payload["valid"], sel,
                        self.camera_poses[block.frame], obj,
                        jacobians=with_jac)
                except BehindCamera:
                    continue
                if len(r) == 0:
                    continue
                info = _sqrt_info(block.covariance, 4, cfg.box_sigma)
                if not np.isscalar(info):
                    info = np.asarray(info)[mask]
                if with_jac:
                    mats = [(6 * slot, self._pad(jac["object"]))]
                    if not self.lock_dims:
                        mats.append((self.dims_offset, jac["dims"]))
                    eq.add(mats, r, sqrt_info=info, tag="semantic")
                else:
                    eq.add([], r, sqrt_info=info, tag="semantic")
            elif block.kind == "motion":
                prev_slot = self.frame_slot[block.payload["prev_frame"]]
                dt = block.payload["dt"]
                r, jac = res.motion_residual(obj, states[prev_slot], dt,
                                             self.track.label,
                                             jacobians=with_jac)
                info = _sqrt_info(block.covariance, 6,
                                  cfg.motion_sigmas[0] * math.sqrt(dt))
                if with_jac:
                    mats = [(6 * slot, jac["cur"]),
                            (6 * prev_slot, jac["prev"])]
                    if not self.lock_dims:
                        mats.append((self.dims_offset, jac["dims"]))
                    eq.add(mats, r, sqrt_info=info, tag="motion")
                else:
                    eq.add([], r, sqrt_info=info, tag="motion")
            elif block.kind == "prior":
                if self.lock_dims:
                    continue
                prior = block.payload["prior"]
                r, jac = res.prior_residual(dims, prior, jacobians=with_jac)
                info = _sqrt_info(block.covariance, 3, prior.sigma[0])
                if with_jac:
                    eq.add([(self.dims_offset, jac["dims"])], r,
                           sqrt_info=info, tag="prior")
                else:
                    eq.add([], r, sqrt_info=info, tag="prior")
            else:
                raise ValueError(f"unknown residual kind {block.kind!r}")
        return eq

    def linearize(self, state):
        eq = SchurNormalEquations(self.dense_size, len(self.lm_ids))
        return self._evaluate(state, eq)

    def cost(self, state):
        return self._evaluate(state, DenseNormalEquations(0)).cost

    def retract(self, state, step):
        states, dims, lms = state
        new_states = []
        for i, s in enumerate(states):
            d = step[6 * i:6 * i + 6]
            new_states.append(s.replace(position=s.position + d[:3],
                                        yaw=wrap_angle(s.yaw + d[3]),
                                        steer=s.steer + d[4],
                                        speed=s.speed + d[5]))
        if self.lock_dims:
            new_dims = dims
        else:
            new_dims = np.maximum(
                dims + step[self.dims_offset:self.dims_offset + 3], 1e-3)
        new_lms = lms + step[self.dense_size:].reshape(-1, 3)
        return new_states, new_dims, new_lms


def solve_object(problem: TrackProblem, object_id, rig: StereoRig,
                 config: EstimatorConfig = EstimatorConfig()):
    """Refine one object track with the camera poses held fixed.

    Fuses the track's feature, semantic, motion and prior blocks.  When
    the track covers a single frame with semantic measurements only, the
    problem cannot constrain dims: they are locked to the prior mean and
    the ``under_constrained`` flag is set.
    """
    track = problem.objects[object_id]
    if not track.frames:
        raise ValueError("object track has no frames")
    blocks = [b for b in problem.blocks if b.object_id == object_id]
    has_features = any(b.kind == "feature" for b in blocks)
    under = len(track.frames) == 1 and not has_features
    if under:
        track = replace(
            track,
            states=[s.replace(dims=track.prior.mean) for s in track.states])
    obj = _ObjectProblem(track, blocks, problem.camera_poses, rig, config,
                         lock_dims=under)
    state, report = solve_nls(obj, obj.initial,
                              max_iterations=config.max_iterations)
    if not report.converged:
        raise NoConvergence(
            f"object {object_id} window failed to converge; state unchanged")
    states, dims, lms = state
    states = [s.replace(dims=dims) for s in states]
    landmarks = {lm: value for lm, value in zip(obj.lm_ids, lms)}
    return ObjectResult(states, dims, landmarks, report, under)


# ---------------------------------------------------------------------------
# point-cloud-to-box alignment


class _AlignProblem:
    def __init__(self, world_points, faces, template, config, position_only):
        self.points = world_points
        self.faces = faces
        self.template = template
        self.config = config
        self.dim = 3 if position_only else 4

    def _evaluate(self, state, eq):
        with_jac = eq.size > 0
        info = 1.0 / self.config.surface_sigma
        delta = self.config.huber_scale
        for point, face in zip(self.points, self.faces):
            r, jac = res.point_surface_residual(point, state, face,
                                                jacobians=with_jac)
            if with_jac:
                eq.add([(0, jac["object"][:, :self.dim])], r, sqrt_info=info,
                       huber_delta=delta, tag="point_surface")
            else:
                eq.add([], r, sqrt_info=info, huber_delta=delta,
                       tag="point_surface")
        return eq

    def linearize(self, state):
        return self._evaluate(state, DenseNormalEquations(self.dim))

    def cost(self, state):
        return self._evaluate(state, DenseNormalEquations(0)).cost

    def retract(self, state, step):
        yaw = state.yaw if self.dim == 3 else wrap_angle(state.yaw + step[3])
        return state.replace(position=state.position + step[:3], yaw=yaw)


def align_point_cloud(state: ObjectState, local_points,
                      config: EstimatorConfig = EstimatorConfig(),
                      position_only=None):
    """Snap a box pose onto its anchored landmark cloud.

    ``local_points`` are object-frame landmark estimates.  Each point is
    assigned its nearest box face at entry (assignment fixed during the
    solve) and position plus yaw (or position only) minimize the robust
    point-to-face distances, dims unchanged.  Fewer than 3 points, or all
    points on a single face, leave the pose unobservable: the input state
    is returned with the flag False.  Returns (state, applied).
    """
    from .geometry import Box3D, nearest_face
    local_points = np.atleast_2d(np.asarray(local_points, dtype=float))
    if len(local_points) < 3:
        return state, False
    box = Box3D(np.zeros(3), 0.0, state.dims)
    faces = [nearest_face(box, p) for p in local_points]
    if len(set(faces)) < 2:
        return state, False
    if position_only is None:
        position_only = config.align_position_only
    pose = state.pose
    world_points = np.array([pose.apply(p) for p in local_points])
    problem = _AlignProblem(world_points, faces, state, config, position_only)
    new_state, report = solve_nls(problem, state,
                                  max_iterations=config.max_iterations)
    if not report.converged:
        return state, False
    return new_state, True


# ---------------------------------------------------------------------------
# sliding-window tracker


@dataclass
class _TrackData:
    track_id: int
    label: str
    prior: DimensionPrior
    frames: list = field(default_factory=list)
    states: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)
    feature_obs: list = field(default_factory=list)
    semantic_obs: list = field(default_factory=list)
    last_box: BBox2D | None = None
    speed_initialized: bool = False


class WindowTracker:
    """Chains association, ego-motion and object solves over a stream.

    Feed measurement frames in time order through :meth:`process`; read
    the per-frame camera pose history from :attr:`camera_trajectory` and
    the object tracks from :attr:`object_trajectories` (internal track id
    to list of (frame index, ObjectState)).

    ``object_blind`` treats every feature as static background and skips
    object tracking; it exists as a degraded baseline for comparison.
    """

    def __init__(self, rig: StereoRig, config: EstimatorConfig = None,
                 initial_pose: Pose = None, object_blind=False,
                 depth_range=(2.0, 80.0)):
        self.rig = rig
        self.config = config if config is not None else EstimatorConfig()
        self.object_blind = object_blind
        self.depth_range = depth_range
        self.initial_pose = (initial_pose if initial_pose is not None
                             else Pose.identity())
        self.camera_trajectory = []
        self.bg_landmarks = {}
        self.bg_obs = {}
        self.tracks = {}
        self.object_trajectories = {}
        self._detector_to_track = {}
        self._next_track_id = 0
        self._prev_feature_uv = {}
        self._frame = -1
        self._prev_boxes = {}
        self.ego_reports = []

    # -- helpers

    def _triangulate(self, pose, left, right):
        disparity = left[0] - right[0]
        if disparity <= 1e-9:
            return None
        z = self.rig.baseline / disparity
        if not self.depth_range[0] * 0.5 <= z <= self.depth_range[1] * 2.0:
            return None
        return pose.apply(np.array([left[0] * z, left[1] * z, z]))

    def _init_pose(self):
        if self._frame == 0:
            return self.initial_pose
        if self._frame == 1:
            return self.camera_trajectory[-1]
        prev2, prev = self.camera_trajectory[-2:]
        rel = prev2.inverse().compose(prev)
        return prev.compose(rel)

    def _filter_group(self, group_obs):
        """Drop temporal mismatches within one rigid group via RANSAC."""
        paired = [(fid, left) for fid, left, _ in group_obs
                  if fid in self._prev_feature_uv]
        if len(paired) < 8:
            return group_obs
        prev = np.array([self._prev_feature_uv[fid] for fid, _ in paired])
        cur = np.array([uv for _, uv in paired])
        try:
            mask, passthrough = reject_outliers(
                prev, cur, feature_sigma=self.config.feature_sigma,
                seed=self._frame)
        except DegenerateGroup:
            return group_obs
        if passthrough:
            return group_obs
        bad = {fid for (fid, _), keep in zip(paired, mask) if not keep}
        return [obs for obs in group_obs if obs[0] not in bad]

    def _world_yaw(self, pose, cam_yaw):
        head = pose.rotation @ rot_y(cam_yaw)[:, 0]
        return math.atan2(-head[2], head[0])

    # -- per-frame stages

    def process(self, frame_measurements):
        self._frame += 1
        t = self._frame
        features = frame_measurements.features
        groups = {}
        for f in features:
            # anchor 0 marks static background in the measurement stream
            anchor = None if self.object_blind or f.anchor_id == 0 \
                else f.anchor_id
            groups.setdefault(anchor, []).append(
                (f.feature_id, np.asarray(f.left), np.asarray(f.right)))
        for key in groups:
            groups[key] = self._filter_group(groups[key])

        pose = self._init_pose()
        self.camera_trajectory.append(pose)
        self._solve_ego_window(groups.get(None, []))
        pose = self.camera_trajectory[t]

        if not self.object_blind:
            self._update_object_tracks(frame_measurements, groups, pose)

        self._prev_feature_uv = {f.feature_id: np.asarray(f.left)
                                 for f in features}

    def _solve_ego_window(self, bg_obs):
        t = self._frame
        pose = self.camera_trajectory[t]
        for fid, left, right in bg_obs:
            if fid not in self.bg_landmarks:
                point = self._triangulate(pose, left, right)
                if point is None:
                    continue
                self.bg_landmarks[fid] = point
            self.bg_obs.setdefault(fid, []).append((t, left, right))
        window = self.config.window
        start = max(0, t - window + 1)
        if t - start < 1:
            return
        blocks = []
        for fid, obs in self.bg_obs.items():
            in_window = [(f, l, r) for f, l, r in obs if f >= start]
            if len(in_window) < 2:
                continue
            for f, left, right in in_window:
                blocks.append(feature_block(f - start, fid, left, right,
                                            self.config.feature_sigma))
        if not blocks:
            return
        poses = self.camera_trajectory[start:t + 1]
        problem = TrackProblem(poses, self.bg_landmarks, {}, blocks)
        try:
            result = solve_ego(problem, self.rig, self.config)
        except NoConvergence:
            return
        self.camera_trajectory[start:t + 1] = result.poses
        self.bg_landmarks.update(result.landmarks)
        self.ego_reports.append(result.report)

    def _associate_semantic(self, semantic):
        """Map detections to internal track ids via box similarity."""
        t = self._frame
        cur_boxes = {s.object_id: s.box for s in semantic}
        rot_rel = None
        if t > 0:
            rot_rel = (self.camera_trajectory[t].rotation.T
                       @ self.camera_trajectory[t - 1].rotation)
        matches, _, new = associate_objects(self._prev_boxes, cur_boxes,
                                            rot_rel)
        det_to_track = {}
        for prev_det, cur_det in matches.items():
            if prev_det in self._detector_to_track:
                det_to_track[cur_det] = self._detector_to_track[prev_det]
        # box association can miss across an abrupt shape change (e.g. a
        # box clipped at the image border); fall back on detector-id
        # continuity for tracks not claimed by any other detection
        assigned = {tid for tid in det_to_track.values() if tid is not None}
        for cur_det in cur_boxes:
            if det_to_track.get(cur_det) is not None:
                continue
            tid = self._detector_to_track.get(cur_det)
            if tid is not None and tid in self.tracks and tid not in assigned:
                det_to_track[cur_det] = tid
                assigned.add(tid)
        for cur_det in new | (set(cur_boxes) - set(det_to_track)):
            det_to_track.setdefault(cur_det, None)
        self._prev_boxes = cur_boxes
        return det_to_track

    def _start_track(self, meas, pose):
        if not all(meas.valid_edges):
            return None
        prior = DEFAULT_PRIORS.get(meas.label, DEFAULT_PRIORS["car"])
        try:
            p_cam, yaw_cam, _ = infer_pose(meas.box, meas.viewpoint,
                                           prior.mean)
        except Exception:
            return None
        state = ObjectState(position=pose.apply(p_cam),
                            yaw=self._world_yaw(pose, yaw_cam),
                            dims=prior.mean.copy())
        track = _TrackData(self._next_track_id, meas.label, prior)
        self._next_track_id += 1
        self.tracks[track.track_id] = track
        self.object_trajectories[track.track_id] = []
        track.frames.append(self._frame)
        track.states.append(state)
        return track

    def _predict_state(self, track):
        from .simulate import propagate_object
        state = track.states[-1]
        gap = self._frame - track.frames[-1]
        for _ in range(gap):
            state = propagate_object(state, (state.speed, state.steer),
                                     self.config.dt, track.label)
        return state

    def _update_object_tracks(self, frame_measurements, groups, pose):
        t = self._frame
        det_to_track = self._associate_semantic(frame_measurements.semantic)
        seen_tracks = set()
        for meas in frame_measurements.semantic:
            track_id = det_to_track.get(meas.object_id)
            track = self.tracks.get(track_id) if track_id is not None else None
            if track is None:
                track = self._start_track(meas, pose)
                if track is None:
                    continue
            else:
                if track.frames[-1] != t:
                    track.states.append(self._predict_state(track))
                    track.frames.append(t)
            self._detector_to_track[meas.object_id] = track.track_id
            track.last_box = meas.box
            track.semantic_obs.append(
                (t, meas.box.as_array(), meas.valid_edges, meas.viewpoint))
            seen_tracks.add(track.track_id)
            # anchored features for this detection
            for fid, left, right in groups.get(meas.object_id, []):
                if fid not in track.landmarks:
                    world = self._triangulate(pose, left, right)
                    if world is None:
                        continue
                    track.landmarks[fid] = \
                        track.states[-1].pose.apply_inverse(world)
                track.feature_obs.append((t, fid, left, right))

        for track_id in sorted(seen_tracks):
            self._solve_track(self.tracks[track_id])
        for track_id in sorted(seen_tracks):
            track = self.tracks[track_id]
            self.object_trajectories[track_id].append(
                (t, track.states[-1]))

    def _maybe_init_speed(self, track):
        if track.speed_initialized or len(track.frames) < 2:
            return
        delta = track.states[-1].position - track.states[0].position
        span = (track.frames[-1] - track.frames[0]) * self.config.dt
        if span <= 0:
            return
        velocity = delta / span
        head = np.array([math.cos(track.states[-1].yaw), 0.0,
                         -math.sin(track.states[-1].yaw)])
        speed = float(velocity @ head)
        track.states = [s.replace(speed=speed) for s in track.states]
        track.speed_initialized = True

    def _solve_track(self, track):
        t = self._frame
        window = self.config.window
        start = max(0, t - window + 1)
        keep = [i for i, f in enumerate(track.frames) if f >= start]
        frames = [track.frames[i] for i in keep]
        frame_set = set(frames)
        self._maybe_init_speed(track)
        states = [track.states[i] for i in keep]
        local = {f: f - start for f in frames}
        blocks = []
        lm_used = set()
        for f, fid, left, right in track.feature_obs:
            if f in frame_set:
                blocks.append(feature_block(local[f], fid, left, right,
                                            self.config.feature_sigma,
                                            object_id=track.track_id))
                lm_used.add(fid)
        for f, edges, valid, viewpoint in track.semantic_obs:
            if f in frame_set:
                blocks.append(semantic_block(local[f], track.track_id, edges,
                                             valid, viewpoint,
                                             self.config.box_sigma))
        for prev_f, cur_f in zip(frames, frames[1:]):
            dt = (cur_f - prev_f) * self.config.dt
            blocks.append(motion_block(local[cur_f], local[prev_f],
                                       track.track_id, dt,
                                       self.config.motion_sigmas))
        blocks.append(prior_block(local[frames[-1]], track.track_id,
                                  track.prior))
        window_track = ObjectTrack(track.label, [local[f] for f in frames],
                                   states,
                                   {lm: track.landmarks[lm]
                                    for lm in lm_used},
                                   track.prior)
        poses = self.camera_trajectory[start:t + 1]
        problem = TrackProblem(poses, {}, {track.track_id: window_track},
                               blocks)
        try:
            result = solve_object(problem, track.track_id, self.rig,
                                  self.config)
        except NoConvergence:
            return
        for i, s in zip(keep, result.states):
            track.states[i] = s
        track.landmarks.update(result.landmarks)
        if track.landmarks:
            aligned, applied = align_point_cloud(
                track.states[-1], np.array(list(track.landmarks.values())),
                self.config)
            if applied:
                track.states[-1] = aligned
