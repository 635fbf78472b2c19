"""Residual families for the tracking estimators, with analytic Jacobians.

Residual conventions:

* Feature (4): stereo reprojection of one landmark, rows (left u, left v,
  right u, right v), each minus the observation.
* Semantic (4): selected box-vertex projections against the 2D box edges,
  rows ordered (u_min, u_max, v_min, v_max); truncated edges drop out.
* Motion (6): state minus kinematic prediction, components ordered
  (position x, y, z, yaw, steer, speed); yaw difference wrapped.
* Prior (3): dims minus the class prior mean.
* Point-surface (1): signed offset of a world point from its assigned box
  face plane.

Jacobian layouts follow the state orderings used by the solvers: camera
pose (translation 3, rotation-vector 3, applied as t += dt,
R <- R exp(dphi)); object state (position 3, yaw, steer, speed); dims 3.
"""

from __future__ import annotations

import numpy as np

from . import geometry as geom
from .boxinfer import SelectionSet
from .errors import BehindCamera
from .geometry import (ObjectState, Pose, StereoRig, drot_y, heading, rot_y,
                       skew, wrap_angle)
from .simulate import CAR_WHEELBASE_RATIO

# order mapping from selection rows (u_min, u_max, v_min, v_max) to the
# BBox2D edge tuple (u_min, v_min, u_max, v_max)
_EDGE_INDEX = (0, 2, 1, 3)


def _projection_jacobian(p):
    x, y, z = p
    return np.array([[1.0 / z, 0.0, -x / z ** 2],
                     [0.0, 1.0 / z, -y / z ** 2]])


def feature_residual(obs_left, obs_right, x_cam: Pose, obj: ObjectState | None,
                     landmark, rig: StereoRig, jacobians=True):
    """Stereo reprojection residual of one landmark.

    ``landmark`` is in world frame for background (``obj`` None), else in
    the object frame.  Returns (residual(4), jac dict) with keys
    "camera" (4x6), "object" (4x4), "landmark" (4x3); absent keys were
    not requested or not applicable.
    """
    landmark = np.asarray(landmark, dtype=float)
    if obj is not None:
        rot_obj = rot_y(obj.yaw)
        world = rot_obj @ landmark + obj.position
    else:
        world = landmark
    p_left = x_cam.apply_inverse(world)
    p_right = rig.extrinsic.apply(p_left)
    if p_left[2] <= geom.EPS_Z or p_right[2] <= geom.EPS_Z:
        raise BehindCamera("landmark behind a camera")
    res = np.empty(4)
    res[:2] = p_left[:2] / p_left[2] - np.asarray(obs_left)
    res[2:] = p_right[:2] / p_right[2] - np.asarray(obs_right)
    if not jacobians:
        return res, {}

    jac_l = _projection_jacobian(p_left)
    jac_r = _projection_jacobian(p_right) @ rig.extrinsic.rotation

    def stack(dp):
        """4xN from a 3xN derivative of the left-camera point."""
        return np.vstack([jac_l @ dp, jac_r @ dp])

    jac = {}
    rot_cam_t = x_cam.rotation.T
    # camera: t += dt gives dp/dt = -R^T; R <- R exp(phi) gives
    # p = exp(-phi^) R^T (w - t), so dp/dphi = [p]_x
    jac["camera"] = np.hstack([stack(-rot_cam_t), stack(skew(p_left))])
    dp_dworld = rot_cam_t
    if obj is not None:
        d_yaw = dp_dworld @ (drot_y(obj.yaw) @ landmark)
        jac["object"] = np.hstack([stack(dp_dworld), stack(d_yaw[:, None])])
        jac["landmark"] = stack(dp_dworld @ rot_obj)
    else:
        jac["landmark"] = stack(dp_dworld)
    return res, jac


def feature_residuals_batch(obs_left, obs_right, x_cam: Pose,
                            obj: ObjectState | None, landmarks,
                            rig: StereoRig, jacobians=True):
    """Vectorized :func:`feature_residual` over n landmarks.

    Rows with a point behind either camera are dropped.  Returns
    (residuals (m, 4), jac dict of stacked arrays, valid mask (n,)) where
    m = mask.sum(); jac keys as in the scalar version with a leading
    batch axis.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    obs_left = np.atleast_2d(np.asarray(obs_left, dtype=float))
    obs_right = np.atleast_2d(np.asarray(obs_right, dtype=float))
    if obj is not None:
        rot_obj = rot_y(obj.yaw)
        world = landmarks @ rot_obj.T + obj.position
    else:
        world = landmarks
    rot_cam = x_cam.rotation
    rot_ext = rig.extrinsic.rotation
    p_l = (world - x_cam.translation) @ rot_cam
    p_r = p_l @ rot_ext.T + rig.extrinsic.translation
    valid = (p_l[:, 2] > geom.EPS_Z) & (p_r[:, 2] > geom.EPS_Z)
    p_l, p_r = p_l[valid], p_r[valid]
    n = len(p_l)
    res = np.empty((n, 4))
    res[:, :2] = p_l[:, :2] / p_l[:, 2:] - obs_left[valid]
    res[:, 2:] = p_r[:, :2] / p_r[:, 2:] - obs_right[valid]
    if not jacobians:
        return res, {}, valid

    def proj_jac(p):
        out = np.zeros((len(p), 2, 3))
        inv_z = 1.0 / p[:, 2]
        out[:, 0, 0] = inv_z
        out[:, 1, 1] = inv_z
        out[:, :, 2] = -p[:, :2] * inv_z[:, None] ** 2
        return out

    jac_l = proj_jac(p_l)
    jac_r = np.einsum("nij,jk->nik", proj_jac(p_r), rot_ext)

    def stack(dp):
        """(n, 4, m) from a (n, 3, m) derivative of the left-camera point."""
        return np.concatenate([np.einsum("nij,njk->nik", jac_l, dp),
                               np.einsum("nij,njk->nik", jac_r, dp)], axis=1)

    def stack_const(dp):
        dp = np.broadcast_to(dp, (n,) + dp.shape)
        return stack(dp)

    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -p_l[:, 2]
    sk[:, 0, 2] = p_l[:, 1]
    sk[:, 1, 0] = p_l[:, 2]
    sk[:, 1, 2] = -p_l[:, 0]
    sk[:, 2, 0] = -p_l[:, 1]
    sk[:, 2, 1] = p_l[:, 0]
    jac = {"camera": np.concatenate([stack_const(-rot_cam.T), stack(sk)],
                                    axis=2)}
    if obj is not None:
        d_yaw = (landmarks[valid] @ drot_y(obj.yaw).T) @ rot_cam
        jac["object"] = np.concatenate(
            [stack_const(rot_cam.T), stack(d_yaw[:, :, None])], axis=2)
        jac["landmark"] = stack_const(rot_cam.T @ rot_obj)
    else:
        jac["landmark"] = stack_const(rot_cam.T)
    return res, jac, valid


def semantic_residual(box_edges, valid_edges, sel: SelectionSet, x_cam: Pose,
                      obj: ObjectState, jacobians=True):
    """Box-edge residual rows (u_min, u_max, v_min, v_max).

    ``box_edges`` is the BBox2D edge array (u_min, v_min, u_max, v_max)
    and ``valid_edges`` its validity flags in the same order; invalid
    (truncated) rows are dropped.  Returns (residual(k,), jac dict with
    "object" (k x 4) and "dims" (k x 3), row_mask(4,)).
    """
    box_edges = np.asarray(box_edges, dtype=float)
    rot_obj = rot_y(obj.yaw)
    rot_cam_t = x_cam.rotation.T
    rows = []
    jac_obj = []
    jac_dims = []
    mask = np.zeros(4, dtype=bool)
    for i in range(4):
        if not valid_edges[_EDGE_INDEX[i]]:
            continue
        offset = sel.signs[i] * obj.dims / 2.0
        world = rot_obj @ offset + obj.position
        p_cam = x_cam.apply_inverse(world)
        if p_cam[2] <= geom.EPS_Z:
            raise BehindCamera("selected box vertex behind camera")
        axis = 0 if i < 2 else 1
        rows.append(p_cam[axis] / p_cam[2] - box_edges[_EDGE_INDEX[i]])
        mask[i] = True
        if jacobians:
            grad = np.zeros(3)
            grad[axis] = 1.0 / p_cam[2]
            grad[2] = -p_cam[axis] / p_cam[2] ** 2
            d_world = grad @ rot_cam_t
            d_yaw = d_world @ (drot_y(obj.yaw) @ offset)
            jac_obj.append(np.concatenate([d_world, [d_yaw]]))
            jac_dims.append(d_world @ rot_obj * (sel.signs[i] / 2.0))
    res = np.array(rows)
    if not jacobians:
        return res, {}, mask
    jac = {"object": np.array(jac_obj).reshape(len(rows), 4),
           "dims": np.array(jac_dims).reshape(len(rows), 3)}
    return res, jac, mask


def motion_residual(cur: ObjectState, prev: ObjectState, dt, label="car",
                    jacobians=True):
    """State-transition residual, components (position 3, yaw, steer, speed).

    The prediction follows the same kinematics as the simulator: cars use
    the single-track model with wheelbase 0.6 * length, pedestrians move
    at constant velocity (their steer row and its Jacobians are zero).
    Returns (residual(6), jac dict with "cur" (6x6), "prev" (6x6),
    "dims" (6x3)).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    head = heading(prev.yaw)
    pred_pos = prev.position + head * prev.speed * dt
    is_car = label == "car"
    if is_car:
        wheelbase = CAR_WHEELBASE_RATIO * prev.dims[0]
        pred_yaw = prev.yaw + np.tan(prev.steer) * prev.speed * dt / wheelbase
    else:
        pred_yaw = prev.yaw
    res = np.empty(6)
    res[:3] = cur.position - pred_pos
    res[3] = wrap_angle(cur.yaw - pred_yaw)
    res[4] = (cur.steer - prev.steer) if is_car else 0.0
    res[5] = cur.speed - prev.speed
    if not jacobians:
        return res, {}

    jac_cur = np.eye(6)
    jac_prev = -np.eye(6)
    dhead = np.array([-np.sin(prev.yaw), 0.0, -np.cos(prev.yaw)])
    jac_prev[:3, 3] = -dhead * prev.speed * dt
    jac_prev[:3, 5] = -head * dt
    jac_dims = np.zeros((6, 3))
    if is_car:
        jac_prev[3, 4] = -prev.speed * dt / (np.cos(prev.steer) ** 2
                                             * wheelbase)
        jac_prev[3, 5] = -np.tan(prev.steer) * dt / wheelbase
        jac_dims[3, 0] = (np.tan(prev.steer) * prev.speed * dt
                          * CAR_WHEELBASE_RATIO / wheelbase ** 2)
    else:
        jac_cur[4, 4] = 0.0
        jac_prev[4, 4] = 0.0
    return res, {"cur": jac_cur, "prev": jac_prev, "dims": jac_dims}


def prior_residual(dims, prior, jacobians=True):
    """Dimension-prior residual d - mean; Jacobian is the identity."""
    res = np.asarray(dims, dtype=float) - prior.mean
    if not jacobians:
        return res, {}
    return res, {"dims": np.eye(3)}


def point_surface_residual(world_point, obj: ObjectState, face,
                           jacobians=True):
    """Signed offset of a world point from one box face plane.

    ``face`` as in :data:`geometry.FACES`.  Returns (residual(1,), jac
    dict with "object" (1x4): position 3 + yaw).
    """
    sign = 1.0 if face[0] == "+" else -1.0
    axis = {"x": 0, "y": 1, "z": 2}[face[1]]
    rot_obj = rot_y(obj.yaw)
    diff = np.asarray(world_point, dtype=float) - obj.position
    q = rot_obj.T @ diff
    res = np.array([q[axis] - sign * obj.dims[axis] / 2.0])
    if not jacobians:
        return res, {}
    d_pos = -rot_obj.T[axis]
    d_yaw = (drot_y(obj.yaw).T @ diff)[axis]
    return res, {"object": np.concatenate([d_pos, [d_yaw]])[None, :]}
