"""Finite-difference verification of all residual Jacobians."""

import numpy as np
import pytest

from semtrack import residuals as res
from semtrack.boxinfer import DEFAULT_PRIORS, Viewpoint, selection_set
from semtrack.errors import BehindCamera
from semtrack.geometry import (FACES, ObjectState, Pose, StereoRig, rot_y,
                               so3_exp)

STEP = 1e-6
TOL = 1e-5


def central_diff(fun, x0, dim):
    """Central finite-difference Jacobian of fun: R^dim -> R^k at zero."""
    cols = []
    for i in range(dim):
        delta = np.zeros(dim)
        delta[i] = STEP
        cols.append((fun(delta) - fun(-delta)) / (2.0 * STEP))
    return np.column_stack(cols)


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1.0)
    return np.abs(analytic - numeric).max() / scale


def random_pose(rng, spread=1.0):
    return Pose(so3_exp(rng.uniform(-0.4, 0.4, 3)),
                rng.uniform(-spread, spread, 3))


def random_object(rng):
    return ObjectState(
        position=rng.uniform([-8.0, -1.5, 8.0], [8.0, 0.5, 40.0]),
        yaw=rng.uniform(-np.pi, np.pi),
        dims=rng.uniform([2.5, 1.2, 1.4], [5.0, 2.0, 2.2]),
        speed=rng.uniform(-2.0, 12.0),
        steer=rng.uniform(-0.4, 0.4),
    )


def perturb_object(obj, d):
    return obj.replace(position=obj.position + d[:3], yaw=obj.yaw + d[3])


def perturb_full(obj, d):
    return obj.replace(position=obj.position + d[:3], yaw=obj.yaw + d[3],
                       steer=obj.steer + d[4], speed=obj.speed + d[5])


class TestFeatureResidual:
    def test_jacobians_background(self):
        rng = np.random.default_rng(11)
        rig = StereoRig.horizontal(0.54)
        for _ in range(400):
            cam = random_pose(rng, 2.0)
            lm = cam.apply(rng.uniform([-8, -4, 5], [8, 2, 50]))
            obs_l = rng.uniform(-0.3, 0.3, 2)
            obs_r = rng.uniform(-0.3, 0.3, 2)
            r0, jac = res.feature_residual(obs_l, obs_r, cam, None, lm, rig)

            def f_cam(d):
                p = Pose(cam.rotation @ so3_exp(d[3:]), cam.translation + d[:3])
                return res.feature_residual(obs_l, obs_r, p, None, lm, rig,
                                            jacobians=False)[0]

            def f_lm(d):
                return res.feature_residual(obs_l, obs_r, cam, None, lm + d,
                                            rig, jacobians=False)[0]

            assert rel_error(jac["camera"], central_diff(f_cam, r0, 6)) < TOL
            assert rel_error(jac["landmark"], central_diff(f_lm, r0, 3)) < TOL

    def test_jacobians_object_anchored(self):
        rng = np.random.default_rng(12)
        rig = StereoRig.horizontal(0.54)
        for _ in range(400):
            cam = Pose(rot_y(rng.uniform(-0.3, 0.3)),
                       rng.uniform(-1.0, 1.0, 3))
            obj = random_object(rng)
            lm = rng.uniform(-1.0, 1.0, 3) * obj.dims / 2.0
            obs_l = rng.uniform(-0.3, 0.3, 2)
            obs_r = rng.uniform(-0.3, 0.3, 2)
            try:
                _, jac = res.feature_residual(obs_l, obs_r, cam, obj, lm, rig)
            except BehindCamera:
                continue

            def f_obj(d):
                return res.feature_residual(obs_l, obs_r, cam,
                                            perturb_object(obj, d), lm, rig,
                                            jacobians=False)[0]

            def f_lm(d):
                return res.feature_residual(obs_l, obs_r, cam, obj, lm + d,
                                            rig, jacobians=False)[0]

            assert rel_error(jac["object"], central_diff(f_obj, None, 4)) < TOL
            assert rel_error(jac["landmark"], central_diff(f_lm, None, 3)) < TOL

    def test_zero_residual_at_truth(self):
        rig = StereoRig.horizontal(0.54)
        cam = Pose.identity()
        lm = np.array([1.0, -0.5, 12.0])
        p_r = rig.extrinsic.apply(lm)
        r0, _ = res.feature_residual(lm[:2] / lm[2], p_r[:2] / p_r[2], cam,
                                     None, lm, rig)
        assert np.abs(r0).max() < 1e-15

    def test_behind_camera_raises(self):
        rig = StereoRig.horizontal(0.54)
        with pytest.raises(BehindCamera):
            res.feature_residual(np.zeros(2), np.zeros(2), Pose.identity(),
                                 None, np.array([0.0, 0.0, -5.0]), rig)


class TestSemanticResidual:
    def test_jacobians(self):
        rng = np.random.default_rng(13)
        rig_checked = 0
        while rig_checked < 400:
            cam = Pose(rot_y(rng.uniform(-0.2, 0.2)),
                       np.array([rng.uniform(-2, 2), -1.2,
                                 rng.uniform(-2, 2)]))
            obj = random_object(rng)
            if cam.apply_inverse(obj.position)[2] < 5.0:
                continue
            vp = Viewpoint(int(rng.integers(0, 8)), int(rng.integers(0, 2)))
            sel = selection_set(vp)
            edges = rng.uniform(-0.3, 0.3, 4)
            valid = tuple(bool(b) for b in rng.integers(0, 2, 4))
            if not any(valid):
                continue
            try:
                r0, jac, mask = res.semantic_residual(edges, valid, sel, cam,
                                                      obj)
            except BehindCamera:
                continue
            assert len(r0) == int(mask.sum())

            def f_obj(d):
                return res.semantic_residual(edges, valid, sel, cam,
                                             perturb_object(obj, d),
                                             jacobians=False)[0]

            def f_dims(d):
                o = obj.replace(dims=obj.dims + d)
                return res.semantic_residual(edges, valid, sel, cam, o,
                                             jacobians=False)[0]

            assert rel_error(jac["object"], central_diff(f_obj, None, 4)) < TOL
            assert rel_error(jac["dims"], central_diff(f_dims, None, 3)) < TOL
            rig_checked += 1

    def test_truncated_edges_dropped(self):
        rng = np.random.default_rng(14)
        cam = Pose.identity()
        obj = ObjectState(position=np.array([2.0, -0.2, 15.0]), yaw=0.4,
                          dims=np.array([3.9, 1.6, 1.7]))
        sel = selection_set(Viewpoint(0, 0))
        edges = rng.uniform(-0.2, 0.2, 4)
        r_all, _, m_all = res.semantic_residual(edges, (True,) * 4, sel, cam,
                                                obj)
        r_part, _, m_part = res.semantic_residual(edges,
                                                  (True, False, True, False),
                                                  sel, cam, obj)
        assert m_all.all() and len(r_all) == 4
        # kept rows are u_min and u_max (valid order is u_min,v_min,u_max,v_max)
        assert list(m_part) == [True, True, False, False]
        assert np.allclose(r_part, r_all[:2])


class TestMotionResidual:
    def test_jacobians_car(self):
        rng = np.random.default_rng(15)
        for _ in range(400):
            prev = random_object(rng)
            cur = random_object(rng)
            r0, jac = res.motion_residual(cur, prev, 0.1, "car")

            def f_cur(d):
                return res.motion_residual(perturb_full(cur, d), prev, 0.1,
                                           "car", jacobians=False)[0]

            def f_prev(d):
                return res.motion_residual(cur, perturb_full(prev, d), 0.1,
                                           "car", jacobians=False)[0]

            def f_dims(d):
                return res.motion_residual(cur,
                                           prev.replace(dims=prev.dims + d),
                                           0.1, "car", jacobians=False)[0]

            assert rel_error(jac["cur"], central_diff(f_cur, r0, 6)) < TOL
            assert rel_error(jac["prev"], central_diff(f_prev, r0, 6)) < TOL
            assert rel_error(jac["dims"], central_diff(f_dims, r0, 3)) < TOL

    def test_jacobians_pedestrian(self):
        rng = np.random.default_rng(16)
        for _ in range(200):
            prev = random_object(rng)
            cur = random_object(rng)
            r0, jac = res.motion_residual(cur, prev, 0.1, "pedestrian")
            assert r0[4] == 0.0
            assert not jac["cur"][4].any() and not jac["prev"][4].any()
            assert not jac["dims"].any()

            def f_prev(d):
                return res.motion_residual(cur, perturb_full(prev, d), 0.1,
                                           "pedestrian", jacobians=False)[0]

            assert rel_error(jac["prev"], central_diff(f_prev, r0, 6)) < TOL

    def test_exact_propagation_zero_residual(self):
        from semtrack.simulate import propagate_object
        prev = ObjectState(position=np.array([1.0, -0.85, 20.0]), yaw=0.3,
                           dims=np.array([4.0, 1.7, 1.8]), speed=6.0,
                           steer=0.1)
        cur = propagate_object(prev, (6.0, 0.1), 0.1, "car")
        r0, _ = res.motion_residual(cur, prev, 0.1, "car")
        assert np.abs(r0).max() < 1e-12

    def test_bad_dt(self):
        obj = ObjectState(position=np.zeros(3), yaw=0.0,
                          dims=np.ones(3))
        with pytest.raises(ValueError):
            res.motion_residual(obj, obj, 0.0)


class TestPriorResidual:
    def test_value_and_jacobian(self):
        prior = DEFAULT_PRIORS["car"]
        r0, jac = res.prior_residual(prior.mean + [0.1, -0.2, 0.05], prior)
        assert np.allclose(r0, [0.1, -0.2, 0.05])
        assert np.array_equal(jac["dims"], np.eye(3))


class TestPointSurfaceResidual:
    def test_on_face_zero(self):
        obj = ObjectState(position=np.array([3.0, -0.85, 20.0]), yaw=0.7,
                          dims=np.array([4.0, 1.7, 1.8]))
        # point on the +x face plane
        local = np.array([2.0, 0.3, -0.4])
        world = rot_y(obj.yaw) @ local + obj.position
        r0, _ = res.point_surface_residual(world, obj, "+x")
        assert abs(r0[0]) < 1e-12

    def test_jacobians(self):
        rng = np.random.default_rng(17)
        for _ in range(400):
            obj = random_object(rng)
            world = obj.position + rng.uniform(-3.0, 3.0, 3)
            face = FACES[rng.integers(0, len(FACES))]
            r0, jac = res.point_surface_residual(world, obj, face)

            def f_obj(d):
                return res.point_surface_residual(world,
                                                  perturb_object(obj, d),
                                                  face, jacobians=False)[0]

            assert rel_error(jac["object"], central_diff(f_obj, r0, 4)) < TOL

    def test_signed_offsets(self):
        obj = ObjectState(position=np.zeros(3), yaw=0.0,
                          dims=np.array([4.0, 2.0, 2.0]))
        outside = np.array([3.0, 0.0, 0.0])
        inside = np.array([1.0, 0.0, 0.0])
        assert res.point_surface_residual(outside, obj, "+x")[0][0] > 0
        assert res.point_surface_residual(inside, obj, "+x")[0][0] < 0
