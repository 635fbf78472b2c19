"""Viewpoint taxonomy, edge-vertex selection matrices, and closed-form
4-DoF object pose from a single 2D box, a viewpoint class and a dimension
prior.

A viewpoint is one of 16 classes: 8 horizontal sectors of the observation
azimuth (the direction of the camera as seen from the object, 45 deg wide,
boundaries at odd multiples of 22.5 deg) by 2 vertical classes (level /
looking-down).  Each class fixes which 3D box vertex projects onto each
2D box edge; the four diagonal "selection matrices" C1..C4 encode those
vertices as offsets C_i @ dims from the box center, paired with
(u_min, u_max, v_min, v_max) respectively.

The 16-entry table is derived by brute force at import time: for sampled
configurations inside each viewpoint's validity regime, the projected
extreme vertices are found by enumeration and their sign patterns must
agree across all samples.  For the u edges the vertical sign of the vertex
is irrelevant (a vertical box edge projects to a single u for a level
camera); it is fixed to +1 (bottom vertices) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geom
from .errors import BehindCamera, DegenerateGeometry, NoConvergence
from .geometry import Box3D, ObjectState, Pose, project, rot_y, drot_y, wrap_angle


@dataclass(frozen=True)
class Viewpoint:
    """Discrete observation direction: horizontal sector 0..7, vertical 0..1."""

    horizontal: int
    vertical: int

    def __post_init__(self):
        if not 0 <= self.horizontal <= 7:
            raise ValueError("horizontal sector must be in 0..7")
        if self.vertical not in (0, 1):
            raise ValueError("vertical class must be 0 or 1")


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned 2D box in normalized image-plane coordinates."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("2D box edges out of order")

    @property
    def center(self):
        return np.array([(self.u_min + self.u_max) / 2.0,
                         (self.v_min + self.v_max) / 2.0])

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min

    def as_array(self):
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])


@dataclass(frozen=True)
class SelectionSet:
    """Diagonal +-0.5 matrices pairing box vertices with the four 2D edges,
    ordered (u_min, u_max, v_min, v_max)."""

    signs: np.ndarray  # (4, 3) entries +-1; C_i = diag(signs[i] / 2)

    def __post_init__(self):
        signs = np.asarray(self.signs, dtype=float).reshape(4, 3)
        if not np.all(np.abs(signs) == 1.0):
            raise ValueError("selection signs must be +-1")
        object.__setattr__(self, "signs", signs)
        signs.setflags(write=False)

    @property
    def matrices(self):
        """C1..C4 as 3x3 diagonal matrices."""
        return tuple(np.diag(s / 2.0) for s in self.signs)

    def vertex_offsets(self, dims):
        """Object-frame offsets C_i @ dims of the four selected vertices, (4, 3)."""
        return self.signs * (np.asarray(dims) / 2.0)


@dataclass(frozen=True)
class DimensionPrior:
    """Per-class Gaussian prior over box dimensions (meters)."""

    label: str
    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(3)
        sigma = np.asarray(self.sigma, dtype=float).reshape(3)
        if not (np.all(mean > 0) and np.all(sigma > 0)):
            raise ValueError("prior mean and sigma must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)
        mean.setflags(write=False)
        sigma.setflags(write=False)


DEFAULT_PRIORS = {
    "car": DimensionPrior("car", (3.9, 1.6, 1.7), (0.4, 0.2, 0.2)),
    "pedestrian": DimensionPrior("pedestrian", (0.8, 1.75, 0.8), (0.2, 0.2, 0.2)),
}

SECTOR_WIDTH = np.pi / 4.0


def observation_azimuth(camera_in_object):
    """Horizontal angle of the camera position in the object frame,
    measured from the heading (+x) toward the object's left (+z)."""
    q = np.asarray(camera_in_object)
    return float(np.arctan2(q[2], q[0]))


def _classify_from_camera_position(q, dims):
    azimuth = observation_azimuth(q)
    horizontal = int(np.round(azimuth / SECTOR_WIDTH)) % 8
    vertical = 1 if q[1] < -dims[1] / 2.0 else 0
    return Viewpoint(horizontal, vertical)


def classify_viewpoint(box_cam: Box3D) -> Viewpoint:
    """Viewpoint of a camera-frame box (camera at the origin, level)."""
    if box_cam.center[2] <= geom.EPS_Z:
        raise BehindCamera("object center behind camera")
    q = box_cam.pose.apply_inverse(np.zeros(3))
    return _classify_from_camera_position(q, box_cam.dims)


def classify_viewpoint_world(x_cam: Pose, state: ObjectState) -> Viewpoint:
    """Viewpoint from world-frame camera pose and object state.  Exact for
    any camera orientation (only the camera position enters)."""
    center_cam = x_cam.apply_inverse(state.position)
    if center_cam[2] <= geom.EPS_Z:
        raise BehindCamera("object center behind camera")
    q = state.pose.apply_inverse(x_cam.translation)
    return _classify_from_camera_position(q, state.dims)


# ---------------------------------------------------------------------------
# Brute-force table construction


def _sample_camera_position(vp: Viewpoint, rng, half, range_m, max_pitch_deg):
    """Object-frame camera position inside the viewpoint's validity regime.

    The regime keeps the edge-vertex correspondences unambiguous:
    near-horizontal viewing (elevation within ``max_pitch_deg``), two
    object faces toward the camera for diagonal sectors, a single face
    (on the sector's positive-azimuth side) for cardinal sectors, and for
    the level class a camera height strictly inside the box's vertical
    span.
    """
    center_az = vp.horizontal * SECTOR_WIDTH
    guard = np.deg2rad(3.0)
    for _ in range(10000):
        r = rng.uniform(*range_m)
        azimuth = center_az + rng.uniform(-SECTOR_WIDTH / 2 + guard,
                                          SECTOR_WIDTH / 2 - guard)
        qx = r * np.cos(azimuth)
        qz = r * np.sin(azimuth)
        if vp.vertical == 0:
            qy = rng.uniform(-half[1] + 0.1, half[1] - 0.1)
        else:
            max_drop = r * np.tan(np.deg2rad(max_pitch_deg)) - half[1]
            if max_drop < 0.3:
                continue
            qy = -half[1] - rng.uniform(0.3, max_drop)
        if vp.horizontal % 2 == 1:
            # diagonal sector: strictly outside both face slabs
            if not (abs(qx) > half[0] + 0.3 and abs(qz) > half[2] + 0.3):
                continue
        else:
            # cardinal sector: inside the facing slab, on the positive
            # lateral side with a wide margin (the nearest-corner choice
            # flips at the sector center)
            ca, sa = np.cos(center_az), np.sin(center_az)
            forward = qx * ca + qz * sa
            lateral = -qx * sa + qz * ca
            half_lat = half[2] if vp.horizontal % 4 == 0 else half[0]
            half_fwd = half[0] if vp.horizontal % 4 == 0 else half[2]
            if not (forward > half_fwd + 0.3
                    and 0.3 * half_lat < lateral < 0.85 * half_lat):
                continue
        return np.array([qx, qy, qz])
    raise RuntimeError(f"could not sample a config for {vp}")


def sample_viewpoint_config(vp: Viewpoint, rng, dims=None, range_m=(12.0, 45.0),
                            max_pitch_deg=5.0):
    """Sample a world-frame (camera pose, object state) pair inside the
    viewpoint's validity regime; the camera looks at the box center
    (roll-free, pitch bounded by the regime)."""
    if dims is None:
        dims = np.array([3.9, 1.6, 1.7]) * rng.uniform(0.85, 1.15, 3)
    dims = np.asarray(dims, dtype=float)
    half = dims / 2.0
    q = _sample_camera_position(vp, rng, half, range_m, max_pitch_deg)
    qx, qy, qz = q

    obj_yaw = rng.uniform(-np.pi, np.pi)
    obj_pos = np.array([rng.uniform(-20, 20), -half[1], rng.uniform(-20, 20)])
    state = ObjectState(obj_pos, obj_yaw, dims)
    cam_pos = state.pose.apply(np.array([qx, qy, qz]))
    # camera looks at the box center, roll-free; pitch equals the elevation
    # angle which the regime keeps within max_pitch_deg
    z_axis = state.position - cam_pos
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(np.array([0.0, 1.0, 0.0]), z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis], axis=1)
    x_cam = Pose(rotation, cam_pos)
    assert classify_viewpoint_world(x_cam, state) == vp
    return x_cam, state


def _on_axis_yaw(q):
    """Object yaw that puts the box center on the camera's optical axis
    for a level camera at the origin (center = -rot_y(yaw) @ q)."""
    theta = np.arctan2(q[0], -q[2])
    center_z = np.sin(theta) * q[0] - np.cos(theta) * q[2]
    if center_z < 0:
        theta = wrap_angle(theta + np.pi)
    return theta


def _off_axis_bound(q, dims):
    """Largest safe angle between the optical axis and the box center.

    The vertical 2D box edges are attained by depth-extreme vertices of a
    fixed-height vertex group.  On the optical axis the camera-frame depth
    ordering equals the ordering along the camera-to-center direction;
    tilting the axis by beta perturbs each depth by at most diameter * beta,
    so the ordering (and hence the edge-vertex table) survives as long as
    beta stays below the smallest on-axis depth gap over the diameter.
    """
    theta0 = _on_axis_yaw(q)
    rot = rot_y(theta0)
    center = -(rot @ q)
    offsets = (geom.VERTEX_SIGNS * (np.asarray(dims) / 2.0)) @ rot.T
    depth = center[2] + offsets[:, 2]
    gaps = []
    for group in (geom.VERTEX_SIGNS[:, 1] < 0, geom.VERTEX_SIGNS[:, 1] > 0):
        d = np.sort(depth[group])
        gaps.append(min(d[1] - d[0], d[-1] - d[-2]))
    beta = 0.45 * min(gaps) / float(np.linalg.norm(dims))
    return theta0, min(beta, np.deg2rad(10.0))


def sample_camera_frame_box(vp: Viewpoint, rng, dims=None, range_m=(5.0, 60.0),
                            max_pitch_deg=5.0, verify=True):
    """Sample a camera-frame :class:`Box3D` (level camera at the origin)
    inside the viewpoint's validity regime.

    The box yaw is drawn around the value that centers the box on the
    optical axis, within the off-axis allowance of the validity regime;
    the sampled box always agrees with the edge-vertex table and is
    uniquely recoverable from its 2D box (configurations whose tight 2D
    box admits a second exact in-class pose are rejected).
    """
    if dims is None:
        dims = np.array([3.9, 1.6, 1.7]) * rng.uniform(0.85, 1.15, 3)
    dims = np.asarray(dims, dtype=float)
    sel = selection_set(vp)
    for _ in range(200):
        q = _sample_camera_position(vp, rng, dims / 2.0, range_m, max_pitch_deg)
        theta0, beta = _off_axis_bound(q, dims)
        theta = wrap_angle(theta0 + rng.uniform(-beta, beta))
        box = Box3D(-(rot_y(theta) @ q), theta, dims, "camera")
        assert classify_viewpoint(box) == vp
        if not verify:
            return box
        signs = geom.VERTEX_SIGNS[list(brute_force_extremes_camera(box))].copy()
        signs[0, 1] = signs[1, 1] = 1.0
        if not np.array_equal(signs, sel.signs):
            continue
        try:
            roots = infer_pose_candidates(tight_bbox(box), vp, dims)
        except (DegenerateGeometry, NoConvergence):
            continue
        exact = [r for r in roots if r[2] < 1e-8 and r[3] < 1e-8]
        if len(exact) == 1:
            return box
    raise RuntimeError(f"could not sample a camera-frame box for {vp}")


def tight_bbox(box_cam: Box3D) -> BBox2D:
    """Bounding rectangle of the projected 8 box vertices (camera frame)."""
    uv = project(geom.box_vertices(box_cam))
    return BBox2D(float(uv[:, 0].min()), float(uv[:, 1].min()),
                  float(uv[:, 0].max()), float(uv[:, 1].max()))


def brute_force_extremes(x_cam: Pose, state: ObjectState):
    """Indices into :data:`geometry.VERTEX_SIGNS` of the vertices attaining
    (min u, max u, min v, max v)."""
    verts_world = geom.box_vertices(Box3D(state.position, state.yaw, state.dims))
    verts_cam = x_cam.apply_inverse(verts_world)
    uv = project(verts_cam)
    return (int(np.argmin(uv[:, 0])), int(np.argmax(uv[:, 0])),
            int(np.argmin(uv[:, 1])), int(np.argmax(uv[:, 1])))


def brute_force_extremes_camera(box_cam: Box3D):
    """Same as :func:`brute_force_extremes` for a camera-frame box."""
    uv = project(geom.box_vertices(box_cam))
    return (int(np.argmin(uv[:, 0])), int(np.argmax(uv[:, 0])),
            int(np.argmin(uv[:, 1])), int(np.argmax(uv[:, 1])))


def _build_table(samples_per_vp=60, seed=20240817):
    """Derive the 16 selection sets by enumeration.

    Each viewpoint is sampled with a level camera and the box centered on
    the optical axis (the interior of the validity regime); the extreme
    vertex sign patterns must agree across all samples.
    """
    rng = np.random.default_rng(seed)
    table = {}
    for vertical in (0, 1):
        for horizontal in range(8):
            vp = Viewpoint(horizontal, vertical)
            rows = []
            for _ in range(samples_per_vp):
                dims = np.array([3.9, 1.6, 1.7]) * rng.uniform(0.85, 1.15, 3)
                q = _sample_camera_position(vp, rng, dims / 2.0,
                                            (6.0, 30.0), 5.0)
                theta = _on_axis_yaw(q)
                box = Box3D(-(rot_y(theta) @ q), theta, dims, "camera")
                idx = brute_force_extremes_camera(box)
                signs = geom.VERTEX_SIGNS[list(idx)].copy()
                signs[0, 1] = signs[1, 1] = 1.0  # u rows: vertical sign is free
                rows.append(signs)
            rows = np.array(rows)
            if not np.all(rows == rows[0]):
                raise AssertionError(f"selection table ambiguous for {vp}")
            table[vp] = SelectionSet(rows[0])
    return table


_SELECTION_TABLE = _build_table()

# The viewpoint whose selection set matches the published edge-vertex
# matrices: camera rear-left of the object, slightly above it.
REFERENCE_VIEWPOINT = Viewpoint(horizontal=3, vertical=1)


def selection_set(vp: Viewpoint) -> SelectionSet:
    """Selection matrices for a viewpoint (precomputed, read-only)."""
    return _SELECTION_TABLE[vp]


# ---------------------------------------------------------------------------
# Closed-form pose inference


def _edge_residual(p, theta, dims, sel: SelectionSet, box: BBox2D):
    """Residual (4,) and Jacobian (4, 4) of the edge-vertex constraints
    with respect to (p, theta)."""
    offsets = sel.vertex_offsets(dims)  # object frame, (4, 3)
    rot = rot_y(theta)
    drot = drot_y(theta)
    edges = box.as_array()[[0, 2, 1, 3]]  # (u_min, u_max, v_min, v_max)
    res = np.empty(4)
    jac = np.empty((4, 4))
    for i in range(4):
        vert = p + rot @ offsets[i]
        if vert[2] <= geom.EPS_Z:
            raise BehindCamera("selected vertex behind camera")
        axis = 0 if i < 2 else 1  # u for the first two rows, v otherwise
        res[i] = vert[axis] / vert[2] - edges[i]
        grad = np.zeros(3)
        grad[axis] = 1.0 / vert[2]
        grad[2] = -vert[axis] / vert[2] ** 2
        jac[i, :3] = grad
        jac[i, 3] = grad @ (drot @ offsets[i])
    return res, jac


def _solve_position(theta, dims, sel: SelectionSet, box: BBox2D):
    """Linear least-squares position for a fixed yaw: each constraint
    u * (p_z + a_z) = p_axis + a_axis is linear in p."""
    offsets = sel.vertex_offsets(dims) @ rot_y(theta).T  # camera-frame offsets
    edges = box.as_array()[[0, 2, 1, 3]]
    a_mat = np.zeros((4, 3))
    b_vec = np.zeros(4)
    for i in range(4):
        axis = 0 if i < 2 else 1
        a_mat[i, axis] = 1.0
        a_mat[i, 2] = -edges[i]
        b_vec[i] = edges[i] * offsets[i, 2] - offsets[i, axis]
    sol, _, rank, _ = np.linalg.lstsq(a_mat, b_vec, rcond=None)
    return sol, rank


def _tightness_deviation(p, theta, dims, box: BBox2D):
    """How far the full 8-vertex reprojection's bounding rectangle strays
    from the measured box (max abs edge difference).  Zero for the true
    pose of an exactly tight box; alternate constraint roots leak vertices
    outside the box and score higher."""
    verts = geom.box_vertices(Box3D(p, theta, dims, "camera"))
    if np.any(verts[:, 2] <= geom.EPS_Z):
        return np.inf
    uv = project(verts)
    pred = np.array([uv[:, 0].min(), uv[:, 0].max(), uv[:, 1].min(), uv[:, 1].max()])
    meas = box.as_array()[[0, 2, 1, 3]]
    return float(np.max(np.abs(pred - meas)))


def _grid_candidates(box: BBox2D, vp: Viewpoint, dims, sel: SelectionSet,
                     grid_step_deg):
    """Vectorized yaw-grid sweep: for each grid yaw, the position solving
    the four edge constraints in least squares, keeping yaws whose implied
    viewpoint matches ``vp``.  Returns (thetas, positions, costs)."""
    thetas = wrap_angle(np.deg2rad(np.arange(0.0, 360.0, grid_step_deg)))
    n = len(thetas)
    c, s = np.cos(thetas), np.sin(thetas)
    rots = np.zeros((n, 3, 3))
    rots[:, 0, 0] = c
    rots[:, 0, 2] = s
    rots[:, 1, 1] = 1.0
    rots[:, 2, 0] = -s
    rots[:, 2, 2] = c
    # camera-frame vertex offsets a = R_theta (C_i d) for all yaws: (n, 4, 3)
    offsets = np.einsum("nij,kj->nki", rots, sel.vertex_offsets(dims))

    edges = box.as_array()[[0, 2, 1, 3]]
    axes = np.array([0, 0, 1, 1])
    a_mat = np.zeros((n, 4, 3))
    a_mat[:, np.arange(4), axes] = 1.0
    a_mat[:, :, 2] -= edges
    b_vec = edges * offsets[:, :, 2] - offsets[:, np.arange(4), axes]

    gram = a_mat.transpose(0, 2, 1) @ a_mat
    rhs = np.einsum("nki,nk->ni", a_mat, b_vec)
    ok = np.abs(np.linalg.det(gram)) > 1e-12
    pos = np.full((n, 3), np.nan)
    pos[ok] = np.linalg.solve(gram[ok], rhs[ok][..., None])[..., 0]
    ok &= pos[:, 2] > geom.EPS_Z

    # viewpoint gate: camera position in the object frame q = -R^T p
    q = -np.einsum("nji,nj->ni", rots, np.nan_to_num(pos))
    horiz = np.round(np.arctan2(q[:, 2], q[:, 0]) / SECTOR_WIDTH).astype(int) % 8
    vert = (q[:, 1] < -dims[1] / 2.0).astype(int)
    ok &= (horiz == vp.horizontal) & (vert == vp.vertical)

    verts = pos[:, None, :] + offsets  # (n, 4, 3)
    ok &= np.all(verts[:, :, 2] > geom.EPS_Z, axis=1)
    vo = verts[ok]
    res = vo[:, np.arange(4), axes] / vo[:, :, 2] - edges
    return thetas[ok], pos[ok], np.einsum("nk,nk->n", res, res)


def infer_pose_candidates(box: BBox2D, vp: Viewpoint, dims, grid_step_deg=1.0,
                          max_iters=50):
    """All distinct refined roots of the four edge-vertex constraints.

    Returns a list of (position, theta, residual_norm, tightness_deviation)
    sorted best first by (deviation, residual).  The constraint system can
    admit several exact roots (the vertical edges pin only the depth and
    height of one vertex; its lateral offset and the yaw solve a 2x2
    system with multiple solutions), so callers that need a unique answer
    should check for a single near-exact, near-tight entry.
    """
    if box.width < 1e-9 or box.height < 1e-9:
        raise DegenerateGeometry("2D box has zero width or height")
    dims = np.asarray(dims, dtype=float)
    sel = selection_set(vp)

    thetas, positions, costs = _grid_candidates(box, vp, dims, sel,
                                                grid_step_deg)
    if len(thetas) == 0:
        raise DegenerateGeometry("no yaw candidate consistent with the viewpoint")

    # refine every local minimum of the (circular) cost-vs-yaw profile
    order = np.argsort(thetas)
    thetas, positions, costs = thetas[order], positions[order], costs[order]
    n = len(thetas)
    if n > 2:
        is_min = (costs <= np.roll(costs, 1)) & (costs <= np.roll(costs, -1))
    else:
        is_min = np.ones(n, dtype=bool)
    roots = []
    for i in np.flatnonzero(is_min):
        refined = _refine(np.append(positions[i], thetas[i]), dims, sel, box,
                          max_iters)
        if refined is None:
            continue
        x, cost = refined
        theta = wrap_angle(x[3])
        if any(np.linalg.norm(x[:3] - r[0]) < 1e-6
               and abs(wrap_angle(theta - r[1])) < 1e-6 for r in roots):
            continue
        deviation = _tightness_deviation(x[:3], theta, dims, box)
        roots.append((x[:3].copy(), theta, float(np.sqrt(cost)), deviation))
    if not roots:
        raise NoConvergence("pose refinement exceeded iteration budget")
    roots.sort(key=lambda r: (r[3], r[2]))
    return roots


def infer_pose(box: BBox2D, vp: Viewpoint, dims, grid_step_deg=1.0,
               max_iters=50):
    """Closed-form 4-DoF pose from one 2D box, viewpoint and dimensions.

    Returns (position, theta, residual_norm): the camera-frame box center
    and horizontal orientation minimizing the four edge-vertex constraint
    residuals.  Yaw is searched on a coarse grid (keeping candidates whose
    implied viewpoint matches ``vp``); every grid basin is refined by
    Gauss-Newton on (p, theta) jointly, and the refined root whose full
    8-vertex reprojection best fills the measured box wins.
    """
    p, theta, residual_norm, _ = infer_pose_candidates(
        box, vp, dims, grid_step_deg, max_iters)[0]
    return p, theta, residual_norm


def _refine(x, dims, sel, box, max_iters):
    """Damped Gauss-Newton on (p, theta); returns (x, cost) or None."""
    lam = 0.0
    res, jac = _edge_residual(x[:3], x[3], dims, sel, box)
    cost = float(res @ res)
    for _ in range(max_iters):
        h = jac.T @ jac
        g = jac.T @ res
        try:
            step = np.linalg.solve(h + lam * np.eye(4), -g)
        except np.linalg.LinAlgError:
            lam = max(lam * 10.0, 1e-8)
            continue
        x_new = x + step
        try:
            res_new, jac_new = _edge_residual(x_new[:3], x_new[3], dims, sel, box)
        except BehindCamera:
            lam = max(lam * 10.0, 1e-8)
            continue
        cost_new = float(res_new @ res_new)
        if cost_new <= cost:
            x, res, jac, cost = x_new, res_new, jac_new, cost_new
            lam *= 0.1
            if np.max(np.abs(step)) < 1e-9:
                return x, cost
        else:
            lam = max(lam * 10.0, 1e-8)
            if lam > 1e10:
                return x, cost
    return None
