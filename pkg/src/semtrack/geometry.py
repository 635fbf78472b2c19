"""Frames, rigid transforms, projection and box geometry.

Conventions used throughout the library:

* Camera frame: x right, y down, z forward.  Projection to the normalized
  image plane is ``pi(p) = (x/z, y/z)``.
* World frame: shares the camera axis convention; y points down, so the
  "up" direction is -y and the ground plane is y = 0.
* Object frame: origin at the box center, x along the heading (length
  ``d_x``), y down (height ``d_y``), z to the object's left (width ``d_z``).
* Yaw rotations are about the vertical (y) axis; ``rot_y(pi/2)`` maps
  (1, 0, 0) to (0, 0, -1).

All types are immutable values and all functions are pure.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .errors import BehindCamera

EPS_Z = 1e-6  # behind-camera cutoff (meters)

# Vertex sign enumeration, fixed order: index i has bit pattern (sx, sy, sz)
# with -1 for a 0 bit, +1 for a 1 bit, sx the most significant bit.
VERTEX_SIGNS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))

# Face labels: axis and side of the box, e.g. "+x" is the front face.
FACES = ("+x", "-x", "+y", "-y", "+z", "-z")
_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi) if np.ndim(theta) else float(np.pi - wrapped)


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w):
    """Rotation matrix from a rotation vector (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3) + skew(w)
    axis = w / angle
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def so3_log(rot):
    """Rotation vector from a rotation matrix."""
    cos_angle = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-9:
        return np.array([rot[2, 1] - rot[1, 2],
                         rot[0, 2] - rot[2, 0],
                         rot[1, 0] - rot[0, 1]]) / 2.0
    if np.pi - angle < 1e-6:
        # near pi: use the symmetric part
        sym = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(sym), 0.0, None))
        # fix signs from the off-diagonal entries
        i = int(np.argmax(axis))
        axis = sym[:, i] / axis[i]
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    axis = np.array([rot[2, 1] - rot[1, 2],
                     rot[0, 2] - rot[2, 0],
                     rot[1, 0] - rot[0, 1]]) / (2.0 * np.sin(angle))
    return angle * axis


def project_rotation(rot):
    """Nearest orthonormal matrix with determinant +1 (Frobenius sense).

    Keeps repeatedly updated rotations from drifting off the group.
    """
    u, _, vt = np.linalg.svd(np.asarray(rot, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rot_y(theta):
    """Rotation about the vertical (y) axis."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def drot_y(theta):
    """Derivative of :func:`rot_y` with respect to theta."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def heading(theta):
    """Unit heading vector of a yaw angle: the rotated object x axis."""
    return rot_y(theta) @ np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: applies as R @ p + t.

    ``rotation`` must be orthonormal with determinant +1 (checked to 1e-9).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)
        rot.setflags(write=False)
        t.setflags(write=False)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw, translation):
        return cls(rot_y(yaw), np.asarray(translation, dtype=float))

    def apply(self, p):
        """Transform point(s): R @ p + t.  Accepts (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_inverse(self, p):
        """Inverse transform: R^T @ (p - t)."""
        p = np.asarray(p, dtype=float)
        return (p - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """self o other: (self.compose(other)).apply(p) == self.apply(other.apply(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def perturbed(self, dt, dphi) -> "Pose":
        """Local update: t += dt, R <- R @ exp(dphi)."""
        return Pose(self.rotation @ so3_exp(dphi), self.translation + np.asarray(dt))


def transform(pose: Pose, p):
    """Apply a rigid transform to point(s); alias of ``pose.apply``."""
    return pose.apply(p)


def inverse_transform(pose: Pose, p):
    """Apply the inverse rigid transform to point(s)."""
    return pose.apply_inverse(p)


def project(p):
    """Project camera-frame point(s) to the normalized image plane.

    Raises :class:`BehindCamera` if any z <= 1e-6 m.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= EPS_Z):
        raise BehindCamera(f"point depth {np.min(z):.3g} <= {EPS_Z:.0e}")
    return p[..., :2] / z[..., None]


@dataclass(frozen=True)
class ObjectState:
    """Pose, size and kinematic state of a tracked object (world frame).

    ``yaw`` is normalized to (-pi, pi] on construction; ``dims`` is
    (d_x, d_y, d_z) = (length, height, width) and must be positive.
    Negative speed (reversing) is allowed.
    """

    position: np.ndarray
    yaw: float
    dims: np.ndarray
    speed: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        dims = np.asarray(self.dims, dtype=float).reshape(3)
        if not np.all(dims > 0):
            raise ValueError("dims must be strictly positive")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        pos.setflags(write=False)
        dims.setflags(write=False)

    @property
    def pose(self) -> Pose:
        """Object-to-world transform."""
        return Pose(rot_y(self.yaw), self.position)

    def replace(self, **kwargs) -> "ObjectState":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, yaw about vertical, dims; frame is a tag."""

    center: np.ndarray
    yaw: float
    dims: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        dims = np.asarray(self.dims, dtype=float).reshape(3)
        if not np.all(dims > 0):
            raise ValueError("dims must be strictly positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", float(self.yaw))
        center.setflags(write=False)
        dims.setflags(write=False)

    @property
    def pose(self) -> Pose:
        return Pose(rot_y(self.yaw), self.center)


@dataclass(frozen=True)
class StereoRig:
    """Stereo extrinsics: ``extrinsic`` maps left-camera to right-camera
    coordinates.  ``focal_px`` converts pixel noise levels to normalized
    units; image size (pixels) bounds the visible field of view."""

    extrinsic: Pose
    focal_px: float = 700.0
    image_w_px: float = 1240.0
    image_h_px: float = 376.0

    def __post_init__(self):
        if np.linalg.norm(self.extrinsic.translation) <= 0:
            raise ValueError("stereo baseline must be positive")

    @classmethod
    def horizontal(cls, baseline_m, focal_px=700.0, image_w_px=1240.0,
                   image_h_px=376.0):
        """Rectified rig: right camera at +baseline along left-camera x."""
        return cls(Pose(np.eye(3), np.array([-baseline_m, 0.0, 0.0])),
                   focal_px, image_w_px, image_h_px)

    @property
    def baseline(self):
        return float(np.linalg.norm(self.extrinsic.translation))

    @property
    def u_half_extent(self):
        return 0.5 * self.image_w_px / self.focal_px

    @property
    def v_half_extent(self):
        return 0.5 * self.image_h_px / self.focal_px


def box_vertices(box: Box3D):
    """The 8 vertices, ordered by :data:`VERTEX_SIGNS`: center + R_yaw (s * d/2)."""
    offsets = VERTEX_SIGNS * (box.dims / 2.0)
    return box.center + offsets @ rot_y(box.yaw).T


def point_to_box_face_distance(box: Box3D, p, face):
    """Unsigned distance from ``p`` to the infinite plane of one box face.

    ``face`` is one of "+x", "-x", "+y", "-y", "+z", "-z"; the point is
    expressed in the same frame as the box.
    """
    if face not in FACES:
        raise ValueError(f"unknown face {face!r}")
    sign = 1.0 if face[0] == "+" else -1.0
    axis = _AXIS_INDEX[face[1]]
    q = box.pose.apply_inverse(np.asarray(p, dtype=float))
    return float(abs(q[axis] - sign * box.dims[axis] / 2.0))


def signed_face_offset(box: Box3D, p, face):
    """Signed version of :func:`point_to_box_face_distance` (object-frame
    coordinate minus the face plane coordinate)."""
    sign = 1.0 if face[0] == "+" else -1.0
    axis = _AXIS_INDEX[face[1]]
    q = box.pose.apply_inverse(np.asarray(p, dtype=float))
    return float(q[axis] - sign * box.dims[axis] / 2.0)


def nearest_face(box: Box3D, p):
    """The face whose plane is closest to ``p`` (same frame as the box)."""
    return min(FACES, key=lambda f: point_to_box_face_distance(box, p, f))
