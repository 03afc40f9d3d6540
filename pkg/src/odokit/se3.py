"""SE(3)/se(3) pose algebra: axis-angle poses, rigid transforms, relative poses.

A pose is a length-6 float vector ``[tx, ty, tz, rx, ry, rz]``: translation in
meters followed by an axis-angle rotation in radians. The rotation magnitude
must stay strictly below pi (canonical chart of the rotation logarithm).
Transforms are 4x4 homogeneous matrices with an orthonormal rotation block.

All functions are pure; batch kernels operate on stacked arrays and power the
hot paths, scalar wrappers validate single inputs.
"""

from __future__ import annotations

import numpy as np

ROTATION_LIMIT = np.pi - 1e-6
_TINY_ANGLE = 1e-7
_NEAR_PI = 2.9
_ORTHO_TOL = 1e-9


class InvalidPoseError(ValueError):
    """Pose vector is non-finite, misshapen, or rotation magnitude >= pi."""


class InvalidTransformError(ValueError):
    """Matrix is not a valid rigid transform (orthonormality/determinant)."""


class NearSingularRotationError(ValueError):
    """Rotation angle within 1e-6 of pi; the log map axis is ambiguous."""


def _skew_many(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotvecs_to_matrices(r):
    """Rodrigues map for a stack of axis-angle vectors, shape (K, 3) -> (K, 3, 3).

    Uses the series expansion of sin(t)/t and (1-cos(t))/t^2 below 1e-7 to
    avoid 0/0 at the identity.
    """
    r = np.asarray(r, dtype=float)
    theta2 = np.einsum("...i,...i->...", r, r)
    theta = np.sqrt(theta2)
    small = theta < _TINY_ANGLE
    # sin(t)/t and (1-cos(t))/t^2, with second-order Taylor fallback
    safe2 = np.where(small, 1.0, theta2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe2)
    s = _skew_many(r)
    s2 = s @ s
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye + a[..., None, None] * s + b[..., None, None] * s2


def matrices_to_rotvecs(R):
    """Inverse Rodrigues map, shape (K, 3, 3) -> (K, 3).

    Raises NearSingularRotationError if any rotation angle exceeds
    pi - 1e-6, where the axis of the logarithm becomes ambiguous.
    """
    R = np.asarray(R, dtype=float)
    v = np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )
    vnorm = np.linalg.norm(v, axis=-1)  # = 2 sin(theta)
    trace = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    theta = np.arctan2(vnorm, trace - 1.0)
    if np.any(theta > ROTATION_LIMIT):
        raise NearSingularRotationError(
            "rotation angle within 1e-6 of pi; log map axis is ambiguous"
        )
    small = theta < _TINY_ANGLE
    safe = np.where(small, 1.0, vnorm)
    scale = np.where(small, 0.5 + theta**2 / 12.0, theta / safe)
    out = scale[..., None] * v

    # Close to pi the antisymmetric part loses precision; recover the axis
    # from the well-conditioned symmetric part instead.
    near = theta > _NEAR_PI
    if np.any(near):
        idx = np.nonzero(near)
        for k in zip(*idx):
            Rk = R[k]
            tk = theta[k]
            M = 0.5 * (Rk + Rk.T) - np.cos(tk) * np.eye(3)
            col = M[:, np.argmax(np.einsum("ij,ij->j", M, M))]
            axis = col / np.linalg.norm(col)
            if np.dot(axis, v[k]) < 0.0:
                axis = -axis
            out[k] = tk * axis
    return out


def poses_to_transforms(p):
    """Stacked pose -> transform map, shape (K, 6) -> (K, 4, 4)."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != 6:
        raise InvalidPoseError(f"pose must have 6 components, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidPoseError("pose contains non-finite components")
    rnorm = np.linalg.norm(p[..., 3:], axis=-1)
    if np.any(rnorm >= np.pi):
        raise InvalidPoseError("rotation magnitude must be strictly below pi")
    T = np.zeros(p.shape[:-1] + (4, 4))
    T[..., :3, :3] = rotvecs_to_matrices(p[..., 3:])
    T[..., :3, 3] = p[..., :3]
    T[..., 3, 3] = 1.0
    return T


def transforms_to_poses(T):
    """Stacked transform -> pose map, shape (K, 4, 4) -> (K, 6)."""
    T = np.asarray(T, dtype=float)
    _check_transforms(T)
    p = np.empty(T.shape[:-2] + (6,))
    p[..., :3] = T[..., :3, 3]
    p[..., 3:] = matrices_to_rotvecs(T[..., :3, :3])
    return p


def _check_transforms(T):
    if T.shape[-2:] != (4, 4):
        raise InvalidTransformError(f"transform must be 4x4, got shape {T.shape}")
    if not np.all(np.isfinite(T)):
        raise InvalidTransformError("transform contains non-finite entries")
    bottom = np.zeros(4)
    bottom[3] = 1.0
    if np.max(np.abs(T[..., 3, :] - bottom)) > 1e-12:
        raise InvalidTransformError("homogeneous bottom row must be [0, 0, 0, 1]")
    R = T[..., :3, :3]
    rtr = np.einsum("...ji,...jk->...ik", R, R)
    if np.max(np.abs(rtr - np.eye(3))) > _ORTHO_TOL:
        raise InvalidTransformError("rotation block is not orthonormal within 1e-9")
    if np.max(np.abs(np.linalg.det(R) - 1.0)) > _ORTHO_TOL:
        raise InvalidTransformError("rotation block determinant is not +1 within 1e-9")


def pose_to_transform(p):
    """Convert a single 6-DoF pose to its 4x4 rigid transform."""
    p = np.asarray(p, dtype=float)
    if p.shape != (6,):
        raise InvalidPoseError(f"pose must have shape (6,), got {p.shape}")
    return poses_to_transforms(p[None])[0]


def transform_to_pose(T):
    """Convert a single 4x4 rigid transform back to its 6-DoF pose."""
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise InvalidTransformError(f"transform must have shape (4, 4), got {T.shape}")
    return transforms_to_poses(T[None])[0]


def compose(Ta, Tb):
    """Compose two transforms; the result acts as Ta applied after Tb."""
    Ta = np.asarray(Ta, dtype=float)
    Tb = np.asarray(Tb, dtype=float)
    _check_transforms(Ta)
    _check_transforms(Tb)
    return Ta @ Tb


def invert(T):
    """Closed-form rigid inverse: R^-1 = R^T, t^-1 = -R^T t."""
    T = np.asarray(T, dtype=float)
    _check_transforms(T)
    out = np.eye(4)
    Rt = T[:3, :3].T
    out[:3, :3] = Rt
    out[:3, 3] = -Rt @ T[:3, 3]
    return out


def invert_many(T):
    T = np.asarray(T, dtype=float)
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def relative_pose(p_a, p_b):
    """Pose of frame b expressed in frame a: log(SE(p_a)^-1 SE(p_b))."""
    Ta = pose_to_transform(p_a)
    Tb = pose_to_transform(p_b)
    return transform_to_pose(invert(Ta) @ Tb)


def relative_poses(anchor, p):
    """Batch of poses re-expressed in the anchor frame, shape (..., 6)."""
    Ta_inv = invert(pose_to_transform(anchor))
    T = poses_to_transforms(p)
    return transforms_to_poses(Ta_inv @ T)
