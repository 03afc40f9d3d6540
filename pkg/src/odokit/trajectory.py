"""Trajectory container, KITTI pose-file round trip, and window preprocessing.

A trajectory is an ordered stack of absolute world-frame poses sampled at a
uniform frame period. Windows of W consecutive poses plus the following pose
are the training unit for the pose predictor; before entering the network a
window is re-anchored at its middle pose (so the anchor error stays bounded)
and its translations may be rescaled to cover deployment scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import se3

DEFAULT_WINDOW = 20
DEFAULT_FRAME_PERIOD = 0.1
_REORTHO_TOL = 1e-4


class KittiFormatError(ValueError):
    """Malformed KITTI pose line; message carries the 1-based line number."""


@dataclass
class Trajectory:
    """Ordered absolute poses, shape (N, 6), at uniform time spacing."""

    poses: np.ndarray
    frame_period: float = DEFAULT_FRAME_PERIOD

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float)
        if self.poses.ndim != 2 or self.poses.shape[1] != 6:
            raise ValueError(f"poses must have shape (N, 6), got {self.poses.shape}")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("trajectory contains non-finite poses")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")

    def __len__(self):
        return self.poses.shape[0]

    @property
    def positions(self):
        return self.poses[:, :3]


@dataclass
class PoseWindow:
    """W consecutive input poses plus the next pose as regression target."""

    inputs: np.ndarray
    target: np.ndarray
    scale_applied: float = 1.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        if self.inputs.ndim != 2 or self.inputs.shape[1] != 6:
            raise ValueError(f"inputs must have shape (W, 6), got {self.inputs.shape}")
        if self.target.shape != (6,):
            raise ValueError(f"target must have shape (6,), got {self.target.shape}")
        if self.scale_applied <= 0:
            raise ValueError("scale_applied must be positive")


def parse_kitti_poses(text, frame_period=DEFAULT_FRAME_PERIOD) -> Trajectory:
    """Parse KITTI odometry pose lines: 12 reals per line, row-major 3x4 [R|t].

    Rotation blocks are re-orthonormalized via SVD; blocks further than 1e-4
    from orthonormal are rejected with the offending line number.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii")
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 12:
            raise KittiFormatError(f"line {lineno}: expected 12 fields, got {len(fields)}")
        try:
            vals = np.array([float(f) for f in fields])
        except ValueError as exc:
            raise KittiFormatError(f"line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vals)):
            raise KittiFormatError(f"line {lineno}: non-finite value")
        mat = vals.reshape(3, 4)
        R = mat[:, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > _REORTHO_TOL:
            raise KittiFormatError(f"line {lineno}: rotation block is not orthonormal")
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            raise KittiFormatError(f"line {lineno}: rotation block is a reflection")
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = mat[:, 3]
        try:
            poses.append(se3.transform_to_pose(T))
        except se3.NearSingularRotationError as exc:
            raise KittiFormatError(f"line {lineno}: {exc}") from exc
    return Trajectory(np.array(poses).reshape(-1, 6), frame_period=frame_period)


def write_kitti_poses(traj: Trajectory) -> str:
    """Inverse of the parser: one 12-field [R|t] line per pose, 10 significant digits."""
    lines = []
    if len(traj) > 0:
        transforms = se3.poses_to_transforms(traj.poses)
        for T in transforms:
            flat = T[:3, :4].reshape(-1)
            lines.append(" ".join(f"{v:.9e}" for v in flat))
    return "\n".join(lines) + ("\n" if lines else "")


def relative_steps(traj: Trajectory) -> np.ndarray:
    """Per-frame ego-motion: pose of frame k+1 in the frame of k, shape (N-1, 6)."""
    T = se3.poses_to_transforms(traj.poses)
    rel = se3.invert_many(T[:-1]) @ T[1:]
    return se3.transforms_to_poses(rel)


def chain_relative_poses(start_pose, rel, frame_period=DEFAULT_FRAME_PERIOD) -> Trajectory:
    """Re-chain per-frame ego-motion into absolute poses from a start pose."""
    rel = np.asarray(rel, dtype=float)
    T = se3.pose_to_transform(np.asarray(start_pose, dtype=float))
    steps = se3.poses_to_transforms(rel) if len(rel) else np.zeros((0, 4, 4))
    out = np.empty((len(rel) + 1, 4, 4))
    out[0] = T
    for k in range(len(rel)):
        T = T @ steps[k]
        out[k + 1] = T
    return Trajectory(se3.transforms_to_poses(out), frame_period=frame_period)


def centralize(window: PoseWindow) -> PoseWindow:
    """Re-anchor a window at its middle input pose (index W//2).

    Every pose, target included, is re-expressed relative to the anchor; the
    anchor itself becomes an exact zero vector.
    """
    inputs, targets = centralize_batch(window.inputs[None], window.target[None])
    return PoseWindow(inputs[0], targets[0], window.scale_applied)


def centralize_batch(inputs, targets):
    """Vectorized middle-pose re-anchoring over a batch, shapes (B, W, 6)/(B, 6)."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    mid = inputs.shape[1] // 2
    anchors_inv = se3.invert_many(se3.poses_to_transforms(inputs[:, mid]))
    stacked = np.concatenate([inputs, targets[:, None, :]], axis=1)
    T = se3.poses_to_transforms(stacked)
    rel = np.einsum("bij,bwjk->bwik", anchors_inv, T)
    out = se3.transforms_to_poses(rel)
    out[:, mid, :] = 0.0  # anchor relative to itself is exactly zero
    return out[:, :-1], out[:, -1]


def scale_augment(window: PoseWindow, factor: float) -> PoseWindow:
    """Multiply every translation (inputs and target) by a positive factor."""
    if not np.isfinite(factor) or factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    inputs = window.inputs.copy()
    target = window.target.copy()
    inputs[:, :3] *= factor
    target[:3] *= factor
    return PoseWindow(inputs, target, window.scale_applied * factor)


def sliding_windows(traj: Trajectory, window: int = DEFAULT_WINDOW):
    """All (W inputs, next-pose target) windows of a trajectory, in frame order."""
    inputs, targets = window_arrays(traj, window)
    return [PoseWindow(inputs[i], targets[i]) for i in range(inputs.shape[0])]


def window_arrays(traj: Trajectory, window: int = DEFAULT_WINDOW):
    """Batch view of all windows: inputs (M, W, 6) and targets (M, 6), M = N - W."""
    if window < 1:
        raise ValueError("window length must be >= 1")
    n = len(traj)
    m = max(0, n - window)
    inputs = np.empty((m, window, 6))
    targets = np.empty((m, 6))
    for i in range(m):
        inputs[i] = traj.poses[i : i + window]
        targets[i] = traj.poses[i + window]
    return inputs, targets
