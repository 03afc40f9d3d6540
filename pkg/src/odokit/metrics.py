"""Trajectory evaluation: similarity alignment, ATE, and relative errors.

Alignment solves the closed-form least-squares similarity (or rigid)
transform between matched translation sequences via SVD. ATE is the RMSE of
translation residuals after alignment. Relative errors follow the standard
odometry benchmark protocol: for every start frame and every segment length
reachable along the reference path, compare the relative transforms of the
two trajectories over that span and normalize by the span length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .trajectory import Trajectory

DEFAULT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class DegenerateTrajectoryError(ValueError):
    """Point sets too short or collinear for a unique alignment."""


@dataclass
class AlignmentResult:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation


def _positions(traj):
    if isinstance(traj, Trajectory):
        return traj.positions
    return np.asarray(traj, dtype=float)


def umeyama_align(est, ref, with_scale=True) -> AlignmentResult:
    """Least-squares similarity transform mapping est positions onto ref."""
    x = _positions(est)
    y = _positions(ref)
    if x.shape != y.shape:
        raise ValueError(f"trajectory lengths differ: {x.shape} vs {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise DegenerateTrajectoryError("alignment needs at least 3 poses")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1.0):
        raise DegenerateTrajectoryError("translations are collinear; rotation is not unique")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rotation = u @ s @ vt
    if with_scale:
        var_x = float(np.sum(xc * xc)) / n
        scale = float(np.trace(np.diag(d) @ s)) / var_x
    else:
        scale = 1.0
    translation = my - scale * rotation @ mx
    return AlignmentResult(rotation=rotation, translation=translation, scale=scale)


def ate(est, ref, with_scale=True) -> float:
    """RMSE of translation residuals after alignment, in meters."""
    aln = umeyama_align(est, ref, with_scale=with_scale)
    residuals = aln.apply(_positions(est)) - _positions(ref)
    return float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))


def path_length(traj) -> float:
    """Sum of consecutive translation distances along the trajectory."""
    pos = _positions(traj)
    if pos.shape[0] < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))


def _cumulative_distances(pos):
    steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angles(R):
    # atan2 form keeps precision for near-identity error rotations where
    # arccos of the trace loses ~sqrt(eps)
    v = np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )
    trace = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    return np.arctan2(np.linalg.norm(v, axis=-1), trace - 1.0)


@dataclass
class RelativeErrorReport:
    t_err_pct: float
    r_err_deg_per_100m: float
    per_length: dict = field(default_factory=dict)  # length -> (t_err_pct, r_err, n_spans)
    n_spans: int = 0


def relative_errors(est: Trajectory, ref: Trajectory, lengths=DEFAULT_LENGTHS) -> RelativeErrorReport:
    """Benchmark-style relative errors over all reachable subsequence lengths.

    Spans start at every frame; a span of length L ends at the first frame
    whose cumulative reference distance reaches start + L. Translation error
    is reported as a percentage of L, rotation error in degrees per 100 m.
    """
    if len(est) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    t_est = se3.poses_to_transforms(est.poses)
    t_ref = se3.poses_to_transforms(ref.poses)
    dist = _cumulative_distances(ref.positions)
    per_length = {}
    all_t, all_r = [], []
    for L in sorted(lengths):
        starts = np.arange(len(ref))
        ends = np.searchsorted(dist, dist[starts] + L, side="left")
        valid = ends < len(ref)
        starts, ends = starts[valid], ends[valid]
        if len(starts) == 0:
            continue
        rel_ref = se3.invert_many(t_ref[starts]) @ t_ref[ends]
        rel_est = se3.invert_many(t_est[starts]) @ t_est[ends]
        err = se3.invert_many(rel_est) @ rel_ref
        t_errs = 100.0 * np.linalg.norm(err[:, :3, 3], axis=1) / L
        r_errs = np.degrees(_rotation_angles(err[:, :3, :3])) * (100.0 / L)
        per_length[float(L)] = (float(t_errs.mean()), float(r_errs.mean()), len(starts))
        all_t.append(t_errs)
        all_r.append(r_errs)
    if all_t:
        all_t = np.concatenate(all_t)
        all_r = np.concatenate(all_r)
        return RelativeErrorReport(
            t_err_pct=float(all_t.mean()),
            r_err_deg_per_100m=float(all_r.mean()),
            per_length=per_length,
            n_spans=len(all_t),
        )
    return RelativeErrorReport(t_err_pct=float("nan"), r_err_deg_per_100m=float("nan"))


@dataclass
class EvalReport:
    ate_m: float
    t_err_pct: float
    r_err_deg_per_100m: float
    per_length: dict
    aligned_with_scale: bool
    alignment_scale: float
    n_spans: int

    def as_dict(self):
        return {
            "ate_m": self.ate_m,
            "t_err_pct": self.t_err_pct,
            "r_err_deg_per_100m": self.r_err_deg_per_100m,
            "per_length": {
                f"{int(k)}": {"t_err_pct": v[0], "r_err_deg_per_100m": v[1], "n_spans": v[2]}
                for k, v in self.per_length.items()
            },
            "aligned_with_scale": self.aligned_with_scale,
            "alignment_scale": self.alignment_scale,
            "n_spans": self.n_spans,
        }


def evaluate(est: Trajectory, ref: Trajectory, with_scale=True, lengths=DEFAULT_LENGTHS) -> EvalReport:
    """Full evaluation: aligned ATE plus relative errors over the given lengths."""
    aln = umeyama_align(est, ref, with_scale=with_scale)
    residuals = aln.apply(est.positions) - ref.positions
    ate_m = float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))
    rel = relative_errors(est, ref, lengths)
    return EvalReport(
        ate_m=ate_m,
        t_err_pct=rel.t_err_pct,
        r_err_deg_per_100m=rel.r_err_deg_per_100m,
        per_length=rel.per_length,
        aligned_with_scale=with_scale,
        alignment_scale=aln.scale,
        n_spans=rel.n_spans,
    )
