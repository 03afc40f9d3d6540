"""Pseudo-label supervision machinery for trajectory refinement.

A pose manager buffers the most recent absolute pose estimates. From its
newest W poses the motion model predicts the next absolute pose and its
uncertainty; if the total uncertainty passes the gate, the prediction is
turned into a relative-pose pseudo label

    label = log(SE(p_prev)^-1 SE(p_predicted))

carrying a confidence that decays exponentially with total uncertainty. The
motion loss is the confidence-weighted Euclidean distance between pseudo
label and estimated ego-motion, and a two-term weight state rebalances the
motion loss against the estimator's own loss from their descent rates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ppnet, se3
from . import trajectory as trj

_RATIO_EPS = 1e-12


class FrameOrderError(ValueError):
    """Pose recorded with a frame index that does not strictly increase."""


@dataclass
class ConfidenceParams:
    """Gate threshold on total uncertainty and confidence decay rate."""

    tau: float
    alpha: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


class PoseManager:
    """Ring buffer of recent absolute pose estimates keyed by frame index."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._frames = deque(maxlen=capacity)
        self._poses = deque(maxlen=capacity)

    def __len__(self):
        return len(self._frames)

    @property
    def newest_frame(self):
        return self._frames[-1] if self._frames else None

    def record(self, frame, pose):
        if self._frames and frame <= self._frames[-1]:
            raise FrameOrderError(f"frame {frame} does not follow {self._frames[-1]}")
        self._frames.append(int(frame))
        self._poses.append(np.asarray(pose, dtype=float).copy())

    def latest_window(self, window):
        """Newest `window` poses in frame order, or None if history is short."""
        if len(self._frames) < window:
            return None
        frames = list(self._frames)[-window:]
        if frames[-1] - frames[0] != window - 1:
            return None  # history has a gap; consecutive frames required
        return np.stack(list(self._poses)[-window:])


@dataclass
class PseudoLabel:
    """Outcome of one pseudo-label attempt; rel_pose is None unless accepted."""

    status: str  # "ok" | "gated" | "insufficient" | "singular"
    rel_pose: np.ndarray | None = None
    confidence: float | None = None
    total_uncertainty: float | None = None
    predicted_abs: np.ndarray | None = None

    @property
    def accepted(self):
        return self.status == "ok"


def confidence(sigma, cp: ConfidenceParams) -> float:
    """Monotone-decreasing confidence exp(-alpha * total uncertainty), in (0, 1]."""
    total = float(np.sum(np.asarray(sigma, dtype=float)))
    return float(np.exp(-cp.alpha * total))


def pseudo_label(model: ppnet.PPNetParams, mgr: PoseManager, cp: ConfidenceParams,
                 window: int = trj.DEFAULT_WINDOW) -> PseudoLabel:
    """Predict the next pose from the manager history and build its pseudo label.

    The newest W poses are re-anchored at their middle pose, fed forward, and
    the prediction is mapped back to the world frame by left-composing the
    anchor. Predictions whose total uncertainty exceeds tau are skipped.
    """
    inputs = mgr.latest_window(window)
    if inputs is None:
        return PseudoLabel(status="insufficient")
    try:
        centered, _ = trj.centralize_batch(inputs[None], np.zeros((1, 6)))
    except se3.NearSingularRotationError:
        return PseudoLabel(status="singular")
    pred = ppnet.forward(model, trj.PoseWindow(centered[0], np.zeros(6)))
    total = ppnet.total_uncertainty(pred)
    anchor = inputs[window // 2]
    try:
        t_pred = se3.pose_to_transform(anchor) @ se3.pose_to_transform(pred.pose)
        pred_abs = se3.transform_to_pose(t_pred)
        prev = inputs[-1]
        rel = se3.transform_to_pose(se3.invert(se3.pose_to_transform(prev)) @ t_pred)
    except se3.NearSingularRotationError:
        return PseudoLabel(status="singular", total_uncertainty=total)
    if total > cp.tau:
        return PseudoLabel(status="gated", total_uncertainty=total, predicted_abs=pred_abs)
    return PseudoLabel(
        status="ok",
        rel_pose=rel,
        confidence=confidence(pred.sigma, cp),
        total_uncertainty=total,
        predicted_abs=pred_abs,
    )


def pseudo_labels_for_trajectory(model, poses, cp: ConfidenceParams | None,
                                 window: int = trj.DEFAULT_WINDOW):
    """Vectorized pseudo-label pass over an absolute pose array (N, 6).

    Every frame t in [window, N-1] gets a prediction built from poses
    t-window .. t-1; semantics match feeding a PoseManager frame by frame.
    With cp=None no gate is applied and confidences are identically 1.

    Returns a dict of aligned arrays: frames, rel_labels, confidences,
    total_uncertainty, accepted mask, predicted_abs.
    """
    poses = np.asarray(poses, dtype=float)
    n = poses.shape[0]
    frames = np.arange(window, n)
    if len(frames) == 0:
        raise ValueError(f"trajectory too short for window {window}")
    inputs = np.stack([poses[t - window : t] for t in frames])
    centered, _ = trj.centralize_batch(inputs, np.zeros((len(frames), 6)))
    pred_pose, logvar = ppnet.forward_batch(model, centered)
    sigma = np.exp(logvar)
    total = sigma.sum(axis=1)

    anchors = se3.poses_to_transforms(inputs[:, window // 2])
    t_pred = anchors @ se3.poses_to_transforms(pred_pose)
    prev_inv = se3.invert_many(se3.poses_to_transforms(poses[frames - 1]))
    rel_labels = se3.transforms_to_poses(prev_inv @ t_pred)
    predicted_abs = se3.transforms_to_poses(t_pred)

    if cp is None:
        accepted = np.ones(len(frames), dtype=bool)
        confidences = np.ones(len(frames))
    else:
        accepted = total <= cp.tau
        confidences = np.exp(-cp.alpha * total)
    return {
        "frames": frames,
        "rel_labels": rel_labels,
        "confidences": confidences,
        "total_uncertainty": total,
        "accepted": accepted,
        "predicted_abs": predicted_abs,
    }


def motion_loss(pseudo, predicted, c: float) -> float:
    """Confidence-weighted Euclidean distance between the two 6-vectors."""
    if not 0.0 < c <= 1.0:
        raise ValueError("confidence must lie in (0, 1]")
    diff = np.asarray(pseudo, dtype=float) - np.asarray(predicted, dtype=float)
    return float(c * np.linalg.norm(diff))


def combined_loss(l_origin: float, l_motion: float, weights: "LossWeights") -> float:
    """Exact weighted sum w1 * L_origin + w2 * L_motion."""
    return float(weights.w[0] * l_origin + weights.w[1] * l_motion)


@dataclass
class LossWeights:
    """Two-term loss weights plus the periodic rebalancing state.

    Every `period` supervised samples (at most `max_updates` times) the
    weights are refreshed from the per-term descent ratios r_i = end/start:
    w_i = r_i^lam / sum_j r_j^lam, so lam > 0 shifts weight onto the term
    that descended more slowly over the period.
    """

    w: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    lam: float = 1.0
    period: int = 1250
    max_updates: int = 1
    start_losses: np.ndarray | None = None
    samples_since_update: int = 0
    updates_done: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (2,) or np.any(self.w < 0):
            raise ValueError("weights must be two non-negative reals")


def mlra_update(state: LossWeights, current_losses, n_samples: int = 1) -> LossWeights:
    """Advance the rebalancing state by n_samples supervised samples.

    The first call of a period snapshots the current losses; once the period
    elapses the weights are recomputed from the descent ratios and the
    snapshot resets. Between updates the weights stay constant. A term that
    rose over the period has no descent rate; its ratio saturates at 1 (the
    slowest possible descent) so a rising term cannot monopolize the weights.
    """
    losses = np.asarray(current_losses, dtype=float)
    if losses.shape != (2,):
        raise ValueError("expected exactly two loss terms")
    if state.start_losses is None and state.updates_done < state.max_updates:
        state.start_losses = losses.copy()
    state.samples_since_update += int(n_samples)
    if state.updates_done >= state.max_updates:
        return state
    if state.samples_since_update >= state.period:
        ratios = losses / np.maximum(state.start_losses, _RATIO_EPS)
        powered = np.clip(ratios, 0.0, 1.0) ** state.lam
        state.w = powered / powered.sum()
        state.updates_done += 1
        state.samples_since_update = 0
        state.start_losses = None
    return state
