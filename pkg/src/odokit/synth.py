"""Synthetic vehicle-odometry harness: generation, corruption, refinement.

Ground-truth trajectories integrate car-like motion (forward translation
along a yaw/pitch heading). Corruption rescales and perturbs the per-frame
ego-motion with noise, multiplicative scale drift, and systematic per-step
bias segments, then re-chains — emulating an odometry estimator stuck in a
self-consistent but wrong state. Refinement optimizes a piecewise corrector
on the relative poses against two terms: a consistency loss that is zero at
the corrupted input (the local minimum, blind to the bias) and the
uncertainty-gated motion loss built from pose-predictor pseudo labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ppnet, se3, supervision
from . import trajectory as trj

_HEADING_BOUND = 2.6  # rad; keeps absolute rotation angles clear of the pi chart edge
_NORM_EPS = 1e-15


class RefinementDivergedError(RuntimeError):
    """Refinement loss went non-finite; diagnostics attached."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class MotionSegment:
    frames: int
    speed: float  # m/frame
    yaw_rate: float = 0.0  # rad/frame
    pitch_rate: float = 0.0  # rad/frame

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("segment duration must be >= 1 frame")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


@dataclass
class MotionProfile:
    segments: list
    jitter: float = 0.0  # relative std applied to speed and rates per frame
    seed: int = 0


def _heading_matrix(yaw, pitch):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    return rz @ ry


def generate_trajectory(profile: MotionProfile, frame_period=trj.DEFAULT_FRAME_PERIOD) -> trj.Trajectory:
    """Integrate a motion profile into an absolute trajectory, deterministic per seed."""
    rng = np.random.default_rng(profile.seed)
    yaw = 0.0
    pitch = 0.0
    pos = np.zeros(3)
    rotations = [_heading_matrix(yaw, pitch)]
    positions = [pos.copy()]
    # Angular wobble keeps every pose dimension genuinely stochastic; perfectly
    # constant target dimensions would let the uncertainty head race unbounded.
    ang_jitter = profile.jitter * 0.005
    for seg in profile.segments:
        for _ in range(seg.frames):
            if profile.jitter:
                j = rng.standard_normal(5)
                yaw += seg.yaw_rate * (1.0 + profile.jitter * j[1]) + ang_jitter * j[3]
                pitch += seg.pitch_rate * (1.0 + profile.jitter * j[2]) + ang_jitter * j[4]
                speed = seg.speed * (1.0 + profile.jitter * j[0])
            else:
                yaw += seg.yaw_rate
                pitch += seg.pitch_rate
                speed = seg.speed
            R = _heading_matrix(yaw, pitch)
            pos = pos + R @ np.array([speed, 0.0, 0.0])
            rotations.append(R)
            positions.append(pos.copy())
    rotvecs = se3.matrices_to_rotvecs(np.stack(rotations))
    poses = np.concatenate([np.stack(positions), rotvecs], axis=1)
    return trj.Trajectory(poses, frame_period=frame_period)


@dataclass
class BiasSegment:
    start: int  # first affected ego-motion step
    end: int  # one past the last affected step
    offset: np.ndarray  # (6,) added to each relative pose in range

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        if self.offset.shape != (6,):
            raise ValueError("bias offset must be a 6-vector")


@dataclass
class NoiseModel:
    sigma_t: float = 0.0  # per-step translation noise, m
    sigma_r: float = 0.0  # per-step rotation noise, rad
    scale_drift: float = 1.0  # multiplicative per frame, compounded
    scale: float = 1.0  # global scale of the estimated trajectory
    bias_segments: list = field(default_factory=list)

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if self.scale_drift <= 0 or self.scale <= 0:
            raise ValueError("scale factors must be positive")


def corrupt(gt: trj.Trajectory, noise: NoiseModel, seed=0) -> trj.Trajectory:
    """Perturb per-frame ego-motion with noise, drift, and bias, then re-chain."""
    rng = np.random.default_rng(seed)
    rel = trj.relative_steps(gt)
    n = rel.shape[0]
    drift = noise.scale_drift ** np.arange(1, n + 1)
    bias = np.zeros((n, 6))
    for seg in noise.bias_segments:
        bias[seg.start : seg.end] += seg.offset
    out = rel.copy()
    out[:, :3] = rel[:, :3] * (noise.scale * drift)[:, None] + bias[:, :3]
    out[:, 3:] = rel[:, 3:] + bias[:, 3:]
    if noise.sigma_t > 0:
        out[:, :3] += rng.normal(0.0, noise.sigma_t, size=(n, 3))
    if noise.sigma_r > 0:
        out[:, 3:] += rng.normal(0.0, noise.sigma_r, size=(n, 3))
    return trj.chain_relative_poses(gt.poses[0], out, frame_period=gt.frame_period)


@dataclass
class Corrector:
    """Piecewise correction of relative poses: one additive 6-vector and one
    log-scale scalar per block of segment_length consecutive steps."""

    delta: np.ndarray  # (S, 6)
    log_scale: np.ndarray  # (S,)
    segment_length: int

    @classmethod
    def zeros(cls, n_steps, segment_length):
        s = (n_steps + segment_length - 1) // segment_length
        return cls(np.zeros((s, 6)), np.zeros(s), segment_length)

    def segment_index(self, n_steps):
        return np.minimum(np.arange(n_steps) // self.segment_length, len(self.log_scale) - 1)

    def apply(self, rel):
        rel = np.asarray(rel, dtype=float)
        seg = self.segment_index(rel.shape[0])
        out = rel.copy()
        out[:, :3] = rel[:, :3] * np.exp(self.log_scale[seg])[:, None] + self.delta[seg, :3]
        out[:, 3:] = rel[:, 3:] + self.delta[seg, 3:]
        return out

    def magnitude(self):
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0


def origin_loss(corrector: Corrector, noisy: trj.Trajectory) -> float:
    """Consistency loss of the estimator: sum of squared deviations between
    corrected and measured relative poses. Zero at zero correction by
    construction, regardless of how wrong the measurements are."""
    rel = trj.relative_steps(noisy)
    diff = corrector.apply(rel) - rel
    return float(np.sum(diff * diff))


def _origin_terms(corrector, rel_noisy, seg):
    """Loss, plus gradients w.r.t. delta (S, 6) and log_scale (S,)."""
    rel_corr = corrector.apply(rel_noisy)
    diff = rel_corr - rel_noisy
    loss = float(np.sum(diff * diff))
    d_delta = np.zeros_like(corrector.delta)
    d_ls = np.zeros_like(corrector.log_scale)
    np.add.at(d_delta, seg, 2.0 * diff)
    scaled_t = rel_noisy[:, :3] * np.exp(corrector.log_scale[seg])[:, None]
    np.add.at(d_ls, seg, 2.0 * np.sum(diff[:, :3] * scaled_t, axis=1))
    return rel_corr, loss, d_delta, d_ls


@dataclass
class RefineConfig:
    window: int = trj.DEFAULT_WINDOW
    segment_length: int = 25
    steps: int = 250
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1.0
    tau_percentile: float = 90.0
    gate: bool = True  # False: no threshold and confidence fixed at 1
    seed: int = 0


@dataclass
class RefineResult:
    corrected: trj.Trajectory
    diagnostics: dict
    weights: supervision.LossWeights
    corrector: Corrector


def refine(noisy: trj.Trajectory, model: ppnet.PPNetParams,
           cp: supervision.ConfidenceParams | None,
           weights: supervision.LossWeights,
           config: RefineConfig) -> RefineResult:
    """Gradient-based refinement of a piecewise corrector on the noisy trajectory.

    Each optimizer step rebuilds the corrected trajectory, runs the full
    pseudo-label pipeline over it (prediction history = current corrected
    poses), and descends the weighted sum of the consistency loss and the
    mean gated motion loss. Pseudo labels act as detached supervision
    targets; gradients flow only through the corrected ego-motion.
    """
    rel_noisy = trj.relative_steps(noisy)
    n_steps_rel = rel_noisy.shape[0]
    if n_steps_rel < config.window + 1:
        raise ValueError("trajectory too short to refine with this window")
    corrector = Corrector.zeros(n_steps_rel, config.segment_length)
    seg = corrector.segment_index(n_steps_rel)

    if config.gate:
        cp_eff = cp
        if cp_eff is None:
            probe = supervision.pseudo_labels_for_trajectory(
                model, noisy.poses, None, config.window
            )
            tau = float(np.percentile(probe["total_uncertainty"], config.tau_percentile))
            cp_eff = supervision.ConfidenceParams(tau=max(tau, 1e-12), alpha=config.alpha)
    else:
        cp_eff = None  # ungated: every frame supervises with confidence 1

    m_delta = np.zeros_like(corrector.delta)
    v_delta = np.zeros_like(corrector.delta)
    m_ls = np.zeros_like(corrector.log_scale)
    v_ls = np.zeros_like(corrector.log_scale)
    step_rows = []
    labels = None

    for step in range(1, config.steps + 1):
        rel_corr, l_origin, do_delta, do_ls = _origin_terms(corrector, rel_noisy, seg)
        abs_corr = trj.chain_relative_poses(noisy.poses[0], rel_corr, noisy.frame_period)
        labels = supervision.pseudo_labels_for_trajectory(
            model, abs_corr.poses, cp_eff, config.window
        )
        acc = labels["accepted"]
        idx = labels["frames"] - 1  # ego-motion step t-1 -> t for predicted frame t
        conf = labels["confidences"]
        n_acc = int(np.count_nonzero(acc))
        dm_delta = np.zeros_like(corrector.delta)
        dm_ls = np.zeros_like(corrector.log_scale)
        if n_acc:
            residual = labels["rel_labels"][acc] - rel_corr[idx[acc]]
            norms = np.linalg.norm(residual, axis=1)
            l_motion = float(np.mean(conf[acc] * norms))
            # d/d rel_corr of mean c * ||label - rel_corr||, label detached
            g_rel = (conf[acc] / np.maximum(norms, _NORM_EPS))[:, None] * (-residual) / n_acc
            seg_acc = seg[idx[acc]]
            np.add.at(dm_delta, seg_acc, g_rel)
            scaled_t = rel_noisy[idx[acc], :3] * np.exp(corrector.log_scale[seg_acc])[:, None]
            np.add.at(dm_ls, seg_acc, np.sum(g_rel[:, :3] * scaled_t, axis=1))
        else:
            l_motion = 0.0

        if not (np.isfinite(l_origin) and np.isfinite(l_motion)):
            raise RefinementDivergedError(
                f"non-finite loss at step {step}",
                diagnostics={"steps": step_rows},
            )

        weights = supervision.mlra_update(weights, (l_origin, l_motion), n_samples=max(n_acc, 0))
        w1, w2 = weights.w
        g_delta = w1 * do_delta + w2 * dm_delta
        g_ls = w1 * do_ls + w2 * dm_ls

        t = step
        for g, m, v, arr in ((g_delta, m_delta, v_delta, corrector.delta),
                             (g_ls, m_ls, v_ls, corrector.log_scale)):
            m *= config.beta1
            m += (1.0 - config.beta1) * g
            v *= config.beta2
            v += (1.0 - config.beta2) * g * g
            m_hat = m / (1.0 - config.beta1**t)
            v_hat = v / (1.0 - config.beta2**t)
            arr -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)

        step_rows.append(
            {
                "step": step,
                "l_origin": l_origin,
                "l_motion": l_motion,
                "combined": supervision.combined_loss(l_origin, l_motion, weights),
                "w1": float(w1),
                "w2": float(w2),
                "n_supervised": n_acc,
            }
        )

    rel_corr = corrector.apply(rel_noisy)
    corrected = trj.chain_relative_poses(noisy.poses[0], rel_corr, noisy.frame_period)
    final_labels = supervision.pseudo_labels_for_trajectory(
        model, corrected.poses, cp_eff, config.window
    )
    frame_rows = [
        {
            "frame": int(f),
            "gated": bool(not a),
            "total_uncertainty": float(u),
            "confidence": float(c),
        }
        for f, a, u, c in zip(
            final_labels["frames"],
            final_labels["accepted"],
            final_labels["total_uncertainty"],
            final_labels["confidences"],
        )
    ]
    diagnostics = {
        "steps": step_rows,
        "frames": frame_rows,
        "tau": None if cp_eff is None else cp_eff.tau,
        "final_weights": [float(weights.w[0]), float(weights.w[1])],
    }
    return RefineResult(corrected=corrected, diagnostics=diagnostics,
                        weights=weights, corrector=corrector)


# ---------------------------------------------------------------------------
# Motion-profile families and the standard fixture suite
# ---------------------------------------------------------------------------


def _bounded_yaw(heading, rate, frames):
    """Flip the turn direction when it would push the heading near the chart edge."""
    if abs(heading + rate * frames) > _HEADING_BOUND:
        rate = -rate
    return rate, heading + rate * frames


def family_profile(seed, n_frames=1200, jitter=0.02) -> MotionProfile:
    """Random car-like profile from the shared family: mixed cruising speeds,
    bounded turns, mild pitch. Training and evaluation draws differ by seed."""
    rng = np.random.default_rng(seed)
    segments = []
    heading = 0.0
    total = 0
    while total < n_frames:
        frames = int(rng.integers(60, 220))
        frames = min(frames, n_frames - total)
        speed = float(rng.uniform(0.05, 0.14))
        turn = rng.random()
        if turn < 0.45:
            yaw = 0.0
        else:
            yaw = float(rng.uniform(0.004, 0.02)) * (1 if rng.random() < 0.5 else -1)
            yaw, heading = _bounded_yaw(heading, yaw, frames)
        pitch = float(rng.uniform(-0.002, 0.002)) if rng.random() < 0.3 else 0.0
        segments.append(MotionSegment(frames=frames, speed=speed, yaw_rate=yaw, pitch_rate=pitch))
        total += frames
    return MotionProfile(segments=segments, jitter=jitter, seed=int(seed))


def training_trajectories(count=10, n_frames=1200, seed=1000):
    """Pose sequences for motion-model training; disjoint seeds from fixtures."""
    return [generate_trajectory(family_profile(seed + i, n_frames)) for i in range(count)]


def constant_velocity_trajectories(count=8, n_frames=400, seed=2000):
    """Near-straight constant-speed runs at assorted headings and speeds.

    Hair-thin residual curvature and jitter keep every target dimension
    stochastic without changing the constant-velocity character.
    """
    out = []
    rng = np.random.default_rng(seed)
    for _ in range(count):
        speed = float(rng.uniform(0.05, 0.15))
        heading = float(rng.uniform(-_HEADING_BOUND, _HEADING_BOUND))
        yaw = float(rng.uniform(-8e-4, 8e-4))
        pitch = float(rng.uniform(-3e-4, 3e-4))
        profile = MotionProfile(
            segments=[MotionSegment(frames=1, speed=0.0, yaw_rate=heading),
                      MotionSegment(frames=n_frames - 1, speed=speed,
                                    yaw_rate=yaw, pitch_rate=pitch)],
            jitter=0.004,
            seed=int(rng.integers(0, 2**31)),
        )
        out.append(generate_trajectory(profile))
    return out


def mixed_scale_dataset(count=6, n_frames=700, seed=3000, offset=8.0):
    """Family trajectories displaced to random start positions.

    Window scales are mixed by the training pipeline's augmentation and the
    deployment-style validation split; the displacement keeps raw windows
    away from the origin so anchoring actually matters.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        traj = generate_trajectory(family_profile(seed + 17 * i + 1, n_frames))
        poses = traj.poses.copy()
        poses[:, :3] += rng.uniform(-offset, offset, size=3)
        out.append(trj.Trajectory(poses, frame_period=traj.frame_period))
    return out


def _urban_profile(seed):
    rng = np.random.default_rng(seed)
    segments = []
    heading = 0.0
    plan = [
        ("cruise", 120), ("turn", 55), ("cruise", 130), ("stop", 30),
        ("cruise", 110), ("turn", 60), ("cruise", 105), ("stop", 25),
    ]
    for kind, frames in plan:
        if kind == "stop":
            segments.append(MotionSegment(frames=frames, speed=0.004))
        elif kind == "turn":
            yaw = float(rng.uniform(0.014, 0.022)) * (1 if rng.random() < 0.5 else -1)
            yaw, heading = _bounded_yaw(heading, yaw, frames)
            segments.append(MotionSegment(frames=frames, speed=float(rng.uniform(0.04, 0.07)), yaw_rate=yaw))
        else:
            segments.append(MotionSegment(frames=frames, speed=float(rng.uniform(0.07, 0.11))))
    return MotionProfile(segments=segments, jitter=0.004, seed=int(seed))


def _highway_profile(seed):
    rng = np.random.default_rng(seed)
    segments = []
    heading = 0.0
    for _ in range(4):
        frames = int(rng.integers(140, 180))
        speed = float(rng.uniform(0.115, 0.145))
        yaw = float(rng.uniform(-0.0035, 0.0035))
        yaw, heading = _bounded_yaw(heading, yaw, frames)
        pitch = float(rng.uniform(-0.0015, 0.0015))
        segments.append(MotionSegment(frames=frames, speed=speed, yaw_rate=yaw, pitch_rate=pitch))
    return MotionProfile(segments=segments, jitter=0.003, seed=int(seed))


def _figure_eight_profile(seed):
    segments = []
    segments.append(MotionSegment(frames=240, speed=0.10, yaw_rate=0.0105))
    segments.append(MotionSegment(frames=250, speed=0.10, yaw_rate=-0.0105))
    segments.append(MotionSegment(frames=120, speed=0.10))
    return MotionProfile(segments=segments, jitter=0.003, seed=int(seed))


_PROFILE_BUILDERS = {
    "urban": _urban_profile,
    "highway": _highway_profile,
    "figure8": _figure_eight_profile,
}


@dataclass
class FixtureConfig:
    name: str
    profile_kind: str
    profile_seed: int
    noise: NoiseModel
    corruption_seed: int

    def build(self):
        profile = _PROFILE_BUILDERS[self.profile_kind](self.profile_seed)
        gt = generate_trajectory(profile)
        noisy = corrupt(gt, self.noise, seed=self.corruption_seed)
        return gt, noisy

    def to_dict(self):
        d = {
            "name": self.name,
            "profile_kind": self.profile_kind,
            "profile_seed": self.profile_seed,
            "corruption_seed": self.corruption_seed,
            "noise": {
                "sigma_t": self.noise.sigma_t,
                "sigma_r": self.noise.sigma_r,
                "scale_drift": self.noise.scale_drift,
                "scale": self.noise.scale,
                "bias_segments": [
                    {"start": b.start, "end": b.end, "offset": list(b.offset)}
                    for b in self.noise.bias_segments
                ],
            },
        }
        return d

    @classmethod
    def from_dict(cls, d):
        noise = d["noise"]
        return cls(
            name=d["name"],
            profile_kind=d["profile_kind"],
            profile_seed=d["profile_seed"],
            corruption_seed=d["corruption_seed"],
            noise=NoiseModel(
                sigma_t=noise["sigma_t"],
                sigma_r=noise["sigma_r"],
                scale_drift=noise["scale_drift"],
                scale=noise["scale"],
                bias_segments=[
                    BiasSegment(b["start"], b["end"], np.array(b["offset"]))
                    for b in noise["bias_segments"]
                ],
            ),
        )


# Deployment scale of the corrupted estimates: well below metric, mirroring
# scale-ambiguous monocular output, and inside the augmentation range.
_SUITE_SCALE = 0.3
_SUITE_STEP = 0.03  # nominal deploy-scale per-frame displacement, for bias sizing
_SUITE_LEVELS = {
    "n1": {"bias": 0.015, "sigma_t": 1.0e-5, "sigma_r": 2.0e-6, "drift": 1.000002},
    "n2": {"bias": 0.025, "sigma_t": 2.0e-5, "sigma_r": 3.0e-6, "drift": 1.000003},
    "n3": {"bias": 0.040, "sigma_t": 3.0e-5, "sigma_r": 4.0e-6, "drift": 1.000005},
}


def _suite_bias_segments(n_frames, level, rng):
    """Constraint-violating drift: per-step lateral/vertical leaks over long ranges."""
    mag = level["bias"] * _SUITE_STEP
    spans = []
    bounds = np.sort(rng.integers(int(0.1 * n_frames), int(0.95 * n_frames), size=4))
    ranges = [(int(bounds[0]), int(bounds[1])), (int(bounds[2]), int(bounds[3]))]
    for k, (lo, hi) in enumerate(ranges):
        if hi - lo < 80:
            hi = min(lo + 120, n_frames - 1)
        direction = np.zeros(6)
        lateral = mag * (1 if rng.random() < 0.5 else -1)
        vertical = 0.6 * mag * (1 if rng.random() < 0.5 else -1)
        direction[1] = lateral
        direction[2] = vertical
        spans.append(BiasSegment(start=lo, end=hi, offset=direction))
    return spans


def standard_suite():
    """The 9 canonical fixtures: 3 motion profiles x 3 noise levels, fixed seeds."""
    fixtures = []
    for p_idx, kind in enumerate(("urban", "highway", "figure8")):
        profile_seed = 500 + p_idx
        n_frames = sum(s.frames for s in _PROFILE_BUILDERS[kind](profile_seed).segments)
        for l_idx, (lvl_name, level) in enumerate(sorted(_SUITE_LEVELS.items())):
            rng = np.random.default_rng(9000 + 10 * p_idx + l_idx)
            noise = NoiseModel(
                sigma_t=level["sigma_t"],
                sigma_r=level["sigma_r"],
                scale_drift=level["drift"],
                scale=_SUITE_SCALE,
                bias_segments=_suite_bias_segments(n_frames, level, rng),
            )
            fixtures.append(
                FixtureConfig(
                    name=f"{kind}_{lvl_name}",
                    profile_kind=kind,
                    profile_seed=profile_seed,
                    noise=noise,
                    corruption_seed=7000 + 10 * p_idx + l_idx,
                )
            )
    return fixtures
