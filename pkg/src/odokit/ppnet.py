"""Recurrent next-pose predictor with per-dimension uncertainty.

A single gated recurrent (LSTM) layer of 8 hidden units reads a window of W
centralized 6-DoF poses; two linear heads on the final hidden state emit the
predicted next pose and its per-dimension log-variance. Training minimizes a
power-exponential negative log likelihood

    L = gamma * sum_j log(sigma_j) + (sum_j (y_j - p_j)^2 / sigma_j)^k

with gamma < 1 reweighting the uncertainty regularizer against the residual
term. Gradients are exact reverse-mode derivatives through the recurrent
unroll; the optimizer is Adam with bias correction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import trajectory as trj

INPUT_DIM = 6
OUTPUT_DIM = 6
DEFAULT_HIDDEN = 8
MODEL_FORMAT_VERSION = 1

# Gate packing order along the 4H axis: input, forget, cell, output.
_GATES = 4

# Clamp floor applied to the residual sum inside the d/ds s^k factor only;
# the loss value itself stays the exact closed form.
_GRAD_EPS = 1e-12


class NumericError(ArithmeticError):
    """Non-finite value encountered where the contract forbids silent NaN."""


class ModelFormatError(ValueError):
    """Model stream is corrupt, truncated, or carries the wrong version."""


@dataclass
class PPNetParams:
    """Learnable arrays; shapes fixed by (input=6, hidden=H, output=6)."""

    w_x: np.ndarray  # (4H, 6) input-to-gates
    w_h: np.ndarray  # (4H, H) hidden-to-gates
    b: np.ndarray  # (4H,) gate biases
    w_pose: np.ndarray  # (6, H) pose head
    b_pose: np.ndarray  # (6,)
    w_sigma: np.ndarray  # (6, H) log-variance head
    b_sigma: np.ndarray  # (6,)

    @property
    def hidden(self):
        return self.w_h.shape[1]

    def arrays(self):
        return {
            "w_x": self.w_x,
            "w_h": self.w_h,
            "b": self.b,
            "w_pose": self.w_pose,
            "b_pose": self.b_pose,
            "w_sigma": self.w_sigma,
            "b_sigma": self.b_sigma,
        }

    def copy(self):
        return PPNetParams(**{k: v.copy() for k, v in self.arrays().items()})

    def validate(self):
        h = self.hidden
        expected = {
            "w_x": (_GATES * h, INPUT_DIM),
            "w_h": (_GATES * h, h),
            "b": (_GATES * h,),
            "w_pose": (OUTPUT_DIM, h),
            "b_pose": (OUTPUT_DIM,),
            "w_sigma": (OUTPUT_DIM, h),
            "b_sigma": (OUTPUT_DIM,),
        }
        for name, arr in self.arrays().items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} contains non-finite values")


@dataclass
class Prediction:
    """Predicted next pose (centralized frame) and per-dimension uncertainty."""

    pose: np.ndarray  # (6,)
    sigma: np.ndarray  # (6,) strictly positive


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 200
    gamma: float = 0.1
    k: float = 0.5
    seed: int = 0
    scale_min: float = 0.02
    scale_max: float = 1.5
    window: int = trj.DEFAULT_WINDOW
    hidden: int = DEFAULT_HIDDEN
    # Ablation switches affect the training pipeline only; validation windows
    # always receive the deployment treatment (centralize + mixed scales).
    centralize: bool = True
    augment_scale: bool = True
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ValueError("scale range must satisfy 0 < min <= max")


def init_params(config: TrainConfig, rng=None) -> PPNetParams:
    """Orthogonal recurrent blocks, forget-gate bias 1, zeroed heads."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    h = config.hidden
    w_x = rng.uniform(-1.0, 1.0, size=(_GATES * h, INPUT_DIM)) / np.sqrt(INPUT_DIM)
    blocks = []
    for _ in range(_GATES):
        q, _ = np.linalg.qr(rng.standard_normal((h, h)))
        blocks.append(q)
    w_h = np.concatenate(blocks, axis=0)
    b = np.zeros(_GATES * h)
    b[h : 2 * h] = 1.0  # forget gate opens by default
    return PPNetParams(
        w_x=w_x,
        w_h=w_h,
        b=b,
        w_pose=np.zeros((OUTPUT_DIM, h)),
        b_pose=np.zeros(OUTPUT_DIM),
        w_sigma=np.zeros((OUTPUT_DIM, h)),
        b_sigma=np.zeros(OUTPUT_DIM),
    )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_batch(params: PPNetParams, x, want_cache=False):
    """Run the recurrent unroll over a batch, x shape (B, W, 6).

    Returns (pose (B, 6), logvar (B, 6)) read off the final hidden state,
    plus the per-step cache when requested for backpropagation.
    """
    params.validate()
    x = np.asarray(x, dtype=float)
    B, W, _ = x.shape
    h = np.zeros((B, params.hidden))
    c = np.zeros((B, params.hidden))
    H = params.hidden
    cache = []
    for t in range(W):
        z = x[:, t] @ params.w_x.T + h @ params.w_h.T + params.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c_prev = c
        h_prev = h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if want_cache:
            cache.append((x[:, t], h_prev, c_prev, i, f, g, o, tc))
    pose = h @ params.w_pose.T + params.b_pose
    logvar = h @ params.w_sigma.T + params.b_sigma
    if want_cache:
        return pose, logvar, (h, cache)
    return pose, logvar


def forward(params: PPNetParams, window: trj.PoseWindow) -> Prediction:
    """Predict the next pose and its uncertainty for one centralized window."""
    pose, logvar = forward_batch(params, window.inputs[None])
    if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(logvar))):
        raise NumericError("forward pass produced non-finite outputs")
    return Prediction(pose=pose[0], sigma=np.exp(logvar[0]))


def nll_loss(pred: Prediction, target, gamma: float, k: float) -> float:
    """Power-exponential negative log likelihood of a single prediction."""
    sigma = np.asarray(pred.sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    e = np.asarray(target, dtype=float) - pred.pose
    s = float(np.sum(e * e / sigma))
    return float(gamma * np.sum(np.log(sigma)) + s**k)


def total_uncertainty(pred: Prediction) -> float:
    """Overall uncertainty: the sum of the per-dimension entries."""
    return float(np.sum(pred.sigma))


def _nll_batch(pose, logvar, y, gamma, k):
    """Mean NLL over a batch plus gradients w.r.t. the two head outputs."""
    e = y - pose
    inv_sig = np.exp(-logvar)
    s = np.sum(e * e * inv_sig, axis=1)
    loss = float(np.mean(gamma * np.sum(logvar, axis=1) + s**k))
    B = pose.shape[0]
    factor = k * np.maximum(s, _GRAD_EPS) ** (k - 1.0)
    dpose = (factor[:, None] * (-2.0 * e * inv_sig)) / B
    dlogvar = (gamma - factor[:, None] * e * e * inv_sig) / B
    return loss, dpose, dlogvar


def _backward_batch(params, x, h_final, cache, dpose, dlogvar):
    H = params.hidden
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    grads["w_pose"] = dpose.T @ h_final
    grads["b_pose"] = dpose.sum(axis=0)
    grads["w_sigma"] = dlogvar.T @ h_final
    grads["b_sigma"] = dlogvar.sum(axis=0)
    dh = dpose @ params.w_pose + dlogvar @ params.w_sigma
    dc = np.zeros_like(dh)
    for t in reversed(range(len(cache))):
        x_t, h_prev, c_prev, i, f, g, o, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc = dc * f
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        grads["w_x"] += dz.T @ x_t
        grads["w_h"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        dh = dz @ params.w_h
    return grads


def loss_and_gradient(params: PPNetParams, inputs, targets, gamma, k):
    """Mean NLL over preprocessed windows and its exact gradient."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 3 or inputs.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, W, 6) array")
    pose, logvar, (h_final, cache) = forward_batch(params, inputs, want_cache=True)
    loss, dpose, dlogvar = _nll_batch(pose, logvar, targets, gamma, k)
    grads = _backward_batch(params, inputs, h_final, cache, dpose, dlogvar)
    if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError("loss gradient overflowed to a non-finite value")
    return loss, grads


def loss_gradient(params: PPNetParams, batch, gamma=0.1, k=0.5):
    """Gradient of the mean NLL over a list of preprocessed PoseWindows."""
    if not batch:
        raise ValueError("batch must be non-empty")
    inputs = np.stack([w.inputs for w in batch])
    targets = np.stack([w.target for w in batch])
    _, grads = loss_and_gradient(params, inputs, targets, gamma, k)
    return grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: PPNetParams):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.arrays().items()},
            v={k: np.zeros_like(v) for k, v in params.arrays().items()},
        )


def adam_step(params: PPNetParams, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns fresh params and state."""
    new_arrays = {}
    t = state.t + 1
    new_m, new_v = {}, {}
    for name, value in params.arrays().items():
        g = grads[name]
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        new_arrays[name] = value - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name] = m
        new_v[name] = v
    return PPNetParams(**new_arrays), AdamState(m=new_m, v=new_v, t=t)


def evaluate_nll(params: PPNetParams, inputs, targets, gamma, k, chunk=4096):
    """Mean NLL of preprocessed windows without gradient bookkeeping."""
    total = 0.0
    n = inputs.shape[0]
    for lo in range(0, n, chunk):
        pose, logvar = forward_batch(params, inputs[lo : lo + chunk])
        e = targets[lo : lo + chunk] - pose
        s = np.sum(e * e * np.exp(-logvar), axis=1)
        total += float(np.sum(gamma * np.sum(logvar, axis=1) + s**k))
    return total / n


def zero_baseline_nll(targets, gamma, k, fit_sigma=True):
    """NLL floor of the information-free predictor (pose 0, constant sigma).

    With fit_sigma, the 6 log-variances are chosen to minimize the mean NLL
    on the given targets; beating this floor requires actual use of the
    window inputs.
    """
    y = np.asarray(targets, dtype=float)

    def objective(logvar):
        s = np.sum(y * y * np.exp(-logvar), axis=1)
        return float(np.mean(gamma * np.sum(logvar) + s**k))

    if not fit_sigma:
        return objective(np.zeros(OUTPUT_DIM))
    start = np.log(np.maximum(np.mean(y * y, axis=0), 1e-12))
    res = minimize(objective, start, method="Nelder-Mead", options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 20000})
    return float(res.fun)


def build_window_sets(dataset, config: TrainConfig):
    """Split every trajectory's windows into train/validation (last 10% held out)."""
    train_in, train_tg, val_in, val_tg = [], [], [], []
    for traj in dataset:
        inputs, targets = trj.window_arrays(traj, config.window)
        m = inputs.shape[0]
        if m == 0:
            continue
        n_val = max(1, int(round(m * config.val_fraction))) if m > 1 else 0
        cut = m - n_val
        train_in.append(inputs[:cut])
        train_tg.append(targets[:cut])
        val_in.append(inputs[cut:])
        val_tg.append(targets[cut:])
    if not train_in:
        raise ValueError("dataset produced no windows")
    cat = lambda parts: np.concatenate([p for p in parts if len(p)], axis=0)
    return cat(train_in), cat(train_tg), cat(val_in), cat(val_tg)


def _scale_batch(inputs, targets, factors):
    inputs = inputs.copy()
    targets = targets.copy()
    inputs[:, :, :3] *= factors[:, None, None]
    targets[:, :3] *= factors[:, None]
    return inputs, targets


def deployment_windows(inputs, targets, config: TrainConfig, rng):
    """Apply the deployment treatment: mixed scales from the range, then centralize."""
    factors = np.exp(rng.uniform(np.log(config.scale_min), np.log(config.scale_max), size=inputs.shape[0]))
    scaled_in, scaled_tg = _scale_batch(inputs, targets, factors)
    return centralize_arrays(scaled_in, scaled_tg)


def centralize_arrays(inputs, targets):
    return trj.centralize_batch(inputs, targets)


@dataclass
class TrainResult:
    params: PPNetParams
    history: list
    best_epoch: int
    best_val_nll: float
    val_inputs: np.ndarray
    val_targets: np.ndarray


def train(dataset, config: TrainConfig) -> TrainResult:
    """Train on a list of trajectories; deterministic for a fixed seed.

    Per step: sample windows, rescale translations by a random factor from the
    configured range, re-anchor at the middle pose, then one Adam update on
    the mean NLL. Returns the parameters with the lowest validation NLL.
    """
    if not dataset:
        raise ValueError("dataset must contain at least one trajectory")
    rng = np.random.default_rng(config.seed)
    train_in, train_tg, val_in_raw, val_tg_raw = build_window_sets(dataset, config)
    if train_in.shape[0] < config.batch_size:
        raise ValueError(
            f"dataset yields {train_in.shape[0]} training windows; need >= batch size {config.batch_size}"
        )
    val_rng = np.random.default_rng(config.seed + 1)
    val_in, val_tg = deployment_windows(val_in_raw, val_tg_raw, config, val_rng)

    params = init_params(config, rng)
    state = AdamState.for_params(params)

    best = params.copy()
    best_val = evaluate_nll(params, val_in, val_tg, config.gamma, config.k)
    best_epoch = 0
    history = [{"epoch": 0, "train_nll": float("nan"), "val_nll": best_val}]

    n = train_in.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            binp = train_in[idx]
            btg = train_tg[idx]
            if config.augment_scale:
                factors = np.exp(
                    rng.uniform(np.log(config.scale_min), np.log(config.scale_max), size=len(idx))
                )
                binp, btg = _scale_batch(binp, btg, factors)
            if config.centralize:
                binp, btg = centralize_arrays(binp, btg)
            loss, grads = loss_and_gradient(params, binp, btg, config.gamma, config.k)
            params, state = adam_step(params, grads, state, config)
            epoch_loss += loss
            n_batches += 1
        val_nll = evaluate_nll(params, val_in, val_tg, config.gamma, config.k)
        history.append(
            {"epoch": epoch, "train_nll": epoch_loss / max(n_batches, 1), "val_nll": val_nll}
        )
        if val_nll < best_val:
            best_val = val_nll
            best = params.copy()
            best_epoch = epoch
    return TrainResult(
        params=best,
        history=history,
        best_epoch=best_epoch,
        best_val_nll=best_val,
        val_inputs=val_in,
        val_targets=val_tg,
    )


def save_model(params: PPNetParams) -> bytes:
    """Serialize to a versioned npz container with an explicit shape header."""
    params.validate()
    buf = io.BytesIO()
    header = np.array([MODEL_FORMAT_VERSION, INPUT_DIM, params.hidden, OUTPUT_DIM], dtype=np.int64)
    np.savez(buf, header=header, **params.arrays())
    return buf.getvalue()


def load_model(data: bytes) -> PPNetParams:
    """Inverse of save_model; rejects version or shape mismatches."""
    try:
        with np.load(io.BytesIO(data)) as archive:
            contents = {name: archive[name] for name in archive.files}
    except Exception as exc:
        raise ModelFormatError(f"unreadable model stream: {exc}") from exc
    if "header" not in contents:
        raise ModelFormatError("model stream is missing its header")
    header = contents.pop("header")
    if header.shape != (4,) or int(header[0]) != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model version {header[0] if header.size else '?'}; expected {MODEL_FORMAT_VERSION}"
        )
    if int(header[1]) != INPUT_DIM or int(header[3]) != OUTPUT_DIM:
        raise ModelFormatError("model header does not match the 6 -> 6 pose layout")
    try:
        params = PPNetParams(**{k: np.asarray(v, dtype=float) for k, v in contents.items()})
    except TypeError as exc:
        raise ModelFormatError(f"model stream is missing arrays: {exc}") from exc
    if params.hidden != int(header[2]):
        raise ModelFormatError("array shapes disagree with the shape header")
    params.validate()
    return params
