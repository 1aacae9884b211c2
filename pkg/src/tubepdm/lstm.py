"""Gated recurrent forecaster: forward pass, exact backpropagation through
time, training loop, and binary model serialization.

The cell uses the combined-matrix formulation over z = [x; h_prev]:

    i = sigmoid(W_i z + b_i)        input gate
    f = sigmoid(W_f z + b_f)        forget gate
    o = sigmoid(W_o z + b_o)        output gate
    g = tanh(W_g z + b_g)           candidate
    c = f * c_prev + i * g
    h = o * tanh(c)

and a linear readout y = W_y h + b_y over the final hidden state. Gradients
are exact (verified against central finite differences), training is bit
deterministic for a fixed seed.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    InvalidArgumentError,
    InvalidDatasetError,
    ModelCorruptionError,
    ModelFormatError,
    ModelVersionError,
)
from .preprocess import WindowedDataset
from .rng import Pcg32

MODEL_MAGIC = b"PDML"
MODEL_VERSION = 1

# serialization order of the parameter tensors
_TENSOR_NAMES = ("Wi", "Wf", "Wo", "Wg", "bi", "bf", "bo", "bg", "Wy", "by")


@dataclass
class LstmParams:
    """All trainable tensors. d = input size, h = hidden size, F = output size."""

    d: int
    h: int
    out: int
    Wi: np.ndarray
    Wf: np.ndarray
    Wo: np.ndarray
    Wg: np.ndarray
    bi: np.ndarray
    bf: np.ndarray
    bo: np.ndarray
    bg: np.ndarray
    Wy: np.ndarray
    by: np.ndarray

    def tensors(self):
        """(name, array) pairs in declaration order."""
        return [(name, getattr(self, name)) for name in _TENSOR_NAMES]

    @property
    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.tensors())

    def copy(self) -> "LstmParams":
        return LstmParams(self.d, self.h, self.out,
                          **{n: a.copy() for n, a in self.tensors()})


@dataclass
class LstmState:
    """Hidden and cell vectors; zero at sequence start."""

    hidden: np.ndarray
    cell: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_clip_norm: float | None = 5.0
    batch_size: int = 32
    rng_seed: int = 0
    hidden_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    """Per-epoch loss curves plus the trained parameters."""

    train_mse: list = field(default_factory=list)
    validation_mse: list = field(default_factory=list)
    wall_time_s: float = 0.0
    params: LstmParams | None = None

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,validation_mse"]
        for e, t in enumerate(self.train_mse, start=1):
            v = self.validation_mse[e - 1] if e - 1 < len(self.validation_mse) else ""
            lines.append(f"{e},{t!r},{'' if v == '' else repr(v)}")
        return "\n".join(lines) + "\n"


def init_params(d: int, h: int, out: int, seed: int = 0) -> LstmParams:
    """Uniform(-1/sqrt(h), +1/sqrt(h)) weights; forget bias 1, other biases 0."""
    rng = Pcg32(seed)
    bound = 1.0 / np.sqrt(h)

    def mat(rows, cols):
        return np.array([[rng.uniform(-bound, bound) for _ in range(cols)]
                         for _ in range(rows)])

    return LstmParams(
        d=d, h=h, out=out,
        Wi=mat(h, d + h), Wf=mat(h, d + h), Wo=mat(h, d + h), Wg=mat(h, d + h),
        bi=np.zeros(h), bf=np.ones(h), bo=np.zeros(h), bg=np.zeros(h),
        Wy=mat(out, h), by=np.zeros(out),
    )


def zero_state(h: int, batch: int | None = None) -> LstmState:
    if batch is None:
        return LstmState(hidden=np.zeros(h), cell=np.zeros(h))
    return LstmState(hidden=np.zeros((batch, h)), cell=np.zeros((batch, h)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _step_batch(x, h_prev, c_prev, p: LstmParams):
    """One gated step over a [B, d] batch; returns (h, c, cache)."""
    z = np.concatenate([x, h_prev], axis=1)  # [B, d+h]
    i = _sigmoid(z @ p.Wi.T + p.bi)
    f = _sigmoid(z @ p.Wf.T + p.bf)
    o = _sigmoid(z @ p.Wo.T + p.bo)
    g = np.tanh(z @ p.Wg.T + p.bg)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (z, i, f, o, g, c_prev, tc)


def cell_step(x: np.ndarray, state: LstmState, params: LstmParams) -> LstmState:
    """Apply the gate equations once to a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.d,):
        raise DimensionError(f"input shape {x.shape} != ({params.d},)")
    if state.hidden.shape != (params.h,) or state.cell.shape != (params.h,):
        raise DimensionError("state shape does not match hidden size")
    h, c, _ = _step_batch(x[None, :], state.hidden[None, :], state.cell[None, :], params)
    return LstmState(hidden=h[0], cell=c[0])


def forward_sequence(xs, params: LstmParams, initial: LstmState | None = None):
    """Fold cell_step over a sequence from the zero state (or `initial`).

    Returns (final state, [T, h] array of per-step hidden states).
    """
    state = initial or zero_state(params.h)
    hidden_trace = []
    for x in xs:
        state = cell_step(np.asarray(x, dtype=float), state, params)
        hidden_trace.append(state.hidden)
    trace = np.stack(hidden_trace) if hidden_trace else np.empty((0, params.h))
    return state, trace


def readout(hidden: np.ndarray, params: LstmParams) -> np.ndarray:
    return params.Wy @ hidden + params.by


def predict_horizon(window: np.ndarray, params: LstmParams, horizon: int) -> np.ndarray:
    """Forecast `horizon` steps; steps past the first feed the prior forecast
    back in as the next input (requires input size == output size)."""
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be >= 1, got {horizon}")
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[1] != params.d:
        raise DimensionError(f"window shape {window.shape} incompatible with d={params.d}")
    state, _ = forward_sequence(window, params)
    preds = []
    y = readout(state.hidden, params)
    preds.append(y)
    for _ in range(1, horizon):
        if params.d != params.out:
            raise DimensionError(
                f"autoregressive rollout needs d == output size ({params.d} != {params.out})")
        state = cell_step(y, state, params)
        y = readout(state.hidden, params)
        preds.append(y)
    return np.stack(preds)


def predict_horizon_windowed(window: np.ndarray, params: LstmParams,
                             horizon: int) -> np.ndarray:
    """Autoregressive forecast with a sliding fixed-length context.

    Each step re-runs the recurrence from the zero state over the last
    window-length rows (observed rows plus fed-back forecasts). Training only
    ever exercises windows of that length from the zero state, so unlike the
    open-ended recurrence this rollout never drives the hidden state outside
    the trained regime; long-horizon rollouts stay stable.
    """
    if horizon < 1:
        raise InvalidArgumentError(f"horizon must be >= 1, got {horizon}")
    window = np.asarray(window, dtype=float)
    if window.ndim != 2 or window.shape[1] != params.d:
        raise DimensionError(f"window shape {window.shape} incompatible with d={params.d}")
    if params.d != params.out:
        raise DimensionError(
            f"autoregressive rollout needs d == output size ({params.d} != {params.out})")
    context = window.copy()
    preds = []
    for _ in range(horizon):
        y = batch_predict(context[None, :, :], params)[0]
        preds.append(y)
        context = np.vstack([context[1:], y])
    return np.stack(preds)


def mse_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.shape != target.shape:
        raise DimensionError(f"shape mismatch {predicted.shape} vs {target.shape}")
    diff = predicted - target
    return float(np.mean(diff * diff))


def batch_forward(inputs: np.ndarray, params: LstmParams):
    """Forward a [B, W, d] batch; returns (predictions [B, F], caches)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != params.d:
        raise DimensionError(f"batch shape {inputs.shape} incompatible with d={params.d}")
    b = inputs.shape[0]
    h_t = np.zeros((b, params.h))
    c_t = np.zeros((b, params.h))
    caches = []
    for t in range(inputs.shape[1]):
        h_t, c_t, cache = _step_batch(inputs[:, t, :], h_t, c_t, params)
        caches.append(cache)
    preds = h_t @ params.Wy.T + params.by
    return preds, (caches, h_t)


def batch_predict(inputs: np.ndarray, params: LstmParams) -> np.ndarray:
    """Forward a [B, W, d] batch without keeping per-step caches."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != params.d:
        raise DimensionError(f"batch shape {inputs.shape} incompatible with d={params.d}")
    b = inputs.shape[0]
    h_t = np.zeros((b, params.h))
    c_t = np.zeros((b, params.h))
    for t in range(inputs.shape[1]):
        h_t, c_t, _ = _step_batch(inputs[:, t, :], h_t, c_t, params)
    return h_t @ params.Wy.T + params.by


def batch_loss(inputs: np.ndarray, targets: np.ndarray, params: LstmParams,
               chunk: int = 512) -> float:
    """Mean over the batch of per-sample MSE, evaluated in fixed order."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    total = 0.0
    count = 0
    for lo in range(0, inputs.shape[0], chunk):
        preds = batch_predict(inputs[lo:lo + chunk], params)
        diff = preds - targets[lo:lo + chunk]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count if count else 0.0


def bptt_gradients(inputs: np.ndarray, targets: np.ndarray, params: LstmParams):
    """Exact gradient of the mean batch MSE w.r.t. every parameter tensor.

    Returns (loss, dict name -> gradient array congruent with LstmParams).
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.shape[0] == 0:
        raise InvalidDatasetError("empty batch")
    preds, (caches, h_last) = batch_forward(inputs, params)
    b, _, d = inputs.shape
    diff = preds - targets
    loss = float(np.mean(diff * diff))

    grads = {name: np.zeros_like(arr) for name, arr in params.tensors()}
    d_y = 2.0 * diff / diff.size  # d loss / d predictions
    grads["Wy"] = d_y.T @ h_last
    grads["by"] = d_y.sum(axis=0)

    d_h = d_y @ params.Wy  # [B, h]
    d_c = np.zeros_like(d_h)
    for t in range(len(caches) - 1, -1, -1):
        z, i, f, o, g, c_prev, tc = caches[t]
        d_o = d_h * tc
        d_c = d_c + d_h * o * (1.0 - tc * tc)
        d_i = d_c * g
        d_g = d_c * i
        d_f = d_c * c_prev
        a_i = d_i * i * (1.0 - i)
        a_f = d_f * f * (1.0 - f)
        a_o = d_o * o * (1.0 - o)
        a_g = d_g * (1.0 - g * g)
        grads["Wi"] += a_i.T @ z
        grads["Wf"] += a_f.T @ z
        grads["Wo"] += a_o.T @ z
        grads["Wg"] += a_g.T @ z
        grads["bi"] += a_i.sum(axis=0)
        grads["bf"] += a_f.sum(axis=0)
        grads["bo"] += a_o.sum(axis=0)
        grads["bg"] += a_g.sum(axis=0)
        d_z = a_i @ params.Wi + a_f @ params.Wf + a_o @ params.Wo + a_g @ params.Wg
        d_h = d_z[:, d:]
        d_c = d_c * f
    return loss, grads


def grad_check(params: LstmParams, inputs: np.ndarray, targets: np.ndarray,
               fd_step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    relative error = |g_a - g_n| / max(|g_a|, |g_n|, 1e-12); both-zero
    coordinates contribute 0.
    """
    if fd_step <= 0:
        raise InvalidArgumentError(f"fd_step must be positive, got {fd_step}")
    _, grads = bptt_gradients(inputs, targets, params)
    worst = 0.0
    for name, arr in params.tensors():
        flat = arr.reshape(-1)
        g_analytic = grads[name].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + fd_step
            up = batch_loss(inputs, targets, params)
            flat[idx] = orig - fd_step
            down = batch_loss(inputs, targets, params)
            flat[idx] = orig
            g_numeric = (up - down) / (2.0 * fd_step)
            denom = max(abs(g_analytic[idx]), abs(g_numeric), 1e-12)
            worst = max(worst, abs(g_analytic[idx] - g_numeric) / denom)
    return worst


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Global-norm clip: g <- g * min(1, clip / ||g||). Direction is preserved."""
    total = 0.0
    for arr in grads.values():
        total += float(np.sum(arr * arr))
    norm = np.sqrt(total)
    if norm <= clip_norm or norm == 0.0:
        return grads
    scale = clip_norm / norm
    return {name: arr * scale for name, arr in grads.items()}


def train(train_split: WindowedDataset, validation_split: WindowedDataset | None,
          cfg: TrainConfig) -> TrainReport:
    """Minibatch training with per-epoch train/validation MSE recording.

    Weights start from the seeded initializer; batch order is reshuffled each
    epoch from the same stream, so a fixed seed reproduces the run bit for bit.
    When the validation split is empty the validation curve is left empty.
    """
    if train_split.n_samples == 0:
        raise InvalidDatasetError("training split is empty")
    d = train_split.n_features
    params = init_params(d=d, h=cfg.hidden_size, out=d, seed=cfg.rng_seed)
    rng = Pcg32(cfg.rng_seed, stream=1)  # separate stream from the initializer
    report = TrainReport(params=params)
    has_validation = validation_split is not None and validation_split.n_samples > 0

    adam_m = {name: np.zeros_like(arr) for name, arr in params.tensors()}
    adam_v = {name: np.zeros_like(arr) for name, arr in params.tensors()}
    adam_t = 0

    start = time.monotonic()
    n = train_split.n_samples
    for _ in range(cfg.epochs):
        order = list(range(n))
        rng.shuffle(order)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch_in = train_split.inputs[idx]
            batch_tg = train_split.targets[idx]
            _, grads = bptt_gradients(batch_in, batch_tg, params)
            if cfg.gradient_clip_norm is not None:
                grads = clip_gradients(grads, cfg.gradient_clip_norm)
            if cfg.optimizer == "sgd":
                for name, arr in params.tensors():
                    arr -= cfg.learning_rate * grads[name]
            else:
                adam_t += 1
                b1c = 1.0 - cfg.adam_beta1**adam_t
                b2c = 1.0 - cfg.adam_beta2**adam_t
                for name, arr in params.tensors():
                    m = adam_m[name]
                    v = adam_v[name]
                    g = grads[name]
                    m *= cfg.adam_beta1
                    m += (1.0 - cfg.adam_beta1) * g
                    v *= cfg.adam_beta2
                    v += (1.0 - cfg.adam_beta2) * g * g
                    arr -= cfg.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps)
        # end-of-epoch losses in fixed order: bit-stable regardless of the
        # shuffle, and directly comparable between the two curves
        report.train_mse.append(
            batch_loss(train_split.inputs, train_split.targets, params))
        if has_validation:
            report.validation_mse.append(
                batch_loss(validation_split.inputs, validation_split.targets, params))
    report.wall_time_s = time.monotonic() - start
    report.params = params
    return report


# ── model file format ──────────────────────────────────────────────────────
# magic "PDML", version u16 LE, then d, h, F as u32 LE, tensors in
# declaration order as row-major binary64 LE, then FNV-1a 64 checksum of all
# preceding bytes.

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def save_model(params: LstmParams, path: str) -> None:
    body = bytearray()
    body += MODEL_MAGIC
    body += struct.pack("<H", MODEL_VERSION)
    body += struct.pack("<III", params.d, params.h, params.out)
    for _, arr in params.tensors():
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<Q", _fnv1a64(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_model(path: str) -> LstmParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path!r} is not a model file (bad magic)")
    if len(data) < 6:
        raise ModelCorruptionError(f"{path!r} truncated before version field")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model version {version}")
    if len(data) < 18:
        raise ModelCorruptionError(f"{path!r} truncated before shape header")
    d, h, out = struct.unpack_from("<III", data, 6)
    shapes = {
        "Wi": (h, d + h), "Wf": (h, d + h), "Wo": (h, d + h), "Wg": (h, d + h),
        "bi": (h,), "bf": (h,), "bo": (h,), "bg": (h,),
        "Wy": (out, h), "by": (out,),
    }
    n_values = sum(int(np.prod(s)) for s in shapes.values())
    expected = 18 + 8 * n_values + 8
    if len(data) != expected:
        raise ModelCorruptionError(
            f"{path!r} has {len(data)} bytes, expected {expected}")
    (stored_sum,) = struct.unpack_from("<Q", data, expected - 8)
    if _fnv1a64(data[:-8]) != stored_sum:
        raise ModelCorruptionError(f"{path!r} checksum mismatch")
    offset = 18
    arrays = {}
    for name in _TENSOR_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(float)
        )
        offset += 8 * count
    return LstmParams(d=d, h=h, out=out, **arrays)
