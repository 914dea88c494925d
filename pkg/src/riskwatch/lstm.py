"""Single-layer LSTM classifier trained with BPTT and Adam.

Gate equations, with ``[h, x]`` the concatenation of the previous hidden
state and the current input::

    f_t = sigmoid(W_f [h_{t-1}, x_t] + b_f)
    i_t = sigmoid(W_i [h_{t-1}, x_t] + b_i)
    o_t = sigmoid(W_o [h_{t-1}, x_t] + b_o)
    c_t = f_t * c_{t-1} + i_t * tanh(W_c [h_{t-1}, x_t] + b_c)
    h_t = o_t * tanh(c_t)

The four gate matrices are stored stacked (f, i, o, c) in one
``(4H, H + I)`` array; ``W_f`` etc. are views into it. The final hidden
state feeds an affine head with an independent sigmoid per risk type.
Everything runs in float64.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .taxonomy import N_RISK_TYPES, RISK_TYPES

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
CHECKPOINT_FORMAT = "riskwatch.lstm"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmParams:
    W: np.ndarray       # (4H, H + I), gate blocks f, i, o, c
    b: np.ndarray       # (4H,)
    W_out: np.ndarray   # (R, H)
    b_out: np.ndarray   # (R,)

    def __post_init__(self):
        H4, cols = self.W.shape
        if H4 % 4 or self.b.shape != (H4,):
            raise ValueError("W must be (4H, H+I) with b of length 4H")
        H = H4 // 4
        if cols <= H:
            raise ValueError("W must have H + input columns with input >= 1")
        if self.W_out.ndim != 2 or self.W_out.shape[1] != H or self.b_out.shape != (self.W_out.shape[0],):
            raise ValueError("head shapes inconsistent with hidden size")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.W.shape[1] - self.hidden_size

    @property
    def n_outputs(self) -> int:
        return self.W_out.shape[0]

    def _gate(self, k):
        H = self.hidden_size
        return slice(k * H, (k + 1) * H)

    W_f = property(lambda self: self.W[self._gate(0)])
    W_i = property(lambda self: self.W[self._gate(1)])
    W_o = property(lambda self: self.W[self._gate(2)])
    W_c = property(lambda self: self.W[self._gate(3)])
    b_f = property(lambda self: self.b[self._gate(0)])
    b_i = property(lambda self: self.b[self._gate(1)])
    b_o = property(lambda self: self.b[self._gate(2)])
    b_c = property(lambda self: self.b[self._gate(3)])

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b, "W_out": self.W_out, "b_out": self.b_out}

    def copy(self) -> "LstmParams":
        return LstmParams(self.W.copy(), self.b.copy(), self.W_out.copy(), self.b_out.copy())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    @classmethod
    def zeros(cls, hidden: int, n_inputs: int, n_outputs: int = N_RISK_TYPES) -> "LstmParams":
        return cls(np.zeros((4 * hidden, hidden + n_inputs)), np.zeros(4 * hidden),
                   np.zeros((n_outputs, hidden)), np.zeros(n_outputs))

    @classmethod
    def from_gates(cls, W_f, W_i, W_o, W_c, b_f, b_i, b_o, b_c, W_out, b_out) -> "LstmParams":
        return cls(np.vstack([W_f, W_i, W_o, W_c]).astype(np.float64),
                   np.concatenate([b_f, b_i, b_o, b_c]).astype(np.float64),
                   np.asarray(W_out, dtype=np.float64), np.asarray(b_out, dtype=np.float64))

    @classmethod
    def initialize(cls, hidden: int, n_inputs: int, rng, n_outputs: int = N_RISK_TYPES,
                   forget_bias: float = 1.0) -> "LstmParams":
        """Uniform(-k, k), k = 1/sqrt(hidden + inputs); forget-gate bias set to ``forget_bias``."""
        k = 1.0 / math.sqrt(hidden + n_inputs)
        W = rng.uniform(-k, k, size=(4 * hidden, hidden + n_inputs))
        b = np.zeros(4 * hidden)
        b[:hidden] = forget_bias
        k_out = 1.0 / math.sqrt(hidden)
        W_out = rng.uniform(-k_out, k_out, size=(n_outputs, hidden))
        return cls(W, b, W_out, np.zeros(n_outputs))


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class GateCache:
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray       # tanh candidate
    c_prev: np.ndarray
    c: np.ndarray
    hx: np.ndarray      # [h_{t-1}, x_t]


def _check_finite(a, what):
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite values")


def cell_forward(p: LstmParams, x_t, prev: LstmState) -> tuple[LstmState, GateCache]:
    """One LSTM step; works on a single vector or a (batch, features) matrix."""
    x_t = np.asarray(x_t, dtype=np.float64)
    H = p.hidden_size
    if x_t.shape[-1] != p.input_size or prev.h.shape[-1] != H or prev.c.shape != prev.h.shape:
        raise ValueError(f"shape mismatch: x {x_t.shape}, h {prev.h.shape}, c {prev.c.shape} "
                         f"for hidden {H}, input {p.input_size}")
    _check_finite(x_t, "input")
    hx = np.concatenate([prev.h, x_t], axis=-1)
    z = hx @ p.W.T + p.b
    f = sigmoid(z[..., :H])
    i = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * prev.c + i * g
    h = o * np.tanh(c)
    return LstmState(h, c), GateCache(f, i, o, g, prev.c, c, hx)


def _as_batch(sequences) -> np.ndarray:
    X = np.asarray(sequences, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] == 0:
        raise ValueError("sequence must be a non-empty (length, features) matrix")
    return X


def forward_batch(p: LstmParams, X) -> tuple[np.ndarray, list[GateCache]]:
    """Probabilities (B, R) for a (B, T, I) batch plus per-step caches."""
    X = _as_batch(X)
    state = LstmState.zeros(p.hidden_size, X.shape[0])
    caches = []
    for t in range(X.shape[1]):
        state, cache = cell_forward(p, X[:, t, :], state)
        caches.append(cache)
    probs = sigmoid(state.h @ p.W_out.T + p.b_out)
    return probs, caches


def forward(p: LstmParams, sequence) -> tuple[np.ndarray, list[GateCache]]:
    """Per-risk-type probabilities for one (lookback, input) sequence."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2:
        raise ValueError("sequence must be a (length, features) matrix")
    probs, caches = forward_batch(p, seq[None])
    return probs[0], caches


def predict_proba(p: LstmParams, X, chunk: int = 512) -> np.ndarray:
    X = _as_batch(X)
    out = [forward_batch(p, X[k:k + chunk])[0] for k in range(0, X.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def loss(scores, labels) -> float:
    """Binary cross-entropy averaged over risk types (and over samples for 2-D input)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    s = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))))


def backward_batch(p: LstmParams, X, Y, caches=None, probs=None) -> tuple[LstmParams, float]:
    """Gradient of the *summed* per-sample loss, and that summed loss.

    Each sample contributes the gradient of its own mean-over-risk-types BCE,
    so the result is additive over samples.
    """
    X = _as_batch(X)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if caches is None or probs is None:
        probs, caches = forward_batch(p, X)
    if len(caches) != X.shape[1]:
        raise ValueError("caches do not match the sequence length")
    H = p.hidden_size
    R = p.n_outputs
    total = loss(probs, Y) * X.shape[0]

    dlogit = (probs - Y) / R                    # (B, R)
    h_T = caches[-1].o * np.tanh(caches[-1].c)
    dW_out = dlogit.T @ h_T
    db_out = dlogit.sum(axis=0)
    dW = np.zeros_like(p.W)
    db = np.zeros_like(p.b)
    dh = dlogit @ p.W_out
    dc = np.zeros_like(dh)
    for cache in reversed(caches):
        tc = np.tanh(cache.c)
        do = dh * tc
        dc = dc + dh * cache.o * (1.0 - tc * tc)
        df = dc * cache.c_prev
        di = dc * cache.g
        dg = dc * cache.i
        dz = np.concatenate([df * cache.f * (1.0 - cache.f),
                             di * cache.i * (1.0 - cache.i),
                             do * cache.o * (1.0 - cache.o),
                             dg * (1.0 - cache.g * cache.g)], axis=-1)
        dW += dz.T @ cache.hx
        db += dz.sum(axis=0)
        dh = (dz @ p.W)[:, :H]
        dc = dc * cache.f
    return LstmParams(dW, db, dW_out, db_out), total


def backward(p: LstmParams, sequence, labels, caches) -> LstmParams:
    """Exact gradient of ``loss(forward(p, sequence), labels)`` w.r.t. every parameter."""
    seq = np.asarray(sequence, dtype=np.float64)
    if len(caches) != seq.shape[0]:
        raise ValueError(f"{len(caches)} caches for a sequence of length {seq.shape[0]}")
    probs, batch_caches = forward_batch(p, seq[None])
    grads, _ = backward_batch(p, seq[None], np.asarray(labels)[None], batch_caches, probs)
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden_size: int = 128
    batch_size: int = 64
    learning_rate: float = 0.001
    max_epochs: int = 100
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        for name in ("hidden_size", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not self.learning_rate >= 0:
            problems.append("learning_rate must be >= 0")
        if not 0 <= self.patience < self.max_epochs:
            problems.append("patience must be in [0, max_epochs)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            problems.append("adam betas must lie in [0, 1) and epsilon > 0")
        if self.clip_norm <= 0:
            problems.append("clip_norm must be positive")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainHistory:
    initial_val_loss: float
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_json(self) -> dict:
        return {"initial_val_loss": self.initial_val_loss, "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early, "epochs": [asdict(e) for e in self.epochs]}


class Adam:
    def __init__(self, params: LstmParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: LstmParams, grads: LstmParams) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, g in grads.arrays().items():
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            param = getattr(params, name)
            param -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


def clip_gradients(grads: LstmParams, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays().values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.arrays().values():
            g *= scale
    return norm


def _dataset_loss(p: LstmParams, X, Y, chunk=512) -> float:
    return loss(predict_proba(p, X, chunk), Y)


def train(samples, cfg: TrainConfig, validation) -> tuple[LstmParams, TrainHistory]:
    """Mini-batch Adam with early stopping on validation loss.

    Returns the parameters of the best validation epoch. Stops once the
    validation loss has failed to improve for more than ``cfg.patience``
    consecutive epochs, or after ``cfg.max_epochs``.
    """
    X, Y = samples.inputs, samples.labels.astype(np.float64)
    Xv, Yv = validation.inputs, validation.labels.astype(np.float64)
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if X.shape[1:] != Xv.shape[1:]:
        raise ValueError("training and validation windows differ in shape")
    rng = np.random.default_rng(cfg.seed)
    params = LstmParams.initialize(cfg.hidden_size, X.shape[2], rng, Y.shape[1])
    opt = Adam(params, cfg)
    best = params.copy()
    best_val = _dataset_loss(params, Xv, Yv)
    history = TrainHistory(initial_val_loss=best_val)
    waited = 0
    n = len(X)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for k, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            grads, batch_loss = backward_batch(params, X[idx], Y[idx])
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {k}")
            for g in grads.arrays().values():
                g /= len(idx)
            clip_gradients(grads, cfg.clip_norm)
            opt.step(params, grads)
            total += batch_loss
        val = _dataset_loss(params, Xv, Yv)
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochStats(epoch, total / n, val))
        logger.debug("epoch %d train %.5f val %.5f", epoch, total / n, val)
        if val < best_val:
            best_val = val
            best = params.copy()
            history.best_epoch = epoch
            waited = 0
        else:
            waited += 1
            if waited > cfg.patience:
                history.stopped_early = True
                break
    return best, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: LstmParams, cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden_size": params.hidden_size,
        "input_size": params.input_size,
        "risk_types": [r.value for r in RISK_TYPES][: params.n_outputs],
        "shapes": {k: list(v.shape) for k, v in params.arrays().items()},
        "weights": {k: v.ravel().tolist() for k, v in params.arrays().items()},
        "config": asdict(cfg) if cfg else None,
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[LstmParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an LSTM checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported LSTM checkpoint version {doc.get('version')}")
    arrays = {k: np.array(doc["weights"][k], dtype=np.float64).reshape(doc["shapes"][k])
              for k in ("W", "b", "W_out", "b_out")}
    params = LstmParams(**arrays)
    if params.hidden_size != doc["hidden_size"] or params.input_size != doc["input_size"]:
        raise ValueError("checkpoint shapes disagree with declared sizes")
    return params, doc


class LstmClassifier:
    """Fit/predict wrapper used by the backtest and tuning harnesses."""

    def __init__(self, cfg: TrainConfig | None = None, validation_fraction: float = 0.15):
        self.cfg = cfg or TrainConfig()
        self.validation_fraction = validation_fraction
        self.params: LstmParams | None = None
        self.history: TrainHistory | None = None

    def fit(self, samples) -> "LstmClassifier":
        n = len(samples)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n - n_val < 1:
            raise ValueError(f"need at least 2 samples to train, got {n}")
        # time-ordered: validate on the most recent windows
        self.params, self.history = train(samples.subset(slice(0, n - n_val)), self.cfg,
                                          samples.subset(slice(n - n_val, n)))
        return self

    def predict_proba(self, samples) -> np.ndarray:
        if self.params is None:
            raise RuntimeError("model is not fitted")
        return predict_proba(self.params, samples.inputs)
