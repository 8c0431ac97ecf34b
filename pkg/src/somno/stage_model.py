"""30-s epoch -> W/N/R staging: band-power features and a small tanh MLP.

Everything (forward pass, backprop, optimizer) is plain numpy so gradients can
be checked against finite differences.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .optim import DEFAULT_BETAS, DEFAULT_EPS, DEFAULT_LR, DEFAULT_WEIGHT_DECAY, AdamState, adam_step
from .signal_core import STAGING_RATE_HZ, Epoch

log = logging.getLogger(__name__)


class StageLabel(str, enum.Enum):
    W = "W"
    N = "N"
    R = "R"

    @property
    def code(self) -> int:
        return _LABEL_ORDER.index(self)

    @classmethod
    def from_code(cls, code: int) -> "StageLabel":
        return _LABEL_ORDER[code]


_LABEL_ORDER = (StageLabel.W, StageLabel.N, StageLabel.R)
N_CLASSES = 3

# Sleep-EDF / R&K annotation strings and common shorthands.
# NREM depths collapse to N; movement and unscored epochs map to None (excluded).
EXTERNAL_LABELS: dict[str, StageLabel | None] = {
    "W": StageLabel.W,
    "Wake": StageLabel.W,
    "Sleep stage W": StageLabel.W,
    "N1": StageLabel.N,
    "N2": StageLabel.N,
    "N3": StageLabel.N,
    "N4": StageLabel.N,
    "S1": StageLabel.N,
    "S2": StageLabel.N,
    "S3": StageLabel.N,
    "S4": StageLabel.N,
    "1": StageLabel.N,
    "2": StageLabel.N,
    "3": StageLabel.N,
    "4": StageLabel.N,
    "Sleep stage 1": StageLabel.N,
    "Sleep stage 2": StageLabel.N,
    "Sleep stage 3": StageLabel.N,
    "Sleep stage 4": StageLabel.N,
    "R": StageLabel.R,
    "REM": StageLabel.R,
    "Sleep stage R": StageLabel.R,
    "M": None,
    "MT": None,
    "MOVEMENT": None,
    "Movement time": None,
    "?": None,
    "UNKNOWN": None,
    "Sleep stage ?": None,
}


def map_external_label(raw: str) -> StageLabel | None:
    """Map a scorer's label to W/N/R; ``None`` means drop the epoch."""
    key = raw.strip()
    if key in EXTERNAL_LABELS:
        return EXTERNAL_LABELS[key]
    for known, label in EXTERNAL_LABELS.items():
        if known.upper() == key.upper():
            return label
    raise ValueError(f"unrecognised stage label {raw!r}")


# ---------------------------------------------------------------- features

BANDS = (
    ("delta", 0.5, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 12.0),
    ("sigma", 12.0, 16.0),
    ("beta", 16.0, 30.0),
)
FEATURE_NAMES = tuple(name for name, _, _ in BANDS) + ("log_total_power",)
N_FEATURES = len(FEATURE_NAMES)
POWER_FLOOR = 1e-12

WELCH_SEGMENT = 400  # 4 s at 100 Hz
WELCH_STEP = 200


def welch_psd(x, rate_hz: float, nperseg: int = WELCH_SEGMENT, step: int = WELCH_STEP):
    """One-sided Welch PSD (Hann window, per-segment mean removal, density scaling)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < nperseg:
        raise ValueError(f"need at least {nperseg} samples, got {x.shape[-1]}")
    window = np.hanning(nperseg + 1)[:-1]  # periodic Hann
    starts = np.arange(0, x.shape[-1] - nperseg + 1, step)
    segs = np.stack([x[..., s:s + nperseg] for s in starts], axis=-2)
    segs = segs - segs.mean(axis=-1, keepdims=True)
    power = np.abs(np.fft.rfft(segs * window, axis=-1)) ** 2
    power /= rate_hz * np.sum(window ** 2)
    if nperseg % 2 == 0:
        power[..., 1:-1] *= 2.0
    else:
        power[..., 1:] *= 2.0
    freqs = np.fft.rfftfreq(nperseg, 1.0 / rate_hz)
    return freqs, power.mean(axis=-2)


def band_powers(epoch) -> np.ndarray:
    """Relative delta/theta/alpha/sigma/beta power plus log total 0.5-30 Hz power.

    Accepts an :class:`Epoch` or a raw 3000-sample array (or a stack of them,
    shape (n, 3000), returning shape (n, 6)).
    """
    x = epoch.samples if isinstance(epoch, Epoch) else np.asarray(epoch, dtype=np.float64)
    freqs, psd = welch_psd(x, STAGING_RATE_HZ)
    df = freqs[1] - freqs[0]
    bands = np.stack(
        [psd[..., (freqs >= lo) & (freqs < hi)].sum(axis=-1) * df for _, lo, hi in BANDS],
        axis=-1,
    )
    total = bands.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(total > 0, bands / np.where(total > 0, total, 1.0), 0.0)
    log_total = np.log(np.maximum(total, POWER_FLOOR))
    return np.concatenate([rel, log_total], axis=-1)


# ---------------------------------------------------------------- network

@dataclass
class StageNet:
    """6 -> hidden (tanh) -> 3 (softmax)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2")

    def __post_init__(self):
        for name in self.PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        h = self.w1.shape[0]
        shapes = {"w1": (h, N_FEATURES), "b1": (h,), "w2": (N_CLASSES, h), "b2": (N_CLASSES,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> "StageNet":
        return cls(**{name: params[name] for name in cls.PARAM_NAMES})

    @classmethod
    def zeros(cls, hidden: int = 16) -> "StageNet":
        return cls(np.zeros((hidden, N_FEATURES)), np.zeros(hidden),
                   np.zeros((N_CLASSES, hidden)), np.zeros(N_CLASSES))

    @classmethod
    def init(cls, hidden: int = 16, seed: int = 0) -> "StageNet":
        rng = np.random.default_rng(seed)
        return cls(glorot(rng, hidden, N_FEATURES), np.zeros(hidden),
                   glorot(rng, N_CLASSES, hidden), np.zeros(N_CLASSES))


def glorot(rng, fan_out, fan_in):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logits(net: StageNet, x):
    hidden = np.tanh(x @ net.w1.T + net.b1)
    return hidden @ net.w2.T + net.b2, hidden


def forward(net: StageNet, x) -> np.ndarray:
    """Class probabilities over (W, N, R); ``x`` is (6,) or (n, 6)."""
    return softmax(_logits(net, np.asarray(x, dtype=np.float64))[0])


def cross_entropy(probs, true_label) -> float:
    """``-log p[true]`` with ``p`` clamped below at 1e-12."""
    code = true_label.code if isinstance(true_label, StageLabel) else int(true_label)
    return float(-np.log(max(float(np.asarray(probs)[code]), POWER_FLOOR)))


def _codes(labels):
    return np.array([lab.code if isinstance(lab, StageLabel) else int(lab) for lab in labels])


def mean_loss(net: StageNet, x, labels) -> float:
    probs = forward(net, np.atleast_2d(x))
    codes = _codes(labels)
    return float(np.mean(-np.log(np.maximum(probs[np.arange(len(codes)), codes], POWER_FLOOR))))


def gradient(net: StageNet, x, labels) -> dict[str, np.ndarray]:
    """Exact gradient of the batch-mean cross-entropy w.r.t. every parameter."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    codes = _codes(labels)
    n = x.shape[0]
    if n == 0 or len(codes) != n:
        raise ValueError("gradient needs a nonempty batch with one label per row")
    logits, hidden = _logits(net, x)
    d_logits = softmax(logits)
    d_logits[np.arange(n), codes] -= 1.0
    d_logits /= n
    d_hidden = (d_logits @ net.w2) * (1.0 - hidden ** 2)
    return {
        "w1": d_hidden.T @ x,
        "b1": d_hidden.sum(axis=0),
        "w2": d_logits.T @ hidden,
        "b2": d_logits.sum(axis=0),
    }


def predict_stage(net: StageNet, epoch) -> StageLabel:
    """Argmax stage; ties resolve in W < N < R order."""
    probs = forward(net, band_powers(epoch))
    return StageLabel.from_code(int(np.argmax(probs)))


class NetStager:
    """Adapter giving a trained net the ``Epoch -> StageLabel`` classifier shape."""

    def __init__(self, net: StageNet):
        self.net = net

    def __call__(self, epoch) -> StageLabel:
        return predict_stage(self.net, epoch)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    hidden: int = 16
    epochs: int = 200
    batch_size: int = 64
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    betas: tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_EPS
    seed: int = 0


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def accuracy_of(net: StageNet, x, labels) -> float:
    codes = _codes(labels)
    pred = np.argmax(forward(net, np.atleast_2d(x)), axis=-1)
    return float(np.mean(pred == codes))


def fit(params, x, codes, config, loss_fn, grad_fn, acc_fn):
    """Shared minibatch Adam loop. Returns final params and history."""
    rng = np.random.default_rng(config.seed + 1)
    state = AdamState(lr=config.lr, weight_decay=config.weight_decay,
                      beta1=config.betas[0], beta2=config.betas[1], eps=config.eps)
    history = TrainHistory(initial_loss=loss_fn(params, x, codes))
    n = x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            params, state = adam_step(state, params, grad_fn(params, x[idx], codes[idx]))
        history.loss.append(loss_fn(params, x, codes))
        history.accuracy.append(acc_fn(params, x, codes))
    return params, history


def train_features(x, labels, config: TrainConfig | None = None):
    """Train on precomputed feature rows. Returns ``(net, history)``."""
    config = config or TrainConfig()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    codes = _codes(labels)
    if x.shape[0] == 0:
        raise ValueError("training set is empty")
    if len(np.unique(codes)) < 2:
        log.warning("training set has a single class; the net will only learn its prior")
    params, history = fit(
        StageNet.init(config.hidden, config.seed).params(), x, codes, config,
        lambda p, xx, cc: mean_loss(StageNet.from_params(p), xx, cc),
        lambda p, xx, cc: gradient(StageNet.from_params(p), xx, cc),
        lambda p, xx, cc: accuracy_of(StageNet.from_params(p), xx, cc),
    )
    return StageNet.from_params(params), history


def train(dataset, config: TrainConfig | None = None):
    """Train on ``(Epoch, StageLabel)`` pairs. Deterministic for a fixed seed."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training set is empty")
    x = band_powers(np.stack([ep.samples if isinstance(ep, Epoch) else ep for ep, _ in dataset]))
    return train_features(x, [lab for _, lab in dataset], config)
