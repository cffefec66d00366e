"""Training the network estimator from simulated detection matrices.

Plain numpy: hand-written backpropagation of a weighted squared error and
an RMSprop optimizer with momentum. Models are stored as JSON (see
``save_model`` for the layout).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimators import DEFAULT_LAYER_SIZES, MLPModel, mlp_forward
from .receiver import ReceiverConfig, bin_counts, input_vectors, simulate_symbols

__all__ = [
    "TrainConfig",
    "TrainingSample",
    "Dataset",
    "TrainingDiverged",
    "ModelFormatError",
    "sample_weight",
    "generate_sample",
    "generate_dataset",
    "xavier_init",
    "weighted_mse",
    "backprop",
    "RMSprop",
    "train",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

MODEL_FORMAT = "ngtrack-mlp"
MODEL_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 50e-6
    momentum: float = 0.8
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    epochs: int = 2000
    dataset_size: int = 500_000
    batch_size: int = 256
    phase_weight: float = 1.0
    intensity_weight: float = 1.0 / 25.0
    validation_fraction: float = 0.1
    intensity_range: tuple = (0.05, 25.0)
    phase_scale: float = 0.25
    phase_scale_is_variance: bool = False
    n_range: tuple = (2, 200)
    layer_sizes: tuple = DEFAULT_LAYER_SIZES
    slope: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")

    @property
    def phase_sigma(self) -> float:
        return math.sqrt(self.phase_scale) if self.phase_scale_is_variance else self.phase_scale


def sample_weight(A, B):
    """Loss weight ``exp(-(A - B)**2 / 2) + 0.1``."""
    return np.exp(-(np.asarray(A) - np.asarray(B)) ** 2 / 2.0) + 0.1


@dataclass
class TrainingSample:
    input: np.ndarray
    target: np.ndarray  # (phi, A)
    weight: float
    n_experiments: int


@dataclass
class Dataset:
    inputs: np.ndarray    # (n, M(m+1)+1)
    targets: np.ndarray   # (n, 2): phi, A
    weights: np.ndarray   # (n,)
    n_experiments: np.ndarray

    def __len__(self):
        return len(self.weights)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.weights[idx],
                       self.n_experiments[idx])

    def save(self, path):
        np.savez(path, inputs=self.inputs, targets=self.targets, weights=self.weights,
                 n_experiments=self.n_experiments)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            return cls(z["inputs"], z["targets"], z["weights"], z["n_experiments"])


def generate_dataset(size: int, receiver: ReceiverConfig, rng: np.random.Generator,
                     cfg: TrainConfig = TrainConfig(), max_symbols: int = 500_000) -> Dataset:
    """Simulate ``size`` training samples.

    Per sample: ``A, B ~ U(intensity_range)``, ``phi ~ N(0, phase_sigma)``,
    ``N`` uniform on the integers of ``n_range``; ``N`` symbols are measured
    at fixed ``(A, phi)`` with the LO at ``(B, 0)``.
    """
    lo, hi = cfg.intensity_range
    A = rng.uniform(lo, hi, size)
    B = rng.uniform(lo, hi, size)
    phi = rng.normal(0.0, cfg.phase_sigma, size)
    N = rng.integers(cfg.n_range[0], cfg.n_range[1] + 1, size)

    counts = np.empty((size, receiver.M, receiver.m + 1), dtype=np.int64)
    start = 0
    while start < size:
        # group consecutive samples so one batch holds about max_symbols symbols
        csum = np.cumsum(N[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_symbols, side="right")))
        n = N[start:stop]
        owner = np.repeat(np.arange(stop - start), n)
        k = rng.integers(0, receiver.M, owner.size)
        u = rng.random((owner.size, receiver.L))
        lo_idx, d, guess = simulate_symbols(A[start:stop][owner], phi[start:stop][owner],
                                            B[start:stop][owner], k, u, receiver)
        counts[start:stop] = bin_counts(lo_idx, d, guess, receiver, groups=owner,
                                        n_groups=stop - start)
        start = stop

    inputs = np.concatenate([input_vectors(counts), B[:, None]], axis=1)
    targets = np.stack([phi, A], axis=1)
    return Dataset(inputs, targets, sample_weight(A, B), N)


def generate_sample(receiver: ReceiverConfig, rng: np.random.Generator,
                    cfg: TrainConfig = TrainConfig()) -> TrainingSample:
    ds = generate_dataset(1, receiver, rng, cfg)
    return TrainingSample(ds.inputs[0], ds.targets[0], float(ds.weights[0]),
                          int(ds.n_experiments[0]))


def xavier_init(layer_sizes, rng: np.random.Generator, slope: float = 0.1) -> MLPModel:
    """Weights ``N(0, 1/fan_in)``, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    ws = [rng.normal(0.0, 1.0 / math.sqrt(a), (a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return MLPModel(sizes, ws, bs, slope)


def _component_weights(phase_weight, intensity_weight):
    return np.array([phase_weight, intensity_weight])


def weighted_mse(pred, target, weights, phase_weight: float = 1.0,
                 intensity_weight: float = 1.0) -> float:
    """``sum_i w_i (lam_phi e_phi^2 + lam_A e_A^2) / sum_i w_i``.

    Columns of ``pred``/``target`` are ``(phi, A)``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"pred {pred.shape} and target {target.shape} must both be (n, 2)")
    if weights.shape != (pred.shape[0],):
        raise ValueError("one weight per sample required")
    lam = _component_weights(phase_weight, intensity_weight)
    err = ((pred - target) ** 2) @ lam
    return float(weights @ err / weights.sum())


def backprop(model: MLPModel, x, target, weights, phase_weight: float = 1.0,
             intensity_weight: float = 1.0):
    """Loss and exact gradients of :func:`weighted_mse` for one batch.

    Returns ``(loss, grads)`` where ``grads`` is a list of ``(dW, db)``
    pairs matching ``model.weights``/``model.biases``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, n_inputs) array")
    a = model.slope
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        pre.append(z)
        h = np.where(z > 0, z, a * z) if i < last else z
        acts.append(h)

    lam = _component_weights(phase_weight, intensity_weight)
    weights = np.asarray(weights, dtype=float)
    norm = weights.sum()
    diff = h - target
    loss = float(weights @ ((diff ** 2) @ lam) / norm)

    delta = 2.0 * diff * lam * (weights / norm)[:, None]
    grads = [None] * len(model.weights)
    for i in range(last, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * np.where(pre[i - 1] > 0, 1.0, a)
    return loss, grads


class RMSprop:
    """RMSprop with momentum on a list of parameter arrays (updated in place).

    ``v <- rho v + (1 - rho) g^2``; ``buf <- mu buf + g / sqrt(v + eps)``;
    ``theta <- theta - lr buf``.
    """

    def __init__(self, params, learning_rate=50e-6, momentum=0.8, decay=0.9, epsilon=1e-8):
        self.params = list(params)
        self.lr = learning_rate
        self.momentum = momentum
        self.decay = decay
        self.epsilon = epsilon
        self.mean_square = [np.zeros_like(p) for p in self.params]
        self.buffer = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        for p, g, v, buf in zip(self.params, grads, self.mean_square, self.buffer):
            v *= self.decay
            v += (1.0 - self.decay) * g * g
            buf *= self.momentum
            buf += g / np.sqrt(v + self.epsilon)
            p -= self.lr * buf


def _flat_views(model: MLPModel):
    """Re-home all parameters in one contiguous buffer so the optimizer can
    work on a single array; returns the buffer."""
    arrays = [arr for W, b in zip(model.weights, model.biases) for arr in (W, b)]
    flat = np.concatenate([a.ravel() for a in arrays])
    pos = 0
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        model.weights[i] = flat[pos:pos + W.size].reshape(W.shape)
        pos += W.size
        model.biases[i] = flat[pos:pos + b.size]
        pos += b.size
    return flat


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    validation_loss: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)


def train(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator,
          model: MLPModel | None = None, progress=None):
    """Fit a network to ``dataset``; returns ``(model, history)``.

    A ``validation_fraction`` of the samples is held out for loss
    reporting. ``history.train_loss[e]`` is the weighted loss over the
    training split after epoch ``e``. ``progress(epoch, train, val)`` is
    called after each epoch when given.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    n_val = int(round(cfg.validation_fraction * len(dataset)))
    order = rng.permutation(len(dataset))
    val, tr = dataset.subset(order[:n_val]), dataset.subset(order[n_val:])
    if len(tr) == 0:
        tr = val
    if model is None:
        model = xavier_init(cfg.layer_sizes, rng, cfg.slope)
    if model.n_inputs != dataset.inputs.shape[1]:
        raise ValueError(f"model expects {model.n_inputs} inputs, data has {dataset.inputs.shape[1]}")
    flat = _flat_views(model)
    opt = RMSprop([flat], cfg.learning_rate, cfg.momentum, cfg.rms_decay, cfg.epsilon)
    grad_flat = np.empty_like(flat)
    lw = dict(phase_weight=cfg.phase_weight, intensity_weight=cfg.intensity_weight)

    history = TrainHistory()
    n = len(tr)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss, grads = backprop(model, tr.inputs[idx], tr.targets[idx], tr.weights[idx], **lw)
            pos = 0
            for dW, db in grads:
                grad_flat[pos:pos + dW.size] = dW.ravel()
                pos += dW.size
                grad_flat[pos:pos + db.size] = db
                pos += db.size
            opt.step([grad_flat])
        train_loss = weighted_mse(mlp_forward(model, tr.inputs), tr.targets, tr.weights, **lw)
        if not math.isfinite(train_loss):
            raise TrainingDiverged(
                f"loss became {train_loss} at epoch {epoch + 1}; learning rate too high?")
        val_loss = (weighted_mse(mlp_forward(model, val.inputs), val.targets, val.weights, **lw)
                    if len(val) else float("nan"))
        history.train_loss.append(train_loss)
        history.validation_loss.append(val_loss)
        if progress is not None:
            progress(epoch, train_loss, val_loss)
    # detach parameters from the shared buffer
    model.weights = [W.copy() for W in model.weights]
    model.biases = [b.copy() for b in model.biases]
    model.metadata.update(epochs=cfg.epochs, dataset_size=len(dataset),
                          final_train_loss=history.train_loss[-1],
                          train_config=_jsonable(asdict(cfg)))
    return model, history


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_model(model: MLPModel, path):
    """Write ``model`` as JSON.

    Layout: ``{"format": "ngtrack-mlp", "version": 1, "layer_sizes": [...],
    "slope": a, "metadata": {...}, "layers": [{"weights": [[...], ...],
    "biases": [...]}, ...]}``; weight rows index the layer's inputs. Floats are
    written with ``repr`` precision so a round trip is exact.
    """
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_sizes": list(model.layer_sizes),
        "slope": model.slope,
        "metadata": _jsonable(model.metadata),
        "layers": [{"weights": W.tolist(), "biases": b.tolist()}
                   for W, b in zip(model.weights, model.biases)],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_model(path, expected_inputs: int | None = None) -> MLPModel:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed model file at offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not an {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {doc.get('version')}")
    try:
        model = MLPModel(
            tuple(doc["layer_sizes"]),
            [np.array(layer["weights"], dtype=float) for layer in doc["layers"]],
            [np.array(layer["biases"], dtype=float) for layer in doc["layers"]],
            float(doc["slope"]),
            dict(doc.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid model contents: {exc}") from exc
    if expected_inputs is not None and model.n_inputs != expected_inputs:
        raise ModelFormatError(
            f"{path}: model takes {model.n_inputs} inputs, expected {expected_inputs}")
    return model
