"""Raw (intensity, phase) estimates from a detection matrix.

Two estimators share the same input: a Bayesian posterior evaluated on a
fixed (A, phi) grid with a uniform prior, and a feed-forward network with
Leaky-ReLU hidden layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc

from .receiver import DetectionMatrix, ReceiverConfig, input_vectors

__all__ = [
    "MIN_INTENSITY",
    "DEFAULT_LAYER_SIZES",
    "RawEstimate",
    "BayesGrid",
    "bayes_log_likelihood",
    "bayes_posterior",
    "bayes_estimate",
    "bayes_estimate_batch",
    "MLPModel",
    "leaky_relu",
    "mlp_forward",
    "nn_estimate",
    "nn_estimate_batch",
]

MIN_INTENSITY = 0.05
DEFAULT_LAYER_SIZES = (45, 32, 32, 32, 32, 16, 16, 8, 8, 2)


@dataclass(frozen=True)
class RawEstimate:
    A_hat: float
    phi_hat: float
    degenerate: bool = False


@dataclass(frozen=True)
class BayesGrid:
    phi_axis: np.ndarray = field(default_factory=lambda: np.linspace(-0.75, 0.75, 100))
    A_axis: np.ndarray = field(default_factory=lambda: np.linspace(0.05, 25.0, 100))

    def __post_init__(self):
        for name in ("phi_axis", "A_axis"):
            ax = np.asarray(getattr(self, name), dtype=float)
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise ValueError(f"{name} must be strictly increasing with >= 2 points")
            object.__setattr__(self, name, ax)
        if self.A_axis[0] < 0:
            raise ValueError("intensity axis must be non-negative")

    @classmethod
    def uniform(cls, phi_range=(-0.75, 0.75), A_range=(0.05, 25.0), n_phi=100, n_A=100):
        return cls(np.linspace(*phi_range, n_phi), np.linspace(*A_range, n_A))


def bayes_log_likelihood(counts, B, grid: BayesGrid, cfg: ReceiverConfig) -> np.ndarray:
    """Log-likelihood over the grid, shape ``(..., n_A, n_phi)``.

    ``counts`` has shape ``(..., M, m+1)`` and ``B`` broadcasts against the
    leading axes. Cell ``(k, d)`` contributes ``D[k, d] * log P(d | nbar)``
    with per-step ``nbar`` for relative phase ``phi - 2 pi k / M``; the
    ``log d!`` constant is dropped.
    """
    M, m, L, phys = cfg.M, cfg.m, cfg.L, cfg.physics
    counts = np.asarray(counts, dtype=float)
    lead = counts.shape[:-2]
    B = np.broadcast_to(np.asarray(B, dtype=float), lead)
    photons = counts[..., :m] @ np.arange(m)   # (..., M) photons seen below the tail
    seen = counts[..., :m].sum(axis=-1)        # (..., M) non-tail outcomes
    tail = counts[..., m]

    A = grid.A_axis
    scale = phys.efficiency / L
    bin_phase = 2.0 * np.pi * np.arange(M) / M
    cos = np.cos(grid.phi_axis[:, None] - bin_phase[None, :])     # (n_phi, M)
    offset = (A + B[..., None]) * scale + phys.dark_rate           # (..., n_A)
    slope = 2.0 * phys.visibility * scale * np.sqrt(A * B[..., None])

    # -sum_k seen_k * nbar_k is linear in cos(phi - Delta_k)
    ll = -(offset * seen.sum(axis=-1)[..., None])[..., None] \
        + slope[..., None] * (seen @ cos.T)[..., None, :]

    for k in range(M):
        has_photons = photons[..., k] > 0
        has_tail = tail[..., k] > 0
        if not (has_photons.any() or has_tail.any()):
            continue
        nbar = offset[..., None] - slope[..., None] * cos[:, k]      # (..., n_A, n_phi)
        np.maximum(nbar, 1e-300, out=nbar)
        if has_tail.any():
            ll += tail[..., k, None, None] * np.log(gammainc(m, nbar))
        if has_photons.any():
            ll += photons[..., k, None, None] * np.log(nbar)
    return ll


def _normalize(ll):
    peak = ll.max(axis=(-2, -1), keepdims=True)
    p = np.exp(ll - peak)
    return p / p.sum(axis=(-2, -1), keepdims=True)


def bayes_posterior(counts, B, grid: BayesGrid, cfg: ReceiverConfig) -> np.ndarray:
    """Normalized posterior (uniform prior) of shape ``(..., n_A, n_phi)``."""
    return _normalize(bayes_log_likelihood(counts, B, grid, cfg))


def bayes_estimate_batch(counts, B, grid: BayesGrid, cfg: ReceiverConfig, chunk: int = 4):
    """Posterior-mean estimates for a stack of detection matrices.

    Returns ``(A_hat, phi_hat, degenerate)`` arrays over the leading axis.
    Empty matrices get the prior mean and ``degenerate=True``.
    """
    counts = np.asarray(counts)
    n = counts.shape[0]
    B = np.broadcast_to(np.asarray(B, dtype=float), (n,))
    A_hat = np.empty(n)
    phi_hat = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        post = bayes_posterior(counts[sl], B[sl], grid, cfg)
        A_hat[sl] = post.sum(axis=-1) @ grid.A_axis
        phi_hat[sl] = post.sum(axis=-2) @ grid.phi_axis
    degenerate = counts.reshape(n, -1).sum(axis=1) == 0
    return A_hat, phi_hat, degenerate


def bayes_estimate(D, B: float, grid: BayesGrid, cfg: ReceiverConfig) -> RawEstimate:
    counts = D.counts if isinstance(D, DetectionMatrix) else np.asarray(D)
    a, p, deg = bayes_estimate_batch(counts[None], [B], grid, cfg)
    return RawEstimate(float(a[0]), float(p[0]), bool(deg[0]))


def leaky_relu(x, slope: float = 0.1):
    return np.where(x > 0, x, slope * x)


@dataclass
class MLPModel:
    """Fully connected network; ``weights[i]`` has shape ``(fan_in, fan_out)``."""

    layer_sizes: tuple
    weights: list
    biases: list
    slope: float = 0.1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("weights/biases do not match layer_sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[1]},)")

    @classmethod
    def zeros(cls, layer_sizes, slope: float = 0.1) -> "MLPModel":
        ws = [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])]
        bs = [np.zeros(b) for b in layer_sizes[1:]]
        return cls(tuple(layer_sizes), ws, bs, slope)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_parameters(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


def mlp_forward(model: MLPModel, x) -> np.ndarray:
    """Affine + Leaky ReLU per hidden layer, affine output layer.

    ``x`` is a single input vector or a batch ``(n, n_inputs)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} inputs, got {x.shape[-1]}")
    h = x
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.where(h > 0, h, model.slope * h)
    return h


def nn_estimate_batch(model: MLPModel, counts, B):
    """Network estimates for detection matrices ``(n, M, m+1)`` and LO
    intensities ``B``; returns ``(A_hat, phi_hat)`` with ``A_hat`` clamped."""
    counts = np.asarray(counts)
    n = counts.shape[0]
    B = np.broadcast_to(np.asarray(B, dtype=float), (n,))
    x = np.concatenate([input_vectors(counts), B[:, None]], axis=1)
    out = mlp_forward(model, x)
    return np.maximum(out[:, 1], MIN_INTENSITY), out[:, 0]


def nn_estimate(model: MLPModel, D, B: float) -> RawEstimate:
    counts = D.counts if isinstance(D, DetectionMatrix) else np.asarray(D)
    if model.n_inputs != counts.size + 1:
        raise ValueError(
            f"model expects {model.n_inputs} inputs but the detection matrix gives {counts.size + 1}")
    a, p = nn_estimate_batch(model, counts[None], [B])
    return RawEstimate(float(a[0]), float(p[0]))
