"""Adaptive photon-counting discrimination of PSK coherent states.

Each symbol is measured in ``L`` steps of equal energy. At every step the
LO nulls the currently most likely hypothesis, the (PNR) detector counts
photons, and the posterior over the ``M`` hypotheses is updated using the
receiver's own model of the input (intensity ``B``, no residual phase).
The pairs (relative LO phase, count) feed the :class:`DetectionMatrix`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc, gammaln

from .physics import PhysicsConfig, counts_from_uniform, mean_photon_number

__all__ = [
    "ReceiverConfig",
    "SymbolInstance",
    "LOState",
    "DiscriminationResult",
    "DetectionMatrix",
    "simulate_symbols",
    "discriminate",
    "bin_counts",
    "input_vectors",
]

_CHUNK = 200_000


@dataclass(frozen=True)
class ReceiverConfig:
    M: int = 4
    L: int = 10
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")

    @property
    def m(self) -> int:
        return self.physics.pnr

    @property
    def input_size(self) -> int:
        """Length of the flattened detection matrix."""
        return self.M * (self.m + 1)


@dataclass(frozen=True)
class SymbolInstance:
    k: int
    A: float
    phi: float = 0.0


@dataclass(frozen=True)
class LOState:
    B: float
    delta: float = 0.0

    def __post_init__(self):
        if self.B < 0:
            raise ValueError("LO intensity must be non-negative")


@dataclass
class DiscriminationResult:
    theta_disc: float
    steps: list  # [(lo_phase, count)] * L, lo_phase on the 2*pi*k/M grid
    correct: bool


def simulate_symbols(A, phase_offset, B, k, u, cfg: ReceiverConfig):
    """Run the adaptive measurement on a batch of symbols.

    Parameters
    ----------
    A, phase_offset, B : array_like
        True input intensity, residual phase offset (channel phase minus
        LO correction) and LO intensity; broadcast against ``k``.
    k : array_like of int
        Transmitted symbol indices.
    u : ndarray
        Uniforms of shape ``k.shape + (L,)`` driving the detector draws.

    Returns
    -------
    lo_index : ndarray, shape ``k.shape + (L,)``
        Hypothesis nulled at each step (LO phase ``2*pi*lo_index/M``).
    counts : ndarray, shape ``k.shape + (L,)``
    guess : ndarray, shape ``k.shape``
    """
    k = np.asarray(k, dtype=np.int64)
    shape = k.shape
    L = cfg.L
    u = np.asarray(u, dtype=float)
    if u.shape != shape + (L,):
        raise ValueError(f"uniforms must have shape {shape + (L,)}, got {u.shape}")
    n = k.size
    A = np.broadcast_to(np.asarray(A, dtype=float), shape).reshape(n)
    B = np.broadcast_to(np.asarray(B, dtype=float), shape).reshape(n)
    off = np.broadcast_to(np.asarray(phase_offset, dtype=float), shape).reshape(n)
    k = k.reshape(n)
    u = u.reshape(n, L)

    lo_index = np.empty((n, L), dtype=np.int64)
    counts = np.empty((n, L), dtype=np.int64)
    guess = np.empty(n, dtype=np.int64)
    for s in range(0, n, _CHUNK):
        sl = slice(s, s + _CHUNK)
        lo_index[sl], counts[sl], guess[sl] = _simulate_chunk(
            A[sl], off[sl], B[sl], k[sl], u[sl], cfg)
    return lo_index.reshape(shape + (L,)), counts.reshape(shape + (L,)), guess.reshape(shape)


def _simulate_chunk(A, off, B, k, u, cfg):
    M, L, m, phys = cfg.M, cfg.L, cfg.m, cfg.physics
    n = k.size
    a = A / L
    b = B / L
    hyps = np.arange(M)
    step = 2.0 * np.pi / M
    # receiver's model: hypothesis at distance r from the nulled one
    # fold r onto min(r, M - r) so mirror hypotheses tie exactly
    dist = np.minimum(hyps, M - hyps)
    model_nbar = mean_photon_number(b[:, None], b[:, None], step * dist[None, :], phys)
    with np.errstate(divide="ignore"):
        model_log = np.log(model_nbar)
    log_fact = gammaln(np.arange(m + 1) + 1.0)

    post = np.zeros((n, M))
    rows = np.arange(n)[:, None]
    lo_index = np.empty((n, L), dtype=np.int64)
    counts = np.empty((n, L), dtype=np.int64)
    for j in range(L):
        nulled = np.argmax(post, axis=1)
        nbar = mean_photon_number(a, b, step * (k - nulled) + off, phys)
        d = counts_from_uniform(nbar, u[:, j], m)
        lo_index[:, j] = nulled
        counts[:, j] = d

        r = (hyps[None, :] - nulled[:, None]) % M
        nb = model_nbar[rows, r]
        with np.errstate(invalid="ignore"):
            ll = np.where(d[:, None] > 0, d[:, None] * model_log[rows, r], 0.0)
        ll -= nb + log_fact[d][:, None]
        tail = d >= m
        if tail.any():
            with np.errstate(divide="ignore"):
                ll[tail] = np.log(gammainc(m, nb[tail]))
        post += ll
    return lo_index, counts, np.argmax(post, axis=1)


def discriminate(symbol: SymbolInstance, lo: LOState, cfg: ReceiverConfig,
                 rng: np.random.Generator) -> DiscriminationResult:
    """Discriminate a single symbol against LO settings ``lo``."""
    if not 0 <= symbol.k < cfg.M:
        raise ValueError(f"symbol index {symbol.k} outside 0..{cfg.M - 1}")
    if symbol.A < 0:
        raise ValueError("input intensity must be non-negative")
    u = rng.random((1, cfg.L))
    lo_index, counts, guess = simulate_symbols(
        symbol.A, symbol.phi - lo.delta, lo.B, [symbol.k], u, cfg)
    step = 2.0 * np.pi / cfg.M
    steps = [(step * int(i), int(d)) for i, d in zip(lo_index[0], counts[0])]
    g = int(guess[0])
    return DiscriminationResult(theta_disc=step * g, steps=steps, correct=g == symbol.k)


def bin_counts(lo_index, counts, guess, cfg: ReceiverConfig, groups=None, n_groups=None):
    """Histogram (relative phase bin, count) pairs into detection matrices.

    Without ``groups`` all symbols go into one ``(M, m+1)`` matrix; with an
    integer group label per symbol the result is ``(n_groups, M, m+1)``.
    """
    M, m = cfg.M, cfg.m
    rel = (np.asarray(lo_index) - np.asarray(guess)[..., None]) % M
    cell = rel * (m + 1) + np.asarray(counts)
    if groups is None:
        return np.bincount(cell.ravel(), minlength=M * (m + 1)).reshape(M, m + 1)
    groups = np.broadcast_to(np.asarray(groups)[..., None], cell.shape)
    flat = groups.ravel() * (M * (m + 1)) + cell.ravel()
    size = n_groups * M * (m + 1)
    return np.bincount(flat, minlength=size).reshape(n_groups, M, m + 1)


def input_vectors(counts) -> np.ndarray:
    """Row-normalize detection matrices ``(..., M, m+1)`` and flatten the last
    two axes row-major. Rows without counts stay zero."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum(axis=-1, keepdims=True)
    norm = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
    return norm.reshape(counts.shape[:-2] + (-1,))


@dataclass
class DetectionMatrix:
    """Histogram of (relative LO phase bin, photon count) pairs."""

    M: int = 4
    m: int = 10
    counts: np.ndarray = None
    n_experiments: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.M, self.m + 1), dtype=np.int64)
        elif self.counts.shape != (self.M, self.m + 1):
            raise ValueError(f"counts must have shape {(self.M, self.m + 1)}")

    @classmethod
    def for_receiver(cls, cfg: ReceiverConfig) -> "DetectionMatrix":
        return cls(M=cfg.M, m=cfg.m)

    def accumulate(self, result: DiscriminationResult) -> "DetectionMatrix":
        width = 2.0 * np.pi / self.M
        for theta, d in result.steps:
            x = ((theta - result.theta_disc) % (2.0 * np.pi)) / width
            b = int(round(x))
            if abs(x - b) > 1e-9:
                raise RuntimeError(f"LO phase {theta} is not on the {self.M}-point grid")
            if not 0 <= d <= self.m:
                raise RuntimeError(f"count {d} outside 0..{self.m}")
            self.counts[b % self.M, d] += 1
        self.n_experiments += 1
        return self

    def reset(self) -> "DetectionMatrix":
        self.counts[...] = 0
        self.n_experiments = 0
        return self

    def to_input_vector(self) -> np.ndarray:
        return input_vectors(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())
