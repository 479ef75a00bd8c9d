"""Deterministic scalar/vector math primitives and seeded randomness.

Everything here operates on plain floats and float64 numpy arrays.  The
differentiable counterparts used inside the losses live in
:mod:`graphret.autodiff`; the two implementations are kept separate so the
functions below can serve as independent references in tests.

All randomness in the package flows through :class:`SeededRng`.  Identical
seed plus identical call sequence yields identical output on every
platform (PCG64 is specified bit-exactly).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

KL_EPS = 1e-10
GUMBEL_CLAMP = 1e-12


class SeededRng:
    """Deterministic random stream with named sub-streams.

    ``substream(name)`` derives an independent stream from (seed, name) via
    SHA-256, so adding a new consumer never perturbs existing streams.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def substream(self, name: str) -> "SeededRng":
        digest = hashlib.sha256(
            self.seed.to_bytes(8, "little") + name.encode("utf-8")
        ).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))

    def random(self) -> float:
        """Uniform float64 in [0, 1)."""
        return float(self._gen.random())

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, pool: list, k: int) -> list:
        """First k elements of a permuted copy of pool (k clamped to len)."""
        k = min(k, len(pool))
        idx = self._gen.permutation(len(pool))[:k]
        return [pool[i] for i in idx]


def sigmoid(x: float) -> float:
    """Logistic function 1/(1+exp(-x)); saturates gracefully at the ends."""
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def softmax_temp(v, tau: float) -> np.ndarray:
    """Temperature softmax exp(v/tau) / sum(exp(v/tau)), shift-invariant."""
    if tau <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax_temp input contains NaN/Inf")
    x = v / tau
    x = x - x.max()
    e = np.exp(x)
    return e / e.sum()


def cosine_sim(a, b) -> float:
    """Cosine of the angle between a and b; zero-norm inputs map to 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with epsilon-smoothed q.

    q is re-normalized as (q + eps) / sum(q + eps) before the division so a
    near-zero q entry under positive p mass stays finite.  Terms with
    p_i = 0 contribute 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise NumericError("kl_divergence inputs must each sum to 1 within 1e-9")
    if np.any(p < 0) or np.any(q < 0):
        raise NumericError("kl_divergence inputs must be nonnegative")
    qs = (q + KL_EPS) / (q + KL_EPS).sum()
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qs[mask]))))


def sample_gumbel(rng: SeededRng) -> float:
    """One standard Gumbel draw, -log(-log(u)), u clamped away from {0,1}."""
    u = rng.random()
    u = min(max(u, GUMBEL_CLAMP), 1.0 - GUMBEL_CLAMP)
    return float(-np.log(-np.log(u)))


def gumbel_from_uniform(u: float) -> float:
    """Gumbel transform of an explicit uniform value (testing hook)."""
    u = min(max(u, GUMBEL_CLAMP), 1.0 - GUMBEL_CLAMP)
    return float(-np.log(-np.log(u)))
