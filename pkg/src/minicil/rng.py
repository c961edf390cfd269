"""Seeded, portable random sampling and covariance factorization.

The generator is SplitMix64 used counter-style: output k (1-based) is
``mix64(seed + k * GAMMA) mod 2**64`` with the standard SplitMix64
finalizer, so a stream is a pure function of (seed, counter) and can be
reproduced bit-exactly by any implementation of the same recipe.
Uniforms take the top 53 bits; gaussians come from Box-Muller pairs.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, NumericalError

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, label: str) -> int:
    """Stable named substream seed (blake2b of "seed:label", 64-bit)."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngState:
    """Deterministic generator; identical seed gives a bit-identical stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def spawn(self, label: str) -> "RngState":
        return RngState(derive_seed(self.seed, label))

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words."""
        ks = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + ks * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, shape) -> np.ndarray:
        """Standard gaussians via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        # u1 shifted into (0, 1] so log never sees zero
        u1 = ((self.raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound) by scaling uniforms (desk-scale bias ok)."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n <= 1:
            return perm
        draws = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(draws[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order-stable given the seed."""
        if k > n:
            raise ContractError(f"cannot choose {k} items from {n}")
        return np.sort(self.permutation(n)[:k])


def sample_gaussian(rng: RngState, mean: np.ndarray, cov_factor: np.ndarray, count: int) -> np.ndarray:
    """count i.i.d. draws from N(mean, cov_factor @ cov_factor.T), one per row."""
    mean = np.asarray(mean, dtype=np.float64)
    cov_factor = np.asarray(cov_factor, dtype=np.float64)
    if mean.ndim != 1 or cov_factor.shape != (mean.size, mean.size):
        raise DimensionError(
            f"sample_gaussian: mean {mean.shape} incompatible with factor {cov_factor.shape}"
        )
    if not (np.isfinite(mean).all() and np.isfinite(cov_factor).all()):
        raise DegenerateInputError("sample_gaussian: non-finite mean or factor")
    z = rng.normal((count, mean.size))
    return mean + z @ cov_factor.T


def cholesky(sigma: np.ndarray, jitter: float = 0.0):
    """Lower-triangular L with L @ L.T == sigma + applied * I.

    Starts from the caller's jitter; on failure retries with jitter
    escalated tenfold (from 1e-12 * diag scale when starting at zero) for
    up to 9 attempts, then raises with a smallest-eigenvalue estimate.
    Returns (L, jitter_applied).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-10, rtol=1e-8):
        raise ContractError("cholesky: matrix is not symmetric")
    if jitter < 0:
        raise ContractError("cholesky: jitter must be >= 0")
    scale = max(1.0, float(np.abs(np.diag(sigma)).max(initial=0.0)))
    eye = np.eye(sigma.shape[0])
    attempt = jitter
    for _ in range(9):
        try:
            return np.linalg.cholesky(sigma + attempt * eye), attempt
        except np.linalg.LinAlgError:
            attempt = max(attempt * 10.0, 1e-12 * scale)
    eigmin = float(np.linalg.eigvalsh(sigma).min())
    raise NumericalError(
        f"cholesky failed up to jitter {attempt:.3e}; smallest eigenvalue ~ {eigmin:.3e}"
    )
