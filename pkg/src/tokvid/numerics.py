"""Dense kernels and seeded sampling primitives.

All randomness flows through :func:`make_rng`, a numpy ``Generator`` driven by
the Philox-4x64 counter-based bit generator. Floating point draws are derived
by numpy from 64-bit integer outputs, so identical seeds and call sequences
give identical values on every platform.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, DimensionError, DistributionError

RNG_ALGORITHM = "philox4x64"

# smallest u for the open-interval guard in gumbel_sample
_U_EPS = 2.0**-53


def make_rng(seed: int) -> np.random.Generator:
    """Return the package's reproducible generator for ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators, advancing ``rng``."""
    keys = rng.integers(0, 2**63, size=n, dtype=np.uint64)
    return [make_rng(int(k)) for k in keys]


def _as_2d(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with 64-bit accumulation, rounded to float32."""
    a = _as_2d(a, "a")
    b = _as_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    return out.astype(np.float32)


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max subtraction; ``-inf`` entries get probability 0."""
    x = _as_2d(x, "x").astype(np.float64)
    row_max = x.max(axis=1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        bad = int(np.flatnonzero(np.isneginf(row_max[:, 0]))[0])
        raise DistributionError(f"row {bad} is entirely -inf; no support to normalise over")
    e = np.exp(x - row_max)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def _check_probabilities(p: np.ndarray) -> float:
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DistributionError("probabilities must be finite and nonnegative")
    total = float(p.sum())
    if total <= 0.0:
        raise DistributionError("probabilities have zero total mass")
    return total


def multinomial(probabilities, rng: np.random.Generator) -> int:
    """Draw one index with probability proportional to ``probabilities``."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    total = _check_probabilities(p)
    if abs(total - 1.0) > 1e-4:
        raise DistributionError(f"probabilities sum to {total}, expected 1 within 1e-4")
    return int(multinomial_rows(p[None, :], rng)[0])


def multinomial_rows(probabilities, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row; rows need not be normalised.

    Uses one uniform per row and inverse-CDF lookup, so zero-mass entries are
    never selected.
    """
    p = _as_2d(probabilities, "probabilities").astype(np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DistributionError("probabilities must be finite and nonnegative")
    cdf = np.cumsum(p, axis=1)
    totals = cdf[:, -1]
    if np.any(totals <= 0):
        raise DistributionError("a row has zero total mass")
    u = rng.random(p.shape[0]) * totals
    idx = (cdf <= u[:, None]).sum(axis=1)
    # guard rounding at the top end: fall back to the last index with mass
    last_nonzero = p.shape[1] - 1 - np.argmax((p > 0)[:, ::-1], axis=1)
    return np.minimum(idx, last_nonzero)


def gumbel_sample(shape, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. standard Gumbel draws ``-log(-log(u))`` with ``u`` in the open unit interval."""
    u = rng.random(shape)
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    return (-np.log(-np.log(u))).astype(np.float32)


def lowest_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest scores, ties broken toward the lower index.

    Returned in ascending score order.
    """
    s = np.asarray(scores).ravel()
    if not 0 <= k <= s.size:
        raise ArgumentError(f"k={k} out of range for {s.size} scores")
    order = np.argsort(s, kind="stable")
    return order[:k].astype(np.int64)
