"""Parameter-vector algebra, simplex projection, and seeded RNG streams.

Model parameters travel through the package as flat 1-D float64 arrays.
Aggregation coefficients are points on the probability simplex, produced
and maintained by :func:`project_simplex`.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError

# A vector this close to the simplex is treated as already on it.
SIMPLEX_ATOL = 1e-12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for a (seed, stream...) key.

    Identical keys produce identical draw sequences across runs and
    platforms (Philox keyed through a SeedSequence spawn key), so every
    random decision in an experiment can be given its own named stream,
    e.g. ``make_rng(seed, ROUND, client_id)``.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def as_params(values) -> np.ndarray:
    """Coerce to a flat float64 parameter vector, rejecting non-finite entries."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidArgumentError(f"parameter vector must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("parameter vector contains non-finite entries")
    return v


def is_simplex_point(v: np.ndarray, atol: float = 1e-9) -> bool:
    """True if every entry is >= 0 and the entries sum to 1 within `atol`."""
    v = np.asarray(v, dtype=np.float64)
    return bool(v.size > 0 and np.all(v >= 0.0) and abs(float(v.sum()) - 1.0) <= atol)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sort-based exact algorithm: sort descending, find the largest prefix
    whose running mean keeps the threshold below the prefix entries, then
    clamp. A vector already within SIMPLEX_ATOL of the simplex is returned
    unchanged, which makes the projection exactly idempotent.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidArgumentError("project_simplex needs a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError("project_simplex input contains non-finite entries")
    if np.all(v >= 0.0) and abs(float(v.sum()) - 1.0) <= SIMPLEX_ATOL:
        return v.copy()
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1.0
    ranks = np.arange(1, v.size + 1)
    support = np.nonzero(u * ranks > cssv)[0]
    rho = support[-1]
    theta = cssv[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def convex_combine(models: list[np.ndarray], p: np.ndarray) -> np.ndarray:
    """Coefficient-weighted combination of parameter vectors.

    Output is clipped to the coordinate-wise [min, max] envelope of the
    inputs, so membership in the convex hull holds exactly even under
    floating-point rounding of the weighted sum.
    """
    if len(models) == 0:
        raise InvalidArgumentError("convex_combine needs at least one model")
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (len(models),):
        raise InvalidArgumentError(
            f"coefficient length {p.shape} does not match {len(models)} models"
        )
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in models])
    if stacked.ndim != 2:
        raise InvalidArgumentError("all models must be 1-D vectors of equal length")
    combo = p @ stacked
    return np.clip(combo, stacked.min(axis=0), stacked.max(axis=0))


def coefficient_gradient(models: list[np.ndarray], wgrad: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. combination coefficients.

    With the combined model w(p) = sum_m p_m * models[m] and dL/dw given,
    the chain rule yields dL/dp_m = <dL/dw, models[m]>.
    """
    wgrad = np.asarray(wgrad, dtype=np.float64)
    if len(models) == 0:
        raise InvalidArgumentError("coefficient_gradient needs at least one model")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in models])
    if stacked.shape[1] != wgrad.shape[0]:
        raise InvalidArgumentError(
            f"model length {stacked.shape[1]} does not match gradient length {wgrad.shape[0]}"
        )
    return stacked @ wgrad
