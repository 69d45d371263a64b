"""Input validation helpers shared by the public entry points."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def check_rng(rng) -> np.random.Generator:
    """Coerce seeds / Generators to a numpy Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (int, np.integer, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    raise TypeError(f"expected a numpy Generator, seed or None, got {type(rng).__name__}")


def check_weights(weights, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ShapeError(f"weights must be 1-D, got shape {w.shape}")
    if n is not None and w.shape[0] != n:
        raise ShapeError(f"expected {n} weights, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return w


def check_prob_rows(dists, n: int | None = None, k: int | None = None, tol: float = 1e-6) -> np.ndarray:
    """Validate an N x K row-stochastic matrix."""
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"distributions must be 2-D, got shape {d.shape}")
    if n is not None and d.shape[0] != n:
        raise ShapeError(f"expected {n} rows, got {d.shape[0]}")
    if k is not None and d.shape[1] != k:
        raise ShapeError(f"expected {k} columns, got {d.shape[1]}")
    if np.any(d < -tol):
        raise ValueError("distribution entries must be non-negative")
    sums = d.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=tol):
        raise ValueError("distribution rows must sum to 1")
    return d


def check_locations(locations, n: int) -> np.ndarray:
    """Coerce to a sorted, duplicate-free int64 index array within [0, n)."""
    loc = np.asarray(sorted(set(int(i) for i in np.asarray(locations).ravel())), dtype=np.int64)
    if loc.size and (loc[0] < 0 or loc[-1] >= n):
        raise ValueError(f"location indices must lie in [0, {n})")
    return loc


def check_unit_interval(x: float, name: str) -> float:
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return x
