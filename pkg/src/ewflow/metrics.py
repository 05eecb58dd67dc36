"""Distances between empirical point sets."""

from __future__ import annotations

import numpy as np

from .rng import Rng

__all__ = ["sliced_wasserstein"]


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_proj: int = 128, rng: Rng | None = None) -> float:
    """Mean 1D 2-Wasserstein distance over random projection directions.

    Both sets are reduced to the size of the smaller one by random
    subsampling, so the per-direction distance is the RMS gap between sorted
    projections.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if rng is None:
        rng = Rng(0)
    m = min(len(a), len(b))
    if len(a) > m:
        a = a[rng.permutation(len(a))[:m]]
    if len(b) > m:
        b = b[rng.permutation(len(b))[:m]]
    dim = a.shape[1]
    dirs = rng.normal((n_proj, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    w2 = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(w2.mean())
