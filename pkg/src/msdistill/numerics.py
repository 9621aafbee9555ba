"""Dense correlation, rank-statistics and kernel-alignment primitives.

All arithmetic is float64. Functions that can hit a constant input accept
``return_flag=True`` and then return ``(value, degenerate)``; a degenerate
correlation is reported as 0 rather than NaN.

The rank and pair-counting kernels come from the compiled ``_kernels``
extension when it is built, otherwise from ``_kernels_py``. Set
``MSDISTILL_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("MSDISTILL_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by MSDISTILL_PURE_PYTHON")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

VARIANCE_EPS = 1e-12
# Distances are snapped to this many decimals so that entries which are
# equal in exact arithmetic (e.g. between one-hot rows) tie before ranking.
DISTANCE_DECIMALS = 12

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def available_backends():
    return sorted(_BACKENDS)


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route kernel calls through backend ``name``."""
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    prev = _impl, BACKEND
    _impl, BACKEND = _BACKENDS[name], name
    try:
        yield
    finally:
        _impl, BACKEND = prev


def _vector(v, name, min_len=1):
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] < min_len:
        raise ValueError(f"{name} needs at least {min_len} entries, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _pair(x, y, min_len=2):
    x = _vector(x, "x")
    y = _vector(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"length mismatch: {x.shape[0]} != {y.shape[0]}")
    if x.shape[0] < min_len:
        raise ValueError(f"need at least {min_len} entries, got {x.shape[0]}")
    return x, y


def as_matrix(a, name="matrix"):
    """Validate and convert to a finite, C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive shape, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _pearson(x, y):
    cx = x - x.mean()
    cy = y - y.mean()
    sxx = float(cx @ cx)
    syy = float(cy @ cy)
    n = x.shape[0]
    if sxx / n < VARIANCE_EPS or syy / n < VARIANCE_EPS:
        return 0.0, True
    r = float(cx @ cy) / np.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r)), False


def pearson(x, y, return_flag=False):
    """Pearson correlation of two equal-length vectors.

    Returns 0 when either vector has (population) variance below
    ``VARIANCE_EPS``.
    """
    value, degenerate = _pearson(*_pair(x, y))
    return (value, degenerate) if return_flag else value


def pairwise_pearson_distance(rows, return_flag=False):
    """Matrix of ``1 - pearson(rows[i], rows[j])`` over all row pairs.

    Parameters
    ----------
    rows : array-like, shape (n, d)
        One observation per row; needs n >= 2 and d >= 2.
    return_flag : bool
        Also return True if any row was constant (such rows correlate 0
        with every row, so their diagonal entry is 1).

    Returns
    -------
    D : ndarray, shape (n, n)
        Symmetric, entries in [0, 2], rounded to ``DISTANCE_DECIMALS``.
    """
    rows = as_matrix(rows, "rows")
    if rows.shape[0] < 2 or rows.shape[1] < 2:
        raise ValueError(f"need at least 2 rows and 2 columns, got {rows.shape}")
    dist, degenerate_rows = _impl.pearson_distance_matrix(rows, VARIANCE_EPS)
    dist = np.round(np.asarray(dist), DISTANCE_DECIMALS) + 0.0
    if return_flag:
        return dist, bool(np.any(degenerate_rows))
    return dist


def rank_transform(v):
    """Ranks starting at 1; tied values share the average of their ranks."""
    return np.asarray(_impl.average_ranks(_vector(v, "v")))


def spearman(x, y, return_flag=False):
    """Spearman correlation: Pearson correlation of the average ranks."""
    x, y = _pair(x, y)
    value, degenerate = _pearson(rank_transform(x), rank_transform(y))
    return (value, degenerate) if return_flag else value


def kendall_tau(x, y, return_flag=False):
    """Kendall's tau-b (tie-corrected)."""
    x, y = _pair(x, y)
    n = x.shape[0]
    s, tied_x, tied_y = _impl.kendall_pair_counts(x, y)
    n0 = n * (n - 1) // 2
    denom = float(n0 - tied_x) * float(n0 - tied_y)
    if denom <= 0.0:
        return (0.0, True) if return_flag else 0.0
    value = min(1.0, max(-1.0, s / np.sqrt(denom)))
    return (value, False) if return_flag else value


def hsic(K, L):
    """Hilbert-Schmidt independence criterion ``tr(K H L H) / (N-1)^2``.

    ``H = I - 11^T / N`` is the centering matrix. Uses
    ``tr(K H L H) = sum((H K H) * L^T)`` rather than forming H.
    """
    K = as_matrix(K, "K")
    L = as_matrix(L, "L")
    if K.shape[0] != K.shape[1] or L.shape[0] != L.shape[1]:
        raise ValueError(f"K and L must be square, got {K.shape} and {L.shape}")
    if K.shape != L.shape:
        raise ValueError(f"shape mismatch: {K.shape} != {L.shape}")
    n = K.shape[0]
    if n < 2:
        raise ValueError("HSIC needs N >= 2")
    Kc = K - K.mean(axis=0, keepdims=True)
    Kc = Kc - Kc.mean(axis=1, keepdims=True)
    return float(np.sum(Kc * L.T)) / (n - 1) ** 2


def lower_triangle(D):
    """Off-diagonal entries D[i, j], i < j, in row-major order of (i, j)."""
    D = as_matrix(D, "D")
    n = D.shape[0]
    if D.shape[1] != n:
        raise ValueError(f"expected a square matrix, got {D.shape}")
    if n < 2:
        raise ValueError("need N >= 2")
    return D[np.triu_indices(n, 1)]
