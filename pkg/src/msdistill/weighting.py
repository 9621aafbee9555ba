"""Turn per-source similarity scores into distillation weights.

The main scheme raises min-max normalised scores to a power ``p``:
``p = 0`` gives equal weights and ``p -> inf`` puts everything on the
best-scoring source. A temperature softmax over the raw scores and a set
of reference schemes (equal, inverse, random simplex, random single
source) are provided for comparison.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

SCHEMES = ("power", "softmax", "nearest", "equal", "inverse", "random_simplex", "random_selection")
BASELINE_SCHEMES = ("equal", "inverse", "random_simplex", "random_selection")

_ALIASES = {
    "weighted": "power",
    "distillweighted": "power",
    "random": "random_simplex",
    "random_weights": "random_simplex",
    "randomweights": "random_simplex",
    "randomselection": "random_selection",
    "distillnearest": "nearest",
    "distillequal": "equal",
}

DEFAULT_P = 12.0


@dataclass(frozen=True, eq=False)
class SourceWeights:
    alphas: np.ndarray
    scheme: str
    param: float | None = None
    source_ids: tuple = field(default=())

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or a.shape[0] < 1:
            raise ValueError("alphas must be a non-empty vector")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("alphas must be finite and nonnegative")
        if abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"alphas must sum to 1, got {a.sum()!r}")
        ids = tuple(self.source_ids) or tuple(f"s{i}" for i in range(a.shape[0]))
        if len(ids) != a.shape[0]:
            raise ValueError("one source id per weight required")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "source_ids", ids)

    def as_dict(self):
        return dict(zip(self.source_ids, self.alphas.tolist()))

    def label(self):
        # random schemes store their seed in ``param``; it is not part of the name
        if self.param is None or self.scheme in ("random_simplex", "random_selection"):
            return self.scheme
        return f"{self.scheme}:{self.param:g}"

    def with_ids(self, source_ids):
        return SourceWeights(self.alphas, self.scheme, self.param, tuple(source_ids))


def _score_values(scores):
    vals = [getattr(s, "value", s) for s in scores]
    arr = np.asarray(vals, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scores must be finite")
    return arr


def normalize_scores(scores):
    """Min-max normalise to [0, 1], then clip at 0.

    Accepts ``SimilarityScore`` objects or plain numbers. If every score is
    equal the result is all ones.
    """
    e = _score_values(scores)
    lo, hi = e.min(), e.max()
    if hi == lo:
        return np.ones_like(e)
    return np.maximum(0.0, (e - lo) / (hi - lo))


def power_weights(normalized, p):
    e = np.asarray(normalized, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] < 1:
        raise ValueError("need at least one normalized score")
    if np.any(e < 0) or np.any(e > 1) or not np.all(np.isfinite(e)):
        raise ValueError("normalized scores must lie in [0, 1]")
    if p < 0 or not np.isfinite(p):
        raise ValueError(f"p must be finite and >= 0, got {p}")
    if p == 0:
        return SourceWeights(np.full(e.shape[0], 1.0 / e.shape[0]), "power", 0.0)
    if not np.any(e > 0):
        raise ValueError("no positive similarity: cannot build power weights")
    w = e**p
    total = w.sum()
    if total == 0.0:
        # underflow for huge p: fall back to the limit, equal split over the maxima
        w = (e == e.max()).astype(np.float64)
        total = w.sum()
    return SourceWeights(w / total, "power", float(p))


def softmax_weights(scores, T):
    e = _score_values(scores)
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = (e - e.max()) / T
    w = np.exp(z)
    return SourceWeights(w / w.sum(), "softmax", float(T))


def nearest_weights(scores):
    """All weight on the best score; ties go to the lowest index."""
    e = _score_values(scores)
    w = np.zeros_like(e)
    w[int(np.argmax(e))] = 1.0
    return SourceWeights(w, "nearest")


def baseline_weights(scheme, normalized, seed=0):
    e = np.asarray(normalized, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] < 1:
        raise ValueError("need at least one normalized score")
    if np.any(e < 0) or np.any(e > 1):
        raise ValueError("normalized scores must lie in [0, 1]")
    s = e.shape[0]
    if scheme == "equal":
        return SourceWeights(np.full(s, 1.0 / s), "equal")
    if scheme == "inverse":
        w = 1.0 - e
        if not np.any(w > 0):
            raise ValueError("inverse weights undefined: every normalized score is 1")
        return SourceWeights(w / w.sum(), "inverse")
    rng = np.random.default_rng(seed)
    if scheme == "random_simplex":
        w = rng.dirichlet(np.ones(s))
        return SourceWeights(w / w.sum(), "random_simplex", float(seed))
    if scheme == "random_selection":
        w = np.zeros(s)
        w[int(rng.integers(s))] = 1.0
        return SourceWeights(w, "random_selection", float(seed))
    raise ValueError(f"unknown baseline scheme {scheme!r}; choose from {BASELINE_SCHEMES}")


def top_k_mask(scores, k):
    """Boolean mask selecting the ``k`` highest scores (ties: lowest index)."""
    e = _score_values(scores)
    if not 1 <= k <= e.shape[0]:
        raise ValueError(f"k must be in [1, {e.shape[0]}], got {k}")
    order = np.lexsort((np.arange(e.shape[0]), -e))
    mask = np.zeros(e.shape[0], dtype=bool)
    mask[order[:k]] = True
    return mask


def parse_scheme(text):
    """Parse ``NAME[:param]`` such as ``weighted:p=12``, ``softmax:0.1``, ``nearest``.

    Returns ``(scheme, param)`` with ``param`` None when not given.
    """
    name, _, raw = text.strip().partition(":")
    name = name.strip().lower().replace("-", "_")
    name = _ALIASES.get(name, name)
    if name not in SCHEMES:
        raise ValueError(f"unknown scheme {text!r}; choose from {SCHEMES}")
    param = None
    if raw:
        _, _, value = raw.rpartition("=")
        param = float(value)
    return name, param


def weigh(scores, scheme, param=None, seed=0, top_k=None, source_ids=None):
    """Full weighting step: optional top-k pre-selection, then ``scheme``.

    ``param`` is ``p`` for ``power`` (default 12) and ``T`` for
    ``softmax`` (default 1). Sources outside the top-k get weight 0.
    """
    e = _score_values(scores)
    if source_ids is None:
        source_ids = [getattr(s, "source_id", None) or f"s{i}" for i, s in enumerate(scores)]
    mask = np.ones(e.shape[0], dtype=bool) if top_k is None else top_k_mask(e, top_k)
    sub = e[mask]
    if scheme == "power":
        w = power_weights(normalize_scores(sub), DEFAULT_P if param is None else param)
    elif scheme == "softmax":
        w = softmax_weights(sub, 1.0 if param is None else param)
    elif scheme == "nearest":
        w = nearest_weights(sub)
    elif scheme in BASELINE_SCHEMES:
        w = baseline_weights(scheme, normalize_scores(sub), seed)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    alphas = np.zeros(e.shape[0])
    alphas[mask] = w.alphas
    return SourceWeights(alphas, w.scheme, w.param, tuple(source_ids))


def weights_to_csv(weights):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source_id", "alpha", "scheme", "param"])
    param = "" if weights.param is None else repr(weights.param)
    for sid, a in zip(weights.source_ids, weights.alphas):
        writer.writerow([sid, repr(float(a)), weights.scheme, param])
    return buf.getvalue()


def weights_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("weights CSV has no rows")
    if set(rows[0]) != {"source_id", "alpha", "scheme", "param"}:
        raise ValueError(f"unexpected weights CSV columns {sorted(rows[0])}")
    schemes = {r["scheme"] for r in rows}
    if len(schemes) != 1:
        raise ValueError(f"weights CSV mixes schemes {sorted(schemes)}")
    param = rows[0]["param"]
    return SourceWeights(
        np.array([float(r["alpha"]) for r in rows]),
        rows[0]["scheme"],
        float(param) if param else None,
        tuple(r["source_id"] for r in rows),
    )
