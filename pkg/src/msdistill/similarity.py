"""Scoring how well a source model's representation of a labeled probe set
lines up with the probe labels.

Three metrics are provided:

parc
    Spearman correlation between the lower triangles of the Pearson
    distance matrices of the representation and of the one-hot labels.
rsa
    As ``parc`` but both matrices are z-normalised per column first.
cka
    Linear centered kernel alignment.

A score is *degenerate* when the metric is undefined for the inputs (a
single-class probe, constant distances, an all-zero centered matrix). Such
scores are 0, never NaN, and carry ``degenerate=True``.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import forward

logger = logging.getLogger(__name__)

FEATURE = "feature"
PSEUDO = "pseudo"
REPRESENTATIONS = (FEATURE, PSEUDO)
METRICS = ("parc", "rsa", "cka")


@dataclass(frozen=True, eq=False)
class ProbeSet:
    """Small labeled subset of the target data used for scoring sources."""

    inputs: np.ndarray | None
    labels_onehot: np.ndarray

    def __post_init__(self):
        y = nx.as_matrix(self.labels_onehot, "labels_onehot")
        if y.shape[0] < 2:
            raise ValueError("a probe set needs at least 2 examples")
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise ValueError("labels_onehot rows must contain exactly one 1")
        object.__setattr__(self, "labels_onehot", y)
        if self.inputs is not None:
            x = nx.as_matrix(self.inputs, "inputs")
            if x.shape[0] != y.shape[0]:
                raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
            object.__setattr__(self, "inputs", x)

    @classmethod
    def from_labels(cls, inputs, labels, n_classes=None):
        labels = np.asarray(labels, dtype=np.int64)
        n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
        return cls(inputs, np.eye(n_classes)[labels])

    @property
    def n(self):
        return self.labels_onehot.shape[0]

    @property
    def labels(self):
        return np.argmax(self.labels_onehot, axis=1)

    @property
    def n_present_classes(self):
        return int(np.count_nonzero(self.labels_onehot.sum(axis=0)))


@dataclass(frozen=True, eq=False)
class SourceRepresentation:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in REPRESENTATIONS:
            raise ValueError(f"kind must be one of {REPRESENTATIONS}, got {self.kind!r}")
        v = nx.as_matrix(self.values, "representation")
        if self.kind == PSEUDO:
            if np.any(v < 0) or np.any(np.abs(v.sum(axis=1) - 1) > 1e-6):
                raise ValueError("pseudo-label rows must be probability vectors")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SimilarityScore:
    source_id: str
    metric: str
    representation: str
    value: float
    degenerate: bool = False
    dropped_columns: int = 0
    error: str | None = None


def _check(rep, probe):
    if rep.values.shape[0] != probe.n:
        raise ValueError(f"representation has {rep.values.shape[0]} rows, probe has {probe.n}")


def _rank_distance_structure(X, Y):
    dx = nx.lower_triangle(nx.pairwise_pearson_distance(X))
    dy = nx.lower_triangle(nx.pairwise_pearson_distance(Y))
    return nx.spearman(dx, dy, return_flag=True)


def parc(rep, probe, source_id=""):
    _check(rep, probe)
    if probe.n_present_classes < 2:
        return SimilarityScore(source_id, "parc", rep.kind, 0.0, degenerate=True)
    value, degenerate = _rank_distance_structure(rep.values, probe.labels_onehot)
    return SimilarityScore(source_id, "parc", rep.kind, value, degenerate)


def zscore_columns(X):
    """Per-column mean 0 / variance 1; constant columns are dropped.

    Returns ``(Z, n_dropped)``.
    """
    X = nx.as_matrix(X)
    mean = X.mean(axis=0)
    var = X.var(axis=0)
    keep = var >= nx.VARIANCE_EPS
    Z = (X[:, keep] - mean[keep]) / np.sqrt(var[keep])
    return Z, int(np.count_nonzero(~keep))


def rsa(rep, probe, source_id=""):
    _check(rep, probe)
    X, dropped_x = zscore_columns(rep.values)
    Y, dropped_y = zscore_columns(probe.labels_onehot)
    dropped = dropped_x + dropped_y
    if dropped:
        logger.debug("rsa %s: dropped %d constant columns", source_id, dropped)
    if probe.n_present_classes < 2 or X.shape[1] < 2 or Y.shape[1] < 2:
        return SimilarityScore(source_id, "rsa", rep.kind, 0.0, True, dropped)
    value, degenerate = _rank_distance_structure(X, Y)
    return SimilarityScore(source_id, "rsa", rep.kind, value, degenerate, dropped)


def linear_cka(X, Y):
    """Closed-form linear CKA on column-centered matrices.

    Returns ``(value, degenerate)``.
    """
    X = nx.as_matrix(X, "X")
    Y = nx.as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"row mismatch: {X.shape[0]} != {Y.shape[0]}")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx < nx.VARIANCE_EPS or yy < nx.VARIANCE_EPS:
        return 0.0, True
    cross = np.linalg.norm(Y.T @ X) ** 2
    return float(min(1.0, max(0.0, cross / (xx * yy)))), False


def cka_linear(rep, probe, source_id=""):
    _check(rep, probe)
    value, degenerate = linear_cka(rep.values, probe.labels_onehot)
    return SimilarityScore(source_id, "cka", rep.kind, value, degenerate)


METRIC_FUNCS = {"parc": parc, "rsa": rsa, "cka": cka_linear}


def compute_metric(metric, rep, probe, source_id=""):
    try:
        fn = METRIC_FUNCS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}") from None
    return fn(rep, probe, source_id=source_id)


def represent(model, inputs, kind, head=None):
    """Features or output probabilities of ``model`` on ``inputs``."""
    if kind == FEATURE:
        feats, _ = forward(model, inputs, heads=[])
        return SourceRepresentation(FEATURE, feats)
    if kind == PSEUDO:
        if head is None:
            if len(model.heads) != 1:
                raise ValueError("model has several heads; name the one to use")
            (head,) = model.heads
        _, probs = forward(model, inputs, heads=[head])
        return SourceRepresentation(PSEUDO, probs[head])
    raise ValueError(f"kind must be one of {REPRESENTATIONS}, got {kind!r}")


def score_all_sources(sources, probe, metric, representation):
    """One score per source, in input order.

    ``sources`` are objects with ``id`` and ``model`` attributes. A source
    that fails to produce a representation gets a degenerate score with
    ``error`` set; the others are still scored.
    """
    if probe.inputs is None:
        raise ValueError("probe set has no inputs to run the sources on")
    scores = []
    for src in sources:
        try:
            rep = represent(src.model, probe.inputs, representation)
            scores.append(compute_metric(metric, rep, probe, source_id=src.id))
        except Exception as exc:  # noqa: BLE001 - reported per source
            logger.warning("scoring source %s failed: %s", src.id, exc)
            scores.append(SimilarityScore(src.id, metric, representation, 0.0, True, error=str(exc)))
    return scores


def score_representations(reps, probe, metric):
    """Score externally computed representations.

    ``reps`` maps source id to a matrix or a ``SourceRepresentation``;
    bare matrices are treated as features.
    """
    out = []
    for source_id, rep in reps.items():
        if not isinstance(rep, SourceRepresentation):
            rep = SourceRepresentation(FEATURE, rep)
        out.append(compute_metric(metric, rep, probe, source_id=source_id))
    return out


SCORE_COLUMNS = ("source_id", "metric", "representation", "value", "degenerate", "dropped_columns", "error")


def scores_to_csv(scores):
    """One row per source; ``value`` is written with full float precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for s in scores:
        writer.writerow(
            [s.source_id, s.metric, s.representation, repr(float(s.value)), str(s.degenerate).lower(),
             s.dropped_columns, "" if s.error is None else s.error]
        )
    return buf.getvalue()


def scores_from_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0]) != SCORE_COLUMNS:
        raise ValueError(f"unexpected scores CSV columns {list(rows[0])}")
    return [
        SimilarityScore(
            r["source_id"], r["metric"], r["representation"], float(r["value"]), r["degenerate"] == "true",
            int(r["dropped_columns"]), r["error"] or None,
        )
        for r in rows
    ]
