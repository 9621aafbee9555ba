"""Accuracy, similarity-vs-accuracy correlations and ranking quality."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


def test_accuracy(model, test, head="target"):
    """Fraction of rows whose argmax prediction matches the one-hot label."""
    from .model import forward

    x, y = test
    y = np.asarray(y)
    if y.shape[0] == 0:
        raise ValueError("empty test set")
    _, probs = forward(model, x, heads=[head])
    return accuracy_from_probs(probs[head], y)


test_accuracy.__test__ = False  # not a pytest test despite the name


def accuracy_from_probs(probs, y_onehot):
    probs = np.asarray(probs)
    y_onehot = np.asarray(y_onehot)
    if probs.shape != y_onehot.shape:
        raise ValueError(f"shape mismatch: {probs.shape} != {y_onehot.shape}")
    if probs.shape[0] == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(y_onehot, axis=1)))


@dataclass(frozen=True)
class CorrelationCell:
    metric: str
    representation: str
    spearman: float
    pearson: float
    kendall: float
    degenerate: bool


def correlation_report(scores_by_metric, accuracies):
    """Spearman, Pearson and Kendall correlation of every score list with accuracy.

    Parameters
    ----------
    scores_by_metric : mapping of (metric, representation) to list of float
        Scores aligned with ``accuracies`` (one per source).
    accuracies : list of float
        Single-source distilled test accuracy per source.

    Returns
    -------
    list of CorrelationCell, in sorted key order. Fewer than 3 sources or a
    constant input gives zeros with ``degenerate=True``.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    cells = []
    for (metric, rep) in sorted(scores_by_metric):
        s = np.asarray(scores_by_metric[(metric, rep)], dtype=np.float64)
        if s.shape != acc.shape:
            raise ValueError(f"{metric}/{rep}: {s.shape[0]} scores for {acc.shape[0]} accuracies")
        if acc.shape[0] < 3:
            cells.append(CorrelationCell(metric, rep, 0.0, 0.0, 0.0, True))
            continue
        sp, d1 = nx.spearman(s, acc, return_flag=True)
        pe, d2 = nx.pearson(s, acc, return_flag=True)
        ke, d3 = nx.kendall_tau(s, acc, return_flag=True)
        cells.append(CorrelationCell(metric, rep, sp, pe, ke, d1 or d2 or d3))
    return cells


@dataclass(frozen=True, eq=False)
class RankingEval:
    scores: np.ndarray
    accuracies: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        a = np.asarray(self.accuracies, dtype=np.float64)
        if s.shape != a.shape or s.ndim != 1 or s.shape[0] < 1:
            raise ValueError("scores and accuracies must be aligned non-empty vectors")
        if np.any(a <= 0):
            raise ValueError("relative accuracy needs positive accuracies")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "accuracies", a)

    @property
    def n_sources(self):
        return self.scores.shape[0]

    @property
    def similarity_ranking(self):
        """Source indices by decreasing score; ties by lowest index."""
        return np.lexsort((np.arange(self.n_sources), -self.scores))

    @property
    def accuracy_ranking(self):
        return np.lexsort((np.arange(self.n_sources), -self.accuracies))


def topk_relative_accuracy(ev, k):
    """Mean accuracy of the k best-scored sources over that of the k most accurate."""
    if not 1 <= k <= ev.n_sources:
        raise ValueError(f"k must be in [1, {ev.n_sources}], got {k}")
    picked = ev.accuracies[ev.similarity_ranking[:k]].mean()
    best = ev.accuracies[ev.accuracy_ranking[:k]].mean()
    return float(picked / best)


def mean_relative_accuracy(ev, include_full=True):
    """Average of ``topk_relative_accuracy`` over k = 1..S (or 1..S-1)."""
    s = ev.n_sources
    if s < 2:
        raise ValueError("need at least 2 sources")
    ks = range(1, s + 1) if include_full else range(1, s)
    return float(np.mean([topk_relative_accuracy(ev, k) for k in ks]))


def expected_random_mean_relative_accuracy(accuracies, include_full=True):
    """Expected ``mean_relative_accuracy`` of a uniformly random ranking.

    A random top-k set has expected mean accuracy equal to the overall
    mean, and the denominator is fixed, so each k contributes
    ``mean(acc) / mean(top-k acc)``.
    """
    a = np.sort(np.asarray(accuracies, dtype=np.float64))[::-1]
    s = a.shape[0]
    if s < 2:
        raise ValueError("need at least 2 sources")
    ks = range(1, s + 1) if include_full else range(1, s)
    overall = a.mean()
    return float(np.mean([overall / a[:k].mean() for k in ks]))


def scheme_comparison(results):
    """Per-scheme mean accuracy with the per-run breakdown.

    ``results`` maps scheme name to equally long accuracy lists (one entry
    per seed/task run, aligned across schemes). Rows come back sorted by
    scheme name.
    """
    lengths = {len(v) for v in results.values()}
    if len(lengths) > 1:
        raise ValueError(f"ragged results: run counts {sorted(lengths)}")
    rows = []
    for scheme in sorted(results):
        vals = [float(v) for v in results[scheme]]
        rows.append({"scheme": scheme, "mean": float(np.mean(vals)) if vals else float("nan"), "runs": vals})
    return rows


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def scheme_comparison_csv(rows, run_labels=None):
    n = len(rows[0]["runs"]) if rows else 0
    labels = list(run_labels) if run_labels is not None else [f"run{i}" for i in range(n)]
    flat = [{"scheme": r["scheme"], "mean": r["mean"], **dict(zip(labels, r["runs"]))} for r in rows]
    return rows_to_csv(flat, ["scheme", "mean", *labels])
