"""Weighted multi-source distillation into a single target model.

The target model minimises

    lam * CE(target head on labeled x, y)
        + (1 - lam) * sum_s alpha_s * CE(aux head s on unlabeled x, source s output)

Each source with ``alpha_s > 0`` gets its own auxiliary head on the target
feature extractor; those heads are dropped once training ends. Source
outputs on the unlabeled set are computed once, before training.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mm
from .evaluate import test_accuracy
from .seeds import derive_seed
from .weighting import SourceWeights

TARGET_HEAD = "target"


def aux_head(source_id):
    return f"aux_{source_id}"


class PseudoLabelCache:
    """Read-only source output probabilities over the unlabeled set.

    ``calls`` counts batch lookups per source.
    """

    def __init__(self, probs):
        self._probs = {}
        n_rows = None
        for sid, p in probs.items():
            p = np.array(p, dtype=np.float64)
            if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
                raise ValueError(f"pseudo-labels for {sid!r} are not probability rows")
            if n_rows is not None and p.shape[0] != n_rows:
                raise ValueError("every source must cover the same unlabeled rows")
            n_rows = p.shape[0]
            p.setflags(write=False)
            self._probs[sid] = p
        self.n_rows = n_rows or 0
        self.calls = {sid: 0 for sid in self._probs}

    def __contains__(self, source_id):
        return source_id in self._probs

    @property
    def source_ids(self):
        return tuple(self._probs)

    def n_classes(self, source_id):
        return self._probs[source_id].shape[1]

    def full(self, source_id):
        return self._probs[source_id]

    def batch(self, source_id, index):
        self.calls[source_id] += 1
        return self._probs[source_id][index]


def cache_pseudo_labels(sources, unlabeled):
    """One forward pass of every source over the unlabeled inputs."""
    probs = {}
    for src in sources:
        try:
            (head,) = src.model.heads
            _, out = mm.forward(src.model, unlabeled, heads=[head])
        except Exception as exc:
            raise RuntimeError(f"pseudo-labelling failed for source {src.id!r}: {exc}") from exc
        probs[src.id] = out[head]
    return PseudoLabelCache(probs)


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.8
    weights: SourceWeights | None = None
    hyper: mm.TrainHyper = field(default_factory=mm.TrainHyper)
    batch_ratio: tuple = (1, 1)
    hidden_dims: tuple = (32,)
    activation: str = "tanh"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if len(self.batch_ratio) != 2 or min(self.batch_ratio) < 1:
            raise ValueError("batch_ratio must be two counts >= 1")
        if self.lam < 1.0 and self.weights is None:
            raise ValueError("source weights are required when lambda < 1")

    def active_sources(self):
        if self.lam >= 1.0 or self.weights is None:
            return {}
        return {sid: float(a) for sid, a in zip(self.weights.source_ids, self.weights.alphas) if a > 0}


@dataclass
class LossParts:
    total: float
    labeled: float
    distill: dict


def _combine(lam, g_labeled, g_distill):
    if g_distill is None:
        return {k: lam * v for k, v in g_labeled.items()}
    return {k: lam * g_labeled[k] + (1.0 - lam) * g_distill[k] for k in g_labeled}


def multi_distill_loss(target, labeled_batch, unlabeled_batch, cache, cfg):
    """Loss, gradients and per-term breakdown for one step.

    Parameters
    ----------
    labeled_batch : (x, y_onehot)
    unlabeled_batch : (x, row indices into the cache) or None when lam == 1
    cache : PseudoLabelCache or None when lam == 1

    Returns
    -------
    loss : float
    grads : dict
    parts : LossParts
    """
    lam = cfg.lam
    x_l, y_l = labeled_batch
    loss_l, g_l = mm.backward(target, x_l, {TARGET_HEAD: y_l}, {TARGET_HEAD: 1.0})
    active = cfg.active_sources()
    if not active:
        return lam * loss_l, _combine(lam, g_l, None), LossParts(lam * loss_l, loss_l, {})

    x_u, index = unlabeled_batch
    targets = {}
    coeffs = {}
    for sid, alpha in active.items():
        head = aux_head(sid)
        if head not in target.heads:
            raise KeyError(f"no auxiliary head for positively weighted source {sid!r}")
        targets[head] = cache.batch(sid, index)
        coeffs[head] = alpha
    _, g_u, per_head = mm.backward(target, x_u, targets, coeffs, return_parts=True)
    distill = {sid: per_head[aux_head(sid)] for sid in active}
    distill_total = 0.0
    for sid, alpha in active.items():
        distill_total += alpha * distill[sid]
    total = lam * loss_l + (1.0 - lam) * distill_total
    return total, _combine(lam, g_l, g_u), LossParts(total, loss_l, distill)


def single_distill_loss(target, labeled_batch, unlabeled_x, pseudo, lam, source_id):
    """Single-source objective, written out directly (no weights involved)."""
    x_l, y_l = labeled_batch
    head = aux_head(source_id)
    loss_l, g_l = mm.backward(target, x_l, {TARGET_HEAD: y_l}, {TARGET_HEAD: 1.0})
    loss_s, g_s = mm.backward(target, unlabeled_x, {head: pseudo}, {head: 1.0})
    return lam * loss_l + (1.0 - lam) * loss_s, _combine(lam, g_l, g_s)


@dataclass
class TrainHistory:
    source_ids: tuple = ()
    records: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def columns(self):
        return ["epoch", "loss_total", "loss_labeled", *[f"loss_distill_{s}" for s in self.source_ids], "test_acc"]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        writer.writerow(cols)
        for rec in self.records:
            writer.writerow(["" if rec.get(c) is None else repr(rec[c]) for c in cols])
        return buf.getvalue()


def _labeled_stream(rng, n, size):
    """Endless stream of labeled batches: consecutive chunks of fresh permutations."""
    perm = rng.permutation(n)
    pos = 0
    while True:
        out = []
        while len(out) < size:
            if pos == n:
                perm = rng.permutation(n)
                pos = 0
            take = min(size - len(out), n - pos)
            out.extend(perm[pos : pos + take])
            pos += take
        yield np.asarray(out)


def train_target(split, sources, cfg, eval_set=None, record_steps=False, stop_at=None):
    """Train a target model on ``split`` with the weighted objective.

    Parameters
    ----------
    split : DataSplit
    sources : PseudoLabelCache, list of source handles, or None (lam == 1)
        Handles are pseudo-labelled on ``split.unlabeled_x`` first; only
        positively weighted sources are evaluated.
    cfg : DistillConfig
    eval_set : (x, y_onehot), optional
        Test accuracy is recorded per epoch. Defaults to the split's test set.
    stop_at : (min_epochs, accuracy), optional
        Stop early once at least ``min_epochs`` are done and the eval
        accuracy reaches ``accuracy``.

    Returns
    -------
    model : Mlp with only the ``target`` head
    history : TrainHistory
    """
    if split.labeled_x is None or split.labeled_x.shape[0] == 0:
        raise ValueError("labeled set is empty")
    hyper = cfg.hyper
    active = cfg.active_sources()
    distilling = bool(active)
    if distilling:
        if split.unlabeled_x is None or split.unlabeled_x.shape[0] == 0:
            raise ValueError("unlabeled set is empty but lambda < 1")
        if isinstance(sources, PseudoLabelCache):
            cache = sources
        else:
            cache = cache_pseudo_labels([s for s in sources if s.id in active], split.unlabeled_x)
        missing = [sid for sid in active if sid not in cache]
        if missing:
            raise KeyError(f"no pseudo-labels for positively weighted sources {missing}")
    else:
        cache = None

    target = mm.init_mlp(
        split.input_dim, list(cfg.hidden_dims), {TARGET_HEAD: split.n_classes}, seed=hyper.seed, activation=cfg.activation
    )
    for sid in active:
        mm.add_head(target, aux_head(sid), cache.n_classes(sid), seed=derive_seed(hyper.seed, "aux", sid))

    if eval_set is None and split.test_x is not None:
        eval_set = (split.test_x, split.test_y)

    rng = np.random.default_rng([hyper.seed, 7919])
    n_l = split.labeled_x.shape[0]
    history = TrainHistory(source_ids=tuple(active))
    if distilling:
        r_l, r_u = cfg.batch_ratio
        b_l = max(1, int(round(hyper.batch_size * r_l / (r_l + r_u))))
        b_u = max(1, hyper.batch_size - b_l)
        n_u = split.unlabeled_x.shape[0]
        steps_per_epoch = math.ceil(n_u / b_u)
        labeled_batches = _labeled_stream(rng, n_l, b_l)
    else:
        b_l = hyper.batch_size
        steps_per_epoch = math.ceil(n_l / b_l)

    for epoch in range(1, hyper.epochs + 1):
        sums = {"loss_total": 0.0, "loss_labeled": 0.0, **{f"loss_distill_{s}": 0.0 for s in active}}
        if distilling:
            u_perm = rng.permutation(n_u)
        else:
            l_perm = rng.permutation(n_l)
        for step in range(steps_per_epoch):
            if distilling:
                li = next(labeled_batches)
                ui = u_perm[step * b_u : (step + 1) * b_u]
                unlabeled_batch = (split.unlabeled_x[ui], ui)
            else:
                li = l_perm[step * b_l : (step + 1) * b_l]
                unlabeled_batch = None
            loss, grads, parts = multi_distill_loss(
                target, (split.labeled_x[li], split.labeled_y[li]), unlabeled_batch, cache, cfg
            )
            mm.sgd_step(target, grads, hyper)
            sums["loss_total"] += parts.total
            sums["loss_labeled"] += parts.labeled
            for sid, v in parts.distill.items():
                sums[f"loss_distill_{sid}"] += v
            if record_steps:
                history.steps.append(parts)
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}}
        rec["test_acc"] = test_accuracy(target, eval_set) if eval_set is not None else None
        history.records.append(rec)
        if stop_at is not None and epoch >= stop_at[0] and rec["test_acc"] is not None and rec["test_acc"] >= stop_at[1]:
            break

    return target.without_heads({TARGET_HEAD}), history


def train_baseline_supervised(split, cfg, eval_set=None, stop_at=None):
    """Labeled-data-only training with the same optimiser; never reads the unlabeled set."""
    sup = DistillConfig(
        lam=1.0, weights=None, hyper=cfg.hyper, batch_ratio=cfg.batch_ratio, hidden_dims=cfg.hidden_dims, activation=cfg.activation
    )
    return train_target(split, None, sup, eval_set=eval_set, stop_at=stop_at)
