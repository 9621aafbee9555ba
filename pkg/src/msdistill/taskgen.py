"""Synthetic task universe: Gaussian clusters shared by all tasks.

A task picks a subset of the universe's clusters and partitions it into
classes; an example is drawn from a cluster's isotropic Gaussian and gets
the label of the cell containing that cluster. Two tasks are related to
the extent that their cluster subsets overlap, which gives an
evaluation-only ground truth for task similarity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import TrainHyper
from .seeds import derive_seed
from .similarity import ProbeSet

logger = logging.getLogger(__name__)

MIN_SEPARATION_SIGMAS = 4.0
DEFAULT_SOURCE_WIDTHS = ((8,), (16,), (32,), (64,))


@dataclass(frozen=True, eq=False)
class Universe:
    centroids: np.ndarray
    sigma: float
    seed: int

    @property
    def num_clusters(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    def to_dict(self):
        return {"seed": self.seed, "sigma": self.sigma, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centroids"], dtype=np.float64), float(d["sigma"]), int(d["seed"]))


def build_universe(seed, num_clusters, dim, sigma, max_attempts=100_000):
    """Centroids uniform in [-1, 1]^dim, pairwise at least 4 sigma apart."""
    if num_clusters < 2 or dim < 2 or not sigma > 0:
        raise ValueError("need num_clusters >= 2, dim >= 2 and sigma > 0")
    rng = np.random.default_rng(seed)
    min_dist = MIN_SEPARATION_SIGMAS * sigma
    accepted = []
    attempts = 0
    while len(accepted) < num_clusters:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(
                f"universe too crowded: placed {len(accepted)} of {num_clusters} centroids "
                f"at separation {min_dist:g} after {max_attempts} attempts"
            )
        c = rng.uniform(-1.0, 1.0, size=dim)
        if all(np.linalg.norm(c - a) >= min_dist for a in accepted):
            accepted.append(c)
    return Universe(np.array(accepted), float(sigma), int(seed))


@dataclass(frozen=True)
class TaskSpec:
    """Classes are the cells of ``partition``; cells are stored sorted."""

    partition: tuple

    def __post_init__(self):
        cells = tuple(sorted(tuple(sorted(int(c) for c in cell)) for cell in self.partition))
        if len(cells) < 2:
            raise ValueError("a task needs at least 2 classes")
        if any(len(cell) == 0 for cell in cells):
            raise ValueError("partition cells must be non-empty")
        flat = [c for cell in cells for c in cell]
        if len(flat) != len(set(flat)):
            raise ValueError("partition cells must be disjoint")
        object.__setattr__(self, "partition", cells)

    @property
    def clusters(self):
        return tuple(sorted(c for cell in self.partition for c in cell))

    @property
    def n_classes(self):
        return len(self.partition)

    def label_of(self):
        return {c: k for k, cell in enumerate(self.partition) for c in cell}

    def to_dict(self):
        return {"partition": [list(cell) for cell in self.partition]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(cell) for cell in d["partition"]))


@dataclass(eq=False)
class DataSplit:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray | None
    probe: ProbeSet
    probe_index: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def n_classes(self):
        return self.labeled_y.shape[1]

    @property
    def input_dim(self):
        return self.labeled_x.shape[1]


@dataclass(eq=False)
class SourceModelHandle:
    id: str
    model: object
    task: TaskSpec
    test_accuracy: float = float("nan")
    hidden_dims: tuple = field(default=())


def _balanced(rng, n, items):
    """``n`` draws from ``items`` as evenly as possible, in random order."""
    items = np.asarray(items)
    reps = np.tile(items, n // len(items))
    extra = rng.choice(items, size=n % len(items), replace=False)
    out = np.concatenate([reps, extra])
    rng.shuffle(out)
    return out


def _draw(universe, task, n, rng):
    clusters = _balanced(rng, n, task.clusters)
    labels_of = task.label_of()
    x = universe.centroids[clusters] + universe.sigma * rng.standard_normal((n, universe.dim))
    y = np.eye(task.n_classes)[[labels_of[int(c)] for c in clusters]]
    return x, y


def stratified_indices(labels, size, rng):
    """Class-stratified sample of ``size`` positions from ``labels``."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    if size > n:
        raise ValueError(f"cannot draw {size} of {n} examples")
    classes, counts = np.unique(labels, return_counts=True)
    quota = size * counts / n
    take = np.floor(quota).astype(int)
    order = np.lexsort((classes, -(quota - take)))
    take[order[: size - take.sum()]] += 1
    picked = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False) for c, k in zip(classes, take)]
    return np.sort(np.concatenate(picked))


def sample_split(universe, task, n_total, labeled_fraction, probe_size=None, seed=0, n_test=None, max_retries=20):
    """Draw labeled / unlabeled / test sets for ``task``.

    ``round(n_total * labeled_fraction)`` examples are labeled and the rest
    unlabeled; ``n_test`` (default ``n_total``) test examples are drawn
    separately. Cluster draws are balanced within each set. The probe set
    is a class-stratified subset of the labeled set of size ``probe_size``
    (default ``min(n_labeled, 500)``).
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_labeled = int(round(n_total * labeled_fraction))
    n_unlabeled = n_total - n_labeled
    if n_labeled < 2:
        raise ValueError("fewer than 2 labeled examples")
    probe_size = min(n_labeled, 500) if probe_size is None else int(probe_size)
    if probe_size > n_labeled:
        raise ValueError(f"probe_size {probe_size} exceeds the {n_labeled} labeled examples")
    if probe_size < 2:
        raise ValueError("probe_size must be at least 2")
    n_test = n_total if n_test is None else int(n_test)
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        lx, ly = _draw(universe, task, n_labeled, rng)
        ux = _draw(universe, task, n_unlabeled, rng)[0] if n_unlabeled else None
        tx, ty = _draw(universe, task, n_test, rng)
        if ly.sum(axis=0).min() > 0 and (n_test == 0 or ty.sum(axis=0).min() > 0):
            break
    else:
        raise RuntimeError("could not draw every class after repeated sampling")
    probe_index = stratified_indices(np.argmax(ly, axis=1), probe_size, rng)
    probe = ProbeSet(lx[probe_index], ly[probe_index])
    return DataSplit(lx, ly, ux, probe, probe_index, tx, ty)


def ground_truth_overlap(a, b):
    """Jaccard index of the two tasks' cluster subsets."""
    sa, sb = set(a.clusters), set(b.clusters)
    return len(sa & sb) / len(sa | sb)


def make_target_task(universe, n_clusters, n_classes, seed):
    """Random cluster subset split into ``n_classes`` near-equal cells."""
    if not 2 <= n_classes <= n_clusters <= universe.num_clusters:
        raise ValueError("need 2 <= n_classes <= n_clusters <= universe size")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(universe.num_clusters, size=n_clusters, replace=False)
    cells = [tuple(chosen[k::n_classes]) for k in range(n_classes)]
    return TaskSpec(tuple(cells))


def _closest_composition(target_size, outside, overlap, min_size=2, max_size=None):
    """(shared, extra) cluster counts whose Jaccard with the target is nearest ``overlap``."""
    best = None
    for shared in range(target_size + 1):
        for extra in range(outside + 1):
            size = shared + extra
            if size < min_size or (max_size is not None and size > max_size):
                continue
            j = shared / (target_size + extra)
            key = (abs(j - overlap), abs(size - target_size))
            if best is None or key < best[0]:
                best = (key, shared, extra)
    if best is None:
        raise ValueError("no source composition fits the universe")
    return best[1], best[2]


def make_source_task(universe, target, overlap, seed, partition="singletons", max_size=None):
    """Source task whose cluster overlap with ``target`` is as close to ``overlap`` as possible.

    ``partition="singletons"`` makes every cluster its own class;
    ``"random"`` splits the subset into a random number of cells.
    """
    rng = np.random.default_rng(seed)
    inside = np.array(target.clusters)
    outside = np.setdiff1d(np.arange(universe.num_clusters), inside)
    shared, extra = _closest_composition(len(inside), len(outside), overlap, max_size=max_size)
    clusters = np.concatenate(
        [rng.choice(inside, size=shared, replace=False), rng.choice(outside, size=extra, replace=False)]
    )
    if partition == "singletons":
        cells = [(int(c),) for c in clusters]
    elif partition == "random":
        k = int(rng.integers(2, len(clusters) + 1))
        rng.shuffle(clusters)
        cells = [tuple(clusters[i::k]) for i in range(k)]
    else:
        raise ValueError(f"unknown partition mode {partition!r}")
    spec = TaskSpec(tuple(cells))
    if spec == target:
        # same subset and partition as the target would be leakage; use singletons
        spec = TaskSpec(tuple((int(c),) for c in clusters))
    return spec


def train_source_models(
    universe,
    task_specs,
    hyper,
    seed,
    hidden_dims=DEFAULT_SOURCE_WIDTHS,
    n_train=600,
    accuracy_floor=0.9,
    max_epochs=None,
    activation="tanh",
):
    """Train one supervised model per task, cycling through ``hidden_dims``.

    Each source trains for at least ``hyper.epochs`` epochs and keeps going
    (up to ``max_epochs``, default ``4 * hyper.epochs``) until its own test
    accuracy reaches ``accuracy_floor``. Sources that never reach it are
    dropped with a warning.
    """
    from .distill import DistillConfig, train_baseline_supervised

    max_epochs = 4 * hyper.epochs if max_epochs is None else max_epochs
    handles = []
    for i, spec in enumerate(task_specs):
        sid = f"src{i}"
        split = sample_split(universe, spec, n_train, 1.0, seed=derive_seed(seed, "source-data", i))
        dims = tuple(hidden_dims[i % len(hidden_dims)])
        src_hyper = TrainHyper(
            learning_rate=hyper.learning_rate,
            weight_decay=hyper.weight_decay,
            batch_size=hyper.batch_size,
            epochs=max_epochs,
            seed=derive_seed(seed, "source-init", i),
        )
        cfg = DistillConfig(lam=1.0, hyper=src_hyper, hidden_dims=dims, activation=activation)
        model, history = train_baseline_supervised(
            split, cfg, eval_set=(split.test_x, split.test_y), stop_at=(hyper.epochs, accuracy_floor)
        )
        acc = history.records[-1]["test_acc"] if history.records else float("nan")
        if not acc >= accuracy_floor:
            logger.warning("source %s reached test accuracy %.3f < %.2f; excluded", sid, acc, accuracy_floor)
            continue
        model.heads = {"source": model.heads.pop("target")}
        handles.append(SourceModelHandle(sid, model, spec, float(acc), dims))
    return handles


def exclude_target_leakage(sources, target):
    """Drop sources trained on exactly the target task."""
    return [s for s in sources if s.task != target]
