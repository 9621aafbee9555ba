import itertools

import numpy as np
import pytest

from msdistill import taskgen as tg
from msdistill.model import TrainHyper


@pytest.fixture(scope="module")
def universe():
    return tg.build_universe(3, num_clusters=10, dim=16, sigma=0.5)


def test_universe_separation(universe):
    c = universe.centroids
    assert c.shape == (10, 16)
    d = [np.linalg.norm(c[i] - c[j]) for i, j in itertools.combinations(range(10), 2)]
    assert min(d) >= 4 * 0.5
    assert np.all(np.abs(c) <= 1)


def test_universe_deterministic_and_roundtrip(universe):
    again = tg.build_universe(3, 10, 16, 0.5)
    np.testing.assert_array_equal(again.centroids, universe.centroids)
    back = tg.Universe.from_dict(universe.to_dict())
    np.testing.assert_array_equal(back.centroids, universe.centroids)


def test_universe_too_crowded():
    with pytest.raises(RuntimeError, match="too crowded"):
        tg.build_universe(0, num_clusters=50, dim=2, sigma=0.5, max_attempts=2000)


class TestTaskSpec:
    def test_canonical(self):
        assert tg.TaskSpec(((3, 1), (2,))) == tg.TaskSpec(((2,), (1, 3)))

    def test_invalid(self):
        with pytest.raises(ValueError):
            tg.TaskSpec(((1, 2),))
        with pytest.raises(ValueError):
            tg.TaskSpec(((1, 2), (2, 3)))

    def test_roundtrip(self):
        t = tg.TaskSpec(((0, 4), (5,)))
        assert tg.TaskSpec.from_dict(t.to_dict()) == t


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (((0,), (1,)), ((0,), (1,)), 1.0),
        (((0,), (1,)), ((2,), (3,)), 0.0),
        (((0, 1), (2, 3)), ((0,), (1,), (9,)), 2 / 5),
        (((0, 1), (2, 3)), ((3, 0), (1, 2)), 1.0),
    ],
)
def test_jaccard(a, b, expected):
    assert tg.ground_truth_overlap(tg.TaskSpec(a), tg.TaskSpec(b)) == pytest.approx(expected)


@pytest.mark.parametrize("n_labeled, n_unlabeled", [(200, 800), (50, 950)])
def test_split_sizes(universe, n_labeled, n_unlabeled):
    task = tg.make_target_task(universe, 4, 2, seed=1)
    n = n_labeled + n_unlabeled
    s = tg.sample_split(universe, task, n, n_labeled / n, seed=5)
    assert s.labeled_x.shape == (n_labeled, 16)
    assert s.unlabeled_x.shape == (n_unlabeled, 16)
    assert s.test_x.shape[0] == n
    assert s.probe.n == min(n_labeled, 500)
    np.testing.assert_array_equal(s.probe.inputs, s.labeled_x[s.probe_index])


def test_split_sets_disjoint(universe):
    task = tg.make_target_task(universe, 4, 2, seed=1)
    s = tg.sample_split(universe, task, 300, 0.2, seed=9)
    rows = [tuple(r) for r in np.vstack([s.labeled_x, s.unlabeled_x, s.test_x])]
    assert len(set(rows)) == len(rows)


def test_split_deterministic(universe):
    task = tg.make_target_task(universe, 4, 2, seed=1)
    a = tg.sample_split(universe, task, 100, 0.3, seed=2)
    b = tg.sample_split(universe, task, 100, 0.3, seed=2)
    np.testing.assert_array_equal(a.labeled_x, b.labeled_x)
    np.testing.assert_array_equal(a.unlabeled_x, b.unlabeled_x)


def test_probe_stratified(universe):
    task = tg.TaskSpec(((0,), (1, 2, 3)))
    s = tg.sample_split(universe, task, 400, 1.0, probe_size=40, seed=0)
    full = s.labeled_y.mean(axis=0)
    probe = s.probe.labels_onehot.mean(axis=0)
    np.testing.assert_allclose(probe, full, rtol=0.2)


def test_split_validation(universe):
    task = tg.make_target_task(universe, 4, 2, seed=1)
    with pytest.raises(ValueError):
        tg.sample_split(universe, task, 100, 0.0)
    with pytest.raises(ValueError):
        tg.sample_split(universe, task, 100, 0.2, probe_size=50)


def test_stratified_indices_quota():
    labels = np.array([0] * 30 + [1] * 70)
    idx = tg.stratified_indices(labels, 10, np.random.default_rng(0))
    assert len(idx) == 10 and (labels[idx] == 0).sum() == 3


def test_source_overlaps_span(universe):
    target = tg.make_target_task(universe, 4, 2, seed=1)
    got = [
        tg.ground_truth_overlap(tg.make_source_task(universe, target, o, seed=i), target)
        for i, o in enumerate([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    ]
    assert got[0] == 0.0 and got[-1] == 1.0
    assert got == sorted(got)
    np.testing.assert_allclose(got, [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=0.11)


def test_source_never_equals_target(universe):
    target = tg.TaskSpec(((0,), (1,)))
    src = tg.make_source_task(universe, target, 1.0, seed=0)
    assert src.clusters == target.clusters
    # singletons over the same clusters coincide with this target; the source keeps them
    assert tg.exclude_target_leakage([tg.SourceModelHandle("a", None, src)], target) == []
    wide = tg.TaskSpec(((0, 1), (2, 3)))
    s2 = tg.make_source_task(universe, wide, 1.0, seed=0)
    assert s2 != wide


def test_leakage_exclusion():
    t = tg.TaskSpec(((0,), (1,)))
    keep = tg.SourceModelHandle("b", None, tg.TaskSpec(((0,), (2,))))
    assert tg.exclude_target_leakage([tg.SourceModelHandle("a", None, t), keep], t) == [keep]


def test_train_source_reaches_floor(universe):
    spec = tg.TaskSpec(((0,), (1,), (2,)))
    hyper = TrainHyper(learning_rate=0.1, batch_size=32, epochs=5, seed=0)
    (h,) = tg.train_source_models(universe, [spec], hyper, seed=0, n_train=300)
    assert h.test_accuracy >= 0.9
    assert set(h.model.heads) == {"source"}
    assert h.id == "src0" and h.hidden_dims == (8,)


def test_train_source_excluded_below_floor(universe, caplog):
    spec = tg.TaskSpec(((0,), (1,), (2,)))
    hyper = TrainHyper(learning_rate=1e-6, batch_size=32, epochs=1, seed=0)
    assert tg.train_source_models(universe, [spec], hyper, seed=0, n_train=60, max_epochs=1) == []
    assert "excluded" in caplog.text
