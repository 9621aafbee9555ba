from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdistill import model as mm
from msdistill import numerics as nx
from msdistill import similarity as sim

from oracles import pearson_loop


def probe_from(labels, n_classes=None, inputs=None):
    return sim.ProbeSet.from_labels(inputs, labels, n_classes)


def feat(values):
    return sim.SourceRepresentation(sim.FEATURE, np.asarray(values, dtype=float))


FOUR_POINT_LABELS = [0, 0, 1, 1]
FOUR_POINT_FEATURES = [[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]]


class TestProbeSet:
    def test_validates_one_hot(self):
        with pytest.raises(ValueError):
            sim.ProbeSet(None, np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_needs_two(self):
        with pytest.raises(ValueError):
            probe_from([0], 2)

    def test_pseudo_rows_validated(self):
        with pytest.raises(ValueError):
            sim.SourceRepresentation(sim.PSEUDO, np.array([[0.5, 0.6]]))


class TestParc:
    def test_four_point(self):
        s = sim.parc(feat(FOUR_POINT_FEATURES), probe_from(FOUR_POINT_LABELS))
        assert s.value == pytest.approx(1.0)
        assert not s.degenerate

    def test_labels_as_features(self, rng):
        labels = rng.integers(0, 4, size=30)
        probe = probe_from(labels, 4)
        assert sim.parc(feat(probe.labels_onehot), probe).value == pytest.approx(1.0)

    def test_label_distances_tie_exactly(self, rng):
        labels = rng.integers(0, 7, size=60)
        D = nx.pairwise_pearson_distance(np.eye(7)[labels])
        values = np.unique(D)
        assert len(values) == 2
        assert values[0] == 0.0 and values[1] == pytest.approx(7 / 6, abs=1e-12)

    def test_single_class_degenerate(self, rng):
        s = sim.parc(feat(rng.normal(size=(5, 3))), probe_from([1, 1, 1, 1, 1], 3))
        assert s.degenerate and s.value == 0.0

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            sim.parc(feat(rng.normal(size=(5, 3))), probe_from([0, 1, 0, 1]))

    def test_random_features_near_zero(self):
        # null: features independent of labels; compare with a label
        # permutation distribution on the same features
        values = []
        for seed in range(100):
            r = np.random.default_rng(seed)
            labels = r.integers(0, 3, size=50)
            values.append(sim.parc(feat(r.normal(size=(50, 8))), probe_from(labels, 3)).value)
        assert np.median(np.abs(values)) < 0.3

        r = np.random.default_rng(999)
        X = r.normal(size=(50, 8))
        labels = r.integers(0, 3, size=50)
        perm_null = [sim.parc(feat(X), probe_from(r.permutation(labels), 3)).value for _ in range(200)]
        assert np.median(np.abs(values)) <= np.quantile(np.abs(perm_null), 0.95)

    def test_dimension_independent(self, rng):
        labels = rng.integers(0, 2, size=20)
        probe = probe_from(labels, 2)
        for d in (2, 5, 64):
            s = sim.parc(feat(rng.normal(size=(20, d))), probe)
            assert -1 <= s.value <= 1

    def test_monotone_distortion_of_distances(self, rng):
        X = rng.normal(size=(15, 4))
        labels = rng.integers(0, 3, size=15)
        dx = nx.lower_triangle(nx.pairwise_pearson_distance(X))
        dy = nx.lower_triangle(nx.pairwise_pearson_distance(np.eye(3)[labels]))
        base = sim.parc(feat(X), probe_from(labels, 3)).value
        assert nx.spearman(dx, dy) == base
        for f in (np.exp, np.sqrt, lambda v: v**3 + 2 * v):
            assert nx.spearman(f(dx), dy) == pytest.approx(base, abs=1e-12)


class TestRsa:
    def test_zscored_labels(self, rng):
        labels = rng.integers(0, 3, size=24)
        probe = probe_from(labels, 3)
        Z, _ = sim.zscore_columns(probe.labels_onehot)
        assert sim.rsa(feat(Z), probe).value == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_column_affine_invariance(self, seed):
        r = np.random.default_rng(seed)
        X = r.normal(size=(12, 4))
        probe = probe_from(r.integers(0, 3, size=12), 3)
        a = r.uniform(0.2, 5.0, size=4)
        b = r.normal(size=4)
        base = sim.rsa(feat(X), probe).value
        assert sim.rsa(feat(a * X + b), probe).value == pytest.approx(base, abs=1e-12)

    def test_four_point(self):
        s = sim.rsa(feat(FOUR_POINT_FEATURES), probe_from(FOUR_POINT_LABELS))
        assert s.value == pytest.approx(1.0)
        assert s.dropped_columns == 1  # the all-zero third feature column

    def test_equals_parc_on_normalised_inputs(self, rng):
        # balanced classes: z-scoring one-hot columns is a per-row affine map,
        # so Pearson distances of the labels are unchanged
        labels = np.repeat(np.arange(3), 6)
        probe = probe_from(labels, 3)
        Z, _ = sim.zscore_columns(rng.normal(size=(18, 5)))
        assert sim.parc(feat(Z), probe).value == pytest.approx(sim.rsa(feat(Z), probe).value, abs=1e-12)

    def test_too_few_columns_degenerate(self, rng):
        X = np.column_stack([rng.normal(size=6), np.ones(6)])
        s = sim.rsa(feat(X), probe_from([0, 1, 0, 1, 0, 1]))
        assert s.degenerate and s.value == 0.0 and s.dropped_columns == 1


class TestCka:
    def test_self(self, rng):
        labels = rng.integers(0, 3, size=10)
        probe = probe_from(labels, 3)
        assert sim.cka_linear(feat(probe.labels_onehot), probe).value == pytest.approx(1.0)

    def test_permuted_scaled(self, rng):
        labels = rng.integers(0, 4, size=16)
        probe = probe_from(labels, 4)
        X = 3.0 * probe.labels_onehot[:, [2, 0, 3, 1]]
        assert sim.cka_linear(feat(X), probe).value == pytest.approx(1.0)

    def test_hsic_ratio_form(self, rng):
        X = rng.normal(size=(5, 3))
        Y = rng.normal(size=(5, 2))
        closed, _ = sim.linear_cka(X, Y)
        K, L = X @ X.T, Y @ Y.T
        ratio = nx.hsic(K, L) / np.sqrt(nx.hsic(K, K) * nx.hsic(L, L))
        assert closed == pytest.approx(ratio, abs=1e-8)

    def test_bounds(self, rng):
        for _ in range(20):
            X = rng.normal(size=(8, 3))
            probe = probe_from(rng.integers(0, 2, size=8), 2)
            if probe.n_present_classes < 2:
                continue
            s = sim.cka_linear(feat(X), probe)
            assert 0.0 <= s.value <= 1.0
            assert sim.linear_cka(X, X)[0] == pytest.approx(1.0)

    def test_zero_centered_degenerate(self):
        s = sim.cka_linear(feat(np.ones((4, 3))), probe_from([0, 1, 0, 1]))
        assert s.degenerate and s.value == 0.0


class TestScoreAll:
    def _sources(self):
        good = SimpleNamespace(id="good", model=mm.init_mlp(3, [4], {"out": 2}, seed=1))
        other = SimpleNamespace(id="other", model=mm.init_mlp(3, [6], {"out": 5}, seed=2))
        broken = SimpleNamespace(id="broken", model=mm.init_mlp(7, [4], {"out": 2}, seed=3))
        return good, other, broken

    def test_empty(self, rng):
        assert sim.score_all_sources([], probe_from([0, 1], 2, rng.normal(size=(2, 3))), "parc", "feature") == []

    def test_per_source_failure(self, rng):
        probe = probe_from(rng.integers(0, 2, size=12), 2, rng.normal(size=(12, 3)))
        scores = sim.score_all_sources(list(self._sources()), probe, "parc", "feature")
        assert [s.source_id for s in scores] == ["good", "other", "broken"]
        assert scores[2].error and scores[2].degenerate and scores[2].value == 0.0
        assert scores[0].error is None

    @pytest.mark.parametrize("metric", sim.METRICS)
    @pytest.mark.parametrize("kind", sim.REPRESENTATIONS)
    def test_order_permutation(self, rng, metric, kind):
        probe = probe_from(rng.integers(0, 2, size=12), 2, rng.normal(size=(12, 3)))
        good, other, _ = self._sources()
        a = sim.score_all_sources([good, other], probe, metric, kind)
        b = sim.score_all_sources([other, good], probe, metric, kind)
        assert a == b[::-1]

    def test_identical_source_scores_high(self, rng):
        # a "source" whose features are the target label one-hots
        labels = rng.integers(0, 3, size=30)
        x = np.eye(3)[labels] + 0.0
        src = SimpleNamespace(id="same", model=mm.init_mlp(3, [], {"out": 3}, seed=0))
        (score,) = sim.score_all_sources([src], probe_from(labels, 3, x), "parc", "feature")
        assert score.value == pytest.approx(1.0)

    def test_external_representations(self, rng):
        labels = rng.integers(0, 3, size=20)
        probe = probe_from(labels, 3)
        X = rng.normal(size=(20, 4))
        out = sim.score_representations({"a": X}, probe, "rsa")
        assert out[0].value == sim.rsa(feat(X), probe).value


def test_parc_pearson_matches_loop(rng):
    X = rng.normal(size=(6, 3))
    D = nx.pairwise_pearson_distance(X)
    assert D[1, 4] == pytest.approx(1 - pearson_loop(list(X[1]), list(X[4])), abs=1e-12)
