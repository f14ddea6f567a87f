import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from agreelab import agreement as agr
from agreelab import cartography as cart
from agreelab import model
from agreelab.cartography import CartographyRecord, CurvatureStats
from agreelab.training import InstanceDynamics, TrainingTrace


def _trace(*probs_and_flags):
    return TrainingTrace({i: InstanceDynamics(i, list(p), list(c)) for i, (p, c) in enumerate(probs_and_flags)})


class TestCategorize:
    @pytest.mark.parametrize("n,cat", [(5, "easy"), (0, "hard"), (2, "ambiguous"), (3, "ambiguous"),
                                       (1, "uncategorized"), (4, "uncategorized")])
    def test_five_epoch_bands(self, n, cat):
        assert cart.categorize(n, 5) == cat

    def test_other_epoch_counts(self):
        assert cart.categorize(10, 10) == "easy"
        assert [cart.categorize(k, 10) for k in (4, 5, 6)] == ["ambiguous"] * 3
        assert cart.categorize(3, 10) == "uncategorized"

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cart.categorize(6, 5)
        with pytest.raises(ValueError):
            cart.categorize(-1, 5)


class TestStats:
    def test_extremes(self):
        r = cart.cartography_stats(_trace(([1.0] * 5, [True] * 5)))[0]
        assert (r.confidence, r.variability, r.closeness, r.n_correct, r.category) == (1.0, 0.0, 0.0, 5, "easy")

    def test_half(self):
        r = cart.cartography_stats(_trace(([0.5] * 5, [False, True, False, True, False])))[0]
        assert r.confidence == 0.5 and r.closeness == 0.25 and r.category == "ambiguous"

    def test_two_epoch_example(self):
        trace = _trace(([0.2, 0.8], [False, True]))
        r = cart.cartography_stats(trace)[0]
        assert abs(r.confidence - 0.5) <= 1e-12
        assert abs(r.variability - 0.3) <= 1e-12
        assert abs(r.closeness - 0.25) <= 1e-12
        r2 = cart.cartography_stats(trace, per_epoch_closeness=True)[0]
        assert abs(r2.closeness - 0.16) <= 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            cart.cartography_stats(TrainingTrace({}))
        with pytest.raises(ValueError):
            cart.cartography_stats(_trace(([], [])))

    def test_equal_probabilities_have_zero_variability(self):
        assert cart.record_from(0, [0.79047887389546] * 3, [True] * 3).variability == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.booleans())
    def test_bounds(self, p, per_epoch):
        r = cart.record_from(0, p, [x > 0.5 for x in p], per_epoch)
        assert 0 <= r.confidence <= 1
        assert 0 <= r.variability <= 0.5 + 1e-12
        assert 0 <= r.closeness <= 0.25 + 1e-12
        if np.ptp(p) == 0:
            assert r.variability == 0


class TestGroups:
    def _records(self, cats):
        return [CartographyRecord(i, 0.5, 0.1, 0.2, 0, c) for i, c in enumerate(cats)]

    def test_hand_set_scores(self):
        recs = self._records(["easy", "easy", "ambiguous"])
        got = cart.group_agreement({0: 0.2, 1: 0.4, 2: 0.8}, recs)
        assert got["easy"] == pytest.approx(0.3) and got["ambiguous"] == pytest.approx(0.8)
        assert got["hard"] is None

    def test_from_matrix(self):
        maps = {"a": {0: [1, 2, 3], 1: [1, 2, 3]}, "b": {0: [1, 2, 3], 1: [1, 2, 3]}}
        got = cart.group_agreement(agr.pairwise_agreement(maps), self._records(["easy", "easy"]))
        assert got == {"easy": pytest.approx(1.0), "ambiguous": None, "hard": None}

    def test_order_invariance(self):
        recs = self._records(["easy", "hard", "easy", "ambiguous"])
        scores = {0: 0.1, 1: 0.5, 2: 0.3, 3: 0.9}
        assert cart.group_agreement(scores, recs) == cart.group_agreement(scores, list(reversed(recs)))


class TestCurvature:
    def test_identity_pooling_probe(self):
        rng = np.random.default_rng(0)
        probe = model.LinearProbe(rng.normal(size=(10, 4)), rng.normal(size=(4, 2)), np.zeros(2))
        T, d = 5, 4
        assert cart.representation_grad_norm(probe, [1, 2, 3, 4, 5]) == pytest.approx(np.sqrt(T * d) / T)

    def test_exact_jacobian_on_probe(self):
        rng = np.random.default_rng(1)
        probe = model.LinearProbe(rng.normal(size=(10, 4)), rng.normal(size=(4, 2)), np.zeros(2))
        # d h_j / d E[t, k] = delta_jk / T, so the Jacobian norm is sqrt(T d) / T as well
        assert cart.representation_grad_norm(probe, [1, 2, 3], exact_jacobian=True) == pytest.approx(np.sqrt(12) / 3)

    def test_decoder_scaling_invariance(self):
        st_ = model.init(model.ClassifierConfig(vocab_size=10, embed_dim=4, hidden_dim=4, seed=0))
        a = cart.representation_grad_norm(model.Classifier(st_), [1, 2, 3])
        st2 = st_.copy()
        st2.params["W_d"][...] *= 7
        assert cart.representation_grad_norm(model.Classifier(st2), [1, 2, 3]) == a
        assert cart.representation_grad_norm(model.Classifier(st_), [1, 2, 3]) == a

    def test_min_distance(self):
        assert cart.min_distance({0: np.array([0.0, 0.0]), 7: np.array([3.0, 4.0])}) == {0: 5.0, 7: 5.0}
        d = cart.min_distance({1: np.ones(2), 2: np.ones(2), 3: np.zeros(2)})
        assert d[1] == 0 and d[2] == 0
        with pytest.raises(ValueError):
            cart.min_distance({0: np.ones(2)})

    def test_min_distance_symmetry(self):
        rng = np.random.default_rng(2)
        reps = {i: rng.normal(size=3) for i in range(30)}
        d = cart.min_distance(reps)
        for i, hi in reps.items():
            j = min((k for k in reps if k != i), key=lambda k: np.linalg.norm(hi - reps[k]))
            assert d[j] <= d[i] + 1e-12


class TestCorrelate:
    def _recs(self, conf):
        return [CartographyRecord(i, c, 0.1 + 0.01 * i, c * (1 - c), 0, "easy") for i, c in enumerate(conf)]

    def test_self_correlation(self):
        conf = [0.1, 0.5, 0.7, 0.9]
        stats = [CurvatureStats(i, c, 1.0 + i) for i, c in enumerate(conf)]
        table = cart.correlate_curvature(stats, self._recs(conf))
        assert table["grad_norm"]["confidence"] == pytest.approx(1.0)

    def test_constant_column(self):
        conf = [0.1, 0.5, 0.7]
        stats = [CurvatureStats(i, 2.0, float(i)) for i in range(3)]
        table = cart.correlate_curvature(stats, self._recs(conf))
        assert math.isnan(table["grad_norm"]["confidence"])
        assert not math.isnan(table["min_dist"]["confidence"])

    def test_too_few(self):
        with pytest.raises(ValueError):
            cart.correlate_curvature([CurvatureStats(0, 1, 1)], self._recs([0.5]))

    def test_independent_columns(self):
        rng = np.random.default_rng(3)
        n = 1000
        recs = [CartographyRecord(i, float(rng.uniform()), float(rng.uniform(0, 0.5)), float(rng.uniform(0, 0.25)),
                                  0, "easy") for i in range(n)]
        stats = [CurvatureStats(i, float(rng.normal()), float(rng.normal())) for i in range(n)]
        table = cart.correlate_curvature(stats, recs)
        for row in table.values():
            for v in row.values():
                assert abs(v) < 0.1


def test_csv_writers(tmp_path):
    recs = [CartographyRecord(0, 0.5, 0.1, 0.25, 3, "ambiguous")]
    cart.write_cartography_csv(recs, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "id,confidence,variability,closeness,n_correct,category", "0,0.5,0.1,0.25,3,ambiguous"]
    cart.write_correlation_csv({"grad_norm": {"confidence": -0.5, "closeness": 0.2, "variability": math.nan}},
                               tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1] == "grad_norm,-0.5,0.2,nan"
