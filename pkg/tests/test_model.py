import numpy as np
import pytest
from numpy.testing import assert_allclose

from agreelab import autodiff as ad
from agreelab import model
from agreelab.autodiff import Tape
from agreelab.model import Classifier, ClassifierConfig, ModelError, ModelState

from oracles import central_diff


@pytest.fixture
def state():
    return model.init(ClassifierConfig(vocab_size=30, embed_dim=6, hidden_dim=6, seed=2))


class TestInit:
    def test_deterministic(self):
        cfg = ClassifierConfig(vocab_size=10, embed_dim=4, hidden_dim=4, seed=7)
        assert_allclose(model.init(cfg).flat, model.init(cfg).flat)

    def test_ranges(self, state):
        p = state.params
        assert np.all(np.abs(p["embedding"]) <= 0.1)
        assert np.all(p["b_h"] == 0) and np.all(p["b_d"] == 0)
        bound = np.sqrt(6 / (6 + 6))
        assert np.all(np.abs(p["W_h"]) <= bound)

    def test_dims_must_match(self):
        with pytest.raises(ModelError):
            ClassifierConfig(vocab_size=10, embed_dim=4, hidden_dim=5)

    def test_views_share_buffer(self, state):
        state.params["b_d"][0] = 3.0
        assert state.flat[state.slices["b_d"]][0] == 3.0


class TestForward:
    def test_shapes_and_probabilities(self, state):
        tr = Classifier(state).forward([3, 4, 5, 6])
        assert tr.E.shape == (4, 6) and tr.H.shape == (4, 6) and tr.alpha.shape == (4,)
        assert tr.h.shape == (6,) and tr.logits.shape == (2,)
        assert tr.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert tr.alpha.value.sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_token_attention(self, state):
        assert_allclose(Classifier(state).forward([5]).alpha.value, [1.0])

    def test_pooled_is_attention_weighted_sum(self, state):
        tr = Classifier(state).forward([1, 2, 3])
        assert_allclose(tr.h.value, tr.alpha.value @ tr.H.value)

    def test_fused_equals_unfused(self, state):
        a = Classifier(state, fused=True).forward([4, 9, 2, 7])
        b = Classifier(state, fused=False).forward([4, 9, 2, 7])
        assert_allclose(a.log_probs.value, b.log_probs.value, atol=1e-14)

    def test_bad_tokens(self, state):
        with pytest.raises(ModelError):
            Classifier(state).forward([])
        with pytest.raises(ModelError):
            Classifier(state).forward([30])

    def test_gradient_wrt_embeddings(self, state):
        m = Classifier(state)
        E0 = m.embed([3, 8, 1])

        def f(E):
            tape = Tape()
            return float(m.logits(tape, tape.leaf(E)).value[1])

        tape = Tape()
        leaf = tape.leaf(E0)
        g = ad.backward(tape, ad.index_select(m.logits(tape, leaf), [1]))[leaf.id]
        assert_allclose(g, central_diff(f, [E0])[0], atol=1e-8)

    def test_predict(self, state):
        cls, p = model.predict(state, [1, 2, 3])
        probs = Classifier(state).forward([1, 2, 3]).probs
        assert cls == int(np.argmax(probs)) and p == pytest.approx(probs.max())
        _, p1 = model.predict(state, [1, 2, 3], label=1)
        assert p1 == pytest.approx(probs[1])

    def test_zero_logits_give_half(self):
        cfg = ClassifierConfig(vocab_size=5, embed_dim=3, hidden_dim=3)
        st = ModelState(cfg)
        cls, p = model.predict(st, [1, 2, 3], label=1)
        assert cls == 0 and p == pytest.approx(0.5)


class TestCheckpoint:
    def test_round_trip(self, state, tmp_path):
        path = tmp_path / "ck.json"
        state.save(path)
        loaded = ModelState.load(path)
        assert loaded.config == state.config
        assert_allclose(loaded.flat, state.flat, rtol=0, atol=0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"magic": "nope"}')
        with pytest.raises(ModelError):
            ModelState.load(path)


class TestProbes:
    def test_linear_probe_logits(self):
        rng = np.random.default_rng(0)
        emb, W, b = rng.normal(size=(6, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        probe = model.LinearProbe(emb, W, b)
        tape = Tape()
        out = probe.logits(tape, tape.leaf(probe.embed([1, 2])))
        assert_allclose(out.value, emb[[1, 2]].mean(axis=0) @ W + b)
