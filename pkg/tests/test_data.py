import json

import pytest

from agreelab import data
from agreelab.data import DataError, SynthConfig, Vocab


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert data.tokenize("Hello, WORLD!! it's 4ever") == ["hello", "world", "its", "4ever"]

    def test_drops_empty_words(self):
        assert data.tokenize("a -- b ... c") == ["a", "b", "c"]


class TestVocab:
    def test_build_order(self):
        v = Vocab.build([["b", "a", "b"], ["c", "a", "b"]])
        assert v.itos == ["<pad>", "<unk>", "b", "a", "c"]

    def test_unknown_maps_to_unk(self):
        v = Vocab.build([["x"]])
        assert v.encode(["x", "y"]) == (2, data.UNK_ID)

    def test_max_size(self):
        v = Vocab.build([["a", "b", "c"]], max_size=2)
        assert len(v) == 4

    def test_specials_required(self):
        with pytest.raises(DataError):
            Vocab(["a", "b"])


class TestPreprocess:
    def test_drops_short_and_truncates_long(self):
        raw = [("one two", 0), ("one two three", 1), (" ".join(["w"] * 250), 0)]
        insts, _ = data.preprocess(raw)
        assert [len(i.tokens) for i in insts] == [3, 200]
        assert [i.id for i in insts] == [0, 1]

    def test_all_dropped_is_error(self):
        with pytest.raises(DataError):
            data.preprocess([("a b", 0)])


class TestTsv:
    def _write(self, tmp_path, name, text):
        p = tmp_path / name
        p.write_bytes(text.encode("utf-8"))
        return p

    def test_load_with_crlf(self, tmp_path):
        tr = self._write(tmp_path, "tr.tsv", "1\tgood film really\r\n0\tbad film really\r\n")
        va = self._write(tmp_path, "va.tsv", "1\tgood good unseen\n")
        te = self._write(tmp_path, "te.tsv", "0\tbad bad film\n")
        splits = data.load_tsv(tr, va, te)
        assert [i.id for i in splits.all()] == [0, 1, 2, 3]
        assert splits.validation[0].tokens[-1] == data.UNK_ID
        assert splits.test[0].label == 0

    def test_bad_label_reports_line(self, tmp_path):
        tr = self._write(tmp_path, "tr.tsv", "1\tgood film really\n2\tbad film really\n")
        with pytest.raises(DataError, match=":2:"):
            data.load_tsv(tr, tr, tr)

    def test_missing_delimiter(self, tmp_path):
        tr = self._write(tmp_path, "tr.tsv", "no tab here\n")
        with pytest.raises(DataError):
            data.load_tsv(tr, tr, tr)

    def test_dump_jsonl(self, tmp_path):
        insts, vocab = data.preprocess([("a b c", 1)])
        path = tmp_path / "d.jsonl"
        data.dump_jsonl(insts, vocab, path)
        assert json.loads(path.read_text()) == {"id": 0, "label": 1, "tokens": ["a", "b", "c"]}


class TestSynthetic:
    def test_counts_and_determinism(self):
        cfg = SynthConfig(n_per_category=(50, 20, 10), seed=3)
        s1, t1 = data.synth_generate(cfg)
        s2, t2 = data.synth_generate(cfg)
        assert len(s1.train) == 80 and len(s1.validation) == 16 and len(s1.test) == 16
        assert [i.tokens for i in s1.all()] == [i.tokens for i in s2.all()]
        assert t1 == t2
        assert sorted(t1.values()).count("hard") == 10 + 2 + 2

    def test_easy_instances_follow_label(self):
        cfg = SynthConfig(n_per_category=(40, 0, 0))
        splits, truth = data.synth_generate(cfg)
        pools = data.synth_pools(cfg)
        for inst in splits.train:
            words = splits.vocab.decode(inst.tokens)
            own = pools["class1" if inst.label else "class0"]
            other = pools["class0" if inst.label else "class1"]
            assert any(w in own for w in words) and not any(w in other for w in words)

    def test_hard_instances_contradict_label(self):
        cfg = SynthConfig(n_per_category=(0, 0, 30))
        splits, _ = data.synth_generate(cfg)
        pools = data.synth_pools(cfg)
        for inst in splits.train:
            words = splits.vocab.decode(inst.tokens)
            assert not any(w in pools["class1" if inst.label else "class0"] for w in words)

    def test_lengths_within_range(self):
        cfg = SynthConfig(n_per_category=(20, 20, 20), seq_len_range=(5, 9))
        splits, _ = data.synth_generate(cfg)
        assert all(5 <= len(i.tokens) <= 9 for i in splits.all())

    @pytest.mark.parametrize("kw", [{"ambiguity_mix": 1.5}, {"vocab_size": 5}, {"seq_len_range": (1, 4)},
                                    {"n_per_category": (-1, 0, 0)}])
    def test_invalid_config(self, kw):
        with pytest.raises(DataError):
            SynthConfig(**kw)

    def test_split_lookup(self):
        splits, _ = data.synth_generate(SynthConfig(n_per_category=(5, 5, 5)))
        assert splits.split("valid") is splits.validation
        with pytest.raises(DataError):
            splits.split("dev")
