"""Tokenization, vocabulary, TSV loading and a synthetic corpus generator."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIN_TOKENS = 3
MAX_TOKENS = 200
MAX_VOCAB = 20_000
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


class DataError(ValueError):
    """Raised for malformed or empty input data."""


@dataclass(frozen=True)
class Instance:
    id: int
    tokens: tuple[int, ...]
    label: int
    raw_text: str


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.itos[:2] != [PAD, UNK]:
            raise DataError("vocab must start with the pad and unk specials")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate entries in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.stoi.get(w, UNK_ID) for w in words)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def build(cls, corpus: Iterable[Sequence[str]], max_size: int = MAX_VOCAB) -> "Vocab":
        """Most frequent words first, ties broken lexicographically."""
        counts = Counter(w for words in corpus for w in words)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([PAD, UNK] + [w for w, _ in ranked[:max_size]])


@dataclass
class SplitSet:
    train: list[Instance]
    validation: list[Instance]
    test: list[Instance]
    vocab: Vocab

    def __post_init__(self):
        ids = [inst.id for inst in self.all()]
        if len(ids) != len(set(ids)):
            raise DataError("instance ids must be unique across splits")

    def all(self) -> list[Instance]:
        return self.train + self.validation + self.test

    def split(self, name: str) -> list[Instance]:
        aliases = {"train": self.train, "valid": self.validation, "validation": self.validation, "test": self.test}
        try:
            return aliases[name]
        except KeyError:
            raise DataError(f"unknown split {name!r}") from None


def tokenize(text: str) -> list[str]:
    """Lowercase, strip non-alphanumerics from each word, drop empties."""
    words = (_NON_ALNUM.sub("", w) for w in text.lower().split())
    return [w for w in words if w]


def _clean(raw: Sequence[tuple[str, int]]) -> list[tuple[list[str], int, str]]:
    kept = []
    for text, label in raw:
        words = tokenize(text)
        if len(words) < MIN_TOKENS:
            continue
        kept.append((words[:MAX_TOKENS], int(label), text))
    return kept


def preprocess(
    raw: Sequence[tuple[str, int]],
    vocab: Vocab | None = None,
    start_id: int = 0,
) -> tuple[list[Instance], Vocab]:
    """Turn (text, label) pairs into instances.

    Sequences shorter than three tokens are dropped and longer ones truncated
    to 200. When ``vocab`` is None it is built from these texts.
    """
    kept = _clean(raw)
    if not kept:
        raise DataError("no instances left after preprocessing")
    if vocab is None:
        vocab = Vocab.build(words for words, _, _ in kept)
    instances = [
        Instance(start_id + k, vocab.encode(words), label, text) for k, (words, label, text) in enumerate(kept)
    ]
    return instances, vocab


def _read_tsv(path: Path, delimiter: str) -> list[tuple[str, int]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        data = fh.read().replace("\r\n", "\n").replace("\r", "\n")
    for lineno, line in enumerate(data.split("\n"), start=1):
        if not line.strip():
            continue
        if delimiter not in line:
            raise DataError(f"{path}:{lineno}: expected 'label{delimiter!r}text'")
        label, text = line.split(delimiter, 1)
        if label.strip() not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label.strip()!r}")
        rows.append((text, int(label)))
    return rows


def load_tsv(train_path, valid_path, test_path, delimiter: str = "\t") -> SplitSet:
    """Load three ``label<TAB>text`` files; the vocab comes from train only."""
    train, vocab = preprocess(_read_tsv(Path(train_path), delimiter))
    valid, _ = preprocess(_read_tsv(Path(valid_path), delimiter), vocab, start_id=len(train))
    test, _ = preprocess(_read_tsv(Path(test_path), delimiter), vocab, start_id=len(train) + len(valid))
    return SplitSet(train, valid, test, vocab)


def dump_jsonl(instances: Iterable[Instance], vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            rec = {"id": inst.id, "label": inst.label, "tokens": vocab.decode(inst.tokens)}
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus

CATEGORIES = ("easy", "ambiguous", "hard")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic corpus.

    ``n_per_category`` gives train-split counts for easy / ambiguous / hard
    instances; validation and test use the same mix scaled by
    ``eval_fraction``. ``indicative_rate`` is the share of tokens drawn from a
    class pool, the rest being neutral noise.
    """

    n_per_category: tuple[int, int, int] = (1300, 500, 200)
    eval_fraction: float = 0.2
    vocab_size: int = 200
    seq_len_range: tuple[int, int] = (8, 24)
    ambiguity_mix: float = 0.5
    ambiguity_noise: float = 0.1
    indicative_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ambiguity_mix <= 1.0:
            raise DataError(f"ambiguity_mix must be in [0, 1], got {self.ambiguity_mix}")
        if self.vocab_size < 20:
            raise DataError("vocab_size must be at least 20")
        lo, hi = self.seq_len_range
        if not MIN_TOKENS <= lo <= hi <= MAX_TOKENS:
            raise DataError(f"seq_len_range must lie within [{MIN_TOKENS}, {MAX_TOKENS}]")
        if any(n < 0 for n in self.n_per_category):
            raise DataError("category counts must be non-negative")


def synth_pools(cfg: SynthConfig) -> dict[str, list[str]]:
    """Word pools: class-0 indicative, class-1 indicative, neutral."""
    k = max(5, cfg.vocab_size // 10)
    return {
        "class0": [f"neg{i}" for i in range(k)],
        "class1": [f"pos{i}" for i in range(k)],
        "neutral": [f"w{i}" for i in range(cfg.vocab_size - 2 * k)],
    }


def _synth_instance(rng: np.random.Generator, cfg: SynthConfig, pools, category: str):
    label = int(rng.integers(2))
    length = int(rng.integers(cfg.seq_len_range[0], cfg.seq_len_range[1] + 1))
    n_ind = max(1, int(round(cfg.indicative_rate * length)))
    if category == "easy":
        p_class1 = float(label)
    elif category == "hard":
        p_class1 = float(1 - label)
    else:
        p_class1 = float(np.clip(cfg.ambiguity_mix + rng.uniform(-cfg.ambiguity_noise, cfg.ambiguity_noise), 0, 1))
    from_class1 = rng.random(n_ind) < p_class1
    words = [
        pools["class1" if c1 else "class0"][int(rng.integers(len(pools["class1"])))] for c1 in from_class1
    ]
    words += [pools["neutral"][int(j)] for j in rng.integers(len(pools["neutral"]), size=length - n_ind)]
    order = rng.permutation(length)
    return " ".join(words[i] for i in order), label


def _synth_split(rng, cfg, pools, counts) -> list[tuple[str, int, str]]:
    cats = [c for c, n in zip(CATEGORIES, counts) for _ in range(n)]
    rng.shuffle(cats)
    return [(*_synth_instance(rng, cfg, pools, c), c) for c in cats]


def synth_generate(cfg: SynthConfig = SynthConfig()) -> tuple[SplitSet, dict[int, str]]:
    """Generate a deterministic SplitSet plus each instance's ground-truth category."""
    rng = np.random.default_rng(cfg.seed)
    pools = synth_pools(cfg)
    eval_counts = [int(round(n * cfg.eval_fraction)) for n in cfg.n_per_category]
    raw_train = _synth_split(rng, cfg, pools, cfg.n_per_category)
    raw_valid = _synth_split(rng, cfg, pools, eval_counts)
    raw_test = _synth_split(rng, cfg, pools, eval_counts)
    vocab = Vocab([PAD, UNK] + pools["class0"] + pools["class1"] + pools["neutral"])
    splits, truth, next_id = [], {}, 0
    for raw in (raw_train, raw_valid, raw_test):
        insts = []
        for text, label, cat in raw:
            insts.append(Instance(next_id, vocab.encode(tokenize(text)), label, text))
            truth[next_id] = cat
            next_id += 1
        splits.append(insts)
    return SplitSet(splits[0], splits[1], splits[2], vocab), truth
