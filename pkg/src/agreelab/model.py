"""Attention-pooled Elman RNN classifier built on the autodiff tape.

Tokens are embedded (E), contextualized by a tanh Elman recurrence (H),
scored with additive attention u_t = v . tanh(W_a h_t), pooled to
h = sum_t alpha_t h_t and decoded to two logits.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from agreelab import autodiff as ad
from agreelab.autodiff import Tape, Var

CHECKPOINT_MAGIC = "agreelab-checkpoint/1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 32
    attn_dim: int = 0  # 0 means hidden_dim
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim != self.hidden_dim:
            raise ModelError(f"embed_dim ({self.embed_dim}) must equal hidden_dim ({self.hidden_dim}) for tying")
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.n_classes) < 1 or self.attn_dim < 0:
            raise ModelError("all dimensions must be positive")

    @property
    def attention_dim(self) -> int:
        return self.attn_dim or self.hidden_dim

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, a = self.hidden_dim, self.attention_dim
        return {
            "embedding": (self.vocab_size, self.embed_dim),
            "W_x": (self.embed_dim, d),
            "W_h": (d, d),
            "b_h": (d,),
            "W_a": (d, a),
            "v_a": (a,),
            "W_d": (d, self.n_classes),
            "b_d": (self.n_classes,),
        }


class ModelState:
    """All parameters live in one flat buffer; ``params`` holds named views."""

    def __init__(self, config: ClassifierConfig, flat: np.ndarray | None = None):
        self.config = config
        shapes = config.param_shapes()
        size = sum(int(np.prod(s)) for s in shapes.values())
        self.flat = np.zeros(size) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise ModelError(f"flat buffer has {self.flat.size} entries, expected {size}")
        self.params: dict[str, np.ndarray] = {}
        self.slices: dict[str, slice] = {}
        off = 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            self.params[name] = self.flat[off:off + n].reshape(shape)
            off += n

    def copy(self) -> "ModelState":
        return ModelState(self.config, self.flat.copy())

    def save(self, path) -> None:
        payload = {
            "magic": CHECKPOINT_MAGIC,
            "config": asdict(self.config),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "ModelState":
        payload = json.loads(Path(path).read_text())
        if payload.get("magic") != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not an agreelab checkpoint")
        state = cls(ClassifierConfig(**payload["config"]))
        for name, rec in payload["params"].items():
            if tuple(rec["shape"]) != state.params[name].shape:
                raise ModelError(f"{path}: parameter {name} has shape {rec['shape']}")
            state.params[name][...] = np.asarray(rec["data"]).reshape(rec["shape"])
        return state


def init(config: ClassifierConfig) -> ModelState:
    """Embeddings ~ U(-0.1, 0.1), dense weights Xavier-uniform, biases zero."""
    rng = np.random.default_rng(config.seed)
    state = ModelState(config)
    for name, arr in state.params.items():
        if name == "embedding":
            arr[...] = rng.uniform(-0.1, 0.1, arr.shape)
        elif name.startswith("b_"):
            continue
        else:
            fan_in = arr.shape[0]
            fan_out = arr.shape[1] if arr.ndim == 2 else 1
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arr[...] = rng.uniform(-bound, bound, arr.shape)
    return state


@dataclass
class ForwardTrace:
    tape: Tape
    E: Var
    H: Var
    alpha: Var
    h: Var
    logits: Var
    log_probs: Var
    params: dict[str, Var]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.value)


def elman_unfused(X: Var, Wx: Var, Wh: Var, b: Var) -> Var:
    """The recurrence spelled out with primitive ops (reference for the fused op)."""
    T = X.shape[0]
    xw = X @ Wx
    h_prev = None
    rows = []
    for t in range(T):
        z = ad.index_select(xw, [t]) + b
        if h_prev is not None:
            z = z + h_prev @ Wh
        h_prev = ad.tanh(z)
        rows.append(h_prev)
    return ad.concat(rows, axis=0)


class Classifier:
    """Tape-level model API shared with the probe models used in tests."""

    def __init__(self, state: ModelState, fused: bool = True):
        self.state = state
        self.fused = fused

    @property
    def config(self) -> ClassifierConfig:
        return self.state.config

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v) for k, v in self.state.params.items()}

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        self._check_tokens(tokens)
        return self.state.params["embedding"][np.asarray(tokens, dtype=np.intp)]

    def pad_embedding(self) -> np.ndarray:
        return self.state.params["embedding"][0].copy()

    def _check_tokens(self, tokens):
        if len(tokens) == 0:
            raise ModelError("empty token sequence")
        if max(tokens) >= self.config.vocab_size or min(tokens) < 0:
            raise ModelError(f"token id out of range for vocab of size {self.config.vocab_size}")

    def trace(self, tape: Tape, E: Var, params: dict[str, Var] | None = None) -> ForwardTrace:
        P = params if params is not None else self.bind(tape)
        if self.fused:
            H = ad.elman(E, P["W_x"], P["W_h"], P["b_h"])
        else:
            H = elman_unfused(E, P["W_x"], P["W_h"], P["b_h"])
        scores = ad.tanh(H @ P["W_a"]) @ P["v_a"]
        alpha = ad.softmax(scores, axis=0)
        h = alpha @ H
        logits = h @ P["W_d"] + P["b_d"]
        return ForwardTrace(tape, E, H, alpha, h, logits, ad.log_softmax(logits), P)

    def forward(self, tokens: Sequence[int], tape: Tape | None = None) -> ForwardTrace:
        """Full forward from token ids; gradients reach the embedding matrix."""
        self._check_tokens(tokens)
        tape = Tape() if tape is None else tape
        P = self.bind(tape)
        E = ad.index_select(P["embedding"], np.asarray(tokens, dtype=np.intp))
        return self.trace(tape, E, P)

    def pooled(self, tape: Tape, E: Var) -> Var:
        return self.trace(tape, E).h

    def logits(self, tape: Tape, E: Var) -> Var:
        return self.trace(tape, E).logits


def predict(state_or_model, tokens: Sequence[int], label: int | None = None) -> tuple[int, float]:
    """Predicted class (ties go to class 0) and the probability of ``label``.

    Without ``label`` the second value is the predicted class's probability.
    """
    model = state_or_model if isinstance(state_or_model, Classifier) else Classifier(state_or_model)
    probs = model.forward(tokens).probs
    cls = int(np.argmax(probs))
    return cls, float(probs[cls if label is None else label])


class LinearProbe:
    """Bag-of-embeddings probe: h = mean(E), logits = h @ W + b.

    Linear in E, so attribution methods have closed forms on it.
    """

    def __init__(self, embedding: np.ndarray, W: np.ndarray, b: np.ndarray):
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def embed(self, tokens):
        return self.embedding[np.asarray(tokens, dtype=np.intp)]

    def pad_embedding(self):
        return self.embedding[0].copy()

    def pooled(self, tape: Tape, E: Var) -> Var:
        return ad.mean(E, axis=0)

    def logits(self, tape: Tape, E: Var) -> Var:
        return self.pooled(tape, E) @ tape.leaf(self.W) + tape.leaf(self.b)


class TanhProbe:
    """logits = tanh(E @ W1) summed over tokens, then @ W2 + b.

    Only linear ops and an elementwise nonlinearity, so DeepLIFT is exact.
    """

    def __init__(self, embedding, W1, W2, b):
        self.embedding = np.asarray(embedding, dtype=np.float64)
        self.W1, self.W2, self.b = (np.asarray(x, dtype=np.float64) for x in (W1, W2, b))

    def embed(self, tokens):
        return self.embedding[np.asarray(tokens, dtype=np.intp)]

    def pad_embedding(self):
        return self.embedding[0].copy()

    def pooled(self, tape: Tape, E: Var) -> Var:
        return ad.sum(ad.tanh(E @ tape.leaf(self.W1)), axis=0)

    def logits(self, tape: Tape, E: Var) -> Var:
        return self.pooled(tape, E) @ tape.leaf(self.W2) + tape.leaf(self.b)
