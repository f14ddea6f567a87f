"""Cross-entropy training with conicity / tying regularizers and dynamics capture."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from agreelab import autodiff as ad
from agreelab.autodiff import Tape, Var
from agreelab.data import Instance
from agreelab.model import Classifier, ForwardTrace, ModelState

CONICITY_GRID = (0.1, 0.3, 0.5, 1.0, 5.0, 10.0)
TYING_GRID = (0.1, 0.3, 0.5, 1.0, 5.0, 10.0, 20.0)
F1_TOLERANCE = 0.03


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# regularizers (plain numpy versions; the tape versions are below)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ad.NORM_EPS or nb < ad.NORM_EPS:
        return 0.0
    return float(a @ b / (na * nb))


def atm(h_i, H) -> float:
    """Alignment to mean: cosine between one hidden state and the mean state."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    h_i = np.asarray(h_i, dtype=np.float64)
    if H.shape[0] == 0 or H.size == 0:
        raise ValueError("atm needs at least one hidden state")
    if not np.any(np.all(H == h_i, axis=1)):
        raise ValueError("h_i must be one of the rows of H")
    return _cos(h_i, H.mean(axis=0))


def conicity(H) -> float:
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[0] == 0 or H.size == 0:
        raise ValueError("conicity needs at least one hidden state")
    m = H.mean(axis=0)
    return float(np.mean([_cos(h, m) for h in H]))


def tying_penalty(H, E) -> float:
    H, E = np.asarray(H, dtype=np.float64), np.asarray(E, dtype=np.float64)
    if H.shape != E.shape:
        raise ValueError(f"tying: shapes differ {H.shape} vs {E.shape}")
    return float(np.sum((H - E) ** 2) / H.shape[0])


def conicity_term(H: Var) -> Var:
    return ad.mean(ad.cosine_similarity(H, ad.mean(H, axis=0)))


def tying_term(H: Var, E: Var) -> Var:
    return ad.mean(ad.l2_norm_sq(H - E, axis=1))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    lambda_con: float = 0.0
    lambda_tying: float = 0.0
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_con < 0 or self.lambda_tying < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.lambda_con and self.lambda_tying:
            raise ValueError("use at most one regularizer per run")

    @property
    def variant(self) -> str:
        if self.lambda_con:
            return "conicity"
        if self.lambda_tying:
            return "tying"
        return "base"


def loss(trace: ForwardTrace, label: int, config: TrainConfig) -> Var:
    """Cross-entropy plus the weighted regularizer; zero weights add no term."""
    total = -ad.sum(ad.index_select(trace.log_probs, [label]))
    if config.lambda_con:
        total = total + conicity_term(trace.H) * config.lambda_con
    if config.lambda_tying:
        total = total + tying_term(trace.H, trace.E) * config.lambda_tying
    return total


class Adam:
    def __init__(self, size: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1 - self.beta2**self.t) / (1 - self.beta1**self.t)
        params -= lr_t * self.m / (np.sqrt(self.v) + self.eps)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> float:
    """Scale ``grad`` in place so its norm is at most ``max_norm``; returns the new norm."""
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        grad *= max_norm / norm
        norm = float(np.sqrt(grad @ grad))
    return norm


@dataclass
class InstanceDynamics:
    id: int
    probs: list[float] = field(default_factory=list)
    correct: list[bool] = field(default_factory=list)


@dataclass
class TrainingTrace:
    dynamics: dict[int, InstanceDynamics]
    epochs: list[dict] = field(default_factory=list)

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for iid in sorted(self.dynamics):
                d = self.dynamics[iid]
                fh.write(json.dumps({"id": d.id, "probs": d.probs, "correct": d.correct}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "TrainingTrace":
        dyn = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                dyn[rec["id"]] = InstanceDynamics(rec["id"], rec["probs"], rec["correct"])
        return cls(dyn)


def macro_f1(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = 2) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("macro_f1 of an empty split")
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def _predict_all(model: Classifier, split: Iterable[Instance]):
    preds, labels, p_true = [], [], []
    for inst in split:
        probs = model.forward(inst.tokens).probs
        preds.append(int(np.argmax(probs)))
        labels.append(inst.label)
        p_true.append(float(probs[inst.label]))
    return np.array(preds), np.array(labels), np.array(p_true)


def evaluate_f1(state: ModelState, split: Sequence[Instance]) -> float:
    if not split:
        raise ValueError("evaluate_f1 of an empty split")
    preds, labels, _ = _predict_all(Classifier(state), split)
    return macro_f1(labels, preds)


def _flat_grad(state: ModelState, trace: ForwardTrace, grads: dict) -> np.ndarray:
    flat = np.empty_like(state.flat)
    for name, var in trace.params.items():
        flat[state.slices[name]] = grads[var.id].ravel()
    return flat


def train(
    state: ModelState,
    train_split: Sequence[Instance],
    config: TrainConfig,
    valid_split: Sequence[Instance] = (),
    on_step: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelState, TrainingTrace]:
    """Per-instance Adam training; returns the trained copy and its dynamics.

    ``on_step(step, loss, clipped_norm)`` is called after every update.
    """
    if not train_split:
        raise ValueError("empty training split")
    state = state.copy()
    model = Classifier(state)
    opt = Adam(state.flat.size, config.lr, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    trace = TrainingTrace({inst.id: InstanceDynamics(inst.id) for inst in train_split})
    step = 0
    for epoch in range(config.epochs):
        losses = []
        max_norm = 0.0
        order = rng.permutation(len(train_split))
        for start in range(0, len(order), config.batch_size):
            grad = np.zeros_like(state.flat)
            batch = order[start:start + config.batch_size]
            batch_loss = 0.0
            for k in batch:
                inst = train_split[k]
                tape = Tape()
                fwd = model.forward(inst.tokens, tape)
                L = loss(fwd, inst.label, config)
                value = float(L.value)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, instance {inst.id}")
                grad += _flat_grad(state, fwd, ad.backward(tape, L))
                batch_loss += value
                losses.append(value)
            grad /= len(batch)
            norm = clip_by_global_norm(grad, config.clip_norm)
            opt.step(state.flat, grad)
            max_norm = max(max_norm, norm)
            step += 1
            if on_step is not None:
                on_step(step, batch_loss / len(batch), norm)
        preds, labels, p_true = _predict_all(model, train_split)
        for inst, p, pred in zip(train_split, p_true, preds):
            dyn = trace.dynamics[inst.id]
            dyn.probs.append(float(p))
            dyn.correct.append(bool(pred == inst.label))
        record = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)),
            "train_f1": macro_f1(labels, preds),
            "max_clipped_norm": max_norm,
        }
        if valid_split:
            vp, vl, vprob = _predict_all(model, valid_split)
            record["valid_loss"] = float(-np.mean(np.log(np.maximum(vprob, 1e-300))))
            record["valid_f1"] = macro_f1(vl, vp)
        trace.epochs.append(record)
    return state, trace


@dataclass(frozen=True)
class Selection:
    strength: float
    within_tolerance: bool
    valid_f1: dict[float, float]


def select_regularizer_strength(
    candidates: Sequence[float],
    base_valid_f1: float,
    candidate_valid_f1: dict[float, float] | Callable[[float], float],
    tolerance: float = F1_TOLERANCE,
) -> Selection:
    """Largest strength whose validation F1 is within ``tolerance`` of the base.

    ``candidate_valid_f1`` maps each strength to its validation F1, or is a
    callable that trains and evaluates a model for a given strength. If no
    candidate qualifies the smallest one is returned with
    ``within_tolerance=False``.
    """
    if not candidates:
        raise ValueError("no regularizer strengths to choose from")
    cands = sorted(candidates)
    lookup = candidate_valid_f1 if callable(candidate_valid_f1) else candidate_valid_f1.__getitem__
    scores = {lam: float(lookup(lam)) for lam in cands}
    ok = [lam for lam in cands if scores[lam] >= base_valid_f1 - tolerance - 1e-12]
    if ok:
        return Selection(ok[-1], True, scores)
    warnings.warn(
        f"no strength within {tolerance:.2f} F1 of the base model ({base_valid_f1:.4f}); using {cands[0]}",
        stacklevel=2,
    )
    return Selection(cands[0], False, scores)
