"""Training-dynamics statistics, cartography groups and local-curvature
measures of the representation space."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from agreelab import autodiff as ad
from agreelab import kernels
from agreelab.agreement import AgreementMatrix, pearson_r, write_csv
from agreelab.autodiff import Tape
from agreelab.training import TrainingTrace

CATEGORIES = ("easy", "ambiguous", "hard")
ATTRIBUTES = ("confidence", "closeness", "variability")
STATISTICS = ("grad_norm", "min_dist")


@dataclass(frozen=True)
class CartographyRecord:
    id: int
    confidence: float
    variability: float
    closeness: float
    n_correct: int
    category: str


@dataclass(frozen=True)
class CurvatureStats:
    id: int
    grad_norm: float
    min_dist: float


def categorize(n_correct: int, epochs: int = 5) -> str:
    """Group an instance by how often it was classified correctly.

    Always right is easy, never right is hard, and a correct share in
    [0.4, 0.6] (2 or 3 of 5) is ambiguous; everything else is uncategorized.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not 0 <= n_correct <= epochs:
        raise ValueError(f"n_correct={n_correct} outside [0, {epochs}]")
    if n_correct == epochs:
        return "easy"
    if n_correct == 0:
        return "hard"
    if 2 * epochs <= 5 * n_correct <= 3 * epochs:  # 0.4 <= share <= 0.6, in integers
        return "ambiguous"
    return "uncategorized"


def record_from(instance_id: int, probs: Sequence[float], correct: Sequence[bool],
                per_epoch_closeness: bool = False) -> CartographyRecord:
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError(f"instance {instance_id} has no epochs")
    if len(correct) != p.size:
        raise ValueError(f"instance {instance_id}: {p.size} probabilities but {len(correct)} flags")
    conf = float(p.mean())
    close = float(np.mean(p * (1 - p))) if per_epoch_closeness else conf * (1 - conf)
    n_correct = int(sum(bool(c) for c in correct))
    # shifted so identical probabilities give exactly zero spread
    spread = float((p - p[0]).std())
    return CartographyRecord(instance_id, conf, spread, close, n_correct, categorize(n_correct, p.size))


def cartography_stats(trace: TrainingTrace, per_epoch_closeness: bool = False) -> list[CartographyRecord]:
    """Confidence, variability (population std) and closeness per instance.

    Closeness is p(1 - p) of the mean probability by default; with
    ``per_epoch_closeness`` it is the mean of the per-epoch p(1 - p).
    """
    if not trace.dynamics:
        raise ValueError("empty training trace")
    return [
        record_from(d.id, d.probs, d.correct, per_epoch_closeness)
        for d in (trace.dynamics[i] for i in sorted(trace.dynamics))
    ]


def group_agreement(
    matrix: AgreementMatrix | Mapping[int, float],
    records: Iterable[CartographyRecord],
    categories: Sequence[str] = CATEGORIES,
) -> dict[str, float | None]:
    """Mean Pearson agreement per category; ``None`` for empty categories.

    ``matrix`` may also be a precomputed map of instance id to its mean
    pairwise score.
    """
    per_inst = matrix.instance_means("pearson") if isinstance(matrix, AgreementMatrix) else dict(matrix)
    by_cat: dict[str, list[float]] = {c: [] for c in categories}
    for rec in records:
        if rec.category in by_cat and rec.id in per_inst and not math.isnan(per_inst[rec.id]):
            by_cat[rec.category].append(per_inst[rec.id])
    return {c: (float(np.mean(v)) if v else None) for c, v in by_cat.items()}


# ---------------------------------------------------------------------------
# local curvature


def representation_grad_norm(model, tokens: Sequence[int], exact_jacobian: bool = False) -> float:
    """Frobenius norm of d(pooled representation)/dE.

    By default the pooled vector is reduced to the scalar sum of its
    components (one backward pass). ``exact_jacobian`` runs one pass per
    component and returns the norm of the full Jacobian.
    """
    E = model.embed(tokens)
    tape = Tape()
    leaf = tape.leaf(E)
    h = model.pooled(tape, leaf)
    if not exact_jacobian:
        g = ad.backward(tape, ad.sum(h))[leaf.id]
        return float(np.sqrt(np.sum(g * g)))
    total = 0.0
    for j in range(h.shape[-1]):
        g = ad.backward(tape, ad.index_select(h, [j]))[leaf.id]
        total += float(np.sum(g * g))
    return math.sqrt(total)


def pooled_representation(model, tokens: Sequence[int]) -> np.ndarray:
    tape = Tape()
    return model.pooled(tape, tape.leaf(model.embed(tokens))).value.copy()


def min_distance(representations: Mapping[int, np.ndarray]) -> dict[int, float]:
    """Euclidean distance from each representation to its nearest other one."""
    ids = list(representations)
    if len(ids) < 2:
        raise ValueError("min_distance needs at least two instances")
    X = np.stack([np.asarray(representations[i], dtype=np.float64).ravel() for i in ids])
    return dict(zip(ids, kernels.nearest_distances(X).tolist()))


def curvature_stats(model, instances) -> list[CurvatureStats]:
    reps = {inst.id: pooled_representation(model, inst.tokens) for inst in instances}
    dist = min_distance(reps)
    return [CurvatureStats(inst.id, representation_grad_norm(model, inst.tokens), dist[inst.id]) for inst in instances]


def correlate_curvature(
    stats: Iterable[CurvatureStats], records: Iterable[CartographyRecord]
) -> dict[str, dict[str, float]]:
    """Pearson r of each curvature statistic with each cartography attribute,
    joined on instance id. Constant columns give NaN."""
    rec_by_id = {r.id: r for r in records}
    joined = [(s, rec_by_id[s.id]) for s in stats if s.id in rec_by_id]
    if len(joined) < 3:
        raise ValueError(f"need at least 3 joined instances, got {len(joined)}")
    table = {}
    for stat in STATISTICS:
        x = [getattr(s, stat) for s, _ in joined]
        table[stat] = {attr: pearson_r(x, [getattr(r, attr) for _, r in joined]) for attr in ATTRIBUTES}
    return table


# ---------------------------------------------------------------------------
# CSV output


def write_cartography_csv(records: Iterable[CartographyRecord], path) -> None:
    write_csv(path, ("id", "confidence", "variability", "closeness", "n_correct", "category"),
              ((r.id, r.confidence, r.variability, r.closeness, r.n_correct, r.category) for r in records))


def write_curvature_csv(stats: Iterable[CurvatureStats], path) -> None:
    write_csv(path, ("id", "grad_norm", "min_dist"), ((s.id, s.grad_norm, s.min_dist) for s in stats))


def write_correlation_csv(table: Mapping[str, Mapping[str, float]], path) -> None:
    write_csv(path, ("statistic",) + ATTRIBUTES,
              ((stat,) + tuple(table[stat][a] for a in ATTRIBUTES) for stat in table))
