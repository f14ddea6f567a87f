"""Agreement between saliency maps: Kendall tau-b, Pearson r, pairwise
method matrices and the significance tests used to compare model variants.

Undefined correlations (a constant input vector) are returned as NaN. They
are left out of every mean and counted separately.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from agreelab import kernels

METRICS = ("kendall", "pearson")
EXACT_MAX_N = 25


class CoverageError(ValueError):
    """Methods do not cover the same instances."""

    def __init__(self, missing: Sequence[tuple[str, int]]):
        self.missing = list(missing)
        shown = ", ".join(f"({m}, {i})" for m, i in self.missing[:10])
        more = f" and {len(self.missing) - 10} more" if len(self.missing) > 10 else ""
        super().__init__(f"missing (method, instance) pairs: {shown}{more}")


def _pair_inputs(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("correlation needs at least two entries")
    return a, b


def _constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def kendall_tau(a, b) -> float:
    """Kendall tau-b; NaN when either vector is constant."""
    a, b = _pair_inputs(a, b)
    if _constant(a) or _constant(b):
        return math.nan
    s, ties_a, ties_b, n0 = kernels.kendall_counts(a, b)
    return float(s / math.sqrt((n0 - ties_a) * (n0 - ties_b)))


def pearson_r(a, b) -> float:
    """Pearson correlation with population moments; NaN when either vector is constant."""
    a, b = _pair_inputs(a, b)
    if _constant(a) or _constant(b):
        return math.nan
    da, db = a - a.mean(), b - b.mean()
    # scale first so tiny or huge spreads neither underflow nor overflow
    da, db = da / np.max(np.abs(da)), db / np.max(np.abs(db))
    r = float(np.mean(da * db) / (np.sqrt(np.mean(da * da)) * np.sqrt(np.mean(db * db))))
    return min(1.0, max(-1.0, r))


_METRIC_FN = {"kendall": kendall_tau, "pearson": pearson_r}


# ---------------------------------------------------------------------------
# pairwise matrices


@dataclass(frozen=True)
class PairSummary:
    mean: float
    std: float
    n_instances: int
    n_undefined: int


def _summarize(values: Sequence[float]) -> PairSummary:
    arr = np.asarray(values, dtype=np.float64)
    ok = arr[~np.isnan(arr)]
    if ok.size == 0:
        return PairSummary(math.nan, math.nan, 0, int(arr.size))
    return PairSummary(float(ok.mean()), float(ok.std()), int(ok.size), int(arr.size - ok.size))


@dataclass
class AgreementMatrix:
    """Per-instance scores for every unordered method pair.

    ``scores[(a, b, id)]`` holds ``{"kendall": .., "pearson": ..}`` with
    ``a`` before ``b`` in ``methods`` order; :meth:`score` accepts either
    order.
    """

    methods: list[str]
    instance_ids: list[int]
    scores: dict[tuple[str, str, int], dict[str, float]] = field(default_factory=dict)

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return list(combinations(self.methods, 2))

    def score(self, a: str, b: str, instance_id: int, metric: str) -> float:
        if a == b:
            return 1.0
        key = (a, b, instance_id) if (a, b, instance_id) in self.scores else (b, a, instance_id)
        return self.scores[key][metric]

    def values(self, a: str, b: str, metric: str) -> list[float]:
        return [self.score(a, b, i, metric) for i in self.instance_ids]

    def pair_summary(self, a: str, b: str, metric: str) -> PairSummary:
        return _summarize(self.values(a, b, metric))

    def grand_mean(self, metric: str) -> float:
        """Mean over pairs of the per-pair instance means."""
        means = [self.pair_summary(a, b, metric).mean for a, b in self.pairs]
        means = [m for m in means if not math.isnan(m)]
        return float(np.mean(means)) if means else math.nan

    def instance_means(self, metric: str) -> dict[int, float]:
        """Per instance, the mean score over method pairs (NaN if all undefined)."""
        out = {}
        for iid in self.instance_ids:
            vals = [self.scores[(a, b, iid)][metric] for a, b in self.pairs]
            vals = [v for v in vals if not math.isnan(v)]
            out[iid] = float(np.mean(vals)) if vals else math.nan
        return out


def pairwise_agreement(maps: Mapping[str, Mapping[int, Sequence[float]]]) -> AgreementMatrix:
    """Score every unordered method pair on every shared instance.

    ``maps[method][instance_id]`` is that method's per-token score vector.
    All methods must cover the same instances.
    """
    methods = list(maps)
    if len(methods) < 2:
        raise ValueError("need at least two methods")
    all_ids = sorted(set().union(*(set(maps[m]) for m in methods)))
    missing = [(m, i) for m in methods for i in all_ids if i not in maps[m]]
    if missing:
        raise CoverageError(missing)
    matrix = AgreementMatrix(methods, all_ids)
    for a, b in matrix.pairs:
        for iid in all_ids:
            va, vb = maps[a][iid], maps[b][iid]
            matrix.scores[(a, b, iid)] = {m: _METRIC_FN[m](va, vb) for m in METRICS}
    return matrix


# ---------------------------------------------------------------------------
# significance


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    """P(W+ >= w_plus) under the null, by enumerating sign patterns."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:  # ranks are >= 1, so r >= 2
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    target = int(np.rint(2 * w_plus))
    return float(counts[target:].sum() / counts.sum())


def wilcoxon_one_sided(x, y) -> float:
    """One-sided signed-rank test of x > y; returns the p-value.

    Zero differences are dropped. Ties among |differences| get average
    ranks. With at most 25 non-zero differences the exact null distribution
    is used, otherwise the normal approximation with tie and continuity
    corrections. All-zero differences give NaN.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"paired samples differ in length: {x.size} vs {y.size}")
    d = x - y
    if np.any(np.isnan(d)):
        raise ValueError("paired samples contain NaN")
    d = d[d != 0]
    if d.size == 0:
        return math.nan
    if d.size < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {d.size}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    n = d.size
    if n <= EXACT_MAX_N:
        return _exact_upper_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def holm_bonferroni(pvalues: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for k, idx in enumerate(order):
        running = max(running, min(1.0, (m - k) * p[idx]))
        adjusted[idx] = running
    return adjusted.tolist()


@dataclass(frozen=True)
class Comparison:
    name: str
    p_raw: float
    p_adjusted: float
    significant: bool


def significance_report(tests: Mapping[str, float], alpha: float = 0.05) -> list[Comparison]:
    """Holm-adjust a family of raw p-values; NaN entries stay undefined and
    are left out of the family."""
    names = [k for k, p in tests.items() if not math.isnan(p)]
    adj = dict(zip(names, holm_bonferroni([tests[k] for k in names]))) if names else {}
    out = []
    for k, p in tests.items():
        pa = adj.get(k, math.nan)
        out.append(Comparison(k, p, pa, bool(pa < alpha)))
    return out


# ---------------------------------------------------------------------------
# CSV output


def fmt(x) -> str:
    """Six significant digits; NaN as 'nan'; integers unchanged."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        out = f"{x:.6g}"
        return "0" if out == "-0" else out
    return str(x)


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


SUMMARY_COLUMNS = ("method_a", "method_b", "metric", "mean", "std", "n_instances", "n_undefined")


def write_summary_csv(matrix: AgreementMatrix, path) -> None:
    rows = []
    for a, b in matrix.pairs:
        for metric in METRICS:
            s = matrix.pair_summary(a, b, metric)
            rows.append((a, b, metric, s.mean, s.std, s.n_instances, s.n_undefined))
    write_csv(path, SUMMARY_COLUMNS, rows)


def write_instances_csv(matrix: AgreementMatrix, path) -> None:
    rows = [
        (iid, a, b, matrix.scores[(a, b, iid)]["kendall"], matrix.scores[(a, b, iid)]["pearson"])
        for iid in matrix.instance_ids
        for a, b in matrix.pairs
    ]
    write_csv(path, ("id", "method_a", "method_b", "kendall", "pearson"), rows)
