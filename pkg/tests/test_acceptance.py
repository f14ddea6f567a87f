"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from agreelab import agreement, cartography, cli, model, pipeline, saliency
from agreelab.pipeline import RunConfig
from agreelab.saliency import AttributionConfig
from agreelab.training import InstanceDynamics, TrainingTrace

from oracles import (
    PRIMITIVES, brute_kendall_tau_b, holm_by_hand, naive_pearson, primitive_fd_error, tail_perturbation_pair,
    wilcoxon_enumeration,
)

BUDGET_SECONDS = 15 * 60


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """Two complete default pipeline runs in separate directories."""
    root = tmp_path_factory.mktemp("acceptance")
    out, seconds = [], []
    for name in ("a", "b"):
        start = time.perf_counter()
        assert cli.main(["run", "--out", str(root / name), "--quiet"]) == 0
        seconds.append(time.perf_counter() - start)
        out.append(root / name)
    return out, seconds


@pytest.fixture(scope="session")
def trained(full_runs):
    (run, _), _ = full_runs
    splits, _ = pipeline.load_dataset(RunConfig())
    m = model.Classifier(model.ModelState.load(run / "checkpoints" / "base-1.json"))
    return m, splits.test[:50]


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _delta(m, E, cfg):
    B = saliency.baseline_for(m, E, cfg)
    t = saliency.resolve_target(m, E, None, cfg)
    return saliency._logits_at(m, E)[t] - saliency._logits_at(m, B)[t], B, t


def test_c01_autodiff_finite_differences(criterion):
    start = time.perf_counter()
    worst = {}
    for name in PRIMITIVES:
        rng = np.random.default_rng(1000 + PRIMITIVES.index(name))
        worst[name] = max(primitive_fd_error(name, rng) for _ in range(100))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    criterion(1, "primitive backward vs central differences",
              max(worst.values()) <= 1e-4 and elapsed < 60,
              f"{len(PRIMITIVES)} primitives x 100 cases, worst {worst[top]:.2e} on {top}, {elapsed:.1f}s")


@pytest.mark.slow
def test_c02_ig_completeness(trained, criterion):
    m, instances = trained
    errs = {32: [], 64: [], 128: []}
    for inst in instances:
        E = m.embed(inst.tokens)
        cfg = AttributionConfig()
        delta, B, t = _delta(m, E, cfg)
        for steps in errs:
            attr = saliency.ig_attr(m, E, B, t, steps)
            errs[steps].append(abs(float(attr.sum()) - float(delta)))
    worst64 = max(errs[64])
    ratio = np.mean(errs[32]) / np.mean(errs[128])
    criterion(2, "IG completeness at 64 steps and error reduction 32 -> 128",
              worst64 <= 1e-3 and ratio >= 2.0,
              f"max error {worst64:.2e} at 64 steps, mean error shrinks {ratio:.1f}x from 32 to 128 steps")


@pytest.mark.slow
def test_c03_deeplift_summation(trained, criterion):
    rng = np.random.default_rng(3)
    probe = model.TanhProbe(rng.normal(size=(30, 6)), rng.normal(size=(6, 8)), rng.normal(size=(8, 2)),
                            rng.normal(size=2))
    cfg = AttributionConfig()
    worst_elem = 0.0
    for _ in range(50):
        tokens = rng.integers(0, 30, size=int(rng.integers(3, 12))).tolist()
        E = probe.embed(tokens)
        delta, _, _ = _delta(probe, E, cfg)
        worst_elem = max(worst_elem, abs(float(saliency.deeplift(probe, tokens, cfg).scores.sum()) - float(delta)))

    m, instances = trained
    abs_err, abs_delta, rel = [], [], []
    for inst in instances:
        E = m.embed(inst.tokens)
        delta, _, _ = _delta(m, E, cfg)
        err = abs(float(saliency.deeplift(m, inst.tokens, cfg).scores.sum()) - float(delta))
        abs_err.append(err)
        abs_delta.append(abs(float(delta)))
        rel.append(err / max(abs(float(delta)), 1e-12))
    aggregate = sum(abs_err) / sum(abs_delta)
    criterion(3, "DeepLIFT summation-to-delta", worst_elem <= 1e-6 and aggregate <= 0.05,
              f"elementwise max {worst_elem:.1e}; attention model total |error|/|delta| {aggregate:.2%}, "
              f"per-instance median {np.median(rel):.2%}, max {max(rel):.2%}")


def test_c04_correlation_oracles(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 51))
        if i % 2:
            a, b = rng.integers(0, 4, n).astype(float), rng.integers(0, 4, n).astype(float)
        else:
            a, b = rng.normal(size=n), rng.normal(size=n)
        for ours, ref in ((agreement.kendall_tau(a, b), brute_kendall_tau_b(a, b)),
                          (agreement.pearson_r(a, b), naive_pearson(a.tolist(), b.tolist()))):
            if np.isnan(ref):
                worst = max(worst, 0.0 if np.isnan(ours) else np.inf)
            else:
                worst = max(worst, abs(ours - ref))
    criterion(4, "kendall_tau and pearson_r vs oracles", worst <= 1e-12,
              f"1000 pairs, half with ties, max deviation {worst:.1e}")


def test_c05_rank_vs_linear_disagreement(criterion):
    a, b = tail_perturbation_pair()
    k, p = agreement.kendall_tau(a, b), agreement.pearson_r(a, b)
    criterion(5, "swapped top-2 with a reshuffled tail", k < 0 and p > 0.9, f"kendall {k:.3f}, pearson {p:.3f}")


@pytest.mark.slow
def test_c06_pearson_exceeds_kendall(full_runs, criterion):
    (run, _), _ = full_runs
    rows = _rows(run / "tables" / "agreement_pairs.csv")
    bad = [f"{r['variant']}/{r['seed']}/{r['method_a']}-{r['method_b']}" for r in rows
           if float(r["pearson"]) < float(r["kendall"])]
    criterion(6, "mean pearson >= mean kendall per pair, variant and seed", not bad,
              f"{len(rows) - len(bad)}/{len(rows)} hold" + (f"; violations {', '.join(bad)}" if bad else ""))


@pytest.mark.slow
def test_c07_tying_improves_agreement(full_runs, criterion):
    (run, _), seconds = full_runs
    head = json.loads((run / "headline.json").read_text())
    sig = {(r["comparison"], r["metric"]): r for r in _rows(run / "tables" / "significance.csv")}
    tp = sig[("tying>base", "pearson")]
    ok = head["pearson"]["tying"] > head["pearson"]["base"] and seconds[0] <= BUDGET_SECONDS
    criterion(7, "tying raises mean Pearson agreement over base (5 seeds)", ok,
              f"tying {head['pearson']['tying']:.4f} vs base {head['pearson']['base']:.4f}; "
              f"Wilcoxon p={tp['p_raw']}, Holm p={tp['p_adjusted']}; pipeline {seconds[0] / 60:.1f} min")


@pytest.mark.slow
def test_c08_f1_preserved(full_runs, criterion):
    (run, _), _ = full_runs
    man = json.loads((run / "manifest.json").read_text())
    base = {r["seed"]: r["valid_f1"] for r in man["runs"] if r["variant"] == "base"}
    gaps = [base[r["seed"]] - r["valid_f1"] for r in man["runs"] if r["variant"] != "base"]
    asserted = "within the F1 tolerance: yes" in (run / "report.md").read_text()
    criterion(8, "selected regularized models within 3 F1 points of base on validation",
              max(gaps) <= 0.03 + 1e-12 and asserted, f"largest drop {100 * max(gaps):.2f} points")


def test_c09_cartography(criterion):
    bands = {n: cartography.categorize(n, 5) for n in range(6)}
    expected = {0: "hard", 1: "uncategorized", 2: "ambiguous", 3: "ambiguous", 4: "uncategorized", 5: "easy"}
    trace = TrainingTrace({
        0: InstanceDynamics(0, [0.9, 0.8, 0.7, 0.6, 0.5], [True] * 5),
        1: InstanceDynamics(1, [0.2, 0.8, 0.2, 0.8, 0.5], [False, True, False, True, False]),
    })
    recs = cartography.cartography_stats(trace)
    # by hand: mean 0.7, var (0.04+0.01+0+0.01+0.04)/5 = 0.02
    #          mean 0.5, var (0.09*4 + 0)/5 = 0.072
    hand = [(0.7, np.sqrt(0.02), 0.21, 5, "easy"), (0.5, np.sqrt(0.072), 0.25, 2, "ambiguous")]
    dev = max(max(abs(r.confidence - h[0]), abs(r.variability - h[1]), abs(r.closeness - h[2]))
              for r, h in zip(recs, hand))
    labels_ok = all(r.n_correct == h[3] and r.category == h[4] for r, h in zip(recs, hand))
    criterion(9, "categorize bands and hand-computed statistics",
              bands == expected and labels_ok and dev <= 1e-12, f"max deviation {dev:.1e}")


def test_c10_wilcoxon_and_holm(criterion):
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(5, 13))
        x = np.round(rng.normal(0.3, 1.0, n), 1)
        y = np.round(rng.normal(0.0, 1.0, n), 1)
        if np.count_nonzero(x - y) < 5:
            continue
        worst = max(worst, abs(agreement.wilcoxon_one_sided(x, y) - wilcoxon_enumeration(x, y)))
    p = rng.uniform(size=6).tolist()
    holm_dev = float(np.max(np.abs(np.array(agreement.holm_bonferroni(p)) - holm_by_hand(p))))
    hits = sum(agreement.wilcoxon_one_sided(rng.normal(size=20), rng.normal(size=20)) < 0.05 for _ in range(1000))
    rate = hits / 1000
    criterion(10, "Wilcoxon exact enumeration, Holm, null calibration",
              worst <= 1e-12 and holm_dev <= 1e-12 and abs(rate - 0.05) <= 0.02,
              f"max p deviation {worst:.1e}, Holm {holm_dev:.1e}, false-positive rate {rate:.3f}")


@pytest.mark.slow
def test_c11_curvature_signs(full_runs, criterion):
    (run, _), _ = full_runs
    rows = [r for r in _rows(run / "tables" / "curvature_correlation_seeds.csv") if r["variant"] == "base"]
    md = [r for r in rows if r["statistic"] == "min_dist"]
    neg_conf = sum(float(r["confidence"]) < 0 for r in md)
    pos_close = sum(float(r["closeness"]) > 0 for r in md)
    gn = [r for r in rows if r["statistic"] == "grad_norm"]
    gn_signs = "".join("-" if float(r["confidence"]) < 0 else "+" for r in gn) + "/" + \
        "".join("+" if float(r["closeness"]) > 0 else "-" for r in gn)
    criterion(11, "min_dist vs confidence negative and vs closeness positive (base)",
              neg_conf >= 4 and pos_close >= 4,
              f"confidence negative on {neg_conf}/5 seeds, closeness positive on {pos_close}/5; "
              f"grad_norm signs (confidence/closeness) {gn_signs}")


@pytest.mark.slow
def test_c12_determinism(full_runs, criterion):
    (a, b), _ = full_runs
    files = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    differing = [str(p) for p in files if (a / p).read_bytes() != (b / p).read_bytes()]
    same_set = files == sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    criterion(12, "two identical runs give byte-identical CSVs", same_set and not differing and len(files) > 0,
              f"{len(files)} CSV files compared" + (f"; differing {differing}" if differing else ""))
