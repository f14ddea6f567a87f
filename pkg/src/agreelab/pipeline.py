"""File-based experiment pipeline: train, explain, agree, cartography, report.

Every stage reads the previous stage's files from the output directory and
records what it wrote in ``manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from agreelab import agreement as agr
from agreelab import cartography as cart
from agreelab import data, model, saliency, training
from agreelab.agreement import fmt, write_csv

VARIANTS = ("base", "conicity", "tying")
SHORT = {"base": "B", "conicity": "C", "tying": "T"}
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid run configuration."""


class MissingArtifactError(FileNotFoundError):
    """A stage input is missing."""


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "synthetic"
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    delimiter: str = "\t"
    synth_n_easy: int = 1300
    synth_n_ambiguous: int = 500
    synth_n_hard: int = 200
    synth_eval_fraction: float = 0.2
    synth_vocab_size: int = 200
    synth_seq_min: int = 8
    synth_seq_max: int = 24
    synth_ambiguity_mix: float = 0.5
    synth_ambiguity_noise: float = 0.1
    synth_indicative_rate: float = 0.25
    synth_seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 32
    attn_dim: int = 0
    epochs: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    conicity_grid: tuple = training.CONICITY_GRID
    tying_grid: tuple = training.TYING_GRID
    f1_tolerance: float = training.F1_TOLERANCE
    grid_seeds: str = "first"  # "first": choose lambda on the first seed and reuse it
    seeds: tuple = (1, 2, 3, 4, 5)
    baseline: str = "zero"
    ig_steps: int = 64
    shap_samples: int = 20
    shap_noise_std: float = 0.1
    shap_noise_relative: bool = True
    aggregation: str = "sum"
    target: str = "predicted"
    attribution_seed: int = 0
    explain_split: str = "test"
    explain_limit: int = 0  # 0 = whole split
    cartography_per_group: int = 100
    closeness_per_epoch: bool = False
    curvature_split: str = "train"
    exact_jacobian: bool = False

    def __post_init__(self):
        for name in ("conicity_grid", "tying_grid", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.dataset not in ("synthetic", "tsv"):
            raise ConfigError(f"dataset must be 'synthetic' or 'tsv', got {self.dataset!r}")
        if self.dataset == "tsv" and not (self.train_path and self.valid_path and self.test_path):
            raise ConfigError("tsv dataset needs train_path, valid_path and test_path")
        if self.grid_seeds not in ("first", "all"):
            raise ConfigError("grid_seeds must be 'first' or 'all'")
        if not self.conicity_grid or not self.tying_grid:
            raise ConfigError("regularizer grids must be non-empty")
        if self.explain_limit < 0 or self.cartography_per_group < 0:
            raise ConfigError("limits must be non-negative")
        # the dependent configs validate the remaining fields
        self.attribution()
        self.train_config()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise MissingArtifactError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def synth(self) -> data.SynthConfig:
        return data.SynthConfig(
            n_per_category=(self.synth_n_easy, self.synth_n_ambiguous, self.synth_n_hard),
            eval_fraction=self.synth_eval_fraction,
            vocab_size=self.synth_vocab_size,
            seq_len_range=(self.synth_seq_min, self.synth_seq_max),
            ambiguity_mix=self.synth_ambiguity_mix,
            ambiguity_noise=self.synth_ambiguity_noise,
            indicative_rate=self.synth_indicative_rate,
            seed=self.synth_seed,
        )

    def train_config(self, seed: int = 0, lambda_con: float = 0.0, lambda_tying: float = 0.0) -> training.TrainConfig:
        return training.TrainConfig(
            epochs=self.epochs, lr=self.lr, beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            clip_norm=self.clip_norm, lambda_con=lambda_con, lambda_tying=lambda_tying,
            batch_size=self.batch_size, seed=seed,
        )

    def attribution(self) -> saliency.AttributionConfig:
        return saliency.AttributionConfig(
            baseline=self.baseline, ig_steps=self.ig_steps, shap_samples=self.shap_samples,
            shap_noise_std=self.shap_noise_std, shap_noise_relative=self.shap_noise_relative,
            aggregation=self.aggregation, target=self.target, seed=self.attribution_seed,
        )

    def model_config(self, vocab_size: int, seed: int) -> model.ClassifierConfig:
        return model.ClassifierConfig(vocab_size, self.embed_dim, self.hidden_dim, self.attn_dim, 2, seed)

    def with_seeds(self, seeds: Sequence[int]) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), "seeds": list(seeds)})

    @property
    def dataset_name(self) -> str:
        return "synthetic" if self.dataset == "synthetic" else Path(self.train_path).stem


def load_dataset(config: RunConfig) -> tuple[data.SplitSet, dict[int, str]]:
    if config.dataset == "synthetic":
        return data.synth_generate(config.synth())
    for p in (config.train_path, config.valid_path, config.test_path):
        if not Path(p).exists():
            raise MissingArtifactError(f"dataset file not found: {p}")
    return data.load_tsv(config.train_path, config.valid_path, config.test_path, config.delimiter), {}


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)
    selection: dict = field(default_factory=dict)

    def save(self, out: Path) -> None:
        (out / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, out: Path) -> "RunManifest":
        path = out / MANIFEST
        if not path.exists():
            raise MissingArtifactError(f"no manifest in {out}; run 'train' first")
        return cls(**json.loads(path.read_text(encoding="utf-8")))

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict(self.config)

    def record(self, stage: str, paths: Iterable[Path], out: Path) -> None:
        self.artifacts[stage] = sorted(str(Path(p).relative_to(out)) for p in paths)

    def check(self, out: Path, stage: str) -> list[Path]:
        if stage not in self.artifacts:
            raise MissingArtifactError(f"stage '{stage}' has not been run in {out}")
        paths = [out / p for p in self.artifacts[stage]]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise MissingArtifactError("missing artifacts: " + ", ".join(missing))
        return paths


def _parallel(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")


def run_name(variant: str, seed: int) -> str:
    return f"{variant}-{seed}"


# ---------------------------------------------------------------------------
# train


def _train_one(config: RunConfig, variant: str, seed: int, lam: float, out: str, save: bool) -> dict:
    splits, _ = load_dataset(config)
    start = time.perf_counter()
    tc = config.train_config(
        seed, lambda_con=lam if variant == "conicity" else 0.0, lambda_tying=lam if variant == "tying" else 0.0
    )
    state = model.init(config.model_config(len(splits.vocab), seed))
    state, trace = training.train(state, splits.train, tc, splits.validation)
    valid_f1 = trace.epochs[-1]["valid_f1"]
    test_f1 = training.evaluate_f1(state, splits.test)
    rec = {"variant": variant, "seed": seed, "lambda": lam, "valid_f1": valid_f1, "test_f1": test_f1,
           "wall_clock": time.perf_counter() - start}
    if save:
        root = Path(out)
        name = run_name(variant, seed)
        state.save(root / "checkpoints" / f"{name}.json")
        trace.save_jsonl(root / "traces" / f"{name}.jsonl")
        (root / "traces" / f"{name}.epochs.json").write_text(json.dumps(trace.epochs, indent=1), encoding="utf-8")
        rec["checkpoint"] = f"checkpoints/{name}.json"
        rec["trace"] = f"traces/{name}.jsonl"
    return rec


def cmd_train(config: RunConfig, out, workers: int = 1, force: bool = False, log=print) -> RunManifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _guard(out / MANIFEST, force)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    load_dataset(config)  # fail early on bad data
    manifest = RunManifest(config.hash(), config.to_dict())

    log(f"training base models for seeds {list(config.seeds)}")
    base = _parallel(_train_one, [(config, "base", s, 0.0, str(out), True) for s in config.seeds], workers)
    base_f1 = {r["seed"]: r["valid_f1"] for r in base}

    grid_seeds = config.seeds[:1] if config.grid_seeds == "first" else config.seeds
    grids = {"conicity": config.conicity_grid, "tying": config.tying_grid}
    jobs = [(config, v, s, lam, str(out), False) for v in ("conicity", "tying") for s in grid_seeds for lam in grids[v]]
    log(f"regularizer grid: {len(jobs)} runs")
    grid_runs = _parallel(_train_one, jobs, workers)

    selected: dict[str, dict[int, float]] = {}
    for variant in ("conicity", "tying"):
        selected[variant] = {}
        for s in grid_seeds:
            scores = {r["lambda"]: r["valid_f1"] for r in grid_runs if r["variant"] == variant and r["seed"] == s}
            sel = training.select_regularizer_strength(grids[variant], base_f1[s], scores, config.f1_tolerance)
            selected[variant][s] = sel.strength
            manifest.selection.setdefault(variant, {})[str(s)] = {
                "strength": sel.strength, "within_tolerance": sel.within_tolerance, "base_valid_f1": base_f1[s],
                "valid_f1": {fmt(k): v for k, v in sel.valid_f1.items()},
            }
        for s in config.seeds:
            selected[variant].setdefault(s, selected[variant][grid_seeds[0]])

    jobs = [(config, v, s, selected[v][s], str(out), True) for v in ("conicity", "tying") for s in config.seeds]
    log(f"training selected regularized models ({len(jobs)} runs)")
    regs = _parallel(_train_one, jobs, workers)
    for variant in ("conicity", "tying"):
        regs = _confirm_strength(config, variant, grids[variant], regs, base_f1, out, workers, log)
        final = [r for r in regs if r["variant"] == variant]
        manifest.selection[variant]["final"] = {
            "strength": final[0]["lambda"],
            "within_tolerance": all(r["valid_f1"] >= base_f1[r["seed"]] - config.f1_tolerance - 1e-12 for r in final),
        }
    manifest.runs = base + regs

    f1_path = out / "tables" / "f1.csv"
    write_f1_table(manifest.runs, config.dataset_name, f1_path)
    paths = [out / r["checkpoint"] for r in manifest.runs] + [out / r["trace"] for r in manifest.runs]
    paths += [out / "traces" / f"{run_name(r['variant'], r['seed'])}.epochs.json" for r in manifest.runs]
    manifest.record("train", paths + [f1_path], out)
    manifest.save(out)
    return manifest


def _confirm_strength(config, variant, grid, regs, base_f1, out, workers, log) -> list[dict]:
    """Step down the grid until the shared strength keeps every seed within the F1 tolerance."""
    def short(rs):
        return [r["seed"] for r in rs if r["variant"] == variant
                and r["valid_f1"] < base_f1[r["seed"]] - config.f1_tolerance - 1e-12]

    lam = next(r["lambda"] for r in regs if r["variant"] == variant)
    while short(regs):
        smaller = [g for g in sorted(grid) if g < lam]
        if not smaller:
            warnings.warn(f"{variant}: seeds {short(regs)} stay outside the F1 tolerance at every strength",
                          stacklevel=2)
            break
        lam = smaller[-1]
        log(f"{variant}: seeds {short(regs)} outside the F1 tolerance, retraining at {fmt(lam)}")
        jobs = [(config, variant, s, lam, str(out), True) for s in config.seeds]
        redo = {r["seed"]: r for r in _parallel(_train_one, jobs, workers)}
        regs = [redo[r["seed"]] if r["variant"] == variant else r for r in regs]
    return regs


def write_f1_table(runs: list[dict], dataset: str, path: Path) -> None:
    header = ["dataset", "split"] + [c for v in VARIANTS for c in (v, f"{v}_std")]
    rows = []
    for split in ("valid", "test"):
        row = [dataset, split]
        for v in VARIANTS:
            vals = [r[f"{split}_f1"] for r in runs if r["variant"] == v]
            row += [float(np.mean(vals)), float(np.std(vals))]
        rows.append(row)
    write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# explain


def _explain_one(config: RunConfig, variant: str, seed: int, out: str, subdir: str, ids: list[int]) -> list[str]:
    splits, _ = load_dataset(config)
    by_id = {inst.id: inst for inst in splits.all()}
    root = Path(out)
    m = model.Classifier(model.ModelState.load(root / "checkpoints" / f"{run_name(variant, seed)}.json"))
    acfg = config.attribution()
    maps: dict[str, list] = {meth: [] for meth in saliency.METHODS}
    for iid in ids:
        inst = by_id[iid]
        for meth, sm in saliency.explain_all(m, inst.tokens, acfg, iid, inst.label).items():
            maps[meth].append(sm)
    written = []
    for meth, items in maps.items():
        path = root / subdir / f"{run_name(variant, seed)}-{meth}.jsonl"
        saliency.write_jsonl(items, path)
        written.append(str(path))
    return written


def explain_ids(config: RunConfig, splits: data.SplitSet) -> list[int]:
    insts = splits.split(config.explain_split)
    if config.explain_limit:
        insts = insts[: config.explain_limit]
    return [inst.id for inst in insts]


def cartography_sample(config: RunConfig, records: list[cart.CartographyRecord]) -> list[int]:
    """Up to ``cartography_per_group`` lowest-id instances per category."""
    ids = []
    for c in cart.CATEGORIES:
        members = sorted(r.id for r in records if r.category == c)
        ids += members[: config.cartography_per_group]
    return sorted(ids)


def cmd_explain(out, workers: int = 1, force: bool = False, log=print) -> RunManifest:
    out = Path(out)
    manifest = RunManifest.load(out)
    config = manifest.run_config()
    manifest.check(out, "train")
    sal_dir = out / "saliency"
    if sal_dir.exists() and any(sal_dir.iterdir()):
        _guard(sal_dir, force)
    sal_dir.mkdir(exist_ok=True)
    (out / "saliency_cartography").mkdir(exist_ok=True)
    splits, _ = load_dataset(config)
    ids = explain_ids(config, splits)
    runs = [(r["variant"], r["seed"]) for r in manifest.runs]
    log(f"explaining {len(ids)} {config.explain_split} instances for {len(runs)} runs")
    jobs = [(config, v, s, str(out), "saliency", ids) for v, s in runs]
    # cartography groups are drawn from the training dynamics of each base / tying run
    for v, s in runs:
        if v in ("base", "tying"):
            trace = training.TrainingTrace.load_jsonl(out / "traces" / f"{run_name(v, s)}.jsonl")
            sample = cartography_sample(config, cart.cartography_stats(trace, config.closeness_per_epoch))
            jobs.append((config, v, s, str(out), "saliency_cartography", sample))
    written = [Path(p) for paths in _parallel(_explain_one, jobs, workers) for p in paths]
    manifest.record("explain", written, out)
    manifest.save(out)
    return manifest


# ---------------------------------------------------------------------------
# agree


def load_maps(out: Path, subdir: str, variant: str, seed: int) -> dict[str, dict[int, np.ndarray]]:
    maps = {}
    for meth in saliency.METHODS:
        path = out / subdir / f"{run_name(variant, seed)}-{meth}.jsonl"
        if not path.exists():
            raise MissingArtifactError(f"missing saliency dump: {path}")
        maps[meth] = {sm.id: sm.scores for sm in saliency.read_jsonl(path)}
    return maps


def _variant_instance_means(matrices: dict[tuple[str, int], agr.AgreementMatrix], variant: str, metric: str,
                            seeds: Sequence[int]) -> dict[int, float]:
    """Per instance, the mean over seeds of the mean over method pairs."""
    per_seed = [matrices[(variant, s)].instance_means(metric) for s in seeds]
    out = {}
    for iid in per_seed[0]:
        vals = [d[iid] for d in per_seed if not math.isnan(d.get(iid, math.nan))]
        out[iid] = float(np.mean(vals)) if vals else math.nan
    return out


def paired_test(x: dict[int, float], y: dict[int, float]) -> float:
    ids = [i for i in x if i in y and not math.isnan(x[i]) and not math.isnan(y[i])]
    diffs = [x[i] - y[i] for i in ids]
    if sum(1 for d in diffs if d != 0) < 5:
        return math.nan
    return agr.wilcoxon_one_sided([x[i] for i in ids], [y[i] for i in ids])


def cmd_agree(out, force: bool = False, log=print) -> RunManifest:
    out = Path(out)
    manifest = RunManifest.load(out)
    config = manifest.run_config()
    manifest.check(out, "explain")
    agree_dir = out / "agreement"
    if agree_dir.exists() and any(agree_dir.iterdir()):
        _guard(agree_dir, force)
    agree_dir.mkdir(exist_ok=True)
    seeds = list(config.seeds)
    written: list[Path] = []
    matrices = {}
    pair_rows = []
    for v in VARIANTS:
        for s in seeds:
            M = agr.pairwise_agreement(load_maps(out, "saliency", v, s))
            matrices[(v, s)] = M
            p1 = agree_dir / f"{run_name(v, s)}-summary.csv"
            p2 = agree_dir / f"{run_name(v, s)}-instances.csv"
            agr.write_summary_csv(M, p1)
            agr.write_instances_csv(M, p2)
            written += [p1, p2]
            for a, b in M.pairs:
                k, p = M.pair_summary(a, b, "kendall"), M.pair_summary(a, b, "pearson")
                pair_rows.append((v, s, a, b, k.mean, p.mean, k.n_undefined, p.n_undefined))
    pairs_path = out / "tables" / "agreement_pairs.csv"
    write_csv(pairs_path, ("variant", "seed", "method_a", "method_b", "kendall", "pearson",
                           "kendall_undefined", "pearson_undefined"), pair_rows)

    # method-pair layout: mean over seeds per pair and variant
    methods = list(saliency.METHODS)
    mp_rows = []
    for v in VARIANTS:
        for a, b in combinations(methods, 2):
            ks = [m.pair_summary(a, b, "kendall").mean for (vv, _), m in matrices.items() if vv == v]
            ps = [m.pair_summary(a, b, "pearson").mean for (vv, _), m in matrices.items() if vv == v]
            mp_rows.append((v, a, b, _nanmean(ks), _nanmean(ps)))
    mp_path = out / "tables" / "method_pairs.csv"
    write_csv(mp_path, ("variant", "method_a", "method_b", "kendall", "pearson"), mp_rows)

    # variant layout with one-sided tests of each regularizer against base
    tests = {}
    means = {}
    for metric in agr.METRICS:
        inst = {v: _variant_instance_means(matrices, v, metric, seeds) for v in VARIANTS}
        for v in VARIANTS:
            means[(v, metric)] = _nanmean([matrices[(v, s)].grand_mean(metric) for s in seeds])
        raw = {f"{v}>base:{metric}": paired_test(inst[v], inst["base"]) for v in ("conicity", "tying")}
        for comp in agr.significance_report(raw):
            tests[comp.name] = comp
    sig_path = out / "tables" / "significance.csv"
    write_csv(sig_path, ("comparison", "metric", "p_raw", "p_adjusted", "significant"),
              ((c.name.split(":")[0], c.name.split(":")[1], c.p_raw, c.p_adjusted, c.significant)
               for c in tests.values()))
    header = ["dataset"]
    row: list = [config.dataset_name]
    for v in VARIANTS:
        for metric in agr.METRICS:
            header += [f"{SHORT[v]}_{metric}", f"{SHORT[v]}_{metric}_sig"]
            comp = tests.get(f"{v}>base:{metric}")
            row += [means[(v, metric)], "†" if comp is not None and comp.significant else ""]
    table_path = out / "tables" / "agreement.csv"
    write_csv(table_path, header, [row])
    manifest.record("agree", written + [pairs_path, mp_path, sig_path, table_path], out)
    manifest.save(out)
    return manifest


def _nanmean(vals) -> float:
    arr = np.asarray([v for v in vals if v is not None], dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    return float(arr.mean()) if arr.size else math.nan


# ---------------------------------------------------------------------------
# cartography


def cmd_cartography(out, force: bool = False, log=print) -> RunManifest:
    out = Path(out)
    manifest = RunManifest.load(out)
    config = manifest.run_config()
    manifest.check(out, "train")
    manifest.check(out, "explain")
    cdir = out / "cartography"
    if cdir.exists() and any(cdir.iterdir()):
        _guard(cdir, force)
    cdir.mkdir(exist_ok=True)
    splits, _ = load_dataset(config)
    curv_split = splits.split(config.curvature_split)
    seeds = list(config.seeds)
    written: list[Path] = []
    group_means: dict[tuple[str, str], list[float]] = {}
    group_inst: dict[tuple[str, str], dict[int, list[float]]] = {}
    corr: dict[tuple[str, int], dict] = {}
    for v in ("base", "tying"):
        for s in seeds:
            name = run_name(v, s)
            trace = training.TrainingTrace.load_jsonl(out / "traces" / f"{name}.jsonl")
            records = cart.cartography_stats(trace, config.closeness_per_epoch)
            p = cdir / f"{name}-records.csv"
            cart.write_cartography_csv(records, p)
            written.append(p)

            M = agr.pairwise_agreement(load_maps(out, "saliency_cartography", v, s))
            inst_means = M.instance_means("pearson")
            for c, mean in cart.group_agreement(inst_means, records).items():
                group_means.setdefault((v, c), [])
                if mean is not None:
                    group_means[(v, c)].append(mean)
            cat_of = {r.id: r.category for r in records}
            for iid, val in inst_means.items():
                group_inst.setdefault((v, cat_of[iid]), {}).setdefault(iid, []).append(val)

            m = model.Classifier(model.ModelState.load(out / "checkpoints" / f"{name}.json"))
            stats = cart.curvature_stats(m, curv_split)
            if config.exact_jacobian:
                by_id = {inst.id: inst for inst in curv_split}
                stats = [cart.CurvatureStats(st.id, cart.representation_grad_norm(m, by_id[st.id].tokens, True),
                                             st.min_dist) for st in stats]
            p = cdir / f"{name}-curvature.csv"
            cart.write_curvature_csv(stats, p)
            written.append(p)
            if config.curvature_split == "train":
                corr[(v, s)] = cart.correlate_curvature(stats, records)

    # group layout with a one-sided test of tying over base per group
    header = ["dataset"]
    row: list = [config.dataset_name]
    for c in cart.CATEGORIES:
        for v in ("base", "tying"):
            header.append(f"{c}_{SHORT[v]}")
            row.append(_nanmean(group_means.get((v, c), [])) if group_means.get((v, c)) else "")
        b = {i: float(np.mean(x)) for i, x in group_inst.get(("base", c), {}).items()}
        t = {i: float(np.mean(x)) for i, x in group_inst.get(("tying", c), {}).items()}
        p = paired_test(t, b) if b and t else math.nan
        header += [f"{c}_p", f"{c}_sig"]
        row += [p, "†" if not math.isnan(p) and p < 0.05 else ""]
    groups_path = out / "tables" / "cartography_groups.csv"
    write_csv(groups_path, header, [row])
    written.append(groups_path)

    if corr:
        seed_rows = [(v, s, stat, *(corr[(v, s)][stat][a] for a in cart.ATTRIBUTES))
                     for (v, s) in sorted(corr) for stat in cart.STATISTICS]
        seeds_path = out / "tables" / "curvature_correlation_seeds.csv"
        write_csv(seeds_path, ("variant", "seed", "statistic") + cart.ATTRIBUTES, seed_rows)
        header = ["statistic"] + [f"{a}_{SHORT[v]}" for v in ("base", "tying") for a in cart.ATTRIBUTES]
        rows = []
        for stat in cart.STATISTICS:
            rows.append([stat] + [_nanmean([corr[(v, s)][stat][a] for s in seeds])
                                  for v in ("base", "tying") for a in cart.ATTRIBUTES])
        corr_path = out / "tables" / "curvature_correlation.csv"
        write_csv(corr_path, header, rows)
        written += [seeds_path, corr_path]
    manifest.record("cartography", written, out)
    manifest.save(out)
    return manifest


# ---------------------------------------------------------------------------
# report


def _read_csv(path: Path) -> list[dict[str, str]]:
    import csv

    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _md_table(rows: list[dict[str, str]]) -> str:
    if not rows:
        return "(empty)\n"
    cols = list(rows[0])
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _num(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        return math.nan


def cmd_report(out, log=print) -> dict:
    out = Path(out)
    manifest = RunManifest.load(out)
    config = manifest.run_config()
    for stage in ("train", "explain", "agree", "cartography"):
        manifest.check(out, stage)
    tables = out / "tables"
    blocks = {
        "F1 (macro, mean and std over seeds)": "f1.csv",
        "Average agreement over method pairs": "agreement.csv",
        "Significance of regularized vs base": "significance.csv",
        "Agreement per method pair": "method_pairs.csv",
        "Pearson agreement per cartography group": "cartography_groups.csv",
        "Curvature correlations": "curvature_correlation.csv",
    }
    parts = [f"# Agreement report: {config.dataset_name}\n", f"config hash `{manifest.config_hash}`\n"]
    loaded = {}
    for title, fname in blocks.items():
        path = tables / fname
        if not path.exists():
            if fname == "curvature_correlation.csv":
                continue
            raise MissingArtifactError(f"missing table: {path}")
        loaded[fname] = _read_csv(path)
        parts.append(f"## {title}\n\n" + _md_table(loaded[fname]))

    f1_ok = all(v["final"]["within_tolerance"] for v in manifest.selection.values())
    sel_lines = []
    for v, sel in sorted(manifest.selection.items()):
        grid = ", ".join(f"seed {s} -> {d['strength']:g}" for s, d in sorted(sel.items()) if s != "final")
        sel_lines.append(f"- {v}: grid {grid}; used on all seeds {sel['final']['strength']:g}")
    parts.append("## Selected regularizer strengths\n\n" + "\n".join(sel_lines) + "\n")
    parts.append(f"All selected strengths within the F1 tolerance: {'yes' if f1_ok else 'no'}\n")

    agree = loaded["agreement.csv"][0]
    headline = {
        "dataset": config.dataset_name,
        "config_hash": manifest.config_hash,
        "pearson": {v: _num(agree[f"{SHORT[v]}_pearson"]) for v in VARIANTS},
        "kendall": {v: _num(agree[f"{SHORT[v]}_kendall"]) for v in VARIANTS},
        "tying_gt_base_pearson": _num(agree["T_pearson"]) > _num(agree["B_pearson"]),
        "f1_within_tolerance": f1_ok,
        "significance": {f"{r['comparison']}:{r['metric']}": _num(r["p_adjusted"])
                         for r in loaded["significance.csv"]},
    }
    (out / "report.md").write_text("\n".join(parts), encoding="utf-8")
    (out / "headline.json").write_text(json.dumps(headline, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.record("report", [out / "report.md", out / "headline.json"], out)
    manifest.save(out)
    return headline


def run_all(config: RunConfig, out, workers: int = 1, force: bool = False, log=print) -> dict:
    cmd_train(config, out, workers, force, log)
    cmd_explain(out, workers, force, log)
    cmd_agree(out, force, log)
    cmd_cartography(out, force, log)
    return cmd_report(out, log)
