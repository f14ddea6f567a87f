"""Token-level attributions: Grad x Input, Integrated Gradients, DeepLIFT,
Grad-SHAP and Deep-SHAP.

Every method works on any model exposing ``embed(tokens)``,
``pad_embedding()`` and ``logits(tape, E)``; attributions are computed
with respect to the embedded input E and reduced over the embedding
dimension per token.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from agreelab import autodiff as ad
from agreelab.autodiff import Tape

METHODS = ("grad_input", "integrated_gradients", "deeplift", "grad_shap", "deep_shap")


@dataclass(frozen=True)
class AttributionConfig:
    baseline: str = "zero"  # or "pad"
    ig_steps: int = 64
    shap_samples: int = 20
    shap_noise_std: float = 0.1
    shap_noise_relative: bool = True  # std is a multiple of the input's embedding RMS
    aggregation: str = "sum"  # or "l2"
    target: str = "predicted"  # or "label"
    seed: int = 0

    def __post_init__(self):
        if self.ig_steps < 2:
            raise ValueError("ig_steps must be >= 2")
        if self.shap_noise_std < 0:
            raise ValueError("shap_noise_std must be >= 0")
        if self.shap_samples < 1:
            raise ValueError("shap_samples must be >= 1")
        if self.baseline not in ("zero", "pad"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.aggregation not in ("sum", "l2"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.target not in ("predicted", "label"):
            raise ValueError(f"unknown target {self.target!r}")


@dataclass
class SaliencyMap:
    id: int
    method: str
    target: int
    scores: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "method": self.method, "target": self.target,
                           "scores": [float(s) for s in self.scores]})


def aggregate(attr: np.ndarray, mode: str = "sum") -> np.ndarray:
    """Reduce a [T, d] attribution to one score per token."""
    if mode == "sum":
        return attr.sum(axis=1)
    if mode == "l2":
        return np.sqrt((attr * attr).sum(axis=1))
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# helpers


def _logits_at(model, E: np.ndarray) -> np.ndarray:
    tape = Tape()
    return model.logits(tape, tape.leaf(E)).value


def _target_grad(model, E: np.ndarray, target: int) -> np.ndarray:
    tape = Tape()
    leaf = tape.leaf(E)
    out = ad.index_select(model.logits(tape, leaf), [target])
    return ad.backward(tape, out)[leaf.id]


def baseline_for(model, E: np.ndarray, config: AttributionConfig) -> np.ndarray:
    if config.baseline == "pad":
        return np.broadcast_to(model.pad_embedding(), E.shape).copy()
    return np.zeros_like(E)


def resolve_target(model, E: np.ndarray, label: int | None, config: AttributionConfig) -> int:
    if config.target == "label":
        if label is None:
            raise ValueError("target='label' needs the instance label")
        return int(label)
    return int(np.argmax(_logits_at(model, E)))


def _rng(config: AttributionConfig, instance_id: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, instance_id])


def noise_std(E: np.ndarray, config: AttributionConfig) -> float:
    """Absolute noise level for the SHAP samplers.

    In relative mode the configured std is scaled by the root-mean-square
    entry of E, so models with different embedding scales see the same
    signal-to-noise ratio.
    """
    if not config.shap_noise_relative:
        return config.shap_noise_std
    return config.shap_noise_std * float(np.sqrt(np.mean(E * E)))


# ---------------------------------------------------------------------------
# embedding-level attributions ([T, d])


def grad_input_attr(model, E, target) -> np.ndarray:
    return _target_grad(model, E, target) * E


def ig_attr(model, E, baseline, target, steps: int) -> np.ndarray:
    """Midpoint Riemann sum of the path integral from baseline to E."""
    delta = E - baseline
    total = np.zeros_like(E)
    for k in range(steps):
        total += _target_grad(model, baseline + (k + 0.5) / steps * delta, target)
    return delta * total / steps


def deeplift_attr(model, E, baseline, target) -> np.ndarray:
    tape, ref_tape = Tape(), Tape()
    x, x_ref = tape.leaf(E), ref_tape.leaf(baseline)
    out = ad.index_select(model.logits(tape, x), [target])
    ref_out = ad.index_select(model.logits(ref_tape, x_ref), [target])
    if out.id != ref_out.id:
        raise ad.ContractError("actual and reference graphs differ")
    mult = ad.deeplift_backward(tape, ref_tape, out)[x.id]
    return mult * (E - baseline)


def grad_shap_attr(model, E, baseline, target, samples: int, std: float, rng) -> np.ndarray:
    """Expected gradients on noised inputs with a uniform interpolation point."""
    total = np.zeros_like(E)
    for _ in range(samples):
        noisy = E + rng.normal(0.0, std, E.shape) if std > 0 else E
        a = rng.uniform()
        g = _target_grad(model, baseline + a * (noisy - baseline), target)
        total += g * (noisy - baseline)
    return total / samples


def deep_shap_baselines(baseline, samples: int, std: float, rng) -> list[np.ndarray]:
    out = [baseline]
    for _ in range(samples - 1):
        out.append(baseline + rng.normal(0.0, std, baseline.shape) if std > 0 else baseline.copy())
    return out


def deep_shap_attr(model, E, baselines: Sequence[np.ndarray], target) -> np.ndarray:
    return np.mean([deeplift_attr(model, E, b, target) for b in baselines], axis=0)


# ---------------------------------------------------------------------------
# public per-instance API


def _prepare(model, tokens, label, config):
    E = model.embed(tokens)
    return E, baseline_for(model, E, config), resolve_target(model, E, label, config)


def grad_input(model, tokens, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    E, _, target = _prepare(model, tokens, label, config)
    return SaliencyMap(instance_id, "grad_input", target, aggregate(grad_input_attr(model, E, target), config.aggregation))


def integrated_gradients(model, tokens, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    E, B, target = _prepare(model, tokens, label, config)
    attr = ig_attr(model, E, B, target, config.ig_steps)
    return SaliencyMap(instance_id, "integrated_gradients", target, aggregate(attr, config.aggregation))


def deeplift(model, tokens, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    E, B, target = _prepare(model, tokens, label, config)
    return SaliencyMap(instance_id, "deeplift", target, aggregate(deeplift_attr(model, E, B, target), config.aggregation))


def grad_shap(model, tokens, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    E, B, target = _prepare(model, tokens, label, config)
    rng = _rng(config, instance_id)
    attr = grad_shap_attr(model, E, B, target, config.shap_samples, noise_std(E, config), rng)
    return SaliencyMap(instance_id, "grad_shap", target, aggregate(attr, config.aggregation))


def deep_shap(model, tokens, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    E, B, target = _prepare(model, tokens, label, config)
    rng = _rng(config, instance_id)
    baselines = deep_shap_baselines(B, config.shap_samples, noise_std(E, config), rng)
    attr = deep_shap_attr(model, E, baselines, target)
    return SaliencyMap(instance_id, "deep_shap", target, aggregate(attr, config.aggregation))


_DISPATCH = {
    "grad_input": grad_input,
    "integrated_gradients": integrated_gradients,
    "deeplift": deeplift,
    "grad_shap": grad_shap,
    "deep_shap": deep_shap,
}


def explain(model, tokens, method: str, config=AttributionConfig(), instance_id=0, label=None) -> SaliencyMap:
    try:
        fn = _DISPATCH[method]
    except KeyError:
        raise ValueError(f"unknown saliency method {method!r}") from None
    return fn(model, tokens, config, instance_id, label)


def explain_all(model, tokens, config=AttributionConfig(), instance_id=0, label=None,
                methods: Iterable[str] = METHODS) -> dict[str, SaliencyMap]:
    return {m: explain(model, tokens, m, config, instance_id, label) for m in methods}


def write_jsonl(maps: Iterable[SaliencyMap], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(m.to_json() + "\n")


def read_jsonl(path) -> list[SaliencyMap]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(SaliencyMap(rec["id"], rec["method"], rec["target"], np.asarray(rec["scores"], dtype=float)))
    return out


def config_dict(config: AttributionConfig) -> dict:
    return asdict(config)
