"""Residual-stream steering baselines and attractor-basin measurements."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from .clt import CrossLayerTranscoder, FeatureEdit, FeatureId, compile_edits
from .model import (Capture, ResidualEdit, Transformer, forward, kl_divergence,
                    next_token_distribution)
from .planning import resolve_word, word_probability
from .vocab import Vocabulary

METHODS = ("max_act_probe", "decoder_dot", "decoder_cosine", "cosine_filtered_inject",
           "multi_layer_clamp", "contrastive_vector", "activation_patch")
CLT_METHODS = METHODS[:5]


@dataclass(frozen=True)
class SteeringOutcome:
    method: str
    strength: float
    sample: int
    target_hit: bool
    p_target: float
    logit_gap: float
    natural_logit_drop: float
    feature: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ContrastiveVector:
    layer: int
    direction: np.ndarray
    position: int = -1

    def __post_init__(self):
        if not np.isfinite(self.direction).all():
            raise ValueError("contrastive direction is not finite")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))

    def to_dict(self) -> dict:
        return {"layer": self.layer, "position": self.position, "norm": self.norm,
                "direction": [float(v) for v in self.direction]}


def contrastive_vector(model: Transformer, target_prompts, source_prompts, layer: int,
                       position: int = -1) -> ContrastiveVector:
    """mean(target residual) - mean(source residual), post-block at ``layer``."""
    def mean(prompts):
        return np.mean([forward(model, p, capture=Capture.RESID_POST).residual_post[layer, position]
                        .astype(np.float64) for p in prompts], axis=0)
    return ContrastiveVector(layer, mean(target_prompts) - mean(source_prompts), position)


@dataclass
class SteeringConfig:
    method: str
    prompts: Sequence[Sequence[int]]
    target_word: str
    strengths: Sequence[float] = (0.0, 2.0, 4.0, 8.0, 16.0)
    layer: int | None = None  # contrastive / patching layer, or the only layer searched
    min_cosine: float = 0.1
    clamp_layers: int = 4
    direction: ContrastiveVector | None = None
    donor_prompt: Sequence[int] | None = None
    planning_site: int | None = None  # default: last position

    def validate(self, clt) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method in CLT_METHODS and clt is None:
            raise ValueError(f"{self.method} needs a CLT")
        if self.method == "contrastive_vector" and self.direction is None:
            raise ValueError("contrastive_vector needs a direction")
        if self.method == "activation_patch" and (self.donor_prompt is None or self.layer is None):
            raise ValueError("activation_patch needs donor_prompt and layer")
        if not self.prompts:
            raise ValueError("no prompts")


def _layers(cfg: SteeringConfig, clt: CrossLayerTranscoder) -> list[int]:
    return [cfg.layer] if cfg.layer is not None else list(range(clt.spec.n_layers))


def _home_rows(clt: CrossLayerTranscoder, layer: int) -> np.ndarray:
    return np.asarray(clt.shard(layer).W_dec[:, 0], dtype=np.float64)


def _best(scores: dict[FeatureId, float]) -> FeatureId | None:
    if not scores:
        return None
    return min(scores, key=lambda f: (-scores[f], f.layer, f.index))


def select_feature(cfg: SteeringConfig, model: Transformer, clt: CrossLayerTranscoder,
                   vocab: Vocabulary, prompt) -> FeatureId | None:
    target = np.asarray(model.W_E[resolve_word(vocab, cfg.target_word)[0]], dtype=np.float64)
    tnorm = max(np.linalg.norm(target), 1e-12)
    site = len(prompt) - 1 if cfg.planning_site is None else cfg.planning_site
    tr = None
    if cfg.method in ("max_act_probe", "cosine_filtered_inject", "multi_layer_clamp"):
        tr = forward(model, prompt)
        src = tr.residual_mid if clt.spec.read_point == "post_attention_pre_mlp" else tr.residual_post
    scores: dict[FeatureId, float] = {}
    for l in _layers(cfg, clt):
        dec = _home_rows(clt, l)
        dots = dec @ target
        cos = dots / (np.maximum(np.linalg.norm(dec, axis=1), 1e-12) * tnorm)
        if cfg.method == "max_act_probe":
            acts = np.stack([clt.encode(l, src[l, t]) for t in range(src.shape[1])])  # (T, F)
            best = acts.max(axis=0)
            for i in range(dec.shape[0]):
                scores[FeatureId(l, i)] = float(best[i])
        elif cfg.method == "decoder_dot":
            for i in range(dec.shape[0]):
                scores[FeatureId(l, i)] = float(dots[i])
        elif cfg.method == "decoder_cosine":
            for i in range(dec.shape[0]):
                scores[FeatureId(l, i)] = float(cos[i])
        else:
            acts = clt.encode(l, src[l, site])
            for i in np.flatnonzero(cos >= cfg.min_cosine):
                scores[FeatureId(l, int(i))] = float(acts[i])
    return _best(scores)


def _intervention(cfg: SteeringConfig, model, clt, prompt, strength, feature) -> list[ResidualEdit]:
    site = len(prompt) - 1 if cfg.planning_site is None else cfg.planning_site
    L = model.spec.n_layers
    if cfg.method == "contrastive_vector":
        return [ResidualEdit(cfg.direction.layer, site, strength * cfg.direction.direction, "contrastive")]
    if cfg.method == "activation_patch":
        own = forward(model, prompt, capture=Capture.RESID_POST).residual_post[cfg.layer, site]
        donor = forward(model, cfg.donor_prompt, capture=Capture.RESID_POST).residual_post[cfg.layer, -1]
        delta = strength * (donor.astype(np.float64) - own.astype(np.float64))
        return [ResidualEdit(cfg.layer, site, delta, "activation-patch")]
    if feature is None:
        return []
    hi = feature.layer
    if cfg.method == "multi_layer_clamp":
        hi = min(feature.layer + cfg.clamp_layers - 1, L - 1)
    return compile_edits([FeatureEdit(feature, "inject", float(strength), site, (feature.layer, hi))], clt)


def run_baseline_method(cfg: SteeringConfig, model: Transformer, vocab: Vocabulary,
                        clt: CrossLayerTranscoder | None = None) -> list[SteeringOutcome]:
    """Outcome grid over strengths x prompts for one steering method."""
    cfg.validate(clt)
    ids = resolve_word(vocab, cfg.target_word)
    out = []
    for k, prompt in enumerate(cfg.prompts):
        clean = forward(model, prompt, capture=Capture.LOGITS).logits[-1].astype(np.float64)
        natural = int(np.argmax(clean))
        feature = select_feature(cfg, model, clt, vocab, prompt) if cfg.method in CLT_METHODS else None
        for s in cfg.strengths:
            edits = _intervention(cfg, model, clt, prompt, float(s), feature) if s != 0 else []
            logits = forward(model, prompt, edits, capture=Capture.LOGITS).logits[-1].astype(np.float64)
            probs = next_token_distribution_from_logits(logits)
            best_target = max(ids, key=lambda i: logits[i])
            out.append(SteeringOutcome(
                cfg.method, float(s), k, int(np.argmax(logits)) in ids,
                word_probability(probs, ids), float(logits[natural] - logits[best_target]),
                float(clean[natural] - logits[natural]), None if feature is None else str(feature)))
    return out


def next_token_distribution_from_logits(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class AbsorptionResult:
    layer: int
    k: int
    scales: list[float]
    absorption: list[float | None]
    threshold: float | None
    contrastive_norm: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def attractor_absorption(direction: ContrastiveVector, scales: Sequence[float], model: Transformer,
                         prompt, k: int = 2, position: int = -1) -> AbsorptionResult:
    """Inject scale * direction at its layer; absorption = 1 - |deviation at layer+k| / |injected|.

    Deviation is the L2 norm of the residual difference at ``position``.
    The threshold estimate is the smallest scale whose absorption drops below 0.5.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scales = [float(s) for s in scales]
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise ValueError("scale grid must be ascending")
    l = direction.layer
    if l + k >= model.spec.n_layers:
        raise ValueError(f"layer {l} + k={k} runs past the last layer")
    T = len(prompt)
    pos = position % T
    base = forward(model, prompt, capture=Capture.RESID_POST).residual_post[l + k, pos].astype(np.float64)
    vals: list[float | None] = []
    threshold = None
    for s in scales:
        injected = s * direction.direction
        inj_norm = float(np.linalg.norm(injected))
        if inj_norm == 0.0:
            vals.append(None)
            continue
        tr = forward(model, prompt, [ResidualEdit(l, pos, injected, "basin")], capture=Capture.RESID_POST)
        dev = float(np.linalg.norm(tr.residual_post[l + k, pos].astype(np.float64) - base))
        a = 1.0 - dev / inj_norm
        vals.append(a)
        if threshold is None and a < 0.5:
            threshold = s
    return AbsorptionResult(l, k, scales, vals, threshold, direction.norm)


def within_group_kl(variants: Sequence[Sequence[int]], model: Transformer) -> float:
    """Largest KL(p_i || p_j) over ordered pairs of variant prompts."""
    if len(variants) < 2:
        raise ValueError("need at least two variants")
    dists = [next_token_distribution(forward(model, v, capture=Capture.LOGITS)) for v in variants]
    return max(kl_divergence(dists[i], dists[j]) for i, j in permutations(range(len(dists)), 2))
