"""Causal planning experiments: position sweeps, strength sweeps, ablation, correction."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import beta, norm

from .clt import CrossLayerTranscoder, FeatureEdit, FeatureId, compile_edits
from .discovery import PhonemeEntry, rhyme_ending
from .model import Capture, LayerMask, Transformer, forward, generate, next_token_distribution
from .routing import routing_analysis
from .vocab import Vocabulary

RATIO_FLOOR = 1e-30


def word_probability(probs: np.ndarray, token_ids: Sequence[int]) -> float:
    """P(word) = max over its single-token surface variants."""
    return float(max(probs[i] for i in token_ids))


def resolve_word(vocab: Vocabulary, word: str) -> list[int]:
    ids = vocab.word_token_ids(word)
    if not ids:
        raise ValueError(f"target word {word!r} has no single-token variant in the vocabulary")
    return ids


# --------------------------------------------------------------------------- position sweep

@dataclass(frozen=True)
class SweepConfig:
    prompt: tuple[int, ...]
    suppress_group: tuple[FeatureId, ...]
    inject_feature: FeatureId
    strength: float
    target_word: str
    planning_site: int | None = None  # default: last prompt position
    baseline: str = "suppressed"  # or "clean"
    move_suppression: bool = False  # suppress at the injection position instead of the site

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        if len(self.prompt) < 2:
            raise ValueError("prompt needs at least two tokens")
        if self.baseline not in ("suppressed", "clean"):
            raise ValueError("baseline must be 'suppressed' or 'clean'")
        site = self.site
        if not 0 <= site < len(self.prompt):
            raise ValueError(f"planning_site {site} outside the prompt")

    @property
    def site(self) -> int:
        return len(self.prompt) - 1 if self.planning_site is None else self.planning_site

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt), "suppress": [str(f) for f in self.suppress_group],
                "feature": str(self.inject_feature), "strength": self.strength,
                "target_word": self.target_word, "planning_site": self.site,
                "baseline": self.baseline, "move_suppression": self.move_suppression}


@dataclass
class SweepResult:
    p_by_position: list[float]
    baseline_p: float
    peak_position: int
    ratio: float
    localized: bool
    planning_site: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "p_by_position": self.p_by_position,
                "baseline_p": self.baseline_p, "peak_position": self.peak_position,
                "ratio": self.ratio, "localized": self.localized,
                "planning_site": self.planning_site}


def _edits(cfg: SweepConfig, n_layers: int, inject_at: int | None, strength: float,
           suppress_at: int | None = None) -> list[FeatureEdit]:
    at = cfg.site if suppress_at is None else suppress_at
    out = [FeatureEdit.make(f, "suppress", strength, at, n_layers=n_layers) for f in cfg.suppress_group]
    if inject_at is not None:
        out.append(FeatureEdit.make(cfg.inject_feature, "inject", strength, inject_at, n_layers=n_layers))
    return out


def summarize_sweep(p: Sequence[float], baseline_p: float, site: int, config: dict | None = None) -> SweepResult:
    arr = np.asarray(p, dtype=np.float64)
    peak = int(np.argmax(arr))
    strict = bool(peak == site and np.sum(arr == arr[peak]) == 1)
    ratio = float(arr[site] / max(baseline_p, RATIO_FLOOR))
    return SweepResult([float(v) for v in arr], float(baseline_p), peak, ratio, strict, site,
                       dict(config or {}))


def position_sweep(cfg: SweepConfig, model: Transformer, clt: CrossLayerTranscoder,
                   vocab: Vocabulary) -> SweepResult:
    """Move the injection over every prompt position and read P(target) at the last one."""
    ids = resolve_word(vocab, cfg.target_word)
    L = model.spec.n_layers
    toks = list(cfg.prompt)
    if cfg.baseline == "clean":
        base_edits = []
    else:
        base_edits = compile_edits(_edits(cfg, L, None, cfg.strength), clt)
    baseline_p = word_probability(
        next_token_distribution(forward(model, toks, base_edits, capture=Capture.LOGITS)), ids)
    p = []
    for j in range(len(toks)):
        edits = _edits(cfg, L, j, cfg.strength, suppress_at=j if cfg.move_suppression else None)
        tr = forward(model, toks, compile_edits(edits, clt), capture=Capture.LOGITS)
        p.append(word_probability(next_token_distribution(tr), ids))
    return summarize_sweep(p, baseline_p, cfg.site, cfg.to_dict())


# --------------------------------------------------------------------------- statistics

@dataclass(frozen=True)
class LocalizationStat:
    """Rate with a normal-approximation interval, the exact interval, and an exact one-sided bound."""
    k: int
    n: int
    rate: float
    ci_low: float
    ci_high: float
    exact_low: float
    exact_high: float
    upper_one_sided: float
    confidence: float = 0.95

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    a = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def wald_interval(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """p +- z * sqrt(p(1-p)/n), clipped to [0, 1]; degenerate at k = 0 or k = n."""
    p = k / n
    half = float(norm.ppf(0.5 + confidence / 2)) * np.sqrt(p * (1 - p) / n)
    return max(0.0, p - half), min(1.0, p + half)


def one_sided_upper(k: int, n: int, confidence: float = 0.95) -> float:
    return 1.0 if k == n else float(beta.ppf(confidence, k + 1, n - k))


def localization_rate(results, n: int | None = None, confidence: float = 0.95) -> LocalizationStat:
    """Fraction localized with binomial intervals.

    ``results`` is a list of SweepResult, or a count ``k`` together with ``n``.
    ``ci_low``/``ci_high`` use the normal approximation; ``exact_*`` are
    Clopper-Pearson; ``upper_one_sided`` is the exact one-sided bound, the one
    to quote when k is 0.
    """
    if n is None:
        results = list(results)
        if not results:
            raise ValueError("no sweep results")
        k, n = sum(bool(r.localized) for r in results), len(results)
    else:
        k = int(results)
        if not 0 <= k <= n or n < 1:
            raise ValueError("need 0 <= k <= n and n >= 1")
    lo, hi = wald_interval(k, n, confidence)
    elo, ehi = clopper_pearson(k, n, confidence)
    return LocalizationStat(k, n, k / n, lo, hi, elo, ehi, one_sided_upper(k, n, confidence), confidence)


# --------------------------------------------------------------------------- strength sweep

@dataclass(frozen=True)
class StrengthPoint:
    strength: float
    p_target: float
    top_head: str
    top_head_delta: float
    total_shift: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def strength_sweep(cfg: SweepConfig, model: Transformer, clt: CrossLayerTranscoder,
                   vocab: Vocabulary, grid: Sequence[float]) -> list[StrengthPoint]:
    """Scale the whole suppress+inject intervention at the planning site; baseline is clean."""
    grid = [float(s) for s in grid]
    if not grid or grid[0] != 0.0 or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be ascending and start at 0")
    ids = resolve_word(vocab, cfg.target_word)
    toks = list(cfg.prompt)
    L = model.spec.n_layers
    clean = forward(model, toks)
    out = []
    for s in grid:
        tr = forward(model, toks, compile_edits(_edits(cfg, L, cfg.site, s), clt))
        rep = routing_analysis(clean, tr, cfg.site)
        top = rep.top_k[0]
        out.append(StrengthPoint(s, word_probability(next_token_distribution(tr), ids),
                                 top.name, top.delta, rep.total_shift))
    return out


# --------------------------------------------------------------------------- layer ablation

_WORD_RE = re.compile(r"[A-Za-z]+")


def last_word(line: str) -> str | None:
    words = _WORD_RE.findall(line)
    return words[-1].lower() if words else None


def rhymes(a: str | None, b: str | None, pron: Mapping[str, PhonemeEntry]) -> bool:
    """Same rhyme ending, different words; a repeated word does not count."""
    if not a or not b or a == b or a not in pron or b not in pron:
        return False
    ea, eb = rhyme_ending(pron[a].phonemes), rhyme_ending(pron[b].phonemes)
    return bool(ea) and ea == eb


@dataclass(frozen=True)
class AblationConfig:
    prompts: tuple[str, ...]  # each ends with the first line of a couplet plus a newline
    skipped: frozenset[int] = frozenset()
    max_new_tokens: int = 8

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("generation budget must be >= 1 token")


@dataclass
class AblationResult:
    skipped: list[int]
    n_couplets: int
    n_rhyme: int
    rhyme_rate: float
    lines: list[dict]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def layer_ablation(cfg: AblationConfig, model: Transformer, vocab: Vocabulary,
                   pron: Mapping[str, PhonemeEntry]) -> AblationResult:
    mask = LayerMask.of(cfg.skipped)
    stop = [vocab.newline_id] if vocab.newline_id is not None else []
    lines, hits = [], 0
    for text in cfg.prompts:
        toks = vocab.encode(text)
        new = generate(model, toks, cfg.max_new_tokens, stop_ids=stop, mask=mask)
        if stop and new and new[-1] == stop[0]:
            new = new[:-1]
        second = vocab.decode(new)
        first_line = text.rstrip("\n").split("\n")[-1]
        a, b = last_word(first_line), last_word(second)
        ok = rhymes(a, b, pron)
        hits += ok
        lines.append({"prompt": text, "generated": second, "first_word": a, "second_word": b, "rhyme": ok})
    n = len(cfg.prompts)
    return AblationResult(sorted(cfg.skipped), n, hits, hits / n if n else 0.0, lines)


# --------------------------------------------------------------------------- correction

OVERRIDE_THRESHOLD = 0.1
DISRUPT_FRACTION = 0.5


@dataclass(frozen=True)
class CorrectionConfig:
    prompt: tuple[int, ...]
    commit_edits: tuple[FeatureEdit, ...]
    commit_word: str
    correct_feature: FeatureId
    correct_layers: tuple[int, int]
    correct_word: str
    grid: tuple[float, ...] = (0.0, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0)
    planning_site: int | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("strength grid must be ascending")
        top = max((e.feature.layer for e in self.commit_edits), default=-1)
        if self.correct_layers[0] <= top:
            raise ValueError("correction layers must lie strictly above the commit feature's layer")

    @property
    def site(self) -> int:
        return len(self.prompt) - 1 if self.planning_site is None else self.planning_site


@dataclass(frozen=True)
class CorrectionPoint:
    strength: float
    p_commit: float
    p_correct: float
    key_head_delta: float
    total_shift: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CorrectionResult:
    points: list[CorrectionPoint]
    key_head: str
    verdict: str
    p_correct_floor: float
    p_correct_max: float

    @property
    def max_correct_over_floor(self) -> float:
        return self.p_correct_max / max(self.p_correct_floor, RATIO_FLOOR)

    def to_dict(self) -> dict:
        return {"points": [p.to_dict() for p in self.points], "key_head": self.key_head,
                "verdict": self.verdict, "p_correct_floor": self.p_correct_floor,
                "p_correct_max": self.p_correct_max,
                "max_correct_over_floor": self.max_correct_over_floor}


def classify_correction(points: Sequence[CorrectionPoint]) -> str:
    if max(p.p_correct for p in points) >= OVERRIDE_THRESHOLD:
        return "overridable"
    if min(p.p_commit for p in points) < DISRUPT_FRACTION * points[0].p_commit:
        return "disrupted"
    return "irrevocable"


def correction_test(cfg: CorrectionConfig, model: Transformer, clt: CrossLayerTranscoder,
                    vocab: Vocabulary) -> CorrectionResult:
    """Commit, then push a contradictory feature at post-commitment layers only."""
    commit_ids, correct_ids = resolve_word(vocab, cfg.commit_word), resolve_word(vocab, cfg.correct_word)
    toks = list(cfg.prompt)
    clean = forward(model, toks)
    commit_only = compile_edits(cfg.commit_edits, clt)
    key = routing_analysis(clean, forward(model, toks, commit_only), cfg.site).top_k[0]
    points = []
    for s in cfg.grid:
        corr = compile_edits([FeatureEdit(cfg.correct_feature, "inject", float(s), cfg.site,
                                          tuple(cfg.correct_layers))], clt) if s != 0 else []
        tr = forward(model, toks, commit_only + corr)
        probs = next_token_distribution(tr)
        rep = routing_analysis(clean, tr, cfg.site)
        points.append(CorrectionPoint(float(s), word_probability(probs, commit_ids),
                                      word_probability(probs, correct_ids),
                                      rep.delta_of(key.layer, key.head).delta, rep.total_shift))
    return CorrectionResult(points, key.name, classify_correction(points),
                            points[0].p_correct, max(p.p_correct for p in points))
