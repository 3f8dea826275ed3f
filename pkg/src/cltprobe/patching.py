"""Counterfactual residual patching at subject or template positions."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (Capture, ResidualPatch, Transformer, forward, kl_divergence,
                    next_token_distribution)
from .routing import routing_analysis
from .vocab import Vocabulary

SEPARATION_FLOOR = 1e-12


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class FactPair:
    prompt_original: tuple[int, ...]
    prompt_counterfactual: tuple[int, ...]
    subject_span: tuple[int, int]  # [start, stop) in the original prompt
    answer_original: int
    answer_counterfactual: int
    cf_subject_span: tuple[int, int] | None = None  # defaults to subject_span
    label: str = ""

    def __post_init__(self):
        for span, prompt in ((self.subject_span, self.prompt_original),
                             (self.donor_span, self.prompt_counterfactual)):
            a, b = span
            if not 0 <= a < b <= len(prompt):
                raise PatchError(f"subject span {span} outside a prompt of length {len(prompt)}")

    @property
    def donor_span(self) -> tuple[int, int]:
        return self.cf_subject_span if self.cf_subject_span is not None else self.subject_span

    def to_dict(self) -> dict:
        return {"prompt": list(self.prompt_original), "cf_prompt": list(self.prompt_counterfactual),
                "subject_span": list(self.subject_span), "cf_subject_span": list(self.donor_span),
                "answer": self.answer_original, "cf_answer": self.answer_counterfactual,
                "label": self.label}

    @classmethod
    def from_fixture(cls, d: Mapping) -> "FactPair":
        return cls(tuple(d["prompt"]), tuple(d["cf_prompt"]), tuple(d["subject_span"]),
                   int(d["answer"]), int(d["cf_answer"]),
                   tuple(d["cf_subject_span"]) if d.get("cf_subject_span") else None,
                   d.get("template", d.get("label", "")))


def _find(seq: Sequence[int], sub: Sequence[int]) -> int:
    for i in range(len(seq) - len(sub), -1, -1):
        if list(seq[i:i + len(sub)]) == list(sub):
            return i
    return -1


def pair_from_text(item: Mapping, vocab: Vocabulary) -> FactPair:
    """Build a pair from ``{prompt, subject, answer, cf_prompt, cf_answer[, cf_subject]}``."""
    orig = vocab.encode(item["prompt"])
    cf = vocab.encode(item["cf_prompt"])

    def span(prompt, subject):
        for form in (subject, " " + subject.lstrip()):
            try:
                ids = vocab.encode(form, add_bos=False)
            except ValueError:
                continue
            at = _find(prompt, ids)
            if at >= 0:
                return (at, at + len(ids))
        raise PatchError(f"subject {subject!r} not found in prompt")

    s_span = span(orig, item["subject"])
    cf_span = span(cf, item.get("cf_subject", item["subject"]))

    def first(ans):
        ids = vocab.encode(ans if ans.startswith(" ") else " " + ans, add_bos=False)
        if not ids:
            raise PatchError(f"answer {ans!r} tokenizes to nothing")
        return ids[0]

    return FactPair(tuple(orig), tuple(cf), s_span, first(item["answer"]), first(item["cf_answer"]),
                    cf_span, item.get("label", item["subject"]))


def screen_gold_pairs(candidates: Sequence[FactPair], model: Transformer) -> list[FactPair]:
    """Keep pairs whose greedy top-1 matches the answer on both prompts."""
    gold = []
    for pr in candidates:
        top_o = int(np.argmax(forward(model, pr.prompt_original, capture=Capture.LOGITS).logits[-1]))
        top_c = int(np.argmax(forward(model, pr.prompt_counterfactual, capture=Capture.LOGITS).logits[-1]))
        if top_o == pr.answer_original and top_c == pr.answer_counterfactual:
            gold.append(pr)
    return gold


@dataclass(frozen=True)
class PatchResult:
    block: tuple[int, int]
    positions: str
    changed: bool
    exact_flip: bool
    kl: float
    label: str = ""

    def __post_init__(self):
        assert not self.exact_flip or self.changed

    def to_dict(self) -> dict:
        return {"block": list(self.block), "positions": self.positions, "changed": self.changed,
                "exact_flip": self.exact_flip, "kl": self.kl, "label": self.label}


def aligned_positions(pair: FactPair, positions: str) -> list[tuple[int, int]]:
    """(recipient, donor) position pairs, aligned from the end of each span."""
    if positions == "subject":
        (a, b), (c, d) = pair.subject_span, pair.donor_span
        n = min(b - a, d - c)
        return [(b - n + i, d - n + i) for i in range(n)]
    if positions == "template":
        To, Tc = len(pair.prompt_original), len(pair.prompt_counterfactual)
        if To != Tc:
            raise PatchError("template patching needs prompts of equal length")
        a, b = pair.subject_span
        # the last position is the readout; patching it would copy the answer itself
        return [(t, t) for t in range(1, To - 1) if not a <= t < b]
    raise PatchError(f"positions must be 'subject' or 'template', got {positions!r}")


def patches_for(pair: FactPair, block: tuple[int, int], positions: str, donor_trace) -> list[ResidualPatch]:
    lo, hi = block
    return [ResidualPatch(l, r, donor_trace.residual_post[l, d], tag=f"patch L{l} pos{r}")
            for l in range(lo, hi + 1) for r, d in aligned_positions(pair, positions)]


def block_patch(pair: FactPair, block: tuple[int, int], positions: str, model: Transformer,
                _cache: dict | None = None) -> PatchResult:
    """Write the counterfactual's post-block residuals into the original run."""
    lo, hi = block
    if not 0 <= lo <= hi < model.spec.n_layers:
        raise PatchError(f"block {block} outside the model")
    cache = _cache if _cache is not None else {}
    key = (pair.prompt_original, pair.prompt_counterfactual)
    if key not in cache:
        cache[key] = (forward(model, pair.prompt_original, capture=Capture.LOGITS | Capture.ATTENTION),
                      forward(model, pair.prompt_counterfactual, capture=Capture.RESID_POST))
    clean, donor = cache[key]
    patched = forward(model, pair.prompt_original, patches=patches_for(pair, block, positions, donor),
                      capture=Capture.LOGITS)
    p0, p1 = next_token_distribution(clean), next_token_distribution(patched)
    top0, top1 = int(np.argmax(clean.logits[-1])), int(np.argmax(patched.logits[-1]))
    changed = top1 != top0
    return PatchResult((lo, hi), positions, changed, bool(changed and top1 == pair.answer_counterfactual),
                       kl_divergence(p0, p1), pair.label)


def default_blocks(n_layers: int, width: int = 4) -> list[tuple[int, int]]:
    return [(i, min(i + width - 1, n_layers - 1)) for i in range(0, n_layers, width)]


@dataclass
class BlockGradient:
    blocks: list[tuple[int, int]]
    subject_changed: list[int]
    subject_flips: list[int]
    template_changed: list[int]
    n_pairs: int
    results: list[PatchResult] = field(default_factory=list)

    @property
    def subject_rates(self) -> list[float]:
        return [c / self.n_pairs if self.n_pairs else 0.0 for c in self.subject_changed]

    @property
    def template_rates(self) -> list[float]:
        return [c / self.n_pairs if self.n_pairs else 0.0 for c in self.template_changed]

    @property
    def subject_rate(self) -> float:
        tot = self.n_pairs * len(self.blocks)
        return sum(self.subject_changed) / tot if tot else 0.0

    @property
    def template_rate(self) -> float:
        tot = self.n_pairs * len(self.blocks)
        return sum(self.template_changed) / tot if tot else 0.0

    @property
    def fact_vs_template(self) -> float | None:
        return None if self.template_rate == 0 else self.subject_rate / self.template_rate

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks], "n_pairs": self.n_pairs,
                "subject_changed": self.subject_changed, "subject_flips": self.subject_flips,
                "template_changed": self.template_changed,
                "subject_rates": self.subject_rates, "template_rates": self.template_rates,
                "subject_rate": self.subject_rate, "template_rate": self.template_rate,
                "fact_vs_template": self.fact_vs_template,
                "results": [r.to_dict() for r in self.results]}


def block_gradient(gold: Sequence[FactPair], model: Transformer,
                   blocks: Sequence[tuple[int, int]] | None = None,
                   include_template: bool = True) -> BlockGradient:
    if not gold:
        raise ValueError("gold set is empty")
    blocks = [tuple(b) for b in (blocks or default_blocks(model.spec.n_layers))]
    cache: dict = {}
    sc, sf, tc = [0] * len(blocks), [0] * len(blocks), [0] * len(blocks)
    results = []
    for pr in gold:
        for i, blk in enumerate(blocks):
            r = block_patch(pr, blk, "subject", model, cache)
            results.append(r)
            sc[i] += r.changed
            sf[i] += r.exact_flip
            if include_template and len(pr.prompt_original) == len(pr.prompt_counterfactual):
                t = block_patch(pr, blk, "template", model, cache)
                results.append(t)
                tc[i] += t.changed
    return BlockGradient(blocks, sc, sf, tc, len(gold), results)


def kl_separation(results: Sequence[PatchResult]) -> dict:
    """Mean KL of changed vs unchanged results; absent groups reported as None."""
    ch = [r.kl for r in results if r.changed]
    un = [r.kl for r in results if not r.changed]
    mc = float(np.mean(ch)) if ch else None
    mu = float(np.mean(un)) if un else None
    ratio = None if mc is None or mu is None else mc / max(mu, SEPARATION_FLOOR)
    return {"mean_changed": mc, "mean_unchanged": mu, "ratio": ratio,
            "n_changed": len(ch), "n_unchanged": len(un)}


def factual_routing(gold: Sequence[FactPair], model: Transformer,
                    blocks: Sequence[tuple[int, int]] | None = None, top_n: int = 10,
                    head_block: int = 0) -> dict:
    """Head statistics for subject patching.

    For each pair, the routing edge is last position -> last subject token,
    comparing the original run with the subject-patched run. Head appearance
    and sign statistics use block ``head_block``; total shift is reported per
    block.
    """
    blocks = [tuple(b) for b in (blocks or default_blocks(model.spec.n_layers))]
    appear: dict[tuple[int, int], list[float]] = defaultdict(list)
    shift = [[] for _ in blocks]
    for pr in gold:
        clean = forward(model, pr.prompt_original)
        donor = forward(model, pr.prompt_counterfactual, capture=Capture.RESID_POST)
        site = pr.subject_span[1] - 1
        for i, blk in enumerate(blocks):
            tr = forward(model, pr.prompt_original, patches=patches_for(pr, blk, "subject", donor))
            rep = routing_analysis(clean, tr, site, top_k=top_n)
            shift[i].append(rep.total_shift)
            if i == head_block:
                for h in rep.top_k:
                    appear[(h.layer, h.head)].append(h.delta)
    n = len(gold)
    heads = [{"head": f"L{l}:H{h}", "layer": l, "index": h,
              "appearance_rate": len(v) / n if n else 0.0,
              "negative_fraction": sum(d < 0 for d in v) / len(v),
              "mean_delta": float(np.mean(v))}
             for (l, h), v in appear.items()]
    heads.sort(key=lambda r: (-r["appearance_rate"], -abs(r["mean_delta"]), r["layer"], r["index"]))
    return {"n_pairs": n, "head_block": list(blocks[head_block]), "heads": heads,
            "block_shift": [{"block": list(b), "mean_total_shift": float(np.mean(s)) if s else 0.0}
                            for b, s in zip(blocks, shift)]}
