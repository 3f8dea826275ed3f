"""Per-head attention changes on the output -> planning-site edge."""
from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import Capture, ForwardTrace

AMPLIFICATION_FLOOR = 1e-12
_HEAD_RE = re.compile(r"^L(\d+):H(\d+)$")


def parse_head(text) -> tuple[int, int]:
    if isinstance(text, (tuple, list)):
        return int(text[0]), int(text[1])
    m = _HEAD_RE.match(str(text).strip())
    if not m:
        raise ValueError(f"bad head id {text!r}; expected e.g. 'L11:H0'")
    return int(m.group(1)), int(m.group(2))


def head_name(layer: int, head: int) -> str:
    return f"L{layer}:H{head}"


@dataclass(frozen=True)
class HeadDelta:
    layer: int
    head: int
    baseline: float
    steered: float
    delta: float

    @property
    def name(self) -> str:
        return head_name(self.layer, self.head)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "head": self.head, "baseline": self.baseline,
                "steered": self.steered, "delta": self.delta}


def _rank_key(h: HeadDelta):
    return (-abs(h.delta), h.layer, h.head)


@dataclass
class RoutingReport:
    planning_site: int
    query_position: int
    deltas: list[HeadDelta]
    top_k: list[HeadDelta]
    total_shift: float
    config: dict = field(default_factory=dict)

    def delta_of(self, layer: int, head: int) -> HeadDelta:
        for h in self.deltas:
            if h.layer == layer and h.head == head:
                return h
        raise KeyError(head_name(layer, head))

    def to_dict(self) -> dict:
        return {"planning_site": self.planning_site, "query_position": self.query_position,
                "heads": [h.to_dict() for h in self.deltas],
                "top10": [h.to_dict() for h in self.top_k],
                "total_shift": self.total_shift, "config": self.config}


def routing_analysis(baseline_trace: ForwardTrace, steered_trace: ForwardTrace, planning_site: int,
                     query_position: int = -1, top_k: int = 10, config: dict | None = None) -> RoutingReport:
    """Attention[query -> planning_site] change for every (layer, query head).

    Ranking: |delta| descending, then layer, then head.
    """
    baseline_trace.require(Capture.ATTENTION)
    steered_trace.require(Capture.ATTENTION)
    a0, a1 = baseline_trace.attention, steered_trace.attention
    if a0.shape != a1.shape:
        raise ValueError(f"trace shapes differ: {a0.shape} vs {a1.shape}")
    T = a0.shape[-1]
    q = query_position % T
    if not 0 <= planning_site < T:
        raise ValueError(f"planning_site {planning_site} outside [0, {T})")
    L, H = a0.shape[:2]
    deltas = []
    for l in range(L):
        for h in range(H):
            b, s = float(a0[l, h, q, planning_site]), float(a1[l, h, q, planning_site])
            deltas.append(HeadDelta(l, h, b, s, s - b))
    ranked = sorted(deltas, key=_rank_key)
    total = float(np.sum([abs(h.delta) for h in deltas]))
    return RoutingReport(planning_site, q, deltas, ranked[:top_k], total, dict(config or {}))


def suppress_amplification(report_inject_only: RoutingReport, report_full: RoutingReport) -> float:
    return report_full.total_shift / max(report_inject_only.total_shift, AMPLIFICATION_FLOOR)


@dataclass(frozen=True)
class RecurringHead:
    layer: int
    head: int
    count: int
    mean_abs_delta: float

    def to_dict(self) -> dict:
        return {"head": head_name(self.layer, self.head), "count": self.count,
                "mean_abs_delta": self.mean_abs_delta}


def recurring_heads(reports: Sequence[RoutingReport], top_n: int = 10,
                    min_prompts: int = 2) -> list[RecurringHead]:
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    seen: dict[tuple[int, int], list[float]] = defaultdict(list)
    for rep in reports:
        for h in sorted(rep.deltas, key=_rank_key)[:top_n]:
            seen[(h.layer, h.head)].append(abs(h.delta))
    out = [RecurringHead(l, h, len(v), float(np.mean(v)))
           for (l, h), v in seen.items() if len(v) >= min_prompts]
    out.sort(key=lambda r: (-r.count, -r.mean_abs_delta, r.layer, r.head))
    return out


@dataclass
class OverlapReport:
    recurring_planning_heads: list[tuple[int, int]]
    task_b_top10: list[tuple[int, int]]
    intersection: list[tuple[int, int]]
    planning_mean_layer: float | None
    task_b_mean_layer: float | None
    planning_depth: float | None
    task_b_depth: float | None
    n_layers: int

    def to_dict(self) -> dict:
        names = lambda hs: [head_name(*h) for h in hs]
        return {"recurring_planning_heads": names(self.recurring_planning_heads),
                "task_b_top10": names(self.task_b_top10),
                "intersection": names(self.intersection),
                "planning_mean_layer": self.planning_mean_layer,
                "task_b_mean_layer": self.task_b_mean_layer,
                "planning_depth": self.planning_depth, "task_b_depth": self.task_b_depth,
                "n_layers": self.n_layers}


def cross_task_overlap(planning_heads: Iterable, factual_top10: Iterable, n_layers: int,
                       n_heads: int | None = None) -> OverlapReport:
    """Intersection of two head sets plus the mean layer of each.

    Depth fraction is mean layer / n_layers.
    """
    def norm(hs):
        out = []
        for h in hs:
            if isinstance(h, RecurringHead):
                h = (h.layer, h.head)
            l, hd = parse_head(h)
            if not 0 <= l < n_layers or (n_heads is not None and not 0 <= hd < n_heads):
                raise ValueError(f"{head_name(l, hd)} does not fit a {n_layers}-layer model")
            out.append((l, hd))
        return sorted(set(out))

    a, b = norm(planning_heads), norm(factual_top10)
    inter = sorted(set(a) & set(b))
    mean = lambda hs: float(np.mean([l for l, _ in hs])) if hs else None
    ma, mb = mean(a), mean(b)
    return OverlapReport(a, b, inter, ma, mb,
                         None if ma is None else ma / n_layers,
                         None if mb is None else mb / n_layers, n_layers)
