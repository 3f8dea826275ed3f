"""Vocabulary scans of CLT decoder vectors and phonetic rhyme grouping."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .clt import CltShard, CrossLayerTranscoder, FeatureId, stream_shards
from .vocab import Vocabulary, strip_marker

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class VocabScanEntry:
    feature: FeatureId
    top_tokens: tuple[tuple[int, str, float], ...]  # (token id, surface, cosine), descending

    @property
    def top1(self) -> tuple[int, str, float]:
        return self.top_tokens[0]

    def to_dict(self) -> dict:
        return {"feature": str(self.feature),
                "top_tokens": [{"id": i, "token": s, "cosine": c} for i, s, c in self.top_tokens]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VocabScanEntry":
        return cls(FeatureId.parse(d["feature"]),
                   tuple((int(t["id"]), t["token"], float(t["cosine"])) for t in d["top_tokens"]))


@dataclass(frozen=True)
class PhonemeEntry:
    word: str
    phonemes: tuple[str, ...]

    def __post_init__(self):
        if not self.phonemes:
            raise ValueError(f"{self.word}: empty phoneme list")


@dataclass(frozen=True)
class RhymeGroup:
    ending: str
    members: tuple[tuple[str, FeatureId, float], ...]

    @property
    def words(self) -> list[str]:
        return sorted({w for w, _, _ in self.members})

    def to_dict(self) -> dict:
        return {"ending": self.ending,
                "members": [{"word": w, "feature": str(f), "cosine": c} for w, f, c in self.members]}


def is_clean_token(surface: str) -> bool:
    core = strip_marker(surface)
    return bool(core) and core.isascii() and core.isalpha()


def _is_vowel(ph: str) -> bool:
    return ph[-1:].isdigit()


def rhyme_ending(phonemes: Sequence[str] | str) -> str:
    """Phonemes from the last primary-stressed vowel (else the last vowel) onward."""
    phs = phonemes.split() if isinstance(phonemes, str) else list(phonemes)
    start = None
    for i, ph in enumerate(phs):
        if _is_vowel(ph) and ph.endswith("1"):
            start = i
    if start is None:
        for i, ph in enumerate(phs):
            if _is_vowel(ph):
                start = i
    return "" if start is None else " ".join(phs[start:])


def parse_cmu(text: str) -> dict[str, PhonemeEntry]:
    """Lower-cased word -> first listed pronunciation."""
    out: dict[str, PhonemeEntry] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith(";;;") or line.startswith("#"):
            continue
        parts = line.split()
        head, phs = parts[0], parts[1:]
        if "#" in phs:
            phs = phs[:phs.index("#")]
        if not phs:
            continue
        if head.endswith(")") and "(" in head:
            continue  # alternate pronunciation
        word = head.lower()
        if word not in out:
            out[word] = PhonemeEntry(word, tuple(phs))
    return out


def load_cmu(path) -> dict[str, PhonemeEntry]:
    return parse_cmu(Path(path).read_text(encoding="latin-1"))


def decoder_vectors(shard: CltShard, mode: str = "sum") -> np.ndarray:
    """(F, d) decoder vector per feature: the home-layer row, or the sum of all rows."""
    if mode == "home":
        return shard.W_dec[:, 0]
    if mode == "sum":
        return shard.W_dec.sum(axis=1)
    raise ValueError(f"decoder mode must be 'home' or 'sum', got {mode!r}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, NORM_FLOOR)


def _top_k_rows(cos: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k largest values; ties go to the lower index."""
    k = min(k, cos.shape[1])
    part = np.argpartition(-cos, k - 1, axis=1)[:, :k] if k < cos.shape[1] else \
        np.tile(np.arange(cos.shape[1]), (cos.shape[0], 1))
    out = np.empty_like(part)
    for r in range(cos.shape[0]):
        cand = part[r]
        # boundary ties: argpartition may pick an arbitrary member of a tied set
        kth = cos[r, cand].min()
        cand = np.union1d(cand, np.flatnonzero(cos[r] == kth))
        order = np.lexsort((cand, -cos[r, cand]))
        out[r] = cand[order][:k]
    return out


def scan_vocabulary(clt: CrossLayerTranscoder, embedding_table: np.ndarray, vocab: Vocabulary,
                    chunk_size: int = 4096, top_k: int = 5, clean_only: bool = True,
                    decoder: str = "sum", dtype=np.float64) -> list[VocabScanEntry]:
    """Cosine between every feature's decoder vector and every token embedding.

    Features are processed ``chunk_size`` at a time so the full
    (features x vocab) matrix never exists. With ``clean_only`` a feature is
    reported only if its top-1 token is a clean word.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    emb = np.asarray(embedding_table, dtype=dtype)
    if emb.shape[0] != len(vocab):
        raise ValueError(f"embedding table has {emb.shape[0]} rows, vocabulary has {len(vocab)}")
    emb_unit = _unit_rows(emb)

    def visit(shard: CltShard) -> list[VocabScanEntry]:
        dec = decoder_vectors(shard, decoder)
        found = []
        for start in range(0, dec.shape[0], chunk_size):
            block = _unit_rows(np.asarray(dec[start:start + chunk_size], dtype=dtype))
            cos = block @ emb_unit.T
            top = _top_k_rows(cos, top_k)
            for r in range(block.shape[0]):
                toks = tuple((int(t), vocab.surface(int(t)), float(cos[r, t])) for t in top[r])
                if clean_only and not is_clean_token(toks[0][1]):
                    continue
                found.append(VocabScanEntry(FeatureId(shard.layer, start + r), toks))
        return found

    return [e for per_layer in stream_shards(clt, visit) for e in per_layer]


def build_rhyme_groups(scan: Iterable[VocabScanEntry], pron: Mapping[str, PhonemeEntry],
                       min_cosine: float = 0.3, min_words: int = 2) -> list[RhymeGroup]:
    buckets: dict[str, list[tuple[str, FeatureId, float]]] = defaultdict(list)
    for entry in scan:
        _, surface, cos = entry.top1
        if cos < min_cosine or not is_clean_token(surface):
            continue
        word = strip_marker(surface).lower()
        ph = pron.get(word)
        if ph is None:
            continue
        ending = rhyme_ending(ph.phonemes)
        if ending:
            buckets[ending].append((word, entry.feature, cos))
    groups = []
    for ending, members in buckets.items():
        if len({w for w, _, _ in members}) < min_words:
            continue
        members.sort(key=lambda m: (m[0], m[1]))
        groups.append(RhymeGroup(ending, tuple(members)))
    groups.sort(key=lambda g: (-len(g.members), g.ending))
    return groups


@dataclass(frozen=True)
class KeywordHit:
    keyword: str
    feature: FeatureId
    rank: int  # position of the keyword inside the feature's top-k
    context: tuple[str, ...]  # the feature's full top-k surfaces, for manual audit

    def to_dict(self) -> dict:
        return {"keyword": self.keyword, "feature": str(self.feature), "rank": self.rank,
                "context": list(self.context)}


def keyword_domain_scan(scan: Iterable[VocabScanEntry], keywords: Sequence[str]) -> dict[str, list[KeywordHit]]:
    """Features whose top-k tokens contain a keyword (case-insensitive, marker-stripped)."""
    if not keywords:
        raise ValueError("keyword list is empty")
    wanted = {k.strip().lower(): k for k in keywords}
    hits: dict[str, list[KeywordHit]] = {k: [] for k in keywords}
    for entry in scan:
        surfaces = tuple(s for _, s, _ in entry.top_tokens)
        for rank, s in enumerate(surfaces):
            key = strip_marker(s).strip().lower()
            if key in wanted:
                hits[wanted[key]].append(KeywordHit(wanted[key], entry.feature, rank, surfaces))
    return hits
