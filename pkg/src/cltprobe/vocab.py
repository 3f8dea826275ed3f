"""Token tables: id <-> surface string, plus a small greedy tokenizer.

Fixture vocabularies are tokenized by greedy longest match over surfaces.
Real checkpoints can wrap a HuggingFace ``tokenizer.json`` instead.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

# whitespace markers used by common subword vocabularies
SPACE_MARKERS = (" ", "▁", "Ġ")


def strip_marker(surface: str) -> str:
    """Drop at most one leading whitespace marker."""
    if surface[:1] in SPACE_MARKERS:
        return surface[1:]
    return surface


class Vocabulary:
    def __init__(self, tokens: Sequence[str], bos_id: int | None = None,
                 newline_id: int | None = None, hf_tokenizer=None):
        self.tokens = list(tokens)
        self.bos_id = bos_id
        self._hf = hf_tokenizer
        self._index: dict[str, int] = {}
        for i, t in enumerate(self.tokens):
            self._index.setdefault(t, i)
        if newline_id is None:
            newline_id = self._index.get("\n")
        self.newline_id = newline_id
        self._max_len = max((len(t) for t in self.tokens), default=0)

    def __len__(self) -> int:
        return len(self.tokens)

    def surface(self, token_id: int) -> str:
        return self.tokens[token_id]

    def id_of(self, surface: str) -> int | None:
        return self._index.get(surface)

    def encode(self, text: str, add_bos: bool = True) -> list[int]:
        if self._hf is not None:
            ids = list(self._hf.encode(text, add_special_tokens=False).ids)
        else:
            ids = []
            i = 0
            while i < len(text):
                for n in range(min(self._max_len, len(text) - i), 0, -1):
                    tid = self._index.get(text[i:i + n])
                    if tid is not None:
                        ids.append(tid)
                        i += n
                        break
                else:
                    raise ValueError(f"cannot tokenize {text[i:i + 12]!r} at offset {i}")
        if add_bos and self.bos_id is not None:
            ids = [self.bos_id] + ids
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        if self._hf is not None:
            return self._hf.decode(list(ids))
        return "".join(self.tokens[i] for i in ids if i != self.bos_id)

    def word_token_ids(self, word: str) -> list[int]:
        """Single-token ids for ``word``, `` word``, ``Word`` and `` Word``."""
        base = word.strip()
        variants = []
        for w in (base, base[:1].upper() + base[1:]):
            for marker in ("", " ", "▁", "Ġ"):
                variants.append(marker + w)
        out: list[int] = []
        for v in variants:
            tid = self._index.get(v)
            if tid is not None and tid not in out:
                out.append(tid)
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "bos_id": self.bos_id, "newline_id": self.newline_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d.get("bos_id"), d.get("newline_id"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        if path.name == "tokenizer.json":
            return cls.from_hf(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    @classmethod
    def from_hf(cls, path, bos_token: str | None = None) -> "Vocabulary":
        from tokenizers import Tokenizer  # optional dependency

        tok = Tokenizer.from_file(str(path))
        n = tok.get_vocab_size(with_added_tokens=True)
        surfaces = [tok.decode([i], skip_special_tokens=False) for i in range(n)]
        bos_id = tok.token_to_id(bos_token) if bos_token else None
        return cls(surfaces, bos_id=bos_id, hf_tokenizer=tok)
