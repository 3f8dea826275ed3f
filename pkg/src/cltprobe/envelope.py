"""Versioned JSON result envelopes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

SCHEMA_VERSION = "1.0"


def to_jsonable(x: Any) -> Any:
    """Plain JSON types; numpy scalars/arrays converted, non-finite floats become strings."""
    if hasattr(x, "to_dict"):
        return to_jsonable(x.to_dict())
    if isinstance(x, Mapping):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set, frozenset)):
        items = sorted(x) if isinstance(x, (set, frozenset)) else x
        return [to_jsonable(v) for v in items]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, Path):
        return str(x)
    return x


@dataclass
class ResultEnvelope:
    command: str
    config: dict
    payload: dict
    provenance: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "command": self.command,
                "config": to_jsonable(self.config), "timing": to_jsonable(self.timing),
                "payload": to_jsonable(self.payload), "provenance": to_jsonable(self.provenance)}

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: Mapping) -> "ResultEnvelope":
        for key in ("schema_version", "command", "config", "payload"):
            if key not in d:
                raise ValueError(f"envelope is missing {key!r}")
        return cls(d["command"], dict(d["config"]), dict(d["payload"]), dict(d.get("provenance", {})),
                   dict(d.get("timing", {})), d["schema_version"])

    @classmethod
    def loads(cls, text: str) -> "ResultEnvelope":
        return cls.from_dict(json.loads(text))

    @classmethod
    def read(cls, path) -> "ResultEnvelope":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def payload_bytes(envelope: Mapping | ResultEnvelope) -> bytes:
    """Canonical bytes of the payload alone; what determinism checks compare."""
    d = envelope.to_dict() if isinstance(envelope, ResultEnvelope) else envelope
    return dumps(d["payload"]).encode("utf-8")
