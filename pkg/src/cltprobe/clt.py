"""Cross-layer transcoders: loading, encoding and compiling feature edits.

A feature living at layer ``l`` has one encoder row (read from the residual
at layer ``l``) and one decoder row for every layer ``l' >= l``. Archive
layout, per layer ``l``::

    layers.{l}.W_enc      (F, d_model)
    layers.{l}.W_dec      (F, n_layers - l, d_model)
    layers.{l}.b_enc      (F,)             optional
    layers.{l}.threshold  (F,)             optional, JumpReLU
    layers.{l}.b_dec      (d_model,)       optional

Injection and suppression both write decoder rows straight into the residual;
the encoder is never involved.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .archive import ArchiveError, TensorArchive, write_archive
from .model import (Capture, ResidualEdit, Transformer, forward, kl_divergence,
                    next_token_distribution)

READ_POINTS = ("post_attention_pre_mlp", "post_block")
ACTIVATIONS = ("relu", "identity", "jumprelu")


class CltError(ValueError):
    pass


@dataclass(frozen=True)
class CltSpec:
    features_per_layer: int
    n_layers: int
    d_model: int
    read_point: str = "post_attention_pre_mlp"
    activation: str = "relu"

    def __post_init__(self):
        if self.features_per_layer < 1 or self.n_layers < 1 or self.d_model < 1:
            raise CltError("features_per_layer, n_layers and d_model must be >= 1")
        if self.read_point not in READ_POINTS:
            raise CltError(f"read_point must be one of {READ_POINTS}")
        if self.activation not in ACTIVATIONS:
            raise CltError(f"activation must be one of {ACTIVATIONS}")


_FEATURE_RE = re.compile(r"^L(\d+):(\d+)$")


@dataclass(frozen=True, order=True)
class FeatureId:
    layer: int
    index: int

    @classmethod
    def parse(cls, text: "str | FeatureId") -> "FeatureId":
        if isinstance(text, FeatureId):
            return text
        m = _FEATURE_RE.match(text.strip())
        if not m:
            raise CltError(f"bad feature id {text!r}; expected e.g. 'L22:10243'")
        return cls(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"L{self.layer}:{self.index}"


@dataclass(frozen=True)
class CltShard:
    layer: int
    W_enc: np.ndarray
    W_dec: np.ndarray
    b_enc: np.ndarray | None = None
    threshold: np.ndarray | None = None
    b_dec: np.ndarray | None = None

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.W_enc, self.W_dec, self.b_enc, self.threshold, self.b_dec)
                   if a is not None)

    def decoder_row(self, index: int, target_layer: int) -> np.ndarray:
        return self.W_dec[index, target_layer - self.layer]


@dataclass(frozen=True)
class FeatureEdit:
    feature: FeatureId
    mode: str  # "suppress" | "inject"
    strength: float
    position: int
    layer_range: tuple[int, int]  # inclusive

    def __post_init__(self):
        if self.mode not in ("suppress", "inject"):
            raise CltError(f"mode must be 'suppress' or 'inject', got {self.mode!r}")
        if self.mode == "suppress" and self.strength < 0:
            raise CltError("suppress strength is a magnitude; pass it non-negative")
        lo, hi = self.layer_range
        if lo < self.feature.layer:
            raise CltError(f"{self.feature}: layer range starts at L{lo}, below its home layer")
        if hi < lo:
            raise CltError(f"{self.feature}: empty layer range {self.layer_range}")

    @property
    def effective_strength(self) -> float:
        return -self.strength if self.mode == "suppress" else self.strength

    @classmethod
    def make(cls, feature, mode: str, strength: float, position: int,
             layers: tuple[int, int] | None = None, n_layers: int | None = None) -> "FeatureEdit":
        """Build an edit; without ``layers`` the range runs to the last layer."""
        fid = FeatureId.parse(feature)
        if layers is None:
            if n_layers is None:
                raise CltError("need either layers or n_layers")
            layers = (fid.layer, n_layers - 1)
        return cls(fid, mode, float(strength), int(position), (int(layers[0]), int(layers[1])))

    def to_dict(self) -> dict:
        return {"feature": str(self.feature), "mode": self.mode, "strength": self.strength,
                "position": self.position, "layers": list(self.layer_range)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], n_layers: int | None = None) -> "FeatureEdit":
        return cls.make(d["feature"], d.get("mode", "inject"), d["strength"], d["position"],
                        tuple(d["layers"]) if d.get("layers") is not None else None, n_layers)


def parse_edit_list(text_or_list, n_layers: int | None = None) -> list[FeatureEdit]:
    items = json.loads(text_or_list) if isinstance(text_or_list, str) else text_or_list
    return [FeatureEdit.from_dict(d, n_layers) for d in items]


# --------------------------------------------------------------------------- storage

def _shard_names(layer: int) -> dict[str, str]:
    p = f"layers.{layer}."
    return {k: p + k for k in ("W_enc", "W_dec", "b_enc", "threshold", "b_dec")}


def save_clt(path, spec: CltSpec, shards: Sequence[CltShard]) -> Path:
    tensors: dict[str, np.ndarray] = {}
    for sh in shards:
        names = _shard_names(sh.layer)
        for key, name in names.items():
            arr = getattr(sh, key)
            if arr is not None:
                tensors[name] = arr
    meta = {"kind": "clt", "clt_spec": json.dumps(spec.__dict__, sort_keys=True)}
    return write_archive(path, tensors, meta)


def _load_shard(arc: TensorArchive, spec: CltSpec, layer: int, dtype=None) -> CltShard:
    names = _shard_names(layer)
    if names["W_enc"] not in arc or names["W_dec"] not in arc:
        raise CltError(f"archive {arc.path.name} has no shard for layer {layer}")
    infos = {k: arc.info(n) for k, n in names.items() if n in arc}
    dts = {i.dtype for i in infos.values()}
    if len(dts) != 1 or not dts <= {"F64", "F32", "F16", "BF16"}:
        raise CltError(f"layer {layer}: inconsistent or non-float dtypes {sorted(dts)}")
    F, d, L = spec.features_per_layer, spec.d_model, spec.n_layers
    expect = {"W_enc": (F, d), "W_dec": (F, L - layer, d), "b_enc": (F,),
              "threshold": (F,), "b_dec": (d,)}
    for k, info in infos.items():
        if info.shape != expect[k]:
            raise CltError(f"layer {layer}: {k} has shape {info.shape}, expected {expect[k]}")
    arrays = {k: arc.read(names[k], dtype) for k in infos}
    return CltShard(layer=layer, **arrays)


class CrossLayerTranscoder:
    """A CLT backed by an archive on disk (lazy) or by in-memory shards."""

    def __init__(self, spec: CltSpec, shards: Sequence[CltShard] | None = None,
                 path: str | Path | None = None, dtype=np.float32):
        self.spec = spec
        self.path = Path(path) if path is not None else None
        self.dtype = np.dtype(dtype)
        self._shards: dict[int, CltShard] = {}
        for sh in shards or ():
            self._shards[sh.layer] = sh
        if self.path is None and len(self._shards) != spec.n_layers:
            missing = sorted(set(range(spec.n_layers)) - set(self._shards))
            raise CltError(f"no shard for layer(s) {missing}")

    @classmethod
    def open(cls, path, dtype=np.float32) -> "CrossLayerTranscoder":
        arc = TensorArchive(path)
        if "clt_spec" not in arc.metadata:
            raise CltError(f"{path}: archive has no clt_spec metadata")
        spec = CltSpec(**json.loads(arc.metadata["clt_spec"]))
        return cls(spec, path=path, dtype=dtype)

    def _archive(self) -> TensorArchive:
        if self.path is None:
            raise CltError("in-memory CLT has no archive")
        return TensorArchive(self.path)

    def shard(self, layer: int, cache: bool = True) -> CltShard:
        if not 0 <= layer < self.spec.n_layers:
            raise CltError(f"layer {layer} outside [0, {self.spec.n_layers})")
        sh = self._shards.get(layer)
        if sh is None:
            sh = _load_shard(self._archive(), self.spec, layer, self.dtype)
            if cache:
                self._shards[layer] = sh
        return sh

    def check_feature(self, f: FeatureId) -> None:
        if not 0 <= f.layer < self.spec.n_layers:
            raise CltError(f"{f}: layer outside [0, {self.spec.n_layers})")
        if not 0 <= f.index < self.spec.features_per_layer:
            raise CltError(f"{f}: index outside [0, {self.spec.features_per_layer})")

    def decoder_rows(self, f: FeatureId) -> np.ndarray:
        """All decoder rows of one feature, shape (n_layers - f.layer, d_model)."""
        self.check_feature(f)
        sh = self._shards.get(f.layer)
        if sh is not None:
            return sh.W_dec[f.index]
        arc = self._archive()
        name = _shard_names(f.layer)["W_dec"]
        if name not in arc:
            raise CltError(f"archive has no shard for layer {f.layer}")
        return arc.read_rows(name, f.index, f.index + 1, self.dtype)[0]

    def encode(self, layer: int, residual: np.ndarray) -> np.ndarray:
        return encode(self.shard(layer), residual, self.spec.activation)


def stream_shards(source, visitor: Callable[[CltShard], Any], dtype=None) -> list:
    """Visit shards in ascending layer order, holding at most one in memory.

    ``source`` is an archive path or a :class:`CrossLayerTranscoder`. Each
    shard is dropped before the next one is read.
    """
    if isinstance(source, CrossLayerTranscoder):
        if source.path is None:
            return [visitor(source.shard(l)) for l in range(source.spec.n_layers)]
        path, spec = source.path, source.spec
    else:
        path = Path(source)
        arc = TensorArchive(path)
        if "clt_spec" not in arc.metadata:
            raise CltError(f"{path}: archive has no clt_spec metadata")
        spec = CltSpec(**json.loads(arc.metadata["clt_spec"]))
    arc = TensorArchive(path)
    results = []
    for layer in range(spec.n_layers):
        shard = _load_shard(arc, spec, layer, dtype)
        results.append(visitor(shard))
        del shard
    return results


def encode(shard: CltShard, residual: np.ndarray, activation: str = "relu") -> np.ndarray:
    r = np.asarray(residual)
    if r.shape[-1] != shard.W_enc.shape[1]:
        raise CltError(f"residual width {r.shape[-1]} != encoder width {shard.W_enc.shape[1]}")
    pre = r.astype(shard.W_enc.dtype, copy=False) @ shard.W_enc.T
    if shard.b_enc is not None:
        pre = pre + shard.b_enc
    if activation == "identity":
        return pre
    if activation == "jumprelu" and shard.threshold is not None:
        return np.where(pre > shard.threshold, pre, 0).astype(pre.dtype)
    return np.maximum(pre, 0)


def compile_edits(edits: Iterable[FeatureEdit], clt: CrossLayerTranscoder) -> list[ResidualEdit]:
    """One ResidualEdit per (edit, downstream layer in its range)."""
    out: list[ResidualEdit] = []
    L = clt.spec.n_layers
    for e in edits:
        clt.check_feature(e.feature)
        lo, hi = e.layer_range
        if lo < e.feature.layer:
            raise CltError(f"{e.feature}: layer range starts below its home layer")
        if hi >= L:
            raise CltError(f"{e.feature}: layer range ends at L{hi}, model has {L} layers")
        rows = clt.decoder_rows(e.feature)
        s = rows.dtype.type(e.effective_strength)
        for lp in range(lo, hi + 1):
            out.append(ResidualEdit(lp, e.position, s * rows[lp - e.feature.layer],
                                    tag=f"{e.mode}:{e.feature}@{e.position}/L{lp}"))
    return out


# --------------------------------------------------------------------------- validation

def feature_activations(clt: CrossLayerTranscoder, residual_by_layer: np.ndarray) -> np.ndarray:
    """(n_layers, F) activations from per-layer residual vectors at one position."""
    return np.stack([clt.encode(l, residual_by_layer[l]) for l in range(clt.spec.n_layers)])


def _read_residuals(trace, read_point: str, position: int) -> np.ndarray:
    src = trace.residual_mid if read_point == "post_attention_pre_mlp" else trace.residual_post
    return src[:, position]


def top_features(acts: np.ndarray, k: int) -> list[tuple[FeatureId, float]]:
    flat = acts.reshape(-1)
    F = acts.shape[1]
    order = np.lexsort((np.arange(flat.size), -flat))[:k]
    return [(FeatureId(int(i // F), int(i % F)), float(flat[i])) for i in order]


def reference_from_oracle(model: Transformer, clt: CrossLayerTranscoder, prompts,
                          top_k: int = 10, injections: Sequence | None = None,
                          position: int = -1) -> list[dict]:
    """Reference outputs from the float64 brute-force path (oracle forward + float64 encode)."""
    from .oracle import oracle_distribution, oracle_forward

    clt64 = CrossLayerTranscoder(clt.spec, [clt.shard(l) for l in range(clt.spec.n_layers)],
                                 dtype=np.float64)
    clt64._shards = {l: CltShard(l, *(None if a is None else np.asarray(a, np.float64)
                                      for a in (s.W_enc, s.W_dec, s.b_enc, s.threshold, s.b_dec)))
                     for l, s in clt64._shards.items()}
    out = []
    for i, prompt in enumerate(prompts):
        tr = oracle_forward(model, prompt)
        acts = feature_activations(clt64, _read_residuals(tr, clt.spec.read_point, position))
        entry: dict[str, Any] = {
            "prompt": [int(t) for t in prompt],
            "position": position,
            "top_features": [{"feature": str(f), "activation": a} for f, a in top_features(acts, top_k)],
        }
        inj = injections[i] if injections is not None else None
        if inj:
            edits = compile_edits(inj, clt64)
            entry["injection"] = [e.to_dict() for e in inj]
            entry["injected_probs"] = oracle_distribution(model, prompt, edits, position=position).tolist()
        out.append(entry)
    return out


@dataclass
class ValidationReport:
    top10_match_rate: float
    n_matched: int
    n_total: int
    max_rel_err: float
    kl_under_injection: float | None
    kl_vs_reference: float | None
    mismatches: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def validate_against_reference(model: Transformer, clt: CrossLayerTranscoder, prompts,
                               reference_outputs: Sequence[Mapping], top_k: int = 10) -> ValidationReport:
    """Compare this engine's top-k active features and injected outputs to a reference.

    ``kl_under_injection`` is the mean KL(clean || injected) of this engine's
    own next-token distributions; ``kl_vs_reference`` is the mean
    KL(reference injected || engine injected) where the reference ships
    injected probabilities.
    """
    if len(prompts) != len(reference_outputs):
        raise CltError(f"{len(prompts)} prompts but {len(reference_outputs)} reference entries")
    n_matched = n_total = 0
    max_rel = 0.0
    kls, kl_ref = [], []
    mismatches = []
    for prompt, ref in zip(prompts, reference_outputs):
        pos = int(ref.get("position", -1))
        tr = forward(model, prompt, capture=Capture.ALL)
        acts = feature_activations(clt, _read_residuals(tr, clt.spec.read_point, pos))
        ours = dict(top_features(acts, top_k))
        for item in ref["top_features"][:top_k]:
            fid = FeatureId.parse(item["feature"])
            n_total += 1
            if fid in ours:
                n_matched += 1
                ref_a = float(item["activation"])
                got = float(acts[fid.layer, fid.index])
                max_rel = max(max_rel, abs(got - ref_a) / max(abs(ref_a), 1e-30))
            else:
                mismatches.append({"prompt": list(map(int, prompt)), "feature": str(fid)})
        if ref.get("injection"):
            edits = compile_edits(parse_edit_list(ref["injection"], clt.spec.n_layers), clt)
            p_clean = next_token_distribution(tr, pos)
            p_inj = next_token_distribution(forward(model, prompt, edits, capture=Capture.LOGITS), pos)
            kls.append(kl_divergence(p_clean, p_inj))
            if ref.get("injected_probs") is not None:
                kl_ref.append(kl_divergence(np.asarray(ref["injected_probs"], dtype=np.float64), p_inj))
    return ValidationReport(
        top10_match_rate=n_matched / n_total if n_total else 0.0,
        n_matched=n_matched, n_total=n_total, max_rel_err=max_rel,
        kl_under_injection=float(np.mean(kls)) if kls else None,
        kl_vs_reference=float(np.mean(kl_ref)) if kl_ref else None,
        mismatches=mismatches,
    )
