"""Decoder-only transformer forward pass with intervention hook points.

The engine is plain numpy. Every forward pass is a pure function of the
(immutable) weights and its arguments: edits, residual patches and a layer
mask. Residual edits and patches apply *post-block*, i.e. after the named
layer's attention + MLP contribution has been added to the stream.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .archive import TensorArchive, write_archive

__all__ = [
    "Capture", "EditError", "ForwardTrace", "LayerMask", "MissingCaptureError",
    "ModelSpec", "NonFiniteActivationError", "ResidualEdit", "ResidualPatch",
    "Transformer", "forward", "generate", "kl_divergence", "load_model",
    "logit_lens", "next_token_distribution", "save_model", "softmax",
]


class EditError(ValueError):
    """An edit or patch that does not fit the model / prompt."""


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: int, where: str = "residual"):
        super().__init__(f"non-finite {where} after layer {layer}")
        self.layer = layer


class MissingCaptureError(LookupError):
    pass


class Capture(enum.Flag):
    RESID_PRE = enum.auto()
    RESID_MID = enum.auto()  # after attention, before MLP
    RESID_POST = enum.auto()
    ATTENTION = enum.auto()
    LOGITS = enum.auto()
    NONE = 0
    ALL = RESID_PRE | RESID_MID | RESID_POST | ATTENTION | LOGITS


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    d_mlp: int
    n_ctx: int = 2048
    norm_placement: str = "pre"
    tie_embeddings: bool = False
    positional: str = "none"  # none | learned | rope
    rope_theta: float = 10000.0
    mlp_act: str = "silu"  # silu | gelu_tanh | relu
    mlp_gated: bool = True
    norm_eps: float = 1e-6
    norm_offset: float = 0.0  # Gemma stores RMSNorm scale as (1 + w)
    embed_scale: float = 1.0
    post_norms: bool = False  # extra norms on attention / MLP outputs (Gemma 2)
    attn_softcap: float | None = None
    final_softcap: float | None = None
    query_scale: float | None = None  # defaults to 1/sqrt(d_head)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        for name in ("n_heads", "n_kv_heads", "d_model", "d_head", "vocab_size", "d_mlp", "n_ctx"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_kv_heads={self.n_kv_heads} does not divide n_heads={self.n_heads}")
        if self.norm_placement != "pre":
            raise ValueError("only pre-norm blocks are supported")
        if self.positional not in ("none", "learned", "rope"):
            raise ValueError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rope" and self.d_head % 2:
            raise ValueError("rope needs an even d_head")
        if self.mlp_act not in ("silu", "gelu_tanh", "relu"):
            raise ValueError(f"unknown mlp activation {self.mlp_act!r}")

    @property
    def scale(self) -> float:
        return self.query_scale if self.query_scale is not None else self.d_head ** -0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class ResidualEdit:
    """Add ``delta`` to the residual at (layer, position), after the layer's block."""
    layer: int
    position: int
    delta: np.ndarray
    tag: str = ""


@dataclass(frozen=True)
class ResidualPatch:
    """Overwrite the residual at (layer, position) with ``value``, after the layer's block."""
    layer: int
    position: int
    value: np.ndarray
    tag: str = ""


@dataclass(frozen=True)
class LayerMask:
    skipped: frozenset[int] = frozenset()

    @classmethod
    def of(cls, layers: Iterable[int] = ()) -> "LayerMask":
        return cls(frozenset(int(l) for l in layers))

    def __contains__(self, layer: int) -> bool:
        return layer in self.skipped


def _param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, H, K, dh, V, m = (spec.d_model, spec.n_heads, spec.n_kv_heads, spec.d_head,
                         spec.vocab_size, spec.d_mlp)
    shapes: dict[str, tuple[int, ...]] = {"embed.W_E": (V, d), "ln_final.w": (d,)}
    if spec.positional == "learned":
        shapes["embed.W_pos"] = (spec.n_ctx, d)
    if not spec.tie_embeddings:
        shapes["unembed.W_U"] = (d, V)
    for l in range(spec.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.w": (d,), p + "ln2.w": (d,),
            p + "attn.W_Q": (H, d, dh), p + "attn.W_K": (K, d, dh),
            p + "attn.W_V": (K, d, dh), p + "attn.W_O": (H, dh, d),
            p + "mlp.W_in": (d, m), p + "mlp.W_out": (m, d),
        })
        if spec.mlp_gated:
            shapes[p + "mlp.W_gate"] = (d, m)
        if spec.post_norms:
            shapes[p + "ln1_post.w"] = (d,)
            shapes[p + "ln2_post.w"] = (d,)
    return shapes


def _optional_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    d, H, K, dh, m = spec.d_model, spec.n_heads, spec.n_kv_heads, spec.d_head, spec.d_mlp
    shapes: dict[str, tuple[int, ...]] = {"unembed.b_U": (spec.vocab_size,)}
    for l in range(spec.n_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "attn.b_Q": (H, dh), p + "attn.b_K": (K, dh), p + "attn.b_V": (K, dh),
            p + "attn.b_O": (d,), p + "mlp.b_in": (m,), p + "mlp.b_out": (d,),
        })
        if spec.mlp_gated:
            shapes[p + "mlp.b_gate"] = (m,)
    return shapes


class Transformer:
    """Immutable weights plus geometry. Safe to share across concurrent forwards."""

    def __init__(self, spec: ModelSpec, params: Mapping[str, np.ndarray],
                 dtype: np.dtype | type = np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        required = _param_shapes(spec)
        optional = _optional_shapes(spec)
        missing = sorted(set(required) - set(params))
        if missing:
            raise ValueError(f"missing parameters: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
        unknown = sorted(set(params) - set(required) - set(optional))
        if unknown:
            raise ValueError(f"unexpected parameters: {unknown[:5]}")
        self.params: dict[str, np.ndarray] = {}
        for name, arr in params.items():
            expected = required.get(name) or optional[name]
            a = np.array(arr, dtype=self.dtype, copy=True)
            if a.shape != expected:
                raise ValueError(f"{name}: shape {a.shape} != expected {expected}")
            if not np.isfinite(a).all():
                raise ValueError(f"{name}: non-finite weights")
            a.setflags(write=False)
            self.params[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def get(self, name: str) -> np.ndarray | None:
        return self.params.get(name)

    @property
    def W_E(self) -> np.ndarray:
        return self.params["embed.W_E"]

    @property
    def W_U(self) -> np.ndarray:
        if self.spec.tie_embeddings:
            return self.params["embed.W_E"].T
        return self.params["unembed.W_U"]

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.spec, self.params, dtype)


def save_model(model: Transformer, path, extra_metadata: Mapping[str, str] | None = None):
    meta = {"kind": "transformer", "model_spec": json.dumps(model.spec.to_dict(), sort_keys=True)}
    meta.update(extra_metadata or {})
    return write_archive(path, model.params, meta)


def load_model(path, dtype=np.float32) -> Transformer:
    arc = TensorArchive(path)
    if "model_spec" not in arc.metadata:
        raise ValueError(f"{path}: archive has no model_spec metadata")
    spec = ModelSpec.from_dict(json.loads(arc.metadata["model_spec"]))
    return Transformer(spec, {n: arc.read(n) for n in arc.names()}, dtype)


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    captured: Capture
    skipped: frozenset[int] = frozenset()
    residual_pre: np.ndarray | None = None  # (L, T, d)
    residual_mid: np.ndarray | None = None  # (L, T, d)
    residual_post: np.ndarray | None = None  # (L, T, d)
    attention: np.ndarray | None = None  # (L, H, T, T), zeros for skipped layers
    logits: np.ndarray | None = None  # (T, V)
    final_residual: np.ndarray | None = field(default=None, repr=False)

    def require(self, flag: Capture) -> None:
        if not (self.captured & flag):
            raise MissingCaptureError(f"trace was not captured with {flag.name}")

    @property
    def n_positions(self) -> int:
        return int(self.tokens.shape[0])


# --------------------------------------------------------------------------- kernels

def _rms_norm(x: np.ndarray, w: np.ndarray, eps: float, offset: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * (w + offset)


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "silu":
        return x / (1 + np.exp(-x))
    c = np.asarray(0.7978845608028654, dtype=x.dtype)
    return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _rope(x: np.ndarray, theta: float) -> np.ndarray:
    # x: (heads, T, dh); rotate-half convention
    _, T, dh = x.shape
    half = dh // 2
    inv = theta ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(T, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(model: Transformer, l: int, h: np.ndarray):
    s = model.spec
    p = f"blocks.{l}.attn."
    T = h.shape[0]
    q = np.einsum("td,hde->hte", h, model[p + "W_Q"])
    k = np.einsum("td,hde->hte", h, model[p + "W_K"])
    v = np.einsum("td,hde->hte", h, model[p + "W_V"])
    for name, arr in (("b_Q", q), ("b_K", k), ("b_V", v)):
        b = model.get(p + name)
        if b is not None:
            arr += b[:, None, :]
    if s.positional == "rope":
        q = _rope(q, s.rope_theta)
        k = _rope(k, s.rope_theta)
    group = s.n_heads // s.n_kv_heads
    if group > 1:
        k = np.repeat(k, group, axis=0)
        v = np.repeat(v, group, axis=0)
    scores = np.matmul(q, k.transpose(0, 2, 1)) * np.asarray(s.scale, dtype=h.dtype)
    if s.attn_softcap is not None:
        c = np.asarray(s.attn_softcap, dtype=h.dtype)
        scores = np.tanh(scores / c) * c
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(future[None], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    z = np.matmul(w, v)  # (H, T, dh)
    out = np.einsum("hte,hed->td", z, model[p + "W_O"])
    b = model.get(p + "b_O")
    if b is not None:
        out = out + b
    return out, w


def _mlp(model: Transformer, l: int, h: np.ndarray) -> np.ndarray:
    s = model.spec
    p = f"blocks.{l}.mlp."
    pre = h @ model[p + "W_in"]
    b = model.get(p + "b_in")
    if b is not None:
        pre = pre + b
    if s.mlp_gated:
        g = h @ model[p + "W_gate"]
        bg = model.get(p + "b_gate")
        if bg is not None:
            g = g + bg
        hidden = _act(g, s.mlp_act) * pre
    else:
        hidden = _act(pre, s.mlp_act)
    out = hidden @ model[p + "W_out"]
    bo = model.get(p + "b_out")
    if bo is not None:
        out = out + bo
    return out


def unembed(model: Transformer, resid: np.ndarray) -> np.ndarray:
    """Final norm + unembedding (+ optional soft cap) of residual vectors."""
    s = model.spec
    x = np.asarray(resid, dtype=model.dtype)
    h = _rms_norm(x, model["ln_final.w"], s.norm_eps, s.norm_offset)
    logits = h @ model.W_U
    b = model.get("unembed.b_U")
    if b is not None:
        logits = logits + b
    if s.final_softcap is not None:
        c = np.asarray(s.final_softcap, dtype=logits.dtype)
        logits = np.tanh(logits / c) * c
    return logits


# --------------------------------------------------------------------------- forward

def _as_tokens(model: Transformer, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size < 1:
        raise ValueError("token sequence must be non-empty")
    if ids.min() < 0 or ids.max() >= model.spec.vocab_size:
        raise ValueError(f"token id outside [0, {model.spec.vocab_size})")
    if model.spec.positional == "learned" and ids.size > model.spec.n_ctx:
        raise ValueError(f"sequence length {ids.size} exceeds n_ctx={model.spec.n_ctx}")
    return ids


def _check_edits(model: Transformer, T: int, edits, patches, mask: LayerMask):
    L, d = model.spec.n_layers, model.spec.d_model
    by_layer: dict[int, list] = {}
    for kind, items, attr in (("edit", edits, "delta"), ("patch", patches, "value")):
        for e in items:
            label = f"{kind} {e.tag!r}" if e.tag else f"{kind} at L{e.layer}/pos{e.position}"
            if not 0 <= e.layer < L:
                raise EditError(f"{label}: layer {e.layer} outside [0, {L})")
            if not 0 <= e.position < T:
                raise EditError(f"{label}: position {e.position} outside [0, {T})")
            vec = np.asarray(getattr(e, attr))
            if vec.shape != (d,):
                raise EditError(f"{label}: vector shape {vec.shape} != ({d},)")
            if not np.isfinite(vec).all():
                raise EditError(f"{label}: non-finite vector")
            by_layer.setdefault(e.layer, []).append((kind, e.position, vec))
    for l in mask.skipped:
        if not 0 <= l < L:
            raise EditError(f"mask layer {l} outside [0, {L})")
    return by_layer


def forward(model: Transformer, tokens, edits: Sequence[ResidualEdit] = (),
            mask: LayerMask | None = None, capture: Capture = Capture.ALL,
            patches: Sequence[ResidualPatch] = ()) -> ForwardTrace:
    """Run one forward pass.

    Patches (overwrite) are applied before edits (add) at the same layer, each
    in the order given. Skipped layers pass the residual through unchanged, but
    edits and patches addressed to them still apply.
    """
    s = model.spec
    mask = mask or LayerMask()
    ids = _as_tokens(model, tokens)
    T = ids.size
    by_layer = _check_edits(model, T, edits, patches, mask)
    dt = model.dtype

    x = model.W_E[ids].astype(dt, copy=True)
    if s.embed_scale != 1.0:
        x = x * np.asarray(s.embed_scale, dtype=dt)
    if s.positional == "learned":
        x = x + model["embed.W_pos"][:T]

    L, H, d = s.n_layers, s.n_heads, s.d_model
    want = lambda f: bool(capture & f)  # noqa: E731
    pre = np.zeros((L, T, d), dt) if want(Capture.RESID_PRE) else None
    mid = np.zeros((L, T, d), dt) if want(Capture.RESID_MID) else None
    post = np.zeros((L, T, d), dt) if want(Capture.RESID_POST) else None
    attn = np.zeros((L, H, T, T), dt) if want(Capture.ATTENTION) else None

    for l in range(L):
        if pre is not None:
            pre[l] = x
        if l not in mask:
            p = f"blocks.{l}."
            h = _rms_norm(x, model[p + "ln1.w"], s.norm_eps, s.norm_offset)
            a, w = _attention(model, l, h)
            if s.post_norms:
                a = _rms_norm(a, model[p + "ln1_post.w"], s.norm_eps, s.norm_offset)
            x = x + a
            if attn is not None:
                attn[l] = w
            if mid is not None:
                mid[l] = x
            h = _rms_norm(x, model[p + "ln2.w"], s.norm_eps, s.norm_offset)
            m = _mlp(model, l, h)
            if s.post_norms:
                m = _rms_norm(m, model[p + "ln2_post.w"], s.norm_eps, s.norm_offset)
            x = x + m
        elif mid is not None:
            mid[l] = x
        for kind, pos, vec in by_layer.get(l, ()):
            if kind == "patch":
                x[pos] = vec
        for kind, pos, vec in by_layer.get(l, ()):
            if kind == "edit":
                x[pos] = x[pos] + vec.astype(dt)
        if not np.isfinite(x).all():
            raise NonFiniteActivationError(l)
        if post is not None:
            post[l] = x

    logits = unembed(model, x) if want(Capture.LOGITS) else None
    if logits is not None and not np.isfinite(logits).all():
        raise NonFiniteActivationError(L - 1, "logits")
    return ForwardTrace(tokens=ids, captured=capture, skipped=mask.skipped,
                        residual_pre=pre, residual_mid=mid, residual_post=post,
                        attention=attn, logits=logits, final_residual=x)


def next_token_distribution(trace: ForwardTrace, position: int = -1) -> np.ndarray:
    trace.require(Capture.LOGITS)
    return softmax(trace.logits[position])


def logit_lens(trace: ForwardTrace, layer: int, position: int, model: Transformer) -> np.ndarray:
    """Next-token distribution read off an intermediate residual."""
    trace.require(Capture.RESID_POST)
    if not 0 <= layer < model.spec.n_layers:
        raise IndexError(f"layer {layer} outside [0, {model.spec.n_layers})")
    return softmax(unembed(model, trace.residual_post[layer, position]))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; p == 0 terms contribute 0, q == 0 entries are read as 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6 or (v < 0).any():
            raise ValueError(f"{name} is not a probability vector (sum={v.sum():.9f})")
    nz = p > 0
    qn = q[nz]
    return float(np.sum(p[nz] * np.log(p[nz] / np.where(qn > 0, qn, 1e-12))))


def generate(model: Transformer, tokens, max_new_tokens: int, stop_ids: Iterable[int] = (),
             mask: LayerMask | None = None) -> list[int]:
    """Greedy top-1 continuation (lowest id wins ties). Stops after emitting a stop id."""
    ids = list(int(t) for t in tokens)
    stop = set(int(t) for t in stop_ids)
    out: list[int] = []
    for _ in range(max_new_tokens):
        tr = forward(model, ids, mask=mask, capture=Capture.LOGITS)
        nxt = int(np.argmax(tr.logits[-1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt in stop:
            break
    return out
