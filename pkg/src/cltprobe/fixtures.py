"""Desk-scale transformers with hand-planted circuits, plus a random-model helper.

Every planted fixture lives in an orthonormal frame: a handful of planted
directions carry the circuit, and all filler weights read from and write to
the orthogonal complement only, so filler can never disturb the circuit except
through the shared RMSNorm scale. A large constant direction present in every
token embedding keeps that scale nearly fixed.

Planning fixture (two rhyme groups, "natural" A and "target" B)::

    embed      rhyme words of group k carry plan_k; the newline carries marker
    plan layer head 0 moves plan_k from the rhyme word to the marker position
    commit+1   gated MLP: relu(plan_k) * marker -> commit_k
    routing    head per group, query=marker, key=commit_k, value -> out_k
    unembed    out_A -> " out", out_B -> " around" (which also reads -constant)

Fact fixture: subjects carry ``+/- x0 * fact``; a layer-1 head copies the fact
axis to later positions, and a layer-2 ReLU MLP snaps the fact coordinate onto
one of two fixed points with a sharp basin boundary.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .clt import CltShard, CltSpec, CrossLayerTranscoder, FeatureEdit, compile_edits, save_clt
from .model import (ModelSpec, ResidualEdit, Transformer, _optional_shapes, _param_shapes,
                    load_model, save_model)
from .oracle import oracle_distribution, oracle_forward
from .vocab import Vocabulary


class FixtureError(ValueError):
    pass


def default_geometry(**overrides) -> ModelSpec:
    base = dict(n_layers=6, n_heads=4, n_kv_heads=4, d_model=32, d_head=8, vocab_size=64,
                d_mlp=64, n_ctx=64, mlp_act="relu", mlp_gated=True)
    base.update(overrides)
    return ModelSpec(**base)


def random_model(spec: ModelSpec, seed: int = 0, scale: float = 0.5,
                 biases: bool = False, dtype=np.float32) -> Transformer:
    """Gaussian weights with roughly unit-variance activations; for fuzzing."""
    rng = np.random.default_rng(seed)
    params = {}
    shapes = dict(_param_shapes(spec))
    if biases:
        shapes.update({k: v for k, v in _optional_shapes(spec).items() if "post" not in k})
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".w") or name.endswith("ln1_post.w") or name.endswith("ln2_post.w"):
            params[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif name.split(".")[-1].startswith("b_"):
            params[name] = 0.1 * rng.standard_normal(shape)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else 1
            if name == "embed.W_E" or name == "embed.W_pos":
                fan_in = 1
            params[name] = scale * rng.standard_normal(shape) / np.sqrt(fan_in)
    return Transformer(spec, params, dtype=dtype)


# --------------------------------------------------------------------------- bundles

@dataclass
class FixtureBundle:
    kind: str
    model: Transformer
    vocab: Vocabulary
    clt: CrossLayerTranscoder | None = None
    cmu: str = ""
    circuit: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def write_archives(self, path) -> dict:
        """Write tensor archives next to ``path``; return the JSON document that points at them."""
        path = Path(path)
        stem = path.with_suffix("")
        model_path = stem.with_name(stem.name + ".model.safetensors")
        save_model(self.model, model_path)
        doc: dict[str, Any] = {
            "kind": self.kind,
            "model": model_path.name,
            "model_sha256": file_digest(model_path),
            "vocab": self.vocab.to_dict(),
            "cmu": self.cmu,
            "circuit": self.circuit,
            "manifest": self.manifest,
        }
        if self.clt is not None:
            clt_path = stem.with_name(stem.name + ".clt.safetensors")
            save_clt(clt_path, self.clt.spec, [self.clt.shard(l) for l in range(self.clt.spec.n_layers)])
            doc["clt"] = clt_path.name
            doc["clt_sha256"] = file_digest(clt_path)
        return doc

    def save(self, path) -> Path:
        path = Path(path)
        doc = self.write_archives(path)
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, dtype=np.float32) -> "FixtureBundle":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if "payload" in doc and "bundle" in doc.get("payload", {}):
            doc = doc["payload"]["bundle"]
        if "kind" not in doc or "model" not in doc:
            raise FixtureError(f"{path} is not a fixture bundle")
        model = load_model(path.parent / doc["model"], dtype=dtype)
        clt = CrossLayerTranscoder.open(path.parent / doc["clt"], dtype=dtype) if doc.get("clt") else None
        return cls(kind=doc["kind"], model=model, vocab=Vocabulary.from_dict(doc["vocab"]),
                   clt=clt, cmu=doc.get("cmu", ""), circuit=doc.get("circuit", {}),
                   manifest=doc.get("manifest", {}))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------- frame helpers

class _Frame:
    """Orthonormal planted directions plus a complement basis for filler."""

    def __init__(self, d: int, names: list[str], rng: np.random.Generator):
        if d < 4 * len(names):
            raise FixtureError(f"d_model={d} is too small for {len(names)} planted directions "
                               f"(need at least {4 * len(names)})")
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self.dirs = {n: q[:, i].copy() for i, n in enumerate(names)}
        self.comp = q[:, len(names):].copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.dirs[name]

    def reader(self, rng, cols: int, sigma: float) -> np.ndarray:
        """(d, cols) map that only sees the complement."""
        return self.comp @ (sigma * rng.standard_normal((self.comp.shape[1], cols)))

    def writer(self, rng, rows: int, sigma: float) -> np.ndarray:
        """(rows, d) map that only writes into the complement."""
        return (sigma * rng.standard_normal((rows, self.comp.shape[1]))) @ self.comp.T

    def noise_vec(self, rng, norm: float) -> np.ndarray:
        v = self.comp @ rng.standard_normal(self.comp.shape[1])
        return norm * v / np.linalg.norm(v)


def _filler_params(spec: ModelSpec, frame: _Frame, rng, attn_sigma=0.3, mlp_sigma=0.15) -> dict:
    d, H, K, dh, m, L = (spec.d_model, spec.n_heads, spec.n_kv_heads, spec.d_head,
                         spec.d_mlp, spec.n_layers)
    p: dict[str, np.ndarray] = {}
    for l in range(L):
        b = f"blocks.{l}."
        p[b + "ln1.w"] = np.ones(d)
        p[b + "ln2.w"] = np.ones(d)
        p[b + "attn.W_Q"] = np.stack([frame.reader(rng, dh, attn_sigma) for _ in range(H)])
        p[b + "attn.W_K"] = np.stack([frame.reader(rng, dh, attn_sigma) for _ in range(K)])
        p[b + "attn.W_V"] = np.stack([frame.reader(rng, dh, attn_sigma) for _ in range(K)])
        p[b + "attn.W_O"] = np.stack([frame.writer(rng, dh, attn_sigma) for _ in range(H)])
        p[b + "mlp.W_in"] = frame.reader(rng, m, mlp_sigma)
        if spec.mlp_gated:
            p[b + "mlp.W_gate"] = frame.reader(rng, m, mlp_sigma)
        p[b + "mlp.W_out"] = frame.writer(rng, m, mlp_sigma)
    p["ln_final.w"] = np.ones(d)
    return p


def _head_plant(p, layer, head, reads_q, reads_k, value_map, gain_q, gain_k):
    """Overwrite one head with a rank-one QK circuit and a given OV map.

    ``reads_q``/``reads_k`` are d_model vectors (already scaled); ``value_map``
    is a list of (read_dir, write_dir) pairs carried on separate head dims.
    """
    b = f"blocks.{layer}.attn."
    dh = p[b + "W_Q"].shape[2]
    e = np.eye(dh)
    p[b + "W_Q"][head] = gain_q * np.outer(reads_q, e[0])
    p[b + "W_K"][head] = gain_k * np.outer(reads_k, e[0])
    W_V = np.zeros_like(p[b + "W_V"][head])
    W_O = np.zeros_like(p[b + "W_O"][head])
    for i, (src, dst) in enumerate(value_map):
        W_V += np.outer(src, e[i])
        W_O += np.outer(e[i], dst)
    p[b + "W_V"][head] = W_V
    p[b + "W_O"][head] = W_O


def _word_vocab(words: list[str], size: int, filler_prefix: str = " w") -> list[str]:
    toks = list(dict.fromkeys(words))
    i = 0
    while len(toks) < size:
        toks.append(f"{filler_prefix}{i}")
        i += 1
    if len(toks) > size:
        raise FixtureError(f"vocabulary needs {len(toks)} tokens, geometry allows {size}")
    return toks


# --------------------------------------------------------------------------- planning fixture

PLANNING_WORDS = [
    "<bos>", "\n", " about", " out", " shout", " found", " round", " around", " ground",
    " tree", " free", " the", " a", " cat", " dog", " bird", " ran", " sat", " saw", " he",
    " she", " we", " they", " was", " is", " to", " and", " of", " in", " on", " up", " down",
    " big", " small", " red", " old", " new", " sun", " sky", " day", " night", " went",
    " came", " looked", " then", " it", " with", " at", " for", " by", " all", " home",
    " far", " near", " fast", " slow", " run", " walk", ",", ".", "The", "He", "She", "It",
]

PLANNING_CMU = """;;; mini pronouncing dictionary for the planted planning fixture
ABOUT  AH0 B AW1 T
OUT  AW1 T
SHOUT  SH AW1 T
FOUND  F AW1 N D
ROUND  R AW1 N D
AROUND  ER0 AW1 N D
GROUND  G R AW1 N D
TREE  T R IY1
FREE  F R IY1
"""

RHYME_GROUPS = {"A": (" about", " out", " shout"), "B": (" found", " round", " around", " ground")}


@dataclass(frozen=True)
class PlantedCircuitSpec:
    geometry: ModelSpec = field(default_factory=default_geometry)
    plan_layer: int = 1
    commitment_layer: int = 2
    routing_head: tuple[int, int] = (4, 1)
    target_word: str = "around"
    competing_word: str = "out"
    overridable: bool = False
    constant_norm: float = 100.0
    plan_norm: float = 10.0
    marker_norm: float = 10.0
    plan_transfer: float = 9.7  # plan magnitude the mover writes at the marker
    commit_norm: float = 10.0
    route_score_target: float = 12.0
    route_score_competing: float = 3.0
    route_out_norm: float = 10.0
    readout_target: float = 30.0
    readout_competing: float = 20.0
    target_offset: float = 0.7
    newline_bias: float = 4.0
    override_gain: float = 3.0
    features_per_layer: int = 8
    seed: int = 0

    def __post_init__(self):
        L = self.geometry.n_layers
        rl, rh = self.routing_head
        if not 0 <= self.plan_layer < self.commitment_layer:
            raise FixtureError("plan_layer must precede commitment_layer")
        if not self.commitment_layer + 2 <= rl < L:
            raise FixtureError("routing layer must sit at least two layers above the commitment layer")
        if self.overridable and rl + 1 >= L:
            raise FixtureError("overridable variant needs a layer after the routing layer")
        if not 0 <= rh < self.geometry.n_heads or self.geometry.n_heads < 2:
            raise FixtureError("routing head index out of range")
        if self.target_word == self.competing_word:
            raise FixtureError("target and competing words must differ")
        if self.geometry.n_kv_heads != self.geometry.n_heads:
            raise FixtureError("planted fixture uses one key/value head per query head")
        if not self.geometry.mlp_gated:
            raise FixtureError("planted fixture needs a gated MLP")

    @property
    def competing_head(self) -> tuple[int, int]:
        rl, rh = self.routing_head
        return (rl, 0 if rh != 0 else 1)

    @property
    def commitment_layers(self) -> tuple[int, ...]:
        return tuple(range(self.commitment_layer + 1, self.routing_head[0] + 1))


def build_planted_model(spec: PlantedCircuitSpec | None = None) -> FixtureBundle:
    spec = spec or PlantedCircuitSpec()
    g = spec.geometry
    rng = np.random.default_rng(spec.seed)
    d, L, dm = g.d_model, g.n_layers, g.d_mlp
    names = ["const", "marker", "plan_A", "plan_B", "commit_A", "commit_B", "out_A", "out_B"]
    fr = _Frame(d, names, rng)
    vocab = Vocabulary(_word_vocab(PLANNING_WORDS, g.vocab_size), bos_id=0)
    tok = vocab.id_of
    target_id = tok(" " + spec.target_word)
    competing_id = tok(" " + spec.competing_word)
    if target_id is None or competing_id is None:
        raise FixtureError("target/competing words must be fixture tokens")
    group_of = {w: k for k, ws in RHYME_GROUPS.items() for w in ws}
    if group_of.get(" " + spec.target_word) != "B" or group_of.get(" " + spec.competing_word) != "A":
        raise FixtureError("target must come from group B and competitor from group A")

    p = _filler_params(g, fr, rng)

    # embeddings: constant + per-token filler; group members share one row
    W_E = np.zeros((g.vocab_size, d))
    shared = {k: fr.noise_vec(rng, 2.0) for k in RHYME_GROUPS}
    for i, t in enumerate(vocab.tokens):
        k = group_of.get(t)
        W_E[i] = spec.constant_norm * fr["const"] + (shared[k] if k else fr.noise_vec(rng, 2.0))
        if k:
            W_E[i] += spec.plan_norm * fr[f"plan_{k}"]
    W_E[tok("\n")] += spec.marker_norm * fr["marker"]
    p["embed.W_E"] = W_E

    # normalized magnitudes seen by the planted readers (norm dominated by the constant)
    unit = np.sqrt(d) / spec.constant_norm
    plan_hat = spec.plan_norm * unit
    mark_hat = spec.marker_norm * unit
    sqrt_dh = np.sqrt(g.d_head)

    # plan mover: marker queries, plan keys, plan_k -> plan_k
    gqk = np.sqrt(12.0 * sqrt_dh / (mark_hat * plan_hat))
    ov = spec.plan_transfer / plan_hat
    _head_plant(p, spec.plan_layer, 0, fr["marker"], fr["plan_A"] + fr["plan_B"],
                [(np.sqrt(ov) * fr["plan_A"], np.sqrt(ov) * fr["plan_A"]),
                 (np.sqrt(ov) * fr["plan_B"], np.sqrt(ov) * fr["plan_B"])], gqk, gqk)

    # commitment MLP (one layer above the CLT home layer): relu(plan) * marker -> commit
    cl = spec.commitment_layer + 1
    b = f"blocks.{cl}.mlp."
    gate_gain = 4.0
    up_gain = 4.0
    out_gain = spec.commit_norm / (gate_gain * up_gain * plan_hat * mark_hat)
    for j, k in enumerate("AB"):
        p[b + "W_gate"][:, j] = gate_gain * fr[f"plan_{k}"]
        p[b + "W_in"][:, j] = up_gain * fr["marker"]
        p[b + "W_out"][j] = out_gain * fr[f"commit_{k}"]

    # routing heads: marker queries, commit keys, commit_k -> out_k
    rl, rh = spec.routing_head
    commit_hat = spec.commit_norm * unit
    route_ov = spec.route_out_norm / commit_hat
    for head, k, score in ((rh, "B", spec.route_score_target),
                           (spec.competing_head[1], "A", spec.route_score_competing)):
        gk = score * sqrt_dh / (mark_hat * commit_hat)
        _head_plant(p, rl, head, fr["marker"], fr[f"commit_{k}"],
                    [(np.sqrt(route_ov) * fr[f"commit_{k}"], np.sqrt(route_ov) * fr[f"out_{k}"])],
                    1.0, gk)

    if spec.overridable:
        # late write access: relu(plan_A) * marker -> out_A, after the routing layer
        b = f"blocks.{rl + 1}.mlp."
        p[b + "W_gate"][:, 0] = gate_gain * fr["plan_A"]
        p[b + "W_in"][:, 0] = up_gain * fr["marker"]
        p[b + "W_out"][0] = spec.override_gain * out_gain * fr["out_A"]

    # unembedding: filler readout from the complement only
    W_U = fr.reader(rng, g.vocab_size, 1.0)
    W_U[:, competing_id] += spec.readout_competing * fr["out_A"]
    W_U[:, target_id] += spec.readout_target * fr["out_B"] - spec.target_offset * fr["const"]
    p["unembed.W_U"] = W_U
    b_U = np.zeros(g.vocab_size)
    b_U[tok("\n")] = spec.newline_bias
    p["unembed.b_U"] = b_U

    model = Transformer(g, p, dtype=np.float32)

    # CLT: per layer, feature 0 <-> plan_A, feature 1 <-> plan_B, the rest filler
    F = spec.features_per_layer
    shards = []
    for l in range(L):
        enc = np.zeros((F, d))
        enc[0], enc[1] = fr["plan_A"], fr["plan_B"]
        for i in range(2, F):
            enc[i] = fr.noise_vec(rng, 1.0)
        dec = np.zeros((F, L - l, d))
        dec[:, 0] = enc
        shards.append(CltShard(l, enc.astype(np.float32), dec.astype(np.float32)))
    clt = CrossLayerTranscoder(CltSpec(F, L, d, "post_attention_pre_mlp", "identity"), shards)

    circuit = {
        "plan_layer": spec.plan_layer,
        "commitment_layer": spec.commitment_layer,
        "commitment_layers": list(spec.commitment_layers),
        "routing_head": list(spec.routing_head),
        "competing_head": list(spec.competing_head),
        "natural_feature": f"L{spec.commitment_layer}:0",
        "target_feature": f"L{spec.commitment_layer}:1",
        "correction_feature": f"L{rl}:0",
        "correction_layers": [rl, L - 1],
        "target_word": spec.target_word,
        "competing_word": spec.competing_word,
        "target_token": int(target_id),
        "competing_token": int(competing_id),
        "strength": 10.0,
        "overridable": spec.overridable,
        "prompts": {
            "natural": " he saw the cat run about\n",
            "variants": [" he saw the cat run about\n", " he saw the cat run shout\n"],
            "target_group": [" he saw the cat run found\n", " he saw the cat run ground\n"],
            "couplets": [" he saw the cat run about\n", " the dog sat down and looked found\n",
                         " we went home by night shout\n", " she came up the ground\n",
                         " the bird was far round\n"],
            "no_rhyme": [" he saw the sun tree\n"],
        },
        "spec": {k: v for k, v in spec.__dict__.items() if k != "geometry"},
    }
    circuit["spec"]["routing_head"] = list(spec.routing_head)
    bundle = FixtureBundle("planted-irrevocable" if not spec.overridable else "planted-overridable",
                           model, vocab, clt, PLANNING_CMU, circuit)
    bundle.manifest = planted_manifest(bundle)
    return bundle


def planted_edits(bundle: FixtureBundle, tokens, inject_at: int | None = None,
                  strength: float | None = None, suppress: bool = True,
                  inject: bool = True) -> list[ResidualEdit]:
    """Suppress the natural feature at the last position, inject the target feature."""
    c = bundle.circuit
    s = c["strength"] if strength is None else strength
    site = len(tokens) - 1
    L = bundle.model.spec.n_layers
    fe = []
    if suppress:
        fe.append(FeatureEdit.make(c["natural_feature"], "suppress", s, site, n_layers=L))
    if inject:
        fe.append(FeatureEdit.make(c["target_feature"], "inject", s,
                                   site if inject_at is None else inject_at, n_layers=L))
    return compile_edits(fe, bundle.clt)


def planted_manifest(bundle: FixtureBundle) -> dict:
    """Expected values, computed with the float64 oracle."""
    c = bundle.circuit
    toks = bundle.vocab.encode(c["prompts"]["natural"])
    site = len(toks) - 1
    tgt, comp = c["target_token"], c["competing_token"]
    rl, rh = c["routing_head"]
    cl, ch = c["competing_head"]
    clean = oracle_forward(bundle.model, toks)
    supp = oracle_forward(bundle.model, toks, planted_edits(bundle, toks, inject=False))
    full = oracle_forward(bundle.model, toks, planted_edits(bundle, toks))

    def probs(tr):
        row = tr.logits[-1]
        e = np.exp(row - row.max())
        return e / e.sum()

    pc, ps, pf = probs(clean), probs(supp), probs(full)
    sweep = []
    for j in range(len(toks)):
        tr = oracle_forward(bundle.model, toks, planted_edits(bundle, toks, inject_at=j))
        sweep.append(float(probs(tr)[tgt]))
    return {
        "prompt_tokens": [int(t) for t in toks],
        "planning_site": site,
        "natural_top1": int(np.argmax(pc)),
        "p_target_clean": float(pc[tgt]),
        "p_competing_clean": float(pc[comp]),
        "p_target_suppressed": float(ps[tgt]),
        "p_target_spike": float(pf[tgt]),
        "p_by_position": sweep,
        "routing_head_delta": float(full.attention[rl, rh, -1, site] - clean.attention[rl, rh, -1, site]),
        "competing_head_delta": float(full.attention[cl, ch, -1, site] - clean.attention[cl, ch, -1, site]),
    }


# --------------------------------------------------------------------------- fact fixture

FACT_WORDS = [
    "<bos>", "\n", " Paris", " Berlin", " France", " Germany", " the", " city", " of", " is",
    " in", " located", " capital", " lies", " country", " which", " belongs", " to", " where",
    " town", " found", " a", " and", " famous", " old", " center", ",", ".", "The",
]

FACT_TEMPLATES = [
    " the city of{} is in",
    "{} is located in",
    "{} lies in the country of",
    " the famous old city{} belongs to",
    " which country is{} in",
]


@dataclass(frozen=True)
class FactFixtureSpec:
    geometry: ModelSpec = field(default_factory=lambda: default_geometry(mlp_gated=False))
    router_layer: int = 1
    contraction_layer: int = 2
    constant_norm: float = 100.0
    subject_norm: float = 10.0
    fact_norm: float = 10.0  # x0: fact coordinate carried by the subject embedding
    copy_norm: float = 10.0  # fact magnitude the router writes at later positions
    router_score: float = 9.0
    router_fact_score: float = 1.5
    basin_threshold: float = 0.4  # in units of the contrastive vector's norm
    ramp_fraction: float = 0.02
    readout: float = 20.0
    seed: int = 1
    contraction_factor: float = 0.0  # residual fraction of a sub-threshold deviation left after the basin

    def __post_init__(self):
        if self.geometry.mlp_gated:
            raise FixtureError("fact fixture uses a plain (ungated) ReLU MLP")
        if self.geometry.mlp_act != "relu":
            raise FixtureError("fact fixture needs relu activations")
        if not 0 <= self.router_layer < self.contraction_layer < self.geometry.n_layers:
            raise FixtureError("router must precede the contraction layer")
        if not 0.0 < self.basin_threshold < 0.5:
            raise FixtureError("basin_threshold must lie in (0, 0.5)")
        if not 0.0 <= self.contraction_factor < 1.0:
            raise FixtureError("contraction_factor must lie in [0, 1)")


def build_fact_fixture(spec: FactFixtureSpec | None = None) -> FixtureBundle:
    spec = spec or FactFixtureSpec()
    g = spec.geometry
    rng = np.random.default_rng(spec.seed)
    d = g.d_model
    fr = _Frame(d, ["const", "subject", "fact"], rng)
    vocab = Vocabulary(_word_vocab(FACT_WORDS, g.vocab_size), bos_id=0)
    tok = vocab.id_of
    s1, s2, a1, a2 = tok(" Paris"), tok(" Berlin"), tok(" France"), tok(" Germany")

    p = _filler_params(g, fr, rng)
    p.update({f"blocks.{l}.mlp.b_in": np.zeros(g.d_mlp) for l in range(g.n_layers)})
    W_E = np.zeros((g.vocab_size, d))
    subj_noise = fr.noise_vec(rng, 2.0)
    for i in range(g.vocab_size):
        W_E[i] = spec.constant_norm * fr["const"] + fr.noise_vec(rng, 2.0)
    for t, sign in ((s1, 1.0), (s2, -1.0)):
        W_E[t] = (spec.constant_norm * fr["const"] + subj_noise + spec.subject_norm * fr["subject"]
                  + sign * spec.fact_norm * fr["fact"])
    p["embed.W_E"] = W_E

    unit = np.sqrt(d) / spec.constant_norm
    const_hat = spec.constant_norm * unit
    subj_hat = spec.subject_norm * unit
    fact_hat = spec.fact_norm * unit
    sqrt_dh = np.sqrt(g.d_head)
    gk = spec.router_score * sqrt_dh / (const_hat * subj_hat)
    gl = spec.router_fact_score * sqrt_dh / (const_hat * fact_hat)
    ov = spec.copy_norm / fact_hat
    b = f"blocks.{spec.router_layer}.attn."
    dh = g.d_head
    e = np.eye(dh)
    p[b + "W_Q"][0] = np.outer(fr["const"], e[0])
    p[b + "W_K"][0] = np.outer(gk * fr["subject"] + gl * fr["fact"], e[0])
    p[b + "W_V"][0] = np.sqrt(ov) * np.outer(fr["fact"], e[1])
    p[b + "W_O"][0] = np.sqrt(ov) * np.outer(e[1], fr["fact"])

    W_U = fr.reader(rng, g.vocab_size, 0.5)
    W_U[:, a1] += spec.readout * fr["fact"]
    W_U[:, a2] -= spec.readout * fr["fact"]
    p["unembed.W_U"] = W_U

    pairs = fact_pairs(vocab)
    # measure the fact coordinate entering the contraction layer, then place the basin
    draft = Transformer(g, p, dtype=np.float64)
    x1 = _fact_coordinate(draft, pairs, fr, spec.contraction_layer, original=True)
    x2 = -_fact_coordinate(draft, pairs, fr, spec.contraction_layer, original=False)
    resid_norm = float(np.linalg.norm(
        oracle_forward(draft, pairs[0]["prompt"]).residual_pre[spec.contraction_layer, -1]))
    boundary = x1 - spec.basin_threshold * (x1 + x2)
    width = spec.ramp_fraction * x1
    _plant_basin(p, spec, fr, boundary, width, x1, resid_norm)

    model = Transformer(g, p, dtype=np.float32)
    circuit = {
        "router_head": [spec.router_layer, 0],
        "router_sign": -1,
        "contraction_layer": spec.contraction_layer,
        "basin_threshold": spec.basin_threshold,
        "fixed_point": x1,
        "boundary": boundary,
        "subjects": [int(s1), int(s2)],
        "answers": [int(a1), int(a2)],
        "templates": FACT_TEMPLATES,
        "pairs": pairs,
        "blocks": [[0, 1], [2, 3], [4, 5]] if g.n_layers == 6 else
                  [[i, min(i + 1, g.n_layers - 1)] for i in range(0, g.n_layers, 2)],
        "spec": {k: v for k, v in spec.__dict__.items() if k != "geometry"},
    }
    bundle = FixtureBundle("fact", model, vocab, None, "", circuit)
    bundle.manifest = fact_manifest(bundle, x1, x2)
    return bundle


def fact_pairs(vocab: Vocabulary) -> list[dict]:
    out = []
    for tpl in FACT_TEMPLATES:
        orig = vocab.encode(tpl.format(" Paris"))
        cf = vocab.encode(tpl.format(" Berlin"))
        pos = orig.index(vocab.id_of(" Paris"))
        out.append({"prompt": orig, "cf_prompt": cf, "subject_span": [pos, pos + 1],
                    "cf_subject_span": [pos, pos + 1], "answer": vocab.id_of(" France"),
                    "cf_answer": vocab.id_of(" Germany"), "template": tpl})
    return out


def _fact_coordinate(model, pairs, fr, layer, original=True) -> float:
    key = "prompt" if original else "cf_prompt"
    vals = [float(oracle_forward(model, pr[key]).residual_pre[layer, -1] @ fr["fact"]) for pr in pairs]
    return float(np.mean(vals))


def _plant_basin(p, spec: FactFixtureSpec, fr, boundary, width, fixed, resid_norm):
    """ReLU MLP mapping the fact coordinate x onto +fixed / -fixed.

    Output along ``fact`` is ``target(x) - (1 - c) * x`` where target is a sharp
    ramp from -fixed to +fixed centred on ``boundary``; a sub-threshold
    deviation therefore survives only as the fraction ``c`` of itself.
    """
    d = spec.geometry.d_model
    k = resid_norm / np.sqrt(d)  # x ~= k * x_hat
    b = f"blocks.{spec.contraction_layer}.mlp."
    W_in, W_out, b_in = p[b + "W_in"], p[b + "W_out"], p[b + "b_in"]
    f = fr["fact"]
    lo, hi = (boundary - width) / k, (boundary + width) / k
    c = spec.contraction_factor
    units = [  # (input gain, bias, output coefficient)
        (1.0, 0.0, -(1 - c) * k),       # -(1-c) k relu(x_hat)
        (-1.0, 0.0, (1 - c) * k),       # +(1-c) k relu(-x_hat)
        (1.0, -lo, 2 * fixed / (hi - lo)),
        (1.0, -hi, -2 * fixed / (hi - lo)),
    ]
    for j, (gin, bias, cout) in enumerate(units):
        W_in[:, j] = gin * f
        b_in[j] = bias
        W_out[j] = cout * f
    p[b + "b_out"] = -fixed * f


def fact_manifest(bundle: FixtureBundle, x1: float, x2: float) -> dict:
    c = bundle.circuit
    a1, a2 = c["answers"]
    first = c["pairs"][0]
    po = oracle_distribution(bundle.model, first["prompt"])
    pc = oracle_distribution(bundle.model, first["cf_prompt"])
    return {"x_original": x1, "x_counterfactual": x2, "contrastive_norm": x1 + x2,
            "p_answer_original": float(po[a1]), "p_answer_counterfactual": float(pc[a2]),
            "planted_threshold": c["basin_threshold"]}


# --------------------------------------------------------------------------- discovery fixture

DISCOVERY_CMU = """;;; mini pronouncing dictionary
;;; comment lines start with three semicolons
ABOUT  AH0 B AW1 T
ABOUT(1)  AH0 B AW2 T
OUT  AW1 T
SHOUT  SH AW1 T
FOUND  F AW1 N D
ROUND  R AW1 N D
AROUND  ER0 AW1 N D
GROUND  G R AW1 N D
TREE  T R IY1
"""

DISCOVERY_WORDS = [" about", " out", " shout", " found", " round", " around", " ground", " tree"]
DURATION_WORDS = [" long", "Long", "LONG", " lasting", " while"]


def build_discovery_fixture(seed: int = 2, d_model: int = 32, vocab_size: int = 64,
                            n_layers: int = 2, features_per_layer: int = 16) -> FixtureBundle:
    """Random embeddings with CLT features aligned to the rhyme words.

    Features L0:0..7 decode exactly onto the eight rhyme-word embeddings;
    L1:0 decodes onto the mean of the duration words (a "long" feature whose
    top-5 stays inside ordinary English); everything else is random.
    """
    rng = np.random.default_rng(seed)
    words = ["<bos>", "\n"] + DISCOVERY_WORDS + DURATION_WORDS + [
        "##ing", "ou", "qu", " the", " cat", " run", " int", " str", " bool", " def",
        " return", "()", "{", "}", " 42", " é", " café"]
    vocab = Vocabulary(_word_vocab(words, vocab_size), bos_id=0)
    spec = ModelSpec(n_layers=n_layers, n_heads=2, n_kv_heads=2, d_model=d_model, d_head=8,
                     vocab_size=vocab_size, d_mlp=2 * d_model, mlp_act="relu")
    model = random_model(spec, seed=seed, scale=1.0, dtype=np.float64)
    W_E = np.asarray(model.W_E, dtype=np.float64)
    F = features_per_layer
    shards = []
    for l in range(n_layers):
        dec = rng.standard_normal((F, n_layers - l, d_model))
        if l == 0:
            for i, w in enumerate(DISCOVERY_WORDS):
                dec[i, :] = W_E[vocab.id_of(w)]
        if l == 1:
            dur = np.mean([W_E[vocab.id_of(w)] / np.linalg.norm(W_E[vocab.id_of(w)])
                           for w in DURATION_WORDS[:3]], axis=0)
            dec[0, :] = dur
        enc = rng.standard_normal((F, d_model)) / np.sqrt(d_model)
        shards.append(CltShard(l, enc, dec))
    clt = CrossLayerTranscoder(CltSpec(F, n_layers, d_model, activation="relu"), shards,
                               dtype=np.float64)
    circuit = {"rhyme_features": {w.strip(): f"L0:{i}" for i, w in enumerate(DISCOVERY_WORDS)},
               "duration_feature": "L1:0"}
    return FixtureBundle("discovery", model, vocab, clt, DISCOVERY_CMU, circuit, {})
