"""``cltprobe`` command line: one subcommand per experiment, one JSON envelope per run."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .clt import (CltError, CrossLayerTranscoder, FeatureEdit, FeatureId, parse_edit_list,
                  reference_from_oracle, validate_against_reference)
from .discovery import build_rhyme_groups, keyword_domain_scan, load_cmu, parse_cmu, scan_vocabulary, \
    VocabScanEntry
from .envelope import ResultEnvelope, to_jsonable
from .fixtures import (FactFixtureSpec, FixtureBundle, PlantedCircuitSpec, build_discovery_fixture,
                       build_fact_fixture, build_planted_model, file_digest)
from .model import Capture, forward, load_model, logit_lens
from .patching import (FactPair, block_gradient, factual_routing, kl_separation, pair_from_text,
                       screen_gold_pairs)
from .planning import (AblationConfig, CorrectionConfig, SweepConfig, correction_test, layer_ablation,
                       position_sweep, strength_sweep)
from .plots import KINDS, render_plot
from .routing import routing_analysis, suppress_amplification
from .steering import (METHODS, SteeringConfig, attractor_absorption, contrastive_vector,
                       run_baseline_method)
from .vocab import Vocabulary

CACHE_ENV = "CLTPROBE_CACHE_DIR"


class CliError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"--{field_name.replace('_', '-')}: {message}")
        self.field_name = field_name


# --------------------------------------------------------------------------- loading

@dataclass
class Context:
    model: Any
    vocab: Vocabulary
    clt: CrossLayerTranscoder | None = None
    cmu: str = ""
    circuit: dict = field(default_factory=dict)
    kind: str = "checkpoint"
    digests: dict = field(default_factory=dict)


def load_context(args) -> Context:
    if not args.model:
        raise CliError("model", "required for this subcommand")
    path = Path(args.model)
    if not path.exists():
        raise CliError("model", f"{path} does not exist")
    dtype = np.float64 if args.precision == "float64" else np.float32
    if path.suffix == ".json":
        b = FixtureBundle.load(path, dtype=dtype)
        doc = json.loads(path.read_text(encoding="utf-8"))
        doc = doc.get("payload", {}).get("bundle", doc)
        ctx = Context(b.model, b.vocab, b.clt, b.cmu, b.circuit, b.kind,
                      {"model": doc.get("model_sha256"), "clt": doc.get("clt_sha256")})
    else:
        if not args.vocab:
            raise CliError("vocab", "a vocabulary file is required with a raw model archive")
        ctx = Context(load_model(path, dtype=dtype), Vocabulary.load(args.vocab),
                      digests={"model": file_digest(path)})
    if args.clt:
        if not Path(args.clt).exists():
            raise CliError("clt", f"{args.clt} does not exist")
        ctx.clt = CrossLayerTranscoder.open(args.clt, dtype=dtype)
        ctx.digests["clt"] = file_digest(args.clt)
    if args.vocab and path.suffix == ".json":
        ctx.vocab = Vocabulary.load(args.vocab)
    args.archive_digests = {k: v for k, v in ctx.digests.items() if v}
    return ctx


def _need_clt(ctx: Context) -> CrossLayerTranscoder:
    if ctx.clt is None:
        raise CliError("clt", "this subcommand needs a CLT archive")
    return ctx.clt


def _prompt(ctx: Context, args, key: str = "natural") -> list[int]:
    if getattr(args, "prompt_ids", None):
        return [int(t) for t in args.prompt_ids.split(",")]
    text = args.prompt if getattr(args, "prompt", None) else ctx.circuit.get("prompts", {}).get(key)
    if text is None:
        raise CliError("prompt", "no prompt given and the model has no default")
    try:
        return ctx.vocab.encode(text)
    except ValueError as exc:
        raise CliError("prompt", str(exc)) from None


def _feature(args, ctx, name="feature", default_key="target_feature") -> FeatureId:
    val = getattr(args, name, None) or ctx.circuit.get(default_key)
    if val is None:
        raise CliError(name, "required")
    try:
        return FeatureId.parse(val)
    except CltError as exc:
        raise CliError(name, str(exc)) from None


def _suppress(args, ctx) -> tuple[FeatureId, ...]:
    vals = args.suppress if args.suppress else (
        [ctx.circuit["natural_feature"]] if "natural_feature" in ctx.circuit else [])
    out = []
    for v in vals:
        for part in str(v).split(","):
            if part.strip():
                try:
                    out.append(FeatureId.parse(part))
                except CltError as exc:
                    raise CliError("suppress", str(exc)) from None
    return tuple(out)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(name, f"expected comma-separated numbers, got {text!r}") from None


def _blocks(text: str | None, ctx: Context) -> list[tuple[int, int]]:
    if not text:
        if "blocks" in ctx.circuit:
            return [tuple(b) for b in ctx.circuit["blocks"]]
        return None
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        try:
            out.append((int(lo), int(hi or lo)))
        except ValueError:
            raise CliError("blocks", f"bad block {part!r}; expected e.g. 0-3") from None
    return out


def _target_word(args, ctx) -> str:
    w = args.target_word or ctx.circuit.get("target_word")
    if not w:
        raise CliError("target_word", "required")
    return w


def _sweep_cfg(args, ctx) -> SweepConfig:
    try:
        return SweepConfig(tuple(_prompt(ctx, args)), _suppress(args, ctx), _feature(args, ctx),
                           float(args.strength), _target_word(args, ctx), args.planning_site,
                           args.baseline, args.move_suppression)
    except ValueError as exc:
        raise CliError("strength" if "strength" in str(exc) else "prompt", str(exc)) from None


def _cmu(args, ctx):
    if getattr(args, "cmu", None):
        return load_cmu(args.cmu)
    if ctx.cmu:
        return parse_cmu(ctx.cmu)
    raise CliError("cmu", "no pronouncing dictionary given")


def _pairs(args, ctx) -> list[FactPair]:
    if getattr(args, "pairs", None):
        items = json.loads(Path(args.pairs).read_text(encoding="utf-8"))
        return [pair_from_text(it, ctx.vocab) for it in items]
    if "pairs" in ctx.circuit:
        return [FactPair.from_fixture(d) for d in ctx.circuit["pairs"]]
    raise CliError("pairs", "no fact pairs given")


# --------------------------------------------------------------------------- commands

def cmd_fixture(args) -> dict:
    if not args.output:
        raise CliError("output", "required for fixture")
    if args.spec in ("default", "irrevocable"):
        b = build_planted_model(PlantedCircuitSpec(seed=args.seed))
    elif args.spec == "overridable":
        b = build_planted_model(PlantedCircuitSpec(seed=args.seed, overridable=True))
    elif args.spec == "fact":
        b = build_fact_fixture(FactFixtureSpec(seed=args.seed + 1))
    elif args.spec == "discovery":
        b = build_discovery_fixture(seed=args.seed + 2)
    else:
        raise CliError("spec", f"unknown fixture {args.spec!r}")
    return {"bundle": b.write_archives(args.output)}


def _scan(args, ctx) -> list[VocabScanEntry]:
    clt = _need_clt(ctx)
    clean_only = not getattr(args, "all_tokens", False)
    cache = os.environ.get(CACHE_ENV)
    key = None
    if cache and ctx.digests.get("clt") and ctx.digests.get("model"):
        raw = json.dumps([ctx.digests, args.chunk_size, args.top_k, args.decoder, clean_only])
        key = Path(cache) / f"scan-{hashlib.sha256(raw.encode()).hexdigest()[:24]}.json"
        if key.exists():
            return [VocabScanEntry.from_dict(d) for d in json.loads(key.read_text(encoding="utf-8"))]
    entries = scan_vocabulary(clt, ctx.model.W_E, ctx.vocab, args.chunk_size, args.top_k,
                              clean_only, args.decoder)
    if key is not None:
        key.parent.mkdir(parents=True, exist_ok=True)
        key.write_text(json.dumps([e.to_dict() for e in entries]), encoding="utf-8")
    return entries


def cmd_explore(args) -> dict:
    ctx = load_context(args)
    entries = _scan(args, ctx)
    return {"n_features": len(entries), "entries": [e.to_dict() for e in entries]}


def cmd_rhyme(args) -> dict:
    ctx = load_context(args)
    groups = build_rhyme_groups(_scan(args, ctx), _cmu(args, ctx), args.min_cosine, args.min_words)
    return {"n_groups": len(groups), "n_words": sum(len(g.words) for g in groups),
            "groups": [g.to_dict() for g in groups]}


def cmd_domain(args) -> dict:
    ctx = load_context(args)
    kws = [k for k in (args.keywords or "").split(",") if k.strip()]
    if not kws:
        raise CliError("keywords", "give at least one keyword")
    hits = keyword_domain_scan(_scan(args, ctx), kws)
    return {"keywords": kws, "n_hits": sum(len(v) for v in hits.values()),
            "hits": {k: [h.to_dict() for h in v] for k, v in hits.items()}}


def cmd_sweep(args) -> dict:
    ctx = load_context(args)
    return position_sweep(_sweep_cfg(args, ctx), ctx.model, _need_clt(ctx), ctx.vocab).to_dict()


def cmd_strength(args) -> dict:
    ctx = load_context(args)
    cfg = _sweep_cfg(args, ctx)
    grid = _floats(args.grid, "grid")
    try:
        pts = strength_sweep(cfg, ctx.model, _need_clt(ctx), ctx.vocab, grid)
    except ValueError as exc:
        raise CliError("grid", str(exc)) from None
    return {"config": cfg.to_dict(), "points": [p.to_dict() for p in pts]}


def cmd_routing(args) -> dict:
    ctx = load_context(args)
    cfg = _sweep_cfg(args, ctx)
    clt = _need_clt(ctx)
    L = ctx.model.spec.n_layers
    toks = list(cfg.prompt)
    site = cfg.site
    inject = FeatureEdit.make(cfg.inject_feature, "inject", cfg.strength, site, n_layers=L)
    supp = [FeatureEdit.make(f, "suppress", cfg.strength, site, n_layers=L) for f in cfg.suppress_group]
    from .clt import compile_edits

    clean = forward(ctx.model, toks)
    full = routing_analysis(clean, forward(ctx.model, toks, compile_edits(supp + [inject], clt)), site,
                            top_k=args.top_k)
    only = routing_analysis(clean, forward(ctx.model, toks, compile_edits([inject], clt)), site,
                            top_k=args.top_k)
    return {"config": cfg.to_dict(), "full": full.to_dict(), "inject_only": only.to_dict(),
            "suppress_amplification": suppress_amplification(only, full)}


def cmd_correction(args) -> dict:
    ctx = load_context(args)
    clt = _need_clt(ctx)
    toks = tuple(_prompt(ctx, args))
    site = len(toks) - 1 if args.planning_site is None else args.planning_site
    L = ctx.model.spec.n_layers
    if args.commit_edits:
        commit = parse_edit_list(Path(args.commit_edits).read_text(encoding="utf-8"), L)
    else:
        commit = [FeatureEdit.make(f, "suppress", args.strength, site, n_layers=L) for f in _suppress(args, ctx)]
        commit.append(FeatureEdit.make(_feature(args, ctx), "inject", args.strength, site, n_layers=L))
    corr = _feature(args, ctx, "correct_feature", "correction_feature")
    layers = args.correct_layers or ",".join(map(str, ctx.circuit.get("correction_layers", [])))
    if not layers:
        raise CliError("correct_layers", "required")
    lo, hi = (int(v) for v in layers.split(","))
    commit_word = args.commit_word or ctx.circuit.get("target_word")
    correct_word = args.correct_word or ctx.circuit.get("competing_word")
    if not commit_word or not correct_word:
        raise CliError("commit_word", "commit and correct words are required")
    try:
        cfg = CorrectionConfig(toks, tuple(commit), commit_word, corr, (lo, hi), correct_word,
                               tuple(_floats(args.grid, "grid")), args.planning_site)
    except ValueError as exc:
        raise CliError("correct_layers", str(exc)) from None
    res = correction_test(cfg, ctx.model, clt, ctx.vocab)
    return {"config": {"commit": [e.to_dict() for e in commit], "correct_feature": str(corr),
                       "correct_layers": [lo, hi], "grid": list(cfg.grid)}, **res.to_dict()}


def cmd_ablation(args) -> dict:
    ctx = load_context(args)
    prompts = args.couplet or ctx.circuit.get("prompts", {}).get("couplets")
    if not prompts:
        raise CliError("couplet", "no couplet prompts given")
    skip = [int(v) for v in args.skip.split(",")] if args.skip else []
    res = layer_ablation(AblationConfig(tuple(prompts), frozenset(skip), args.max_new_tokens),
                         ctx.model, ctx.vocab, _cmu(args, ctx))
    return res.to_dict()


def cmd_counterfact(args) -> dict:
    ctx = load_context(args)
    cands = _pairs(args, ctx)
    gold = screen_gold_pairs(cands, ctx.model)
    if not gold:
        return {"n_candidates": len(cands), "n_gold": 0}
    grad = block_gradient(gold, ctx.model, _blocks(args.blocks, ctx))
    subj = [r for r in grad.results if r.positions == "subject"]
    return {"n_candidates": len(cands), "n_gold": len(gold), "gradient": grad.to_dict(),
            "kl_separation": kl_separation(subj)}


def cmd_factual_routing(args) -> dict:
    ctx = load_context(args)
    gold = screen_gold_pairs(_pairs(args, ctx), ctx.model)
    if not gold:
        return {"n_pairs": 0}
    return factual_routing(gold, ctx.model, _blocks(args.blocks, ctx), args.top_k, args.head_block)


def cmd_steering(args) -> dict:
    ctx = load_context(args)
    layer = args.layer
    strengths = _floats(args.strengths, "strengths")
    payload: dict = {"method": args.method}
    direction = None
    if ctx.circuit.get("pairs") or args.pairs:
        gold = screen_gold_pairs(_pairs(args, ctx), ctx.model)
        prompts = [list(p.prompt_original) for p in gold]
        target = args.target_word or ctx.vocab.surface(gold[0].answer_counterfactual).strip()
        donors = [list(p.prompt_counterfactual) for p in gold]
    else:
        prompts = [_prompt(ctx, args)]
        target = _target_word(args, ctx)
        donors = [ctx.vocab.encode(t) for t in ctx.circuit.get("prompts", {}).get("target_group", [])]
    if args.method in ("contrastive_vector", "activation_patch") and layer is None:
        raise CliError("layer", f"{args.method} needs --layer")
    if args.method == "contrastive_vector":
        if not donors:
            raise CliError("method", "no target-side prompts to build a contrastive vector")
        direction = contrastive_vector(ctx.model, donors, prompts, layer)
        payload["contrastive_norm"] = direction.norm
    cfg = SteeringConfig(args.method, prompts, target, strengths, layer, args.min_cosine,
                         args.clamp_layers, direction, donors[0] if donors else None)
    try:
        outcomes = run_baseline_method(cfg, ctx.model, ctx.vocab, ctx.clt)
    except ValueError as exc:
        raise CliError("method", str(exc)) from None
    payload["outcomes"] = [o.to_dict() for o in outcomes]
    steered = [o for o in outcomes if o.strength != 0]
    payload["target_hit_rate"] = sum(o.target_hit for o in steered) / len(steered) if steered else 0.0
    if direction is not None and args.scales:
        ab = attractor_absorption(direction, _floats(args.scales, "scales"), ctx.model, prompts[0], args.k)
        payload["absorption"] = ab.to_dict()
    return payload


def cmd_validate(args) -> dict:
    ctx = load_context(args)
    clt = _need_clt(ctx)
    texts = args.prompt_list or [t for t in ctx.circuit.get("prompts", {}).get("couplets", [])]
    if not texts:
        raise CliError("prompt_list", "no prompts given")
    prompts = [ctx.vocab.encode(t) for t in texts]
    if args.reference:
        ref = json.loads(Path(args.reference).read_text(encoding="utf-8"))
        entries = ref["entries"] if isinstance(ref, dict) else ref
        source = "file"
    else:
        inj = None
        if "target_feature" in ctx.circuit:
            L = ctx.model.spec.n_layers
            inj = [[FeatureEdit.make(ctx.circuit["target_feature"], "inject", args.strength, len(p) - 1,
                                     n_layers=L)] for p in prompts]
        entries = reference_from_oracle(ctx.model, clt, prompts, args.top_k, inj)
        source = "oracle"
    rep = validate_against_reference(ctx.model, clt, prompts, entries, args.top_k)
    return {"reference_source": source, **rep.to_dict()}


def cmd_logit_lens(args) -> dict:
    ctx = load_context(args)
    toks = _prompt(ctx, args)
    tr = forward(ctx.model, toks, capture=Capture.ALL)
    pos = args.position if args.position is not None else len(toks) - 1
    layers = []
    for l in range(ctx.model.spec.n_layers):
        p = logit_lens(tr, l, pos, ctx.model)
        top = np.lexsort((np.arange(p.size), -p))[:args.top_k]
        layers.append({"layer": l, "top": [{"id": int(i), "token": ctx.vocab.surface(int(i)),
                                            "p": float(p[i])} for i in top]})
    return {"prompt": toks, "position": pos, "layers": layers}


def cmd_plot(args) -> dict:
    if not args.envelope:
        raise CliError("envelope", "required")
    env = ResultEnvelope.read(args.envelope)
    out = args.output or str(Path(args.envelope).with_suffix(".svg"))
    try:
        svg, csvp = render_plot(env.payload, args.kind, out)
    except ValueError as exc:
        raise CliError("kind", str(exc)) from None
    return {"svg": str(svg), "csv": str(csvp)}


# --------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, model=True):
    p.add_argument("--output", help="where to write the JSON envelope")
    p.add_argument("--config", help="JSON file of flag values (flag names with underscores)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    if model:
        p.add_argument("--model", help="fixture bundle JSON or model archive")
        p.add_argument("--clt", help="CLT archive (overrides the bundle's)")
        p.add_argument("--vocab", help="vocabulary JSON or tokenizer.json")


def _intervention(p):
    p.add_argument("--feature", help="feature to inject, e.g. L22:10243")
    p.add_argument("--suppress", action="append", help="feature(s) to suppress; repeatable")
    p.add_argument("--strength", type=float, default=10.0)
    p.add_argument("--planning-site", type=int, default=None)
    p.add_argument("--prompt", help="prompt text")
    p.add_argument("--prompt-ids", help="comma-separated token ids instead of --prompt")
    p.add_argument("--target-word")
    p.add_argument("--baseline", choices=("suppressed", "clean"), default="suppressed")
    p.add_argument("--move-suppression", action="store_true")


def _scan_opts(p):
    p.add_argument("--chunk-size", type=int, default=4096)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--decoder", choices=("sum", "home"), default="sum")
    p.add_argument("--all-tokens", action="store_true", help="keep features whose top-1 is not clean")


COMMANDS: dict[str, tuple[Callable, tuple[str, ...], str]] = {}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cltprobe", description=__doc__)
    ap.add_argument("--version", action="version", version=f"cltprobe {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text, aliases=()):
        alias = name.replace("-", "_") if "-" in name else name.replace("_", "-")
        al = tuple(a for a in (alias, *aliases) if a != name)
        p = sub.add_parser(name, help=help_text, aliases=list(al))
        p.set_defaults(func=fn, command_name=name)
        return p

    p = add("fixture", cmd_fixture, "build a synthetic fixture bundle")
    _common(p, model=False)
    p.add_argument("--spec", default="default", choices=("default", "irrevocable", "overridable", "fact",
                                                          "discovery"))

    p = add("explore-vocabulary", cmd_explore, "scan decoder vectors against the token embeddings")
    _common(p)
    _scan_opts(p)

    p = add("find-rhyme-pairs", cmd_rhyme, "group clean-word features by rhyme ending")
    _common(p)
    _scan_opts(p)
    p.add_argument("--cmu", help="pronouncing dictionary file")
    p.add_argument("--min-cosine", type=float, default=0.3)
    p.add_argument("--min-words", type=int, default=2)

    p = add("domain-scan", cmd_domain, "keyword audit over the vocabulary scan")
    _common(p)
    _scan_opts(p)
    p.add_argument("--keywords", help="comma-separated keywords")

    p = add("sweep", cmd_sweep, "position sweep of suppress+inject", aliases=("figure13_planning_poems",))
    _common(p)
    _intervention(p)

    p = add("strength_sweep", cmd_strength, "scale the intervention over a strength grid")
    _common(p)
    _intervention(p)
    p.add_argument("--grid", default="0,1,2,4,6,8,10,12,15,20")

    p = add("attention_routing", cmd_routing, "per-head attention change at the planning site")
    _common(p)
    _intervention(p)
    p.add_argument("--top-k", type=int, default=10)

    p = add("correction", cmd_correction, "post-commitment correction test")
    _common(p)
    _intervention(p)
    p.add_argument("--commit-edits", help="JSON edit list for the commitment")
    p.add_argument("--correct-feature")
    p.add_argument("--correct-layers", help="first,last layer of the correction")
    p.add_argument("--commit-word")
    p.add_argument("--correct-word")
    p.add_argument("--grid", default="0,1,2,5,10,15,20")

    p = add("layer-ablation", cmd_ablation, "skip layers during couplet generation")
    _common(p)
    p.add_argument("--skip", help="comma-separated layers to skip")
    p.add_argument("--couplet", action="append", help="first line of a couplet, ending in a newline")
    p.add_argument("--max-new-tokens", type=int, default=8)
    p.add_argument("--cmu")

    p = add("counterfact_patching", cmd_counterfact, "subject/template block patching")
    _common(p)
    p.add_argument("--pairs", help="JSON list of {prompt, subject, answer, cf_prompt, cf_answer}")
    p.add_argument("--blocks", help="e.g. 0-3,4-7")

    p = add("factual_routing", cmd_factual_routing, "routing heads under subject patching")
    _common(p)
    p.add_argument("--pairs")
    p.add_argument("--blocks")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--head-block", type=int, default=0)

    p = add("steering_convergence", cmd_steering, "baseline steering methods and basin absorption")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="contrastive_vector")
    p.add_argument("--layer", type=int)
    p.add_argument("--strengths", default="0,0.25,0.5,1,2")
    p.add_argument("--scales", default="0,0.1,0.2,0.3,0.35,0.4,0.45,0.5,0.6,0.8,1.0")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--min-cosine", type=float, default=0.1)
    p.add_argument("--clamp-layers", type=int, default=4)
    p.add_argument("--pairs")
    p.add_argument("--prompt")
    p.add_argument("--prompt-ids")
    p.add_argument("--target-word")

    p = add("validate-clt", cmd_validate, "compare top features and injections to a reference")
    _common(p)
    p.add_argument("--reference", help="reference JSON; default: generate with the float64 oracle")
    p.add_argument("--prompt-list", action="append", help="prompt text; repeatable")
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--strength", type=float, default=10.0)

    p = add("logit-lens", cmd_logit_lens, "per-layer readout at one position")
    _common(p)
    p.add_argument("--prompt")
    p.add_argument("--prompt-ids")
    p.add_argument("--position", type=int)
    p.add_argument("--top-k", type=int, default=5)

    p = add("plot", cmd_plot, "render an envelope to SVG plus CSV")
    p.add_argument("--envelope")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--output", help="SVG path")
    p.add_argument("--config")
    return ap


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args) -> argparse.Namespace:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise CliError("config", "config file must hold a JSON object")
    known = set(vars(args))
    for k in cfg:
        if k.replace("-", "_") not in known:
            raise CliError(k, "unknown field in config file")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def _config_echo(args) -> dict:
    skip = {"func", "output", "config", "command_name", "envelope", "archive_digests"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        started = datetime.now(timezone.utc)
        t0 = time.perf_counter()
        np.random.seed(args.seed) if hasattr(args, "seed") else None
        payload = args.func(args)
        if args.command_name == "plot":
            print(json.dumps(payload))
            return 0
        env = ResultEnvelope(
            command=args.command_name, config=_config_echo(args), payload=payload,
            provenance={"engine": f"cltprobe {__version__}", "numpy": np.__version__,
                        "digests": _digests(args)},
            timing={"started": started.isoformat(), "elapsed_s": time.perf_counter() - t0})
        text = env.dumps()
        if args.output:
            env.write(args.output)
        else:
            sys.stdout.write(text)
        return 0
    except CliError as exc:
        print(f"cltprobe {args.command_name}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"cltprobe {args.command_name}: error: {exc}", file=sys.stderr)
        return 1


def _digests(args) -> dict:
    out = {f"{k}_archive": v for k, v in getattr(args, "archive_digests", {}).items()}
    for name in ("model", "clt", "vocab"):
        v = getattr(args, name, None)
        if v and Path(v).is_file():
            out[name] = file_digest(v)
    return out


if __name__ == "__main__":
    raise SystemExit(main())
