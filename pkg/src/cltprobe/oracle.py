"""Brute-force 64-bit reference forward.

Deliberately shares no kernels with :mod:`cltprobe.model`: explicit loops over
positions, heads and keys, float64 throughout, ``math`` for scalar nonlinear
functions. It is slow by design and only meant for desk-scale models.
"""
from __future__ import annotations

import math

import numpy as np

from .model import (Capture, EditError, ForwardTrace, LayerMask, NonFiniteActivationError,
                    ResidualEdit, ResidualPatch, Transformer)


def _f64(model: Transformer, name: str) -> np.ndarray | None:
    a = model.get(name)
    return None if a is None else np.asarray(a, dtype=np.float64)


def _norm_vec(x: np.ndarray, w: np.ndarray, eps: float, offset: float) -> np.ndarray:
    acc = 0.0
    for v in x:
        acc += float(v) * float(v)
    inv = 1.0 / math.sqrt(acc / len(x) + eps)
    return np.array([float(x[i]) * inv * (float(w[i]) + offset) for i in range(len(x))])


def _act_scalar(v: float, kind: str) -> float:
    if kind == "relu":
        return v if v > 0 else 0.0
    if kind == "silu":
        if v < -700:
            return 0.0
        return v / (1.0 + math.exp(-v))
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def _rotate(vec: np.ndarray, pos: int, theta: float) -> np.ndarray:
    dh = len(vec)
    half = dh // 2
    out = np.empty(dh)
    for i in range(half):
        ang = pos * theta ** (-i / half)
        c, s = math.cos(ang), math.sin(ang)
        out[i] = vec[i] * c - vec[i + half] * s
        out[i + half] = vec[i + half] * c + vec[i] * s
    return out


def oracle_forward(model: Transformer, tokens, edits=(), mask: LayerMask | None = None,
                   patches=()) -> ForwardTrace:
    """64-bit reference trace with the same contract as :func:`cltprobe.model.forward`."""
    s = model.spec
    mask = mask or LayerMask()
    ids = [int(t) for t in np.asarray(tokens).reshape(-1)]
    T, L, H, K, d, dh = len(ids), s.n_layers, s.n_heads, s.n_kv_heads, s.d_model, s.d_head
    if T < 1 or min(ids) < 0 or max(ids) >= s.vocab_size:
        raise ValueError("bad token sequence")
    adds: dict[tuple[int, int], list[np.ndarray]] = {}
    sets: dict[tuple[int, int], list[np.ndarray]] = {}
    for store, items, attr in ((adds, edits, "delta"), (sets, patches, "value")):
        for e in items:
            if not (0 <= e.layer < L and 0 <= e.position < T):
                raise EditError(f"{e.tag or 'edit'}: out of range (L{e.layer}, pos{e.position})")
            store.setdefault((e.layer, e.position), []).append(
                np.asarray(getattr(e, attr), dtype=np.float64))

    W_E = _f64(model, "embed.W_E")
    W_pos = _f64(model, "embed.W_pos")
    resid = []
    for t in range(T):
        row = W_E[ids[t]].copy() * s.embed_scale
        if W_pos is not None:
            row = row + W_pos[t]
        resid.append(row)

    pre = np.zeros((L, T, d))
    mid = np.zeros((L, T, d))
    post = np.zeros((L, T, d))
    attn = np.zeros((L, H, T, T))
    group = H // K

    for l in range(L):
        for t in range(T):
            pre[l, t] = resid[t]
        if l not in mask.skipped:
            p = f"blocks.{l}."
            W_Q, W_K, W_V, W_O = (_f64(model, p + "attn." + n) for n in ("W_Q", "W_K", "W_V", "W_O"))
            b_Q, b_K, b_V, b_O = (_f64(model, p + "attn." + n) for n in ("b_Q", "b_K", "b_V", "b_O"))
            ln1 = _f64(model, p + "ln1.w")
            normed = [_norm_vec(resid[t], ln1, s.norm_eps, s.norm_offset) for t in range(T)]
            attn_out = [np.zeros(d) for _ in range(T)]
            for h in range(H):
                kvh = h // group
                qs, ks, vs = [], [], []
                for t in range(T):
                    q = W_Q[h].T @ normed[t]
                    k = W_K[kvh].T @ normed[t]
                    v = W_V[kvh].T @ normed[t]
                    if b_Q is not None:
                        q = q + b_Q[h]
                    if b_K is not None:
                        k = k + b_K[kvh]
                    if b_V is not None:
                        v = v + b_V[kvh]
                    if s.positional == "rope":
                        q = _rotate(q, t, s.rope_theta)
                        k = _rotate(k, t, s.rope_theta)
                    qs.append(q)
                    ks.append(k)
                    vs.append(v)
                for tq in range(T):
                    scores = []
                    for tk in range(tq + 1):
                        sc = float(np.dot(qs[tq], ks[tk])) * s.scale
                        if s.attn_softcap is not None:
                            sc = math.tanh(sc / s.attn_softcap) * s.attn_softcap
                        scores.append(sc)
                    top = max(scores)
                    ex = [math.exp(v - top) for v in scores]
                    tot = math.fsum(ex)
                    z = np.zeros(dh)
                    for tk in range(tq + 1):
                        wgt = ex[tk] / tot
                        attn[l, h, tq, tk] = wgt
                        z = z + wgt * vs[tk]
                    attn_out[tq] = attn_out[tq] + W_O[h].T @ z
            for t in range(T):
                a = attn_out[t] + (b_O if b_O is not None else 0.0)
                if s.post_norms:
                    a = _norm_vec(a, _f64(model, p + "ln1_post.w"), s.norm_eps, s.norm_offset)
                resid[t] = resid[t] + a
                mid[l, t] = resid[t]

            ln2 = _f64(model, p + "ln2.w")
            W_in, W_gate, W_out = (_f64(model, p + "mlp." + n) for n in ("W_in", "W_gate", "W_out"))
            b_in, b_gate, b_out = (_f64(model, p + "mlp." + n) for n in ("b_in", "b_gate", "b_out"))
            for t in range(T):
                hvec = _norm_vec(resid[t], ln2, s.norm_eps, s.norm_offset)
                up = W_in.T @ hvec
                if b_in is not None:
                    up = up + b_in
                if s.mlp_gated:
                    gate = W_gate.T @ hvec
                    if b_gate is not None:
                        gate = gate + b_gate
                    hidden = np.array([_act_scalar(float(g), s.mlp_act) * float(u)
                                       for g, u in zip(gate, up)])
                else:
                    hidden = np.array([_act_scalar(float(u), s.mlp_act) for u in up])
                out = W_out.T @ hidden
                if b_out is not None:
                    out = out + b_out
                if s.post_norms:
                    out = _norm_vec(out, _f64(model, p + "ln2_post.w"), s.norm_eps, s.norm_offset)
                resid[t] = resid[t] + out
        else:
            for t in range(T):
                mid[l, t] = resid[t]
        for t in range(T):
            for v in sets.get((l, t), ()):
                resid[t] = v.copy()
            for v in adds.get((l, t), ()):
                resid[t] = resid[t] + v
            if not all(math.isfinite(float(x)) for x in resid[t]):
                raise NonFiniteActivationError(l)
            post[l, t] = resid[t]

    lnf = _f64(model, "ln_final.w")
    W_U = np.asarray(model.W_U, dtype=np.float64)
    b_U = _f64(model, "unembed.b_U")
    logits = np.zeros((T, s.vocab_size))
    for t in range(T):
        hvec = _norm_vec(resid[t], lnf, s.norm_eps, s.norm_offset)
        row = W_U.T @ hvec
        if b_U is not None:
            row = row + b_U
        if s.final_softcap is not None:
            row = np.array([math.tanh(v / s.final_softcap) * s.final_softcap for v in row])
        logits[t] = row
    return ForwardTrace(tokens=np.asarray(ids), captured=Capture.ALL, skipped=mask.skipped,
                        residual_pre=pre, residual_mid=mid, residual_post=post,
                        attention=attn, logits=logits, final_residual=np.array(resid))


def oracle_distribution(model: Transformer, tokens, edits=(), mask=None, patches=(),
                        position: int = -1) -> np.ndarray:
    tr = oracle_forward(model, tokens, edits, mask, patches)
    row = tr.logits[position]
    top = max(row)
    ex = np.array([math.exp(v - top) for v in row])
    return ex / math.fsum(ex)
