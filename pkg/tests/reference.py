"""Independent straight-line re-implementations used as test oracles.

Everything here is deliberately written from the math, without touching
the autodiff graph: plain numpy loops for the transformer forward, sorted
lists for selection, explicit stream replay for masking. Keep this file
free of imports from liftkit internals other than parameter arrays and
the rng stream derivation (shared plumbing, not algorithm).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from liftkit.rng import StepRngs


def ref_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def ref_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def ref_softmax_rows(x):
    s = x - x.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def ref_log_probs(params, cfg, ids, pad_id=None):
    """Forward pass for one sequence; returns [T, vocab] log-probs."""
    P = {k: v.data if hasattr(v, "data") else v for k, v in params.items()}
    ids = np.asarray(ids)
    t = len(ids)
    x = P["tok_emb"][ids] + P["pos_emb"][:t]
    nh = cfg.n_heads
    hd = cfg.d_model // nh
    key_bias = np.zeros(t)
    if pad_id is not None:
        key_bias = np.where(ids == pad_id, -1e30, 0.0)
    for i in range(cfg.n_layers):
        b = f"blocks.{i}"
        h = ref_layer_norm(x, P[f"{b}.ln1.gamma"], P[f"{b}.ln1.beta"])
        q = h @ P[f"{b}.attn.wq"] + P[f"{b}.attn.qb"]
        k = h @ P[f"{b}.attn.wk"] + P[f"{b}.attn.kb"]
        v = h @ P[f"{b}.attn.wv"] + P[f"{b}.attn.vb"]
        heads = []
        for hh in range(nh):
            sl = slice(hh * hd, (hh + 1) * hd)
            scores = (q[:, sl] @ k[:, sl].T) / math.sqrt(hd) + key_bias[None, :]
            heads.append(ref_softmax_rows(scores) @ v[:, sl])
        o = np.concatenate(heads, axis=-1) @ P[f"{b}.attn.wo"] + P[f"{b}.attn.ob"]
        x = x + o
        h = ref_layer_norm(x, P[f"{b}.ln2.gamma"], P[f"{b}.ln2.beta"])
        h = ref_gelu(h @ P[f"{b}.mlp.w1"] + P[f"{b}.mlp.b1"]) @ P[f"{b}.mlp.w2"] + P[f"{b}.mlp.b2"]
        x = x + h
    x = ref_layer_norm(x, P["ln_f.gamma"], P["ln_f.beta"])
    logits = x @ P["head.w"] + P["head.b"]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# straight-line re-implementation of the selection rule and both losses
# ---------------------------------------------------------------------------

def ref_regime(t, H):
    if t >= 1.0 - 1.0 / H:
        return "top"
    if t >= 1.0 / H:
        return "vanilla"
    return "bottom"


def ref_select(candidates, conf, t, H, response_len, select_rng, rho, forced=None):
    cands = sorted(candidates)
    K = min(math.floor(t * response_len), len(cands))
    regime = forced or ref_regime(t, H)
    if regime == "top":
        return sorted(sorted(cands, key=lambda p: (-conf[p], p))[:K]), regime, K
    if regime == "bottom":
        return sorted(sorted(cands, key=lambda p: (conf[p], p))[:K]), regime, K
    keep = 1.0 if t + rho <= 0 else min(1.0, t / (t + rho))
    u = select_rng.random(len(cands))
    return [p for p, ui in zip(cands, u) if ui < keep], regime, K


def ref_lift_losses(model, clean, draw, H, seed, step, example, mask_id):
    """Replays one LIFT and one LIFT-A step with its own forward/selection.

    Returns (lift_loss, lift_a_loss, selected); losses are None when the
    selection came out empty (the step would be skipped).
    """
    cfg = model.config
    t, rho = draw.t, draw.rho
    rngs = StepRngs.at(seed, step, example)
    resp = np.arange(clean.prompt_len, clean.prompt_len + clean.response_len)
    u = rngs.mask.random(len(resp))
    masked = [int(p) for p, ui in zip(resp, u) if ui < min(t + rho, 1.0)]
    x = np.array(clean.ids)
    for p in masked:
        x[p] = mask_id
    logp1 = ref_log_probs(model.params, cfg, x)
    conf = {p: float(np.exp(logp1[p, clean.ids[p]])) for p in masked}
    selected, _, _ = ref_select(masked, conf, t, H, clean.response_len, rngs.select, rho)
    if not selected:
        return None, None, []
    # LIFT: restore unselected masked tokens, second forward at the result
    xt = x.copy()
    for p in masked:
        if p not in selected:
            xt[p] = clean.ids[p]
    logp2 = ref_log_probs(model.params, cfg, xt)
    lift = -(1.0 / t) * sum(float(logp2[p, clean.ids[p]]) for p in selected)
    # LIFT-A: same single corrupted input, reweighted
    lift_a = -(1.0 / (t + rho)) * sum(float(logp1[p, clean.ids[p]]) for p in selected)
    return lift, lift_a, selected


def ref_nelbo(model, clean, t, seed, step, example, mask_id):
    rngs = StepRngs.at(seed, step, example)
    resp = np.arange(clean.prompt_len, clean.prompt_len + clean.response_len)
    u = rngs.mask.random(len(resp))
    masked = [int(p) for p, ui in zip(resp, u) if ui < t]
    if not masked:
        return None, []
    x = np.array(clean.ids)
    for p in masked:
        x[p] = mask_id
    logp = ref_log_probs(model.params, model.config, x)
    return -(1.0 / t) * sum(float(logp[p, clean.ids[p]]) for p in masked), masked


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_fd_elementwise(f, x, h=1e-6):
    """df/dx_i for every element i of x, via central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def directional_fd(f, x, direction, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    d = direction / np.linalg.norm(direction.reshape(-1))
    return (f(x + h * d) - f(x - h * d)) / (2.0 * h)
