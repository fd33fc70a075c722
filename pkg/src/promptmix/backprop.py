"""Manual reverse-mode gradients for the transformer and the gating path.

Three entry points, one per training regime:

* :func:`backward_full` - gradients for every backbone weight (backbone
  pretraining over the plain forward).
* :func:`backward_input_prompts` - gradient for the first-layer prompts only
  (their pretraining phase; all weights stay frozen).
* :func:`backward_mop` - gradients for the injected expert prompts and the
  gating MLP; nothing is allocated for frozen blocks, so the zero-gradient
  contract for the backbone and first-layer prompts holds by construction.

Every formula here is checked against the central-difference oracle in the
test suite.
"""

from __future__ import annotations

import numpy as np

from .gating import GatingParams
from .model import Backbone, ForwardTrace, LayerTrace


def rms_backward(x: np.ndarray, inv: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of y = x * inv with inv = (mean_rows(x^2) + eps)^(-1/2)."""
    d = x.shape[0]
    s = (dy * x).sum(axis=0)
    return dy * inv - x * (s * inv**3 / d)


def _softmax_rows_backward(attn: np.ndarray, d_attn: np.ndarray) -> np.ndarray:
    inner = (d_attn * attn).sum(axis=1, keepdims=True)
    return attn * (d_attn - inner)


def layer_backward(
    backbone: Backbone,
    ell: int,
    lt: LayerTrace,
    d_out: np.ndarray,
    grads: dict | None = None,
) -> np.ndarray:
    """Gradient wrt the input ``lt.b`` given the gradient wrt ``lt.out``.

    When ``grads`` is a dict, per-weight gradients are accumulated into it
    under the same names the backbone uses on disk.
    """
    cfg = backbone.config
    residual = cfg.use_residual
    ffn_in = lt.r_norm if residual else lt.attn_out

    d_ffn_act = backbone.wff2[ell].T @ d_out
    d_ffn_pre = d_ffn_act * (lt.ffn_pre > 0)
    d_ffn_in = backbone.wff1[ell].T @ d_ffn_pre
    if grads is not None:
        grads[f"layer{ell}.wff2"] += d_out @ lt.ffn_act.T
        grads[f"layer{ell}.wff1"] += d_ffn_pre @ ffn_in.T

    if residual:
        d_resid_mid = d_out + rms_backward(lt.resid_mid, lt.inv_rms_ffn, d_ffn_in)
        d_attn_out = d_resid_mid
        d_b = d_resid_mid.copy()
    else:
        d_attn_out = d_ffn_in
        d_b = None

    d_concat = backbone.wo[ell].T @ d_attn_out
    if grads is not None:
        grads[f"layer{ell}.wo"] += d_attn_out @ lt.concat_v.T

    bn = lt.b_norm if residual else lt.b
    d_bn = np.zeros_like(bn)
    inv_sqrt_dh = 1.0 / np.sqrt(cfg.d_head)
    for h, head in enumerate(lt.heads):
        d_head_out = d_concat[h * cfg.d_head : (h + 1) * cfg.d_head]
        d_vw = d_head_out @ head.attn
        d_attn = d_head_out.T @ head.vw
        d_scores = _softmax_rows_backward(head.attn, d_attn) * inv_sqrt_dh
        d_q = head.k @ d_scores.T
        d_k = head.q @ d_scores
        d_bn += (
            backbone.wq[ell][h].T @ d_q
            + backbone.wk[ell][h].T @ d_k
            + backbone.wv[ell][h].T @ d_vw
        )
        if grads is not None:
            grads[f"layer{ell}.wq{h}"] += d_q @ bn.T
            grads[f"layer{ell}.wk{h}"] += d_k @ bn.T
            grads[f"layer{ell}.wv{h}"] += d_vw @ bn.T

    if residual:
        d_b += rms_backward(lt.b, lt.inv_rms_attn, d_bn)
    else:
        d_b = d_bn
    return d_b


def _head_backward(
    backbone: Backbone, trace: ForwardTrace, d_logits: np.ndarray, grads: dict | None
) -> np.ndarray:
    """Gradient wrt the last layer's output, through head and final norm.

    ``d_logits`` may cover fewer positions than the sequence (the final token
    predicts nothing); trailing columns then receive zero gradient.
    """
    k = trace.layers[-1].n_prompt_cols
    n_pred = d_logits.shape[1]
    d_final = np.zeros_like(trace.final)
    d_final[:, k : k + n_pred] = backbone.embedding @ d_logits
    if grads is not None:
        grads["embedding"] += trace.final[:, k : k + n_pred] @ d_logits.T
    if backbone.config.use_residual:
        return rms_backward(trace.final_in, trace.final_inv_rms, d_final)
    return d_final


def backward_full(backbone: Backbone, trace: ForwardTrace, d_logits: np.ndarray) -> dict:
    """All-weights gradients for a plain (prompt-free) forward trace."""
    grads = {name: np.zeros_like(arr) for name, arr in backbone.param_items()}
    d_b = _head_backward(backbone, trace, d_logits, grads)
    for ell in range(backbone.config.n_layers - 1, -1, -1):
        d_b = layer_backward(backbone, ell, trace.layers[ell], d_b, grads)
    k = trace.layers[0].n_prompt_cols
    d_x0 = d_b[:, k:]
    if k:
        grads["input_prompts"] += d_b[:, :k]
    np.add.at(grads["embedding"], (slice(None), trace.tokens), d_x0)
    grads["pos_embedding"][:, : trace.tokens.size] += d_x0
    return grads


def backward_input_prompts(
    backbone: Backbone, trace: ForwardTrace, d_logits: np.ndarray
) -> np.ndarray:
    """Gradient wrt the first-layer prompt columns only."""
    d_b = _head_backward(backbone, trace, d_logits, None)
    for ell in range(backbone.config.n_layers - 1, -1, -1):
        d_b = layer_backward(backbone, ell, trace.layers[ell], d_b, None)
    k = trace.layers[0].n_prompt_cols
    return d_b[:, :k]


def backward_mop(
    backbone: Backbone,
    gating: GatingParams | None,
    trace: ForwardTrace,
    d_logits: np.ndarray,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Gradients for the injected prompts and (unless bypassed) the gate MLP.

    The gate weight gradient collects one contribution per post-injection
    layer, since the same vector rescales every one of those layer inputs.
    Backpropagation stops at the injection layer: everything below it is
    frozen during mixture training.
    """
    cfg = backbone.config
    gt = trace.gate_trace
    if gt is None:
        raise ValueError("trace was not produced by the mixture forward pass")
    g = gt.gate
    k_inj = g.size
    d_b = _head_backward(backbone, trace, d_logits, None)
    d_gate = np.zeros(k_inj)
    d_injected = None
    for ell in range(cfg.n_layers - 1, cfg.inject_layer - 2, -1):
        lt = trace.layers[ell]
        d_scaled = layer_backward(backbone, ell, lt, d_b, None)
        d_gate += (d_scaled[:, :k_inj] * lt.b_raw[:, :k_inj]).sum(axis=0)
        d_b = d_scaled.copy()
        d_b[:, :k_inj] *= g[None, :]
        if ell == cfg.inject_layer - 1:
            d_injected = d_b[:, :k_inj]
    if gt.overridden:
        return d_injected, None, None
    d_logits_gate = g * (d_gate - float(d_gate @ g))
    hidden = np.maximum(gt.hidden_pre, 0.0)
    d_w2 = np.outer(d_logits_gate, hidden)
    d_hidden = gating.w2.T @ d_logits_gate
    d_hidden_pre = d_hidden * (gt.hidden_pre > 0)
    d_w1 = np.outer(d_hidden_pre, gt.avg_emb)
    return d_injected, d_w1, d_w2


def gate_target_backward(g: np.ndarray, target: np.ndarray, gating: GatingParams, gt) -> tuple:
    """Gradients of cross-entropy(target, g) wrt the gate MLP weights.

    Used by gating pretraining, where the loss is defined directly on the
    gate output rather than on token logits.
    """
    d_logits_gate = g - target
    hidden = np.maximum(gt.hidden_pre, 0.0)
    d_w2 = np.outer(d_logits_gate, hidden)
    d_hidden = gating.w2.T @ d_logits_gate
    d_hidden_pre = d_hidden * (gt.hidden_pre > 0)
    d_w1 = np.outer(d_hidden_pre, gt.avg_emb)
    return d_w1, d_w2
