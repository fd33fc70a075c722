"""Mid-layer expert-prompt injection with a learned gating function.

``n_prompts`` trainable prompt columns, organized as contiguous expert groups
of ``prompts_per_expert``, are concatenated into the activation stream at the
injection layer. A two-layer MLP over the mean column embedding at that layer
emits one softmax weight per prompt; those weights rescale the prompt columns
of every subsequent layer input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .linalg import concat_columns, matmul, mean_columns, relu, softmax_vector
from .model import (
    Backbone,
    ForwardTrace,
    GateTrace,
    build_extended_mask,
    check_tokens,
    embed_tokens,
    forward_prompted,
    layer_forward,
    _finish_trace,
)


@dataclass
class GatingParams:
    """Trainable weights of the gating MLP."""

    w1: np.ndarray  # d_gate x d_token
    w2: np.ndarray  # n_prompts x d_gate

    def copy(self) -> "GatingParams":
        return GatingParams(w1=self.w1.copy(), w2=self.w2.copy())


def init_gating(config: ModelConfig, seed: int) -> GatingParams:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, config.init_std, size=(config.gate_hidden, config.d_token))
    w2 = rng.normal(0.0, config.init_std, size=(config.n_prompts, config.gate_hidden))
    return GatingParams(w1=w1, w2=w2)


def init_injected_prompts(config: ModelConfig, seed: int) -> np.ndarray:
    """Randomly initialized expert prompts, d_token x (experts * per-expert)."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, config.init_std, size=(config.d_token, config.n_prompts))


def expert_group_slices(config: ModelConfig):
    m = config.prompts_per_expert
    return [slice(e * m, (e + 1) * m) for e in range(config.n_experts)]


def group_mass(gate: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Per-expert-group sum of the per-prompt gate weights."""
    return np.array([gate[s].sum() for s in expert_group_slices(config)])


def gate(params: GatingParams, avg_emb: np.ndarray) -> np.ndarray:
    """Per-prompt scores: softmax(W2 relu(W1 avg_emb))."""
    avg = np.asarray(avg_emb, dtype=np.float64)
    if avg.ndim != 1 or avg.shape[0] != params.w1.shape[1]:
        raise ConfigError(
            f"avg_emb must be a length-{params.w1.shape[1]} vector, got shape {avg.shape}"
        )
    hidden = relu(params.w1 @ avg[:, None])[:, 0]
    return softmax_vector(params.w2 @ hidden)


def scale_prompt_columns(b: np.ndarray, g: np.ndarray, n_prompts: int) -> np.ndarray:
    """Multiply the first ``n_prompts`` columns of ``b`` elementwise by ``g``.

    Token columns pass through untouched; the output has the same shape.
    """
    if n_prompts > b.shape[1]:
        raise ConfigError(
            f"cannot scale {n_prompts} prompt columns of a {b.shape[1]}-column matrix"
        )
    if g.shape != (n_prompts,):
        raise ConfigError(f"gate vector must have length {n_prompts}, got {g.shape}")
    out = b.copy()
    out[:, :n_prompts] = b[:, :n_prompts] * g[None, :]
    return out


def forward_mop(
    backbone: Backbone,
    first_layer_prompts: np.ndarray,
    injected_prompts: np.ndarray,
    gating: GatingParams | None,
    tokens,
    gate_override: np.ndarray | None = None,
) -> tuple[ForwardTrace, np.ndarray]:
    """Mixture-of-prompts forward pass.

    Layers before the injection layer run the ordinary prompted forward with
    the frozen first-layer prompts. At the injection layer the mean over all
    current columns feeds the gating MLP; the injected expert prompts replace
    the propagated prompt columns, and from there on every layer input has its
    prompt columns rescaled by the same gate vector. ``gate_override``
    substitutes a fixed vector for the MLP output (the all-ones bypass used by
    the ungated baseline). With zero injected prompts this is exactly the
    prompted forward pass.
    """
    cfg = backbone.config
    toks = check_tokens(cfg, tokens)
    k_inj = injected_prompts.shape[1] if injected_prompts is not None else 0
    if k_inj == 0:
        trace = forward_prompted(backbone, first_layer_prompts, toks)
        return trace, np.zeros(0)
    if injected_prompts.shape[0] != cfg.d_token:
        raise ConfigError(
            f"injected prompts must be d_token x K, got {injected_prompts.shape}"
        )
    n = toks.size
    k1 = first_layer_prompts.shape[1]
    x0 = embed_tokens(backbone, toks)
    b = concat_columns(first_layer_prompts, x0)
    pre_mask = build_extended_mask(n, k1)
    layers = []
    for ell in range(cfg.inject_layer - 1):
        trace = layer_forward(backbone, ell, b, pre_mask, k1)
        layers.append(trace)
        b = trace.out

    # b is now the injection layer's incoming activation, prompts included.
    avg_emb = mean_columns(b)
    if gate_override is not None:
        if gate_override.shape != (k_inj,):
            raise ConfigError(
                f"gate override must have length {k_inj}, got {gate_override.shape}"
            )
        g = np.asarray(gate_override, dtype=np.float64)
        gate_trace = GateTrace(avg_emb=avg_emb, hidden_pre=np.zeros(0), gate=g, overridden=True)
    else:
        if gating is None:
            raise ConfigError("gating params required unless gate_override is given")
        hidden_pre = (gating.w1 @ avg_emb[:, None])[:, 0]
        g = softmax_vector(gating.w2 @ relu(hidden_pre[:, None])[:, 0])
        gate_trace = GateTrace(avg_emb=avg_emb, hidden_pre=hidden_pre, gate=g, overridden=False)

    if cfg.keep_first_layer_prompts:
        # Variant: propagated first-layer prompt columns survive, unscaled,
        # behind the injected block.
        kept = b[:, :k1]
        tokens_part = b[:, k1:]
        b = concat_columns(concat_columns(injected_prompts, kept), tokens_part)
        k_block = k_inj + k1
    else:
        b = concat_columns(injected_prompts, b[:, k1:])
        k_block = k_inj
    post_mask = build_extended_mask(n, k_block)

    for ell in range(cfg.inject_layer - 1, cfg.n_layers):
        b_scaled = scale_prompt_columns(b, g, k_inj)
        trace = layer_forward(backbone, ell, b_scaled, post_mask, k_block, b_raw=b)
        layers.append(trace)
        b = trace.out

    full = _finish_trace(backbone, toks, x0, layers, k_block)
    full.gate_trace = gate_trace
    return full, g
