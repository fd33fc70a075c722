"""Frozen decoder-only transformer: weights, masks, forward passes, file format.

Weight layout per layer and head follows the column-major sequence
convention: activations are ``d_token x n_cols`` matrices whose columns are
positions, with any prompt columns sitting in front of the token columns.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, InputError
from .linalg import concat_columns, frozen, matmul, relu, softmax_columns

MAGIC = b"PMIXBK1\n"


def build_extended_mask(n: int, k: int) -> np.ndarray:
    """Attention mask for ``k`` prompt columns followed by ``n`` token columns.

    Row ``i`` may attend to column ``j`` when the entry is True. Every row
    sees all prompt columns except that prompt rows see prompts only; token
    rows are causal among themselves.
    """
    if n < 1:
        raise ConfigError(f"need at least one token position, got n={n}")
    if k < 0:
        raise ConfigError(f"prompt count must be >= 0, got {k}")
    size = n + k
    mask = np.zeros((size, size), dtype=bool)
    mask[:, :k] = True
    mask[:k, k:] = False
    mask[k:, k:] = np.tril(np.ones((n, n), dtype=bool))
    return mask


@dataclass(frozen=True)
class Backbone:
    """Immutable pretrained weights; compression ops return a new instance."""

    config: ModelConfig
    wq: tuple  # [layer][head] d_head x d_token
    wk: tuple
    wv: tuple
    wo: tuple  # [layer] d_attn_out x (n_heads * d_head)
    wff1: tuple  # [layer] d_ff x d_attn_out
    wff2: tuple  # [layer] d_token x d_ff
    embedding: np.ndarray  # d_token x vocab (output head is its transpose)
    pos_embedding: np.ndarray  # d_token x n_max
    input_prompts: np.ndarray  # d_token x n_input_prompts

    def param_items(self):
        """(name, array) pairs in the declaration order used on disk."""
        for ell in range(self.config.n_layers):
            for h in range(self.config.n_heads):
                yield f"layer{ell}.wq{h}", self.wq[ell][h]
            for h in range(self.config.n_heads):
                yield f"layer{ell}.wk{h}", self.wk[ell][h]
            for h in range(self.config.n_heads):
                yield f"layer{ell}.wv{h}", self.wv[ell][h]
            yield f"layer{ell}.wo", self.wo[ell]
            yield f"layer{ell}.wff1", self.wff1[ell]
            yield f"layer{ell}.wff2", self.wff2[ell]
        yield "embedding", self.embedding
        yield "pos_embedding", self.pos_embedding
        yield "input_prompts", self.input_prompts

    def to_param_dict(self, writable: bool = False) -> dict:
        out = {}
        for name, arr in self.param_items():
            out[name] = np.array(arr, copy=True) if writable else arr
        return out

    def with_input_prompts(self, prompts: np.ndarray) -> "Backbone":
        cfg = self.config
        if prompts.shape != (cfg.d_token, cfg.n_input_prompts):
            raise ConfigError(
                f"input prompts must be {cfg.d_token}x{cfg.n_input_prompts}, got {prompts.shape}"
            )
        return replace(self, input_prompts=frozen(np.array(prompts, dtype=np.float64)))


def backbone_from_params(config: ModelConfig, params: dict, freeze: bool = True) -> Backbone:
    """Assemble a Backbone from a name->array dict.

    With ``freeze`` (the default) every array's write flag is cleared; the
    non-frozen form exists solely so backbone pretraining can update weights
    in place before freezing the final copy.
    """
    hold = frozen if freeze else (lambda a: a)
    wq, wk, wv, wo, wff1, wff2 = [], [], [], [], [], []
    for ell in range(config.n_layers):
        wq.append(tuple(hold(params[f"layer{ell}.wq{h}"]) for h in range(config.n_heads)))
        wk.append(tuple(hold(params[f"layer{ell}.wk{h}"]) for h in range(config.n_heads)))
        wv.append(tuple(hold(params[f"layer{ell}.wv{h}"]) for h in range(config.n_heads)))
        wo.append(hold(params[f"layer{ell}.wo"]))
        wff1.append(hold(params[f"layer{ell}.wff1"]))
        wff2.append(hold(params[f"layer{ell}.wff2"]))
    return Backbone(
        config=config,
        wq=tuple(wq),
        wk=tuple(wk),
        wv=tuple(wv),
        wo=tuple(wo),
        wff1=tuple(wff1),
        wff2=tuple(wff2),
        embedding=hold(params["embedding"]),
        pos_embedding=hold(params["pos_embedding"]),
        input_prompts=hold(params["input_prompts"]),
    )


def init_backbone(config: ModelConfig, seed: int) -> Backbone:
    """Seeded Gaussian initialization (std per config) in declaration order."""
    rng = np.random.default_rng(seed)
    std = config.init_std

    def draw(rows, cols):
        return rng.normal(0.0, std, size=(rows, cols))

    params = {}
    for ell in range(config.n_layers):
        for kind in ("wq", "wk", "wv"):
            for h in range(config.n_heads):
                params[f"layer{ell}.{kind}{h}"] = draw(config.d_head, config.d_token)
        params[f"layer{ell}.wo"] = draw(config.d_attn_out, config.n_heads * config.d_head)
        params[f"layer{ell}.wff1"] = draw(config.d_ff, config.d_attn_out)
        params[f"layer{ell}.wff2"] = draw(config.d_token, config.d_ff)
    params["embedding"] = draw(config.d_token, config.vocab_size)
    params["pos_embedding"] = draw(config.d_token, config.n_max)
    params["input_prompts"] = draw(config.d_token, config.n_input_prompts)
    return backbone_from_params(config, params)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


@dataclass
class HeadTrace:
    q: np.ndarray  # d_head x nc
    k: np.ndarray
    attn: np.ndarray  # nc x nc, rows sum to 1 over allowed entries
    vw: np.ndarray  # d_head x nc  (W_v applied to the layer input)


@dataclass
class LayerTrace:
    n_prompt_cols: int
    b_raw: np.ndarray | None  # input before gate scaling (None when unscaled)
    b: np.ndarray  # input the layer consumed, d_token x nc
    b_norm: np.ndarray | None
    inv_rms_attn: np.ndarray | None
    heads: list
    concat_v: np.ndarray  # (n_heads * d_head) x nc
    attn_out: np.ndarray  # d_attn_out x nc
    resid_mid: np.ndarray | None
    r_norm: np.ndarray | None
    inv_rms_ffn: np.ndarray | None
    ffn_pre: np.ndarray  # d_ff x nc
    ffn_act: np.ndarray
    out: np.ndarray  # d_token x nc


@dataclass
class GateTrace:
    avg_emb: np.ndarray
    hidden_pre: np.ndarray
    gate: np.ndarray
    overridden: bool


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    x0: np.ndarray  # d_token x n after embedding + positions
    layers: list
    final_in: np.ndarray  # last layer output, all columns
    final_inv_rms: np.ndarray | None
    final: np.ndarray
    logits: np.ndarray  # vocab x n, token positions only
    gate_trace: GateTrace | None = None


def _rms_inv(x: np.ndarray, eps: float) -> np.ndarray:
    return 1.0 / np.sqrt((x * x).mean(axis=0) + eps)


def layer_forward(
    backbone: Backbone,
    ell: int,
    b: np.ndarray,
    mask: np.ndarray,
    n_prompt_cols: int,
    b_raw: np.ndarray | None = None,
) -> LayerTrace:
    """One decoder layer over input columns ``b`` (already gate-scaled if at all)."""
    cfg = backbone.config
    if cfg.use_residual:
        inv1 = _rms_inv(b, cfg.rms_eps)
        bn = b * inv1
    else:
        inv1 = None
        bn = b
    inv_sqrt_dh = 1.0 / np.sqrt(cfg.d_head)
    heads = []
    head_outs = []
    for h in range(cfg.n_heads):
        q = matmul(backbone.wq[ell][h], bn)
        k = matmul(backbone.wk[ell][h], bn)
        scores = matmul(q.T, k) * inv_sqrt_dh
        attn = softmax_columns(scores, mask)
        vw = matmul(backbone.wv[ell][h], bn)
        heads.append(HeadTrace(q=q, k=k, attn=attn, vw=vw))
        head_outs.append(matmul(vw, attn.T))
    concat_v = np.concatenate(head_outs, axis=0)
    attn_out = matmul(backbone.wo[ell], concat_v)
    if cfg.use_residual:
        resid_mid = b + attn_out
        inv2 = _rms_inv(resid_mid, cfg.rms_eps)
        rn = resid_mid * inv2
        ffn_in = rn
    else:
        resid_mid = None
        inv2 = None
        rn = None
        ffn_in = attn_out
    ffn_pre = matmul(backbone.wff1[ell], ffn_in)
    ffn_act = relu(ffn_pre)
    ffn_out = matmul(backbone.wff2[ell], ffn_act)
    out = resid_mid + ffn_out if cfg.use_residual else ffn_out
    return LayerTrace(
        n_prompt_cols=n_prompt_cols,
        b_raw=b_raw,
        b=b,
        b_norm=bn if cfg.use_residual else None,
        inv_rms_attn=inv1,
        heads=heads,
        concat_v=concat_v,
        attn_out=attn_out,
        resid_mid=resid_mid,
        r_norm=rn,
        inv_rms_ffn=inv2,
        ffn_pre=ffn_pre,
        ffn_act=ffn_act,
        out=out,
    )


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size < 1:
        raise InputError("tokens must be a non-empty 1-D integer sequence")
    if toks.size > config.n_max:
        raise InputError(f"sequence length {toks.size} exceeds n_max={config.n_max}")
    if toks.min() < 0 or toks.max() >= config.vocab_size:
        raise InputError(
            f"token id out of range [0, {config.vocab_size}): {toks[(toks < 0) | (toks >= config.vocab_size)][0]}"
        )
    return toks


def embed_tokens(backbone: Backbone, tokens: np.ndarray) -> np.ndarray:
    """Token embedding plus learned absolute positions (tokens only)."""
    n = tokens.size
    return backbone.embedding[:, tokens] + backbone.pos_embedding[:, :n]


def head_logits(backbone: Backbone, final: np.ndarray, n_prompt_cols: int) -> np.ndarray:
    """Tied output head over the token columns."""
    return matmul(backbone.embedding.T, final[:, n_prompt_cols:])


def _finish_trace(backbone: Backbone, tokens, x0, layers, n_prompt_cols) -> ForwardTrace:
    cfg = backbone.config
    final_in = layers[-1].out
    if cfg.use_residual:
        inv = _rms_inv(final_in, cfg.rms_eps)
        final = final_in * inv
    else:
        inv = None
        final = final_in
    logits = head_logits(backbone, final, n_prompt_cols)
    return ForwardTrace(
        tokens=tokens,
        x0=x0,
        layers=layers,
        final_in=final_in,
        final_inv_rms=inv,
        final=final,
        logits=logits,
    )


def forward_prompted(backbone: Backbone, prompts: np.ndarray, tokens) -> ForwardTrace:
    """Forward pass with ``prompts`` concatenated in front of the tokens.

    With zero prompt columns this is exactly the plain forward pass.
    """
    cfg = backbone.config
    toks = check_tokens(cfg, tokens)
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.ndim != 2 or prompts.shape[0] != cfg.d_token:
        raise ConfigError(f"prompts must be d_token x K, got {prompts.shape}")
    k = prompts.shape[1]
    n = toks.size
    x0 = embed_tokens(backbone, toks)
    b = concat_columns(prompts, x0)
    mask = build_extended_mask(n, k)
    layers = []
    for ell in range(cfg.n_layers):
        trace = layer_forward(backbone, ell, b, mask, k)
        layers.append(trace)
        b = trace.out
    return _finish_trace(backbone, toks, x0, layers, k)


def forward_plain(backbone: Backbone, tokens) -> ForwardTrace:
    """Forward pass without any prompt columns."""
    empty = np.zeros((backbone.config.d_token, 0))
    return forward_prompted(backbone, empty, tokens)


def audit_forward_trace(trace: ForwardTrace, config: ModelConfig) -> None:
    """Assert every retained intermediate has its annotated dimensions."""
    n = trace.tokens.size
    assert trace.x0.shape == (config.d_token, n)
    for layer in trace.layers:
        k = layer.n_prompt_cols
        nc = n + k
        assert layer.b.shape == (config.d_token, nc)
        for head in layer.heads:
            assert head.q.shape == (config.d_head, nc)
            assert head.k.shape == (config.d_head, nc)
            assert head.attn.shape == (nc, nc)
            assert head.vw.shape == (config.d_head, nc)
        assert layer.concat_v.shape == (config.n_heads * config.d_head, nc)
        assert layer.attn_out.shape == (config.d_attn_out, nc)
        assert layer.ffn_pre.shape == (config.d_ff, nc)
        assert layer.out.shape == (config.d_token, nc)
    assert trace.logits.shape == (config.vocab_size, n)
    if trace.gate_trace is not None:
        assert trace.gate_trace.avg_emb.shape == (config.d_token,)
        assert trace.gate_trace.gate.shape == (config.n_prompts,)


# ---------------------------------------------------------------------------
# Serialization: magic, length-prefixed config header, tensors in order
# ---------------------------------------------------------------------------


def save_backbone(backbone: Backbone, path: str) -> None:
    header = backbone.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in backbone.param_items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path + ".json", "w", encoding="utf-8") as fh:
        fh.write(backbone.config.to_json())
        fh.write("\n")


def load_backbone(path: str) -> Backbone:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise InputError(f"not a backbone file (bad magic): {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_json(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    shapes = [(name, arr.shape) for name, arr in init_backbone_shapes(config)]
    total = sum(s[1][0] * s[1][1] for s in shapes)
    data = np.frombuffer(blob, dtype="<f8")
    if data.size != total:
        raise InputError(
            f"backbone file truncated: expected {total} values, found {data.size}"
        )
    params = {}
    offset = 0
    for name, shape in shapes:
        count = shape[0] * shape[1]
        params[name] = np.array(data[offset : offset + count].reshape(shape))
        offset += count
    return backbone_from_params(config, params)


def init_backbone_shapes(config: ModelConfig):
    """(name, zero array) pairs in declaration order; used to map the file."""
    for ell in range(config.n_layers):
        for kind in ("wq", "wk", "wv"):
            for h in range(config.n_heads):
                yield f"layer{ell}.{kind}{h}", np.zeros((config.d_head, config.d_token))
        yield f"layer{ell}.wo", np.zeros((config.d_attn_out, config.n_heads * config.d_head))
        yield f"layer{ell}.wff1", np.zeros((config.d_ff, config.d_attn_out))
        yield f"layer{ell}.wff2", np.zeros((config.d_token, config.d_ff))
    yield "embedding", np.zeros((config.d_token, config.vocab_size))
    yield "pos_embedding", np.zeros((config.d_token, config.n_max))
    yield "input_prompts", np.zeros((config.d_token, config.n_input_prompts))
