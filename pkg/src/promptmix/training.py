"""Next-token objective, Adam, and the pretraining / tuning loops.

Only three parameter blocks ever receive updates during mixture training:
the injected expert prompts and the two gating matrices. The backbone and
the first-layer prompts are frozen by construction (their gradients are never
even allocated).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backprop import (
    backward_full,
    backward_input_prompts,
    backward_mop,
    gate_target_backward,
)
from .config import ModelConfig
from .errors import ConfigError, InputError, TrainingDiverged
from .gating import GatingParams, forward_mop, gate
from .linalg import concat_columns, mean_columns
from .model import (
    Backbone,
    backbone_from_params,
    build_extended_mask,
    check_tokens,
    embed_tokens,
    forward_plain,
    forward_prompted,
    init_backbone,
    layer_forward,
)

EVAL_EVERY = 250


@dataclass(frozen=True)
class LossReport:
    """Mean next-token negative log-likelihood in nats, and its exp."""

    nll: float
    perplexity: float
    n_tokens: int

    @classmethod
    def from_nll(cls, nll: float, n_tokens: int) -> "LossReport":
        return cls(nll=nll, perplexity=math.exp(nll), n_tokens=n_tokens)


def loss(logits: np.ndarray, targets) -> LossReport:
    """Mean cross-entropy over predicted token positions."""
    report, _ = loss_and_grad(logits, targets, want_grad=False)
    return report


def loss_and_grad(logits: np.ndarray, targets, want_grad: bool = True):
    targets = np.asarray(targets, dtype=np.int64)
    vocab, n_pos = logits.shape
    if targets.shape != (n_pos,):
        raise InputError(f"need one target per predicted position: {targets.shape} vs {n_pos}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise InputError(f"target id out of range [0, {vocab})")
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    log_probs = shifted - log_z
    cols = np.arange(n_pos)
    nll = float(-log_probs[targets, cols].mean())
    report = LossReport.from_nll(nll, n_pos)
    if not want_grad:
        return report, None
    d_logits = np.exp(log_probs)
    d_logits[targets, cols] -= 1.0
    d_logits /= n_pos
    return report, d_logits


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    max_grad_norm: float | None = None,
) -> None:
    """One in-place Adam update over every block present in ``grads``."""
    if max_grad_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > max_grad_norm:
            scale = max_grad_norm / total
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Trainable state (the only parameters tuning is allowed to touch)
# ---------------------------------------------------------------------------


@dataclass
class TrainableState:
    prompts: np.ndarray  # injected expert prompts, d_token x n_prompts
    gating: GatingParams
    opt: AdamState | None = None
    step: int = 0

    def copy(self) -> "TrainableState":
        return TrainableState(
            prompts=self.prompts.copy(),
            gating=self.gating.copy(),
            opt=self.opt.copy() if self.opt is not None else None,
            step=self.step,
        )


def init_trainable_state(config: ModelConfig, seed: int) -> TrainableState:
    rng = np.random.default_rng(seed)
    std = config.init_std
    prompts = rng.normal(0.0, std, size=(config.d_token, config.n_prompts))
    w1 = rng.normal(0.0, std, size=(config.gate_hidden, config.d_token))
    w2 = rng.normal(0.0, std, size=(config.n_prompts, config.gate_hidden))
    return TrainableState(prompts=prompts, gating=GatingParams(w1=w1, w2=w2))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    step_rows: list = field(default_factory=list)  # (step, split, nll, ppl)
    round_rows: list = field(default_factory=list)  # (round, "id;id;..", ppl)

    def add_step(self, step: int, split: str, report: LossReport) -> None:
        self.step_rows.append((step, split, report.nll, report.perplexity))

    def add_round(self, rnd: int, client_ids, report: LossReport) -> None:
        ids = ";".join(str(c) for c in client_ids)
        self.round_rows.append((rnd, ids, report.perplexity))

    def final_eval_ppl(self) -> float:
        evals = [r for r in self.step_rows if r[1] == "eval"]
        if evals:
            return evals[-1][3]
        if self.round_rows:
            return self.round_rows[-1][2]
        raise InputError("no evaluation rows recorded")


# ---------------------------------------------------------------------------
# Pretraining (backbone, first-layer prompts, gate)
# ---------------------------------------------------------------------------


def _sample_stream(samples, seed: int):
    if not samples:
        raise InputError("empty training sample list")
    rng = np.random.default_rng([seed, 0x5EED])
    while True:
        yield samples[int(rng.integers(len(samples)))]


def pretrain_backbone(
    config: ModelConfig, corpus, steps: int, seed: int, lr: float = 1e-3
) -> Backbone:
    """Train every weight on next-token loss, then freeze the result.

    This stands in for a publicly pretrained checkpoint: the returned model
    has genuine structure on the corpus it will later be tuned on.
    """
    backbone = init_backbone(config, seed)
    if steps == 0:
        return backbone
    params = backbone.to_param_dict(writable=True)
    work = backbone_from_params(config, params, freeze=False)
    opt = AdamState.for_params(params)
    stream = _sample_stream(corpus.train_samples(), seed)
    for step in range(steps):
        sample = next(stream)
        trace = forward_plain(work, sample.tokens)
        report, d_logits = loss_and_grad(trace.logits[:, :-1], sample.tokens[1:])
        if not math.isfinite(report.nll):
            raise TrainingDiverged(step, f"backbone pretraining diverged at step {step}")
        grads = backward_full(work, trace, d_logits)
        adam_step(params, grads, opt, lr)
    return backbone_from_params(config, {k: v.copy() for k, v in params.items()})


def pretrain_input_prompts(
    backbone: Backbone, corpus, steps: int = 20, seed: int = 0, lr: float = 1e-3
) -> np.ndarray:
    """Train the first-layer prompts alone; everything else stays frozen."""
    prompts = np.array(backbone.input_prompts, copy=True)
    if steps == 0:
        return prompts
    params = {"p1": prompts}
    opt = AdamState.for_params(params)
    stream = _sample_stream(corpus.train_samples(), seed)
    for step in range(steps):
        sample = next(stream)
        trace = forward_prompted(backbone, prompts, sample.tokens)
        report, d_logits = loss_and_grad(trace.logits[:, :-1], sample.tokens[1:])
        if not math.isfinite(report.nll):
            raise TrainingDiverged(step, f"prompt pretraining diverged at step {step}")
        grads = {"p1": backward_input_prompts(backbone, trace, d_logits)}
        adam_step(params, grads, opt, lr)
    return prompts


def injection_embedding(backbone: Backbone, first_layer_prompts: np.ndarray, tokens) -> np.ndarray:
    """Mean column embedding entering the injection layer (the gate's input)."""
    cfg = backbone.config
    toks = check_tokens(cfg, tokens)
    k1 = first_layer_prompts.shape[1]
    b = concat_columns(first_layer_prompts, embed_tokens(backbone, toks))
    mask = build_extended_mask(toks.size, k1)
    for ell in range(cfg.inject_layer - 1):
        b = layer_forward(backbone, ell, b, mask, k1).out
    return mean_columns(b)


def gating_target(config: ModelConfig, task_label: int) -> np.ndarray:
    """Uniform mass over the prompt group assigned one-to-one to the task."""
    if not 0 <= task_label < config.n_experts:
        raise InputError(
            f"task label {task_label} outside expert range [0, {config.n_experts})"
        )
    target = np.zeros(config.n_prompts)
    m = config.prompts_per_expert
    target[task_label * m : (task_label + 1) * m] = 1.0 / m
    return target


def pretrain_gating(
    gating: GatingParams,
    labeled_instructions,
    backbone: Backbone,
    first_layer_prompts: np.ndarray,
    steps: int,
    seed: int,
    lr: float = 1e-3,
) -> GatingParams:
    """Supervise the gate toward the one-to-one task/group assignment.

    Only the two gate matrices move; the loss is the cross-entropy between
    the gate output and the assigned group's uniform distribution.
    """
    cfg = backbone.config
    out = gating.copy()
    data = list(labeled_instructions)
    for tokens, label in data:
        if not 0 <= label < cfg.n_experts:
            raise InputError(f"task label {label} outside expert range [0, {cfg.n_experts})")
    if steps == 0:
        return out
    if not data:
        raise InputError("gating pretraining needs at least one labeled instruction")
    params = {"w1": out.w1, "w2": out.w2}
    opt = AdamState.for_params(params)
    rng = np.random.default_rng([seed, 0x6A7E])
    for _ in range(steps):
        tokens, label = data[int(rng.integers(len(data)))]
        avg = injection_embedding(backbone, first_layer_prompts, tokens)
        hidden_pre = out.w1 @ avg
        g = _softmax(out.w2 @ np.maximum(hidden_pre, 0.0))
        gt = _GateCache(avg_emb=avg, hidden_pre=hidden_pre)
        d_w1, d_w2 = gate_target_backward(g, gating_target(cfg, label), out, gt)
        adam_step(params, {"w1": d_w1, "w2": d_w2}, opt, lr)
    return out


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


@dataclass
class _GateCache:
    avg_emb: np.ndarray
    hidden_pre: np.ndarray


# ---------------------------------------------------------------------------
# Centralized tuning
# ---------------------------------------------------------------------------

MODES = ("baseline", "mop")


def _forward_for_mode(backbone, p1, state, tokens, mode):
    if mode == "baseline":
        ones = np.ones(state.prompts.shape[1])
        return forward_mop(backbone, p1, state.prompts, None, tokens, gate_override=ones)
    return forward_mop(backbone, p1, state.prompts, state.gating, tokens)


def train_centralized(
    backbone: Backbone,
    first_layer_prompts: np.ndarray,
    state: TrainableState,
    corpus,
    steps: int,
    lr: float,
    seed: int,
    mode: str = "mop",
    eval_every: int = EVAL_EVERY,
    max_grad_norm: float | None = None,
) -> tuple[TrainableState, RunMetrics]:
    """Single-process tuning loop, batch size 1, seeded sampling.

    ``baseline`` trains the injected prompts with the all-ones gate bypass;
    ``mop`` trains prompts and gate jointly.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = backbone.config
    if cfg.n_prompts < 1:
        raise ConfigError("training requires at least one injected prompt")
    state = state.copy()
    metrics = RunMetrics()
    if steps == 0:
        return state, metrics
    if mode == "baseline":
        params = {"prompts": state.prompts}
    else:
        params = {"prompts": state.prompts, "gate_w1": state.gating.w1, "gate_w2": state.gating.w2}
    opt = AdamState.for_params(params)
    state.opt = opt
    stream = _sample_stream(corpus.train_samples(), seed)
    eval_samples = corpus.test_samples()
    for step in range(steps):
        sample = next(stream)
        trace, _ = _forward_for_mode(backbone, first_layer_prompts, state, sample.tokens, mode)
        report, d_logits = loss_and_grad(trace.logits[:, :-1], sample.tokens[1:])
        if not math.isfinite(report.nll):
            raise TrainingDiverged(step, f"{mode} training diverged at step {step}")
        metrics.add_step(step, "train", report)
        d_prompts, d_w1, d_w2 = backward_mop(backbone, state.gating, trace, d_logits)
        grads = {"prompts": d_prompts}
        if mode == "mop":
            grads["gate_w1"] = d_w1
            grads["gate_w2"] = d_w2
        adam_step(params, grads, opt, lr, max_grad_norm=max_grad_norm)
        state.step += 1
        if eval_samples and ((step + 1) % eval_every == 0 or step + 1 == steps):
            ev, _ = evaluate(backbone, first_layer_prompts, state, eval_samples, mode)
            metrics.add_step(step + 1, "eval", ev)
    return state, metrics


def evaluate(
    backbone: Backbone,
    first_layer_prompts: np.ndarray,
    state: TrainableState,
    eval_set,
    mode: str = "mop",
) -> tuple[LossReport, list]:
    """Aggregate perplexity plus one (task, gate vector) row per sample."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    samples = list(eval_set)
    if not samples:
        raise InputError("evaluation set is empty")
    total_nll = 0.0
    total_tokens = 0
    gate_rows = []
    for sample in samples:
        trace, g = _forward_for_mode(backbone, first_layer_prompts, state, sample.tokens, mode)
        report = loss(trace.logits[:, :-1], sample.tokens[1:])
        total_nll += report.nll * report.n_tokens
        total_tokens += report.n_tokens
        if mode == "mop" and g.size:
            gate_rows.append((sample.task, g))
    return LossReport.from_nll(total_nll / total_tokens, total_tokens), gate_rows


def per_task_gate_means(gate_rows) -> dict:
    """Mean gate vector per task label over logged evaluation rows."""
    if not gate_rows:
        raise InputError("no gate rows to aggregate")
    sums: dict = {}
    counts: dict = {}
    for task, g in gate_rows:
        if task in sums:
            sums[task] = sums[task] + g
            counts[task] += 1
        else:
            sums[task] = g.copy()
            counts[task] = 1
    return {task: sums[task] / counts[task] for task in sorted(sums)}
