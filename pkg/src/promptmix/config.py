"""Architecture and run hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the transformer plus the prompt/expert layout.

    ``n_layers`` decoder layers, ``n_heads`` heads of width ``d_head`` each.
    ``d_token`` is the embedding width, ``d_attn_out`` the attention output
    width (always ``n_heads * d_head``), ``d_ff`` the feed-forward hidden
    width and ``d_gate`` the gating MLP hidden width. ``n_experts`` groups of
    ``prompts_per_expert`` prompts are injected at layer ``inject_layer``
    (1-based); ``n_input_prompts`` frozen prompts ride along from layer 1.
    """

    n_layers: int = 8
    n_heads: int = 4
    d_token: int = 64
    d_head: int = 16
    d_ff: int = 128
    vocab_size: int = 256
    n_max: int = 64
    inject_layer: int = 3
    n_experts: int = 4
    prompts_per_expert: int = 4
    n_input_prompts: int = 4
    d_gate: int = 0  # 0 means the default 4 * d_token
    use_residual: bool = True
    keep_first_layer_prompts: bool = False
    audit_shapes: bool = False
    rms_eps: float = 1e-8
    init_std: float = 0.02

    @property
    def d_attn_out(self) -> int:
        return self.n_heads * self.d_head

    @property
    def n_prompts(self) -> int:
        """Total injected prompt count K = experts x prompts per expert."""
        return self.n_experts * self.prompts_per_expert

    @property
    def gate_hidden(self) -> int:
        return self.d_gate if self.d_gate > 0 else 4 * self.d_token

    def __post_init__(self):
        checks = [
            (self.n_layers >= 1, "n_layers must be >= 1"),
            (self.n_heads >= 1, "n_heads must be >= 1"),
            (self.d_token >= 1, "d_token must be >= 1"),
            (self.d_head >= 1, "d_head must be >= 1"),
            (self.d_ff >= 1, "d_ff must be >= 1"),
            (self.vocab_size >= 2, "vocab_size must be >= 2"),
            (self.n_max >= 2, "n_max must be >= 2"),
            (1 <= self.inject_layer <= self.n_layers,
             f"inject_layer must lie in [1, {self.n_layers}], got {self.inject_layer}"),
            (self.n_experts >= 0, "n_experts must be >= 0"),
            (self.prompts_per_expert >= 0, "prompts_per_expert must be >= 0"),
            (self.n_input_prompts >= 0, "n_input_prompts must be >= 0"),
            (self.d_gate >= 0, "d_gate must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.use_residual and self.d_token != self.d_attn_out:
            raise ConfigError(
                "residual mode needs d_token == n_heads * d_head "
                f"({self.d_token} != {self.n_heads}*{self.d_head})"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed model config JSON: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config field: {sorted(unknown)[0]}")
        return cls(**raw)

    def with_(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)
