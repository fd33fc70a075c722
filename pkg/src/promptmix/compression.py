"""Compression proxies: magnitude pruning (unstructured and N:M) and int8.

These deliberately stand in for production pruning/quantization systems:
pruning is magnitude-based per tensor and quantization is a symmetric
per-tensor affine quantize-dequantize that keeps float64 storage. Absolute
quality numbers therefore differ from what heavier methods would give; the
package only relies on the induced capacity loss being real.

Embedding, position and prompt tensors are exempt by default (zeroing an
embedding row deletes a token, which is not "compression" in any useful
sense); the scope can be narrowed to any subset of the six weight families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import Backbone, backbone_from_params

WEIGHT_FAMILIES = ("wq", "wk", "wv", "wo", "wff1", "wff2")


def _family(param_name: str) -> str | None:
    if not param_name.startswith("layer"):
        return None
    token = param_name.split(".", 1)[1]
    if token[:2] in ("wq", "wk", "wv"):
        return token[:2]
    return token  # wo, wff1, wff2


@dataclass(frozen=True)
class CompressionSpec:
    kind: str  # none | unstructured | structured | int8 | composite
    ratio: float = 0.0
    n: int = 0
    m: int = 0
    specs: tuple = ()
    scope: tuple = WEIGHT_FAMILIES

    def __post_init__(self):
        if self.kind not in ("none", "unstructured", "structured", "int8", "composite"):
            raise ConfigError(f"unknown compression kind {self.kind!r}")
        if self.kind == "unstructured" and not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"pruning ratio must lie in [0, 1), got {self.ratio}")
        if self.kind == "structured" and not 0 < self.n < self.m:
            raise ConfigError(f"structured pruning needs 0 < n < m, got {self.n}:{self.m}")
        unknown = set(self.scope) - set(WEIGHT_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown weight family in scope: {sorted(unknown)[0]}")

    @classmethod
    def from_dict(cls, raw: dict) -> "CompressionSpec":
        known = {"kind", "ratio", "n", "m", "specs", "scope"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown compression field: {sorted(unknown)[0]}")
        kind = raw.get("kind", "none")
        specs = tuple(cls.from_dict(s) for s in raw.get("specs", ()))
        scope = tuple(raw.get("scope", WEIGHT_FAMILIES))
        return cls(
            kind=kind,
            ratio=float(raw.get("ratio", 0.0)),
            n=int(raw.get("n", 0)),
            m=int(raw.get("m", 0)),
            specs=specs,
            scope=scope,
        )

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "unstructured":
            out["ratio"] = self.ratio
        if self.kind == "structured":
            out["n"] = self.n
            out["m"] = self.m
        if self.kind == "composite":
            out["specs"] = [s.to_dict() for s in self.specs]
        if tuple(self.scope) != WEIGHT_FAMILIES:
            out["scope"] = list(self.scope)
        return out


def _map_weights(backbone: Backbone, scope, fn) -> Backbone:
    params = {}
    for name, arr in backbone.param_items():
        fam = _family(name)
        if fam is not None and fam in scope:
            params[name] = fn(np.array(arr, copy=True))
        else:
            params[name] = arr  # exempt tensors are shared (they are immutable)
    return backbone_from_params(backbone.config, params)


def _prune_tensor_unstructured(arr: np.ndarray, ratio: float) -> np.ndarray:
    k = int(round(ratio * arr.size))
    if k == 0:
        return arr
    flat = arr.reshape(-1)
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0.0
    return arr


def _prune_row_block(block: np.ndarray, keep: int) -> None:
    order = np.argsort(np.abs(block), kind="stable")
    block[order[: block.size - keep]] = 0.0


def _prune_tensor_structured(arr: np.ndarray, n: int, m: int) -> np.ndarray:
    rows, cols = arr.shape
    full = (cols // m) * m
    if full:
        blocks = arr[:, :full].reshape(rows, -1, m)
        order = np.argsort(np.abs(blocks), axis=2, kind="stable")
        kill = np.zeros_like(blocks, dtype=bool)
        np.put_along_axis(kill, order[:, :, :n], True, axis=2)
        blocks[kill] = 0.0
    r = cols - full
    if r:
        # Tail rule: a short block of length r keeps ceil(r*(m-n)/m) largest.
        keep = math.ceil(r * (m - n) / m)
        for i in range(rows):
            _prune_row_block(arr[i, full:], keep)
    return arr


def _quantize_tensor_int8(arr: np.ndarray) -> np.ndarray:
    amax = float(np.abs(arr).max())
    if amax == 0.0:
        return arr
    scale = amax / 127.0
    # Truncate the scale's significand to 45 bits so every q*scale product is
    # exact in float64; re-applying the op is then a bit-exact fixed point.
    mant, expo = math.frexp(scale)
    scale = math.ldexp(math.floor(mant * 2**45) / 2**45, expo)
    q = np.clip(np.rint(arr / scale), -127, 127)
    return q * scale


def prune_unstructured(backbone: Backbone, ratio: float, scope=WEIGHT_FAMILIES) -> Backbone:
    """Zero the smallest-magnitude ``ratio`` fraction of each scoped tensor."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"pruning ratio must lie in [0, 1), got {ratio}")
    if ratio == 0.0:
        return backbone
    return _map_weights(backbone, scope, lambda a: _prune_tensor_unstructured(a, ratio))


def prune_structured(backbone: Backbone, n: int, m: int, scope=WEIGHT_FAMILIES) -> Backbone:
    """Zero the ``n`` smallest-|w| entries in every length-``m`` row block.

    Ties go to the lowest index first; rows not divisible by ``m`` follow the
    proportional tail rule.
    """
    if not 0 < n < m:
        raise ConfigError(f"structured pruning needs 0 < n < m, got {n}:{m}")
    return _map_weights(backbone, scope, lambda a: _prune_tensor_structured(a, n, m))


def quantize_int8(backbone: Backbone, scope=WEIGHT_FAMILIES) -> Backbone:
    """Symmetric per-tensor quantize-dequantize with scale max|w|/127."""
    return _map_weights(backbone, scope, _quantize_tensor_int8)


def compress(backbone: Backbone, spec: CompressionSpec) -> Backbone:
    """Apply a compression spec (composite members in listed order)."""
    if spec.kind == "none":
        return backbone
    if spec.kind == "unstructured":
        return prune_unstructured(backbone, spec.ratio, spec.scope)
    if spec.kind == "structured":
        return prune_structured(backbone, spec.n, spec.m, spec.scope)
    if spec.kind == "int8":
        return quantize_int8(backbone, spec.scope)
    out = backbone
    for member in spec.specs:
        out = compress(out, member)
    return out


def sparsity(backbone: Backbone, scope=WEIGHT_FAMILIES) -> float:
    """Fraction of exactly-zero entries across the scoped weight tensors."""
    zeros = 0
    total = 0
    for name, arr in backbone.param_items():
        fam = _family(name)
        if fam is not None and fam in scope:
            zeros += int((arr == 0.0).sum())
            total += arr.size
    return zeros / total if total else 0.0
