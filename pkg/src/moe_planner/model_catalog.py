"""MoE model geometry: architecture constants and derived size quantities.

A ``ModelSpec`` captures everything the planner needs to know about a model:
per-layer weight footprints, KV-state bytes, hidden-state bytes, and FLOP
coefficients for the attention and expert modules.  All downstream modules
(memory model, DAG builder, simulator, traffic model) consume these derived
quantities instead of touching architecture details directly.

Specs are plain JSON documents; presets ship as embedded documents built
from public architecture descriptions (dimension constants are external
inputs, not measured ground truth).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any, Mapping


class ModelSpecError(ValueError):
    """Base class for model-spec validation failures."""


class MissingField(ModelSpecError):
    def __init__(self, field: str):
        super().__init__(f"model spec is missing required field {field!r}")
        self.field = field


class NonPositiveValue(ModelSpecError):
    def __init__(self, field: str, value: Any):
        super().__init__(f"model spec field {field!r} must be positive, got {value!r}")
        self.field = field
        self.value = value


class TopKExceedsExperts(ModelSpecError):
    def __init__(self, top_k: int, experts_per_layer: int):
        super().__init__(
            f"top_k={top_k} exceeds experts_per_layer={experts_per_layer}"
        )
        self.field = "top_k"


class UnknownPreset(KeyError):
    def __init__(self, name: str, available: tuple[str, ...]):
        super().__init__(
            f"unknown preset {name!r}; available: {', '.join(available)}"
        )
        self.name = name


@dataclass(frozen=True)
class ModelSpec:
    """Static size and FLOP description of one MoE model.

    Byte fields are per layer unless noted.  Attention FLOPs are affine in
    context length: ``attn_flops_base + attn_flops_per_context * context``
    per query token, covering projections plus the attention mechanism.

    Activation coefficients size the transient per-token working set of a
    module kernel.  ``attn_activation_bytes_per_ctx_token`` covers kernels
    that materialize per-context-position state (e.g. latent-KV
    up-projection); it is 0 for models whose attention working set does not
    grow with context.
    """

    name: str
    num_layers: int
    experts_per_layer: int
    top_k: int
    shared_expert_bytes: int
    attention_weights_bytes: int
    expert_bytes: int
    kv_bytes_per_token_layer: int
    hidden_bytes_per_token: int
    attn_flops_base: float
    attn_flops_per_context: float
    expert_flops_per_token: float
    attn_activation_bytes_per_token: float | None = None
    attn_activation_bytes_per_ctx_token: float = 0.0
    expert_activation_bytes_per_token: float | None = None

    def __post_init__(self) -> None:
        positive = [
            "num_layers",
            "experts_per_layer",
            "top_k",
            "attention_weights_bytes",
            "expert_bytes",
            "kv_bytes_per_token_layer",
            "hidden_bytes_per_token",
            "attn_flops_base",
            "attn_flops_per_context",
            "expert_flops_per_token",
        ]
        for field in positive:
            if getattr(self, field) <= 0:
                raise NonPositiveValue(field, getattr(self, field))
        non_negative = [
            "shared_expert_bytes",
            "attn_activation_bytes_per_ctx_token",
        ]
        for field in non_negative:
            if getattr(self, field) < 0:
                raise NonPositiveValue(field, getattr(self, field))
        if self.top_k > self.experts_per_layer:
            raise TopKExceedsExperts(self.top_k, self.experts_per_layer)

    # -- derived sizes -----------------------------------------------------

    @property
    def dense_bytes_per_layer(self) -> int:
        """Weights every token traverses in one layer (attention + shared expert)."""
        return self.attention_weights_bytes + self.shared_expert_bytes

    @property
    def routed_expert_bytes_total(self) -> int:
        return self.num_layers * self.experts_per_layer * self.expert_bytes

    @property
    def model_bytes(self) -> int:
        """Total model size: dense plus routed expert weights over all layers."""
        return self.num_layers * self.dense_bytes_per_layer + self.routed_expert_bytes_total

    def attn_flops_per_token(self, context_len: int) -> float:
        return self.attn_flops_base + self.attn_flops_per_context * context_len

    @property
    def attn_activation_per_token(self) -> float:
        if self.attn_activation_bytes_per_token is not None:
            return self.attn_activation_bytes_per_token
        return 2.0 * self.hidden_bytes_per_token

    @property
    def expert_activation_per_token(self) -> float:
        if self.expert_activation_bytes_per_token is not None:
            return self.expert_activation_bytes_per_token
        # 2x the expert intermediate width; width recovered from the weight
        # footprint of the three FFN matrices.
        intermediate_bytes = 2.0 * self.expert_bytes / (3.0 * self.hidden_bytes_per_token)
        return 2.0 * intermediate_bytes

    def to_document(self) -> dict[str, Any]:
        """Serialize to the JSON document form accepted by ``load_model_spec``."""
        doc = dataclasses.asdict(self)
        return {k: v for k, v in doc.items() if v is not None}


REQUIRED_FIELDS = (
    "name",
    "num_layers",
    "experts_per_layer",
    "top_k",
    "shared_expert_bytes",
    "attention_weights_bytes",
    "expert_bytes",
    "kv_bytes_per_token_layer",
    "hidden_bytes_per_token",
    "attn_flops_base",
    "attn_flops_per_context",
    "expert_flops_per_token",
)

OPTIONAL_FIELDS = (
    "attn_activation_bytes_per_token",
    "attn_activation_bytes_per_ctx_token",
    "expert_activation_bytes_per_token",
)


def load_model_spec(document: Mapping[str, Any]) -> ModelSpec:
    """Validate a spec document and return the ModelSpec.

    Raises MissingField, NonPositiveValue, or TopKExceedsExperts naming the
    offending field.
    """
    kwargs: dict[str, Any] = {}
    for field in REQUIRED_FIELDS:
        if field not in document:
            raise MissingField(field)
        kwargs[field] = document[field]
    for field in OPTIONAL_FIELDS:
        if field in document:
            kwargs[field] = document[field]
    return ModelSpec(**kwargs)


def load_model_spec_file(path: str) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as f:
        return load_model_spec(json.load(f))


# ---------------------------------------------------------------------------
# Presets.  Dimension constants come from public architecture descriptions
# and are documented inline; 2 bytes per element throughout.
# ---------------------------------------------------------------------------

_BYTES = 2  # fixed element width; quantized formats are out of scope


def _gqa_attention_bytes(hidden: int, q_heads: int, kv_heads: int, head_dim: int) -> int:
    # Wq + Wk + Wv + Wo for grouped-query attention.
    q_dim = q_heads * head_dim
    kv_dim = kv_heads * head_dim
    params = hidden * q_dim + 2 * hidden * kv_dim + q_dim * hidden
    return params * _BYTES


def _mixtral_like(
    name: str,
    layers: int,
    hidden: int,
    ffn: int,
    q_heads: int,
    kv_heads: int,
    head_dim: int,
) -> dict[str, Any]:
    attn_bytes = _gqa_attention_bytes(hidden, q_heads, kv_heads, head_dim)
    return {
        "name": name,
        "num_layers": layers,
        "experts_per_layer": 8,
        "top_k": 2,
        "shared_expert_bytes": 0,
        "attention_weights_bytes": attn_bytes,
        # three FFN matrices (gate, up, down) per expert
        "expert_bytes": 3 * hidden * ffn * _BYTES,
        # K and V, kv_heads x head_dim each
        "kv_bytes_per_token_layer": 2 * kv_heads * head_dim * _BYTES,
        "hidden_bytes_per_token": hidden * _BYTES,
        # 2 FLOPs per attention weight parameter per token
        "attn_flops_base": float(2 * attn_bytes // _BYTES),
        # QK^T and AV: 2 * 2 * q_heads * head_dim per context position
        "attn_flops_per_context": float(4 * q_heads * head_dim),
        "expert_flops_per_token": float(2 * 3 * hidden * ffn),
    }


def _deepseek_v2_like() -> dict[str, Any]:
    """DeepSeek-V2-236B-shaped preset with multi-head latent attention.

    Constants: 60 layers, hidden 5120, 160 routed experts at intermediate
    width 1536 with top-6 routing, 2 shared experts, 128 heads, latent KV of
    512 + 64 rope dims per token.  The latent cache is up-projected to full
    per-head K/V at attention time; the up-projected working set per context
    token is 128 * (192 + 128) * 2 B = 81 920 B, a 71x expansion of the
    1 152 B latent.  The activation coefficient below charges that working
    set at 6x the bf16 minimum (fp32 working copies plus double-buffered
    kernel workspace), which is what makes unified-batch execution
    memory-capped on a 24 GB GPU.  The up-projection GEMMs dominate the
    mechanism FLOPs.
    """
    hidden = 5120
    layers = 60
    heads = 128
    q_lora, kv_lora = 1536, 512
    qk_nope, qk_rope, v_dim = 128, 64, 128
    moe_inter = 1536
    # MLA projection parameters: down/up for Q, down for KV, up for K and V,
    # output projection.
    attn_params = (
        hidden * q_lora
        + q_lora * heads * (qk_nope + qk_rope)
        + hidden * (kv_lora + qk_rope)
        + kv_lora * heads * qk_nope
        + kv_lora * heads * v_dim
        + heads * v_dim * hidden
    )
    latent_bytes = (kv_lora + qk_rope) * _BYTES
    up_projected_bytes = heads * ((qk_nope + qk_rope) + v_dim) * _BYTES
    # per context position: up-project K and V from the latent, then QK^T / AV
    mech_flops_per_ctx = (
        2 * kv_lora * heads * qk_nope
        + 2 * kv_lora * heads * v_dim
        + 2 * heads * (qk_nope + qk_rope)
        + 2 * heads * v_dim
    )
    return {
        "name": "deepseek-v2-like",
        "num_layers": layers,
        "experts_per_layer": 160,
        "top_k": 6,
        "shared_expert_bytes": 2 * 3 * hidden * moe_inter * _BYTES,
        "attention_weights_bytes": attn_params * _BYTES,
        "expert_bytes": 3 * hidden * moe_inter * _BYTES,
        "kv_bytes_per_token_layer": latent_bytes,
        "hidden_bytes_per_token": hidden * _BYTES,
        "attn_flops_base": float(2 * attn_params),
        "attn_flops_per_context": float(mech_flops_per_ctx),
        "expert_flops_per_token": float(2 * 3 * hidden * moe_inter),
        "attn_activation_bytes_per_ctx_token": float(6 * up_projected_bytes),
    }


def _tiny_test() -> dict[str, Any]:
    # 2-layer, 4-expert synthetic model for unit tests; sizes chosen so
    # fixtures stay in the kilobyte-to-megabyte range.
    return {
        "name": "tiny-test",
        "num_layers": 2,
        "experts_per_layer": 4,
        "top_k": 2,
        "shared_expert_bytes": 0,
        "attention_weights_bytes": 2_000_000,
        "expert_bytes": 1_000_000,
        "kv_bytes_per_token_layer": 256,
        "hidden_bytes_per_token": 512,
        "attn_flops_base": 2.0e6,
        "attn_flops_per_context": 1024.0,
        "expert_flops_per_token": 1.0e6,
    }


PRESET_DOCUMENTS: dict[str, dict[str, Any]] = {
    # Mixtral-8x7B: 32 layers, hidden 4096, FFN 14336, 32 Q / 8 KV heads.
    "mixtral-8x7b": _mixtral_like("mixtral-8x7b", 32, 4096, 14336, 32, 8, 128),
    # Mixtral-8x22B: 56 layers, hidden 6144, FFN 16384, 48 Q / 8 KV heads.
    "mixtral-8x22b": _mixtral_like("mixtral-8x22b", 56, 6144, 16384, 48, 8, 128),
    "deepseek-v2-like": _deepseek_v2_like(),
    "tiny-test": _tiny_test(),
}


def preset(name: str) -> ModelSpec:
    """Return a built-in ModelSpec by name.

    Available: mixtral-8x7b, mixtral-8x22b, deepseek-v2-like, tiny-test.
    """
    try:
        document = PRESET_DOCUMENTS[name]
    except KeyError:
        raise UnknownPreset(name, tuple(sorted(PRESET_DOCUMENTS))) from None
    return load_model_spec(document)
