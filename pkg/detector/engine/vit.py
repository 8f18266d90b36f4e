"""
Small vision transformer backbone with adapter injection points
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .lora import SITE_PATHS, LoraLayer, NormDelta, lora_forward
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    gelu,
    layernorm,
    matmul,
    mul,
    reshape,
    softmax_rows,
    sub,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    adapter_rank: int = 4
    final_norm: bool = True

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_blocks", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"backbone.{name} must be positive, got {getattr(self, name)}")
        if self.adapter_rank < 0:
            raise ConfigurationError(f"backbone.adapter_rank must be >= 0, got {self.adapter_rank}")
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"backbone.mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        return cls(**data)


# ViT-L/16 at 768x768 with rank-64 adapters
FULL_SCALE = BackboneConfig(
    image_size=768, patch_size=16, embed_dim=1024, num_blocks=24, num_heads=16, mlp_ratio=4.0, adapter_rank=64
)

PRESETS = {
    "tiny": dict(image_size=32, patch_size=4, embed_dim=16, num_blocks=2, num_heads=2, mlp_ratio=2.0),
    "small": dict(image_size=64, patch_size=8, embed_dim=32, num_blocks=2, num_heads=2, mlp_ratio=2.0),
    "base": dict(image_size=64, patch_size=8, embed_dim=64, num_blocks=4, num_heads=4, mlp_ratio=2.0),
    "large": dict(image_size=64, patch_size=8, embed_dim=96, num_blocks=6, num_heads=6, mlp_ratio=2.0),
}


def preset_config(name: str, **overrides) -> BackboneConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"Unknown backbone preset '{name}' (choose from {sorted(PRESETS)})")
    return BackboneConfig(**{**PRESETS[name], **overrides})


@dataclass
class BackboneState:
    config: BackboneConfig
    params: dict
    adapters: dict = field(default_factory=dict)
    plan: Optional[object] = None

    def block_param(self, block: int, path: str) -> Tensor:
        return self.params[f"blocks.{block}.{path}"]


@dataclass
class BackboneOutput:
    patch_tokens: Tensor
    cls_token: Tensor
    grid: tuple


def float32_exact(array: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept in float64 storage"""
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = INIT_STD) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return float32_exact(values * std)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneState:
    d, m, p = config.embed_dim, config.mlp_dim, config.patch_size
    params = {
        "patch_embed.weight": trunc_normal(rng, (d, 3, p, p)),
        "patch_embed.bias": np.zeros(d),
        "pos_embed": trunc_normal(rng, (config.num_patches + 1, d)),
        "cls_token": trunc_normal(rng, (d,)),
    }
    for b in range(config.num_blocks):
        prefix = f"blocks.{b}"
        for norm in ("norm1", "norm2"):
            params[f"{prefix}.{norm}.gamma"] = np.ones(d)
            params[f"{prefix}.{norm}.beta"] = np.zeros(d)
        for proj in ("query", "key", "value", "output_projection"):
            params[f"{prefix}.attn.{proj}.weight"] = trunc_normal(rng, (d, d))
            params[f"{prefix}.attn.{proj}.bias"] = np.zeros(d)
        params[f"{prefix}.mlp.fc1.weight"] = trunc_normal(rng, (m, d))
        params[f"{prefix}.mlp.fc1.bias"] = np.zeros(m)
        params[f"{prefix}.mlp.fc2.weight"] = trunc_normal(rng, (d, m))
        params[f"{prefix}.mlp.fc2.bias"] = np.zeros(d)
    params["norm.gamma"] = np.ones(d)
    params["norm.beta"] = np.zeros(d)

    tensors = {name: Tensor(value, name=f"backbone.{name}") for name, value in params.items()}
    logger.debug("Initialised backbone with %d tensors", len(tensors))
    return BackboneState(config=config, params=tensors)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def patch_vectors(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten a [3×H×W] image into row-major [N × 3·p·p] patch vectors"""
    channels, height, width = image.shape
    gh, gw = height // patch_size, width // patch_size
    blocks = image.reshape(channels, gh, patch_size, gw, patch_size)
    return blocks.transpose(1, 3, 0, 2, 4).reshape(gh * gw, channels * patch_size * patch_size)


def patchify(image: Tensor, state: BackboneState) -> Tensor:
    config = state.config
    expected = (3, config.image_size, config.image_size)
    if image.shape != expected:
        raise DimensionError(f"Expected image of shape {expected}, got {image.shape}")
    p = state.params
    embedded = conv2d(image, p["patch_embed.weight"], p["patch_embed.bias"], padding=0, stride=config.patch_size)
    tokens = transpose(reshape(embedded, (config.embed_dim, config.num_patches)))
    return add(tokens, p["pos_embed"][1:])


def _project(x: Tensor, state: BackboneState, block: int, site: str, adapters_enabled: bool) -> Tensor:
    path = SITE_PATHS[site]
    weight = state.block_param(block, f"{path}.weight")
    bias = state.block_param(block, f"{path}.bias")
    adapter = state.adapters.get((block, site)) if adapters_enabled else None
    if isinstance(adapter, LoraLayer):
        return lora_forward(x, weight, adapter, bias)
    return linear(x, weight, bias)


def _norm(x: Tensor, state: BackboneState, block: int, site: str, adapters_enabled: bool) -> Tensor:
    gamma = state.block_param(block, f"{site}.gamma")
    beta = state.block_param(block, f"{site}.beta")
    delta = state.adapters.get((block, site)) if adapters_enabled else None
    if isinstance(delta, NormDelta):
        gamma, beta = add(gamma, delta.gamma), add(beta, delta.beta)
    return layernorm(x, gamma, beta)


def attention(x: Tensor, state: BackboneState, block: int, adapters_enabled: bool) -> Tensor:
    config = state.config
    n, heads, head_dim = x.shape[0], config.num_heads, config.head_dim

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (n, heads, head_dim)), (1, 0, 2))

    q = split_heads(_project(x, state, block, "query", adapters_enabled))
    k = split_heads(_project(x, state, block, "key", adapters_enabled))
    v = split_heads(_project(x, state, block, "value", adapters_enabled))

    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
    context = matmul(softmax_rows(scores), v)
    merged = reshape(transpose(context, (1, 0, 2)), (n, config.embed_dim))
    return _project(merged, state, block, "output_projection", adapters_enabled)


def transformer_block(x: Tensor, state: BackboneState, block: int, adapters_enabled: bool) -> Tensor:
    h = add(x, attention(_norm(x, state, block, "norm1", adapters_enabled), state, block, adapters_enabled))
    hidden = gelu(_project(_norm(h, state, block, "norm2", adapters_enabled), state, block, "mlp_fc1", adapters_enabled))
    return add(h, _project(hidden, state, block, "mlp_fc2", adapters_enabled))


def forward(image: Tensor, state: BackboneState, adapters_enabled: bool = True) -> BackboneOutput:
    """Run the backbone; the class token sits at index 0 of the sequence"""
    config = state.config
    p = state.params
    patches = patchify(image, state)
    cls = reshape(add(p["cls_token"], p["pos_embed"][0]), (1, config.embed_dim))
    x = concat([cls, patches], axis=0)
    for block in range(config.num_blocks):
        x = transformer_block(x, state, block, adapters_enabled)
    if config.final_norm:
        x = layernorm(x, p["norm.gamma"], p["norm.beta"])
    return BackboneOutput(patch_tokens=x[1:], cls_token=x[0], grid=(config.grid, config.grid))


def masked_patch_loss(
    image: np.ndarray,
    state: BackboneState,
    head_weight: Tensor,
    head_bias: Tensor,
    masked: np.ndarray,
) -> Tensor:
    """Reconstruction error of the masked patches of a [-1, 1] image.

    ``masked`` is a boolean vector over patches; those patches are zeroed
    before the forward pass and predicted back by a linear pixel head.
    """
    config = state.config
    p = config.patch_size
    keep = np.repeat(np.repeat((~masked).reshape(config.grid, config.grid), p, axis=0), p, axis=1)
    corrupted = Tensor(image * keep[None, :, :])
    out = forward(corrupted, state, adapters_enabled=False)
    predicted = linear(out.patch_tokens, head_weight, head_bias)
    target = patch_vectors(image, p)
    error = sub(predicted, target)
    weights = masked.astype(np.float64)[:, None] / max(1, int(masked.sum()) * config.patch_dim)
    return mul(mul(error, error), weights).sum()
