"""
Low-rank feature adaptation modules for the backbone's attention blocks
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, add, matmul, mul, transpose

if TYPE_CHECKING:
    from .vit import BackboneState

logger = logging.getLogger(__name__)

FULL_SCALE_RANK = 64

# Injection site -> parameter path inside a transformer block
SITE_PATHS = {
    "query": "attn.query",
    "key": "attn.key",
    "value": "attn.value",
    "output_projection": "attn.output_projection",
    "mlp_fc1": "mlp.fc1",
    "mlp_fc2": "mlp.fc2",
    "norm1": "norm1",
    "norm2": "norm2",
}
LINEAR_SITES = ("query", "key", "value", "output_projection", "mlp_fc1", "mlp_fc2")
NORM_SITES = ("norm1", "norm2")

POSITION_PRESETS = {
    "qv_proj": ("query", "value", "output_projection"),
    "qkv_proj": ("query", "key", "value", "output_projection"),
    "all_norms": NORM_SITES,
    "all_linears": LINEAR_SITES,
    "none": (),
}

# Site group names accepted in a plan descriptor
SITE_GROUPS = {"all_norms": NORM_SITES, "all_linears": LINEAR_SITES}


@dataclass
class LoraLayer:
    A: Tensor
    B: Tensor
    rank: int
    scale: float

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.rank or self.B.shape[1] != self.rank:
            raise ConfigurationError(
                f"LoRA factors A{self.A.shape} / B{self.B.shape} do not agree with rank {self.rank}"
            )

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def census(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def tensors(self) -> dict:
        return {"A": self.A, "B": self.B}


@dataclass
class NormDelta:
    """Trainable additive deltas on a layer norm's affine parameters"""

    gamma: Tensor
    beta: Tensor

    @property
    def census(self) -> int:
        return self.gamma.size + self.beta.size

    def tensors(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


@dataclass(frozen=True)
class InjectionPlan:
    """Per-block injection sites"""

    sites: tuple
    positions: str = "custom"

    @classmethod
    def from_preset(cls, positions: str, num_blocks: int) -> "InjectionPlan":
        if positions not in POSITION_PRESETS:
            raise ConfigurationError(
                f"Unknown LoRA positions '{positions}' (choose from {sorted(POSITION_PRESETS)})"
            )
        block_sites = frozenset(POSITION_PRESETS[positions])
        return cls(sites=tuple(block_sites for _ in range(num_blocks)), positions=positions)

    @classmethod
    def from_sites(cls, per_block: list) -> "InjectionPlan":
        expanded = []
        for names in per_block:
            sites = set()
            for name in names:
                if name in SITE_GROUPS:
                    sites.update(SITE_GROUPS[name])
                elif name in SITE_PATHS:
                    sites.add(name)
                else:
                    raise ConfigurationError(f"Unknown injection site '{name}'")
            expanded.append(frozenset(sites))
        return cls(sites=tuple(expanded))

    def validate(self, num_blocks: int):
        if len(self.sites) != num_blocks:
            raise ConfigurationError(f"Plan covers {len(self.sites)} blocks, backbone has {num_blocks}")
        for block_sites in self.sites:
            unknown = set(block_sites) - set(SITE_PATHS)
            if unknown:
                raise ConfigurationError(f"Plan names sites that do not exist in a block: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"positions": self.positions, "sites": [sorted(s) for s in self.sites]}

    @classmethod
    def from_dict(cls, data: dict) -> "InjectionPlan":
        plan = cls.from_sites(data["sites"])
        return cls(sites=plan.sites, positions=data.get("positions", "custom"))


def lora_forward(x: Tensor, weight: Tensor, lora: Optional[LoraLayer], bias: Optional[Tensor] = None) -> Tensor:
    """W·x + scale·B·(A·x) over the last axis of ``x``"""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ConfigurationError(f"Input width {x.shape[-1]} does not match projection {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    if lora is None:
        return out
    if lora.d_in != d_in or lora.d_out != d_out:
        raise ConfigurationError(
            f"LoRA factors A{lora.A.shape} / B{lora.B.shape} do not fit projection {weight.shape}"
        )
    delta = matmul(matmul(x, transpose(lora.A)), transpose(lora.B))
    return add(out, mul(delta, lora.scale))


def inject(state: "BackboneState", plan: InjectionPlan, rank: int, rng: np.random.Generator) -> "BackboneState":
    """Wrap every planned site of ``state`` with a fresh adapter"""
    from .vit import trunc_normal

    config = state.config
    plan.validate(config.num_blocks)
    if rank < 0:
        raise ConfigurationError(f"LoRA rank must be >= 0, got {rank}")
    state.plan = plan
    if rank == 0:
        return state

    added = {}
    for block, block_sites in enumerate(plan.sites):
        for site in sorted(block_sites):
            key = (block, site)
            if key in state.adapters or key in added:
                raise ConfigurationError(f"Site '{site}' of block {block} already carries an adapter")
            if site in NORM_SITES:
                width = config.embed_dim
                added[key] = NormDelta(
                    gamma=Tensor(np.zeros(width), name=f"adapters.blocks.{block}.{site}.gamma"),
                    beta=Tensor(np.zeros(width), name=f"adapters.blocks.{block}.{site}.beta"),
                )
                continue
            d_out, d_in = state.block_param(block, f"{SITE_PATHS[site]}.weight").shape
            added[key] = LoraLayer(
                A=Tensor(trunc_normal(rng, (rank, d_in)), name=f"adapters.blocks.{block}.{site}.A"),
                B=Tensor(np.zeros((d_out, rank)), name=f"adapters.blocks.{block}.{site}.B"),
                rank=rank,
                scale=1.0 / rank,
            )
    state.adapters.update(added)
    logger.info("Injected %d adapters (%s, rank %d, %d parameters)", len(added), plan.positions, rank, adapter_census(state))
    return state


def adapter_parameters(state: "BackboneState") -> dict:
    named = {}
    for (block, site), adapter in sorted(state.adapters.items()):
        for label, tensor in adapter.tensors().items():
            named[f"adapters.blocks.{block}.{site}.{label}"] = tensor
    return named


def adapter_census(state: "BackboneState") -> int:
    return sum(adapter.census for adapter in state.adapters.values())
