"""
Complete detector: backbone, adapters, decoder and score head
"""
from dataclasses import dataclass

import numpy as np

from . import heads, lora, vit
from .errors import ConfigurationError

BACKBONE_MODES = ("frozen", "warmup", "scratch")


@dataclass
class ModelState:
    backbone: vit.BackboneState
    decoder: heads.DecoderState
    score_head: heads.ScoreHeadState
    backbone_mode: str = "frozen"

    @property
    def config(self) -> vit.BackboneConfig:
        return self.backbone.config

    @property
    def plan(self) -> lora.InjectionPlan:
        return self.backbone.plan

    def backbone_parameters(self) -> dict:
        return {f"backbone.{name}": tensor for name, tensor in self.backbone.params.items()}

    def decoder_parameters(self) -> dict:
        return {f"decoder.{name}": tensor for name, tensor in self.decoder.params.items()}

    def score_head_parameters(self) -> dict:
        return {f"score_head.{name}": tensor for name, tensor in self.score_head.params.items()}

    def named_parameters(self) -> dict:
        named = {
            **self.backbone_parameters(),
            **lora.adapter_parameters(self.backbone),
            **self.decoder_parameters(),
            **self.score_head_parameters(),
        }
        return dict(sorted(named.items()))

    def trainable_parameters(self) -> dict:
        named = {
            **lora.adapter_parameters(self.backbone),
            **self.decoder_parameters(),
            **self.score_head_parameters(),
        }
        if self.backbone_mode == "scratch":
            named.update(self.backbone_parameters())
        return dict(sorted(named.items()))

    def apply_trainability(self):
        """Set requires_grad so only the trainable set enters the tape"""
        trainable = set(self.trainable_parameters())
        for name, tensor in self.named_parameters().items():
            tensor.requires_grad = name in trainable

    def freeze(self):
        for tensor in self.named_parameters().values():
            tensor.requires_grad = False

    def census(self) -> dict:
        def count(named):
            return int(sum(t.size for t in named.values()))

        backbone = count(self.backbone_parameters())
        adapters = lora.adapter_census(self.backbone)
        decoder = count(self.decoder_parameters())
        score_head = count(self.score_head_parameters())
        return {
            "backbone": backbone,
            "adapters": adapters,
            "decoder": decoder,
            "score_head": score_head,
            "trainable": count(self.trainable_parameters()),
            "total": backbone + adapters + decoder + score_head,
        }


def build_model(
    config: vit.BackboneConfig,
    positions: str,
    rng: np.random.Generator,
    decoder_groups: int = 4,
    backbone_mode: str = "frozen",
) -> ModelState:
    if backbone_mode not in BACKBONE_MODES:
        raise ConfigurationError(f"Unknown backbone mode '{backbone_mode}' (choose from {BACKBONE_MODES})")
    backbone = vit.init_backbone(config, rng)
    plan = lora.InjectionPlan.from_preset(positions, config.num_blocks)
    lora.inject(backbone, plan, config.adapter_rank, rng)
    model = ModelState(
        backbone=backbone,
        decoder=heads.init_decoder(config.embed_dim, decoder_groups, rng),
        score_head=heads.init_score_head(config.embed_dim, rng),
        backbone_mode=backbone_mode,
    )
    model.apply_trainability()
    return model
