"""
Anomaly decoder (segmentation map + confidence map) and image-score head
"""
from dataclasses import dataclass

import numpy as np

from . import vit
from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    bilinear_resize,
    conv2d,
    groupnorm,
    mul,
    relu,
    reshape,
    sigmoid,
    transpose,
)

DECODER_BLOCKS = ("block1", "block2")


@dataclass
class DecoderState:
    params: dict
    groups: int

    def __post_init__(self):
        out_channels = self.params["final.weight"].shape[0]
        if out_channels != 2:
            raise ConfigurationError(f"Final decoder conv must emit 2 channels, has {out_channels}")


@dataclass
class ScoreHeadState:
    weight: Tensor
    bias: Tensor

    @property
    def params(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Prediction:
    anomaly_map: np.ndarray
    confidence_raw: np.ndarray
    image_score: float


@dataclass
class PredictionLogits:
    """Differentiable model outputs consumed by the losses"""

    map_logits: Tensor
    confidence: Tensor
    score_logit: Tensor


def decoder_widths(embed_dim: int) -> tuple:
    return embed_dim, max(1, embed_dim // 2), max(1, embed_dim // 4)


def _kaiming(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return vit.float32_exact(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))


def init_decoder(embed_dim: int, groups: int, rng: np.random.Generator) -> DecoderState:
    d, half, quarter = decoder_widths(embed_dim)
    for width in (half, quarter):
        if width % groups:
            raise ConfigurationError(f"Decoder width {width} is not divisible by {groups} groups")
    params = {}
    for name, (c_in, c_out) in zip(DECODER_BLOCKS, ((d, half), (half, quarter))):
        params[f"{name}.conv.weight"] = _kaiming(rng, (c_out, c_in, 3, 3))
        params[f"{name}.conv.bias"] = np.zeros(c_out)
        params[f"{name}.norm.gamma"] = np.ones(c_out)
        params[f"{name}.norm.beta"] = np.zeros(c_out)
    params["final.weight"] = vit.trunc_normal(rng, (2, quarter, 3, 3))
    params["final.bias"] = np.zeros(2)
    return DecoderState(
        params={name: Tensor(value, name=f"decoder.{name}") for name, value in params.items()},
        groups=groups,
    )


def init_score_head(embed_dim: int, rng: np.random.Generator) -> ScoreHeadState:
    return ScoreHeadState(
        weight=Tensor(vit.trunc_normal(rng, (embed_dim,)), name="score_head.weight"),
        bias=Tensor(0.0, name="score_head.bias"),
    )


def reshape_tokens(out: vit.BackboneOutput) -> Tensor:
    """[N×d] patch tokens back onto the [d×gh×gw] patch grid"""
    gh, gw = out.grid
    n, d = out.patch_tokens.shape
    if n != gh * gw:
        raise DimensionError(f"{n} tokens do not fill a {gh}x{gw} grid")
    return reshape(transpose(out.patch_tokens), (d, gh, gw))


def decode(f_r: Tensor, state: DecoderState, out_h: int, out_w: int) -> tuple:
    """Two conv/GroupNorm/ReLU/×2 blocks, a final conv, then resize to the image.

    Returns ``(map_logits, c)``, each [out_h × out_w].
    """
    p = state.params
    x = f_r
    for name in DECODER_BLOCKS:
        x = conv2d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], padding=1)
        x = relu(groupnorm(x, state.groups, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"]))
        x = bilinear_resize(x, 2 * x.shape[1], 2 * x.shape[2])
    x = conv2d(x, p["final.weight"], p["final.bias"], padding=1)
    x = bilinear_resize(x, out_h, out_w)
    return x[0], x[1]


def score_logit(cls: Tensor, head: ScoreHeadState) -> Tensor:
    return add(mul(cls, head.weight).sum(), head.bias)


def score_image(cls: Tensor, head: ScoreHeadState) -> float:
    return sigmoid(score_logit(cls, head)).item()


def model_input(image) -> Tensor:
    """Map a [3×H×W] image in [0, 1] to the backbone's [-1, 1] range"""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    return Tensor(data * 2.0 - 1.0)


def forward_logits(image, model, adapters_enabled: bool = True) -> PredictionLogits:
    x = model_input(image)
    out = vit.forward(x, model.backbone, adapters_enabled=adapters_enabled)
    map_logits, confidence = decode(reshape_tokens(out), model.decoder, x.shape[1], x.shape[2])
    return PredictionLogits(
        map_logits=map_logits,
        confidence=confidence,
        score_logit=score_logit(out.cls_token, model.score_head),
    )


def predict(image, model) -> Prediction:
    """Anomaly map, raw confidence map and image score for one image"""
    logits = forward_logits(image, model)
    return Prediction(
        anomaly_map=sigmoid(logits.map_logits).numpy(),
        confidence_raw=logits.confidence.numpy(),
        image_score=sigmoid(logits.score_logit).item(),
    )
