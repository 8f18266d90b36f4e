"""
Training objective: focal + L1 base loss, confidence weighting, image focal loss
"""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError
from .tensor import Tensor, absolute, add, clip, exp, log, mul, power, sigmoid, softplus, sub

PROB_EPS = 1e-7

CSV_FIELDS = ("step", "l1", "focal_pixel", "l_seg", "l_img", "total")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 5.0
    alpha_conf: float = 0.1
    focal_gamma: float = 2.0
    reduction: str = "mean"
    use_confidence: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigurationError(f"loss.beta must be > 0, got {self.beta}")
        if self.alpha_conf < 0:
            raise ConfigurationError(f"loss.alpha_conf must be >= 0, got {self.alpha_conf}")
        if self.focal_gamma < 0:
            raise ConfigurationError(f"loss.focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.reduction != "mean":
            raise ConfigurationError(f"loss.reduction must be 'mean', got {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    l1: float
    focal_pixel: float
    l_base: float
    l_seg: float
    l_img: float
    total: float

    def as_row(self, step: int) -> list:
        return [step, self.l1, self.focal_pixel, self.l_seg, self.l_img, self.total]

    @classmethod
    def average(cls, items: list) -> "LossBreakdown":
        fields = ("l1", "focal_pixel", "l_base", "l_seg", "l_img", "total")
        return cls(**{f: float(np.mean([getattr(item, f) for item in items])) for f in fields})


def _check_shapes(a: Tensor, b: np.ndarray):
    if a.shape != np.shape(b):
        raise DimensionError(f"Prediction shape {a.shape} does not match target shape {np.shape(b)}")


def _check_probabilities(prob: Tensor):
    # NaN passes through so a diverged model surfaces as a non-finite loss
    finite = prob.data[np.isfinite(prob.data)]
    if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
        raise DomainError("Probabilities must lie in [0, 1]")


def focal_map(prob: Tensor, target, gamma: float) -> Tensor:
    """Per-element −(1−p_t)^γ·ln(p_t); probabilities are clipped to [1e-7, 1−1e-7]"""
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(prob, target)
    _check_probabilities(prob)
    p = clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    p_t = add(mul(p, target), mul(sub(1.0, p), 1.0 - target))
    return mul(mul(power(sub(1.0, p_t), gamma), log(p_t)), -1.0)


def focal(prob: Tensor, target, gamma: float) -> Tensor:
    return focal_map(prob, target, gamma).mean()


def l1(prediction: Tensor, target) -> Tensor:
    _check_shapes(prediction, target)
    return absolute(sub(prediction, np.asarray(target, dtype=np.float64))).mean()


def base_seg_map(map_prob: Tensor, m_gt, cfg: LossConfig) -> Tensor:
    """Pixelwise integrand of the base segmentation loss: |p − M| + β·focal"""
    target = np.asarray(m_gt, dtype=np.float64)
    _check_shapes(map_prob, target)
    return add(absolute(sub(map_prob, target)), mul(focal_map(map_prob, target, cfg.focal_gamma), cfg.beta))


def base_seg_loss(map_prob: Tensor, m_gt, cfg: LossConfig) -> Tensor:
    return base_seg_map(map_prob, m_gt, cfg).mean()


def confidence_weighted_loss(per_pixel_base: Tensor, c: Tensor, alpha_conf: float) -> Tensor:
    """mean(ℓ·C − α·ln C) with C = 1 + e^c, evaluated per pixel"""
    if per_pixel_base.shape != c.shape:
        raise DimensionError(f"Base loss {per_pixel_base.shape} and confidence {c.shape} differ in shape")
    weighted = mul(per_pixel_base, add(exp(c), 1.0))
    return sub(weighted, mul(softplus(c), alpha_conf)).mean()


def image_loss(score: Tensor, label: int, gamma: float) -> Tensor:
    return focal(score, np.full(score.shape, float(label)), gamma)


def total_loss(pred, m_gt, label: int, cfg: LossConfig) -> tuple:
    """Full objective for one image; returns ``(loss tensor, LossBreakdown)``.

    ``pred`` carries logits (map, confidence, image score).
    """
    target = np.asarray(m_gt, dtype=np.float64)
    map_prob = sigmoid(pred.map_logits)
    per_pixel = base_seg_map(map_prob, target, cfg)
    if cfg.use_confidence:
        l_seg = confidence_weighted_loss(per_pixel, pred.confidence, cfg.alpha_conf)
    else:
        l_seg = per_pixel.mean()
    l_img = image_loss(sigmoid(pred.score_logit), label, cfg.focal_gamma)
    loss = add(l_seg, l_img)

    l1_value = float(np.abs(map_prob.data - target).mean())
    focal_value = float(focal_map(map_prob.detach(), target, cfg.focal_gamma).data.mean())
    breakdown = LossBreakdown(
        l1=l1_value,
        focal_pixel=focal_value,
        l_base=l1_value + cfg.beta * focal_value,
        l_seg=l_seg.item(),
        l_img=l_img.item(),
        total=loss.item(),
    )
    return loss, breakdown
