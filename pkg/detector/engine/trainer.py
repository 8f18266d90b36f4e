"""
AdamW training of adapters, decoder and score head; backbone warmup; few-shot finetuning
"""
import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import vit
from .errors import ConfigurationError, ContractError, TrainingDivergedError
from .heads import forward_logits
from .losses import LossBreakdown, LossConfig, total_loss
from .model import ModelState
from .tensor import GradTape, Tensor, backward, mul

logger = logging.getLogger(__name__)

DEFAULT_ITERATIONS = 500
FULL_SCALE_BATCH_SIZE = 32
DEFAULT_LR = 1e-4
FINETUNE_ITERATIONS = 50


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = DEFAULT_ITERATIONS
    batch_size: int = 8
    lr: float = DEFAULT_LR
    weight_decay: float = 0.01
    adam_betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    freeze_backbone: bool = True
    grad_clip: Optional[float] = 1.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError(f"train.iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigurationError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigurationError(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        beta1, beta2 = self.adam_betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigurationError(f"train.adam_betas must lie in [0, 1), got {self.adam_betas}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("train.grad_clip must be positive or null")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["adam_betas"] = list(self.adam_betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["loss"] = LossConfig(**data.get("loss", {}))
        if "adam_betas" in data:
            data["adam_betas"] = tuple(data["adam_betas"])
        return cls(**data)


@dataclass
class AdamState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    model: ModelState
    train_config: TrainConfig
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def census(self) -> dict:
        return self.model.census()


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, exact_float32: bool = True) -> AdamState:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    A missing gradient counts as zero. With ``exact_float32`` the updated
    values are rounded to float32 so checkpoints store them exactly.
    """
    beta1, beta2 = cfg.adam_betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m = state.first.get(name, np.zeros_like(tensor.data))
        v = state.second.get(name, np.zeros_like(tensor.data))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first[name], state.second[name] = m, v

        value = tensor.data * (1.0 - cfg.lr * cfg.weight_decay)
        value = value - cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        tensor.data = vit.float32_exact(value) if exact_float32 else value
    return state


def clip_by_global_norm(grads: dict, max_norm: Optional[float]) -> tuple:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None)))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: (None if g is None else g * factor) for name, g in grads.items()}, norm


def _rng_from_state(state: dict, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state:
        rng.bit_generator.state = copy.deepcopy(state)
    return rng


def _check_trainability(model: ModelState, cfg: TrainConfig):
    if cfg.freeze_backbone and model.backbone_mode == "scratch":
        raise ConfigurationError("Backbone mode 'scratch' trains the backbone; freeze_backbone must be false")
    if not cfg.freeze_backbone and model.backbone_mode != "scratch":
        raise ConfigurationError(f"freeze_backbone is false but the backbone mode is '{model.backbone_mode}'")
    decoder_only = model.plan is not None and (model.plan.positions == "none" or model.config.adapter_rank == 0)
    if cfg.freeze_backbone and not model.backbone.adapters and not decoder_only:
        raise ContractError("A frozen backbone needs adapters; inject them or choose positions 'none'")


def _optimise(
    model: ModelState,
    draw_batch: Callable,
    cfg: TrainConfig,
    iterations: int,
    rng: np.random.Generator,
    start_iteration: int = 0,
    log=None,
    on_iteration: Optional[Callable] = None,
) -> list:
    """Shared loop: draw, forward, backward, clip, AdamW; returns per-iteration breakdowns"""
    model.apply_trainability()
    trainable = model.trainable_parameters()
    adam = AdamState()
    history = []
    for step in range(start_iteration + 1, start_iteration + iterations + 1):
        batch_ids, batch = draw_batch(rng)
        for tensor in trainable.values():
            tensor.zero_grad()
        breakdowns = []
        with GradTape() as tape:
            terms = []
            for image, mask, label in batch:
                loss, breakdown = total_loss(forward_logits(image, model), mask, label, cfg.loss)
                terms.append(loss)
                breakdowns.append(breakdown)
            batch_loss = terms[0]
            for term in terms[1:]:
                batch_loss = batch_loss + term
            batch_loss = mul(batch_loss, 1.0 / len(terms))

        value = batch_loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, batch_ids, value)
        backward(tape, batch_loss)

        grads, norm = clip_by_global_norm({name: t.grad for name, t in trainable.items()}, cfg.grad_clip)
        adamw_step(trainable, grads, adam, cfg)

        summary = LossBreakdown.average(breakdowns)
        history.append(summary)
        if log is not None:
            log.add_row(step, summary)
        logger.debug("iteration %d: loss %.6f, grad norm %.4f", step, summary.total, norm)
        if on_iteration is not None:
            on_iteration(step, summary)
    for tensor in trainable.values():
        tensor.zero_grad()
    return history


def train_zero_shot(
    model: ModelState,
    triplets: list,
    cfg: TrainConfig,
    log=None,
    on_iteration: Optional[Callable] = None,
    metadata: Optional[dict] = None,
) -> Checkpoint:
    """Train on generated triplets, drawing the normal or anomalous half of each pick with probability 1/2"""
    if not triplets:
        raise ContractError("Training set is empty")
    _check_trainability(model, cfg)

    def draw_batch(rng):
        picks = rng.integers(len(triplets), size=cfg.batch_size)
        anomalous = rng.random(cfg.batch_size) < 0.5
        batch, ids = [], []
        for pick, use_anomalous in zip(picks, anomalous):
            triplet = triplets[pick]
            ids.append(int(triplet.sample_id))
            if use_anomalous:
                batch.append((triplet.anomalous, triplet.mask, 1))
            else:
                batch.append((triplet.normal, np.zeros(triplet.mask.shape), 0))
        return ids, batch

    rng = np.random.default_rng(cfg.seed)
    logger.info(
        "Training %d trainable parameters for %d iterations on %d triplets",
        model.census()["trainable"], cfg.iterations, len(triplets),
    )
    history = _optimise(model, draw_batch, cfg, cfg.iterations, rng, log=log, on_iteration=on_iteration)
    info = {"final_loss": history[-1].total, "full_scale_batch_size": FULL_SCALE_BATCH_SIZE}
    info.update(metadata or {})
    return Checkpoint(
        model=model,
        train_config=cfg,
        iteration=cfg.iterations,
        rng_state=copy.deepcopy(rng.bit_generator.state),
        metadata=info,
    )


def finetune_few_shot(
    ckpt: Checkpoint,
    normal_images: list,
    iterations: int = FINETUNE_ITERATIONS,
    log=None,
    on_iteration: Optional[Callable] = None,
) -> Checkpoint:
    """Continue training on a few normal images (empty masks, label 0).

    The trainable set is the one used for zero-shot training; optimiser
    moments start from zero.
    """
    if not normal_images:
        raise ContractError("Few-shot finetuning needs at least one normal image")
    if iterations < 0:
        raise ConfigurationError(f"Finetune iterations must be >= 0, got {iterations}")
    if iterations == 0:
        return ckpt

    model = copy.deepcopy(ckpt.model)
    cfg = ckpt.train_config
    images = [np.asarray(image, dtype=np.float64) for image in normal_images]
    empty = np.zeros(images[0].shape[1:])

    def draw_batch(rng):
        picks = rng.integers(len(images), size=cfg.batch_size)
        return [int(p) for p in picks], [(images[p], empty, 0) for p in picks]

    rng = _rng_from_state(ckpt.rng_state, cfg.seed)
    _optimise(model, draw_batch, cfg, iterations, rng, start_iteration=ckpt.iteration, log=log, on_iteration=on_iteration)
    return Checkpoint(
        model=model,
        train_config=cfg,
        iteration=ckpt.iteration + iterations,
        rng_state=copy.deepcopy(rng.bit_generator.state),
        metadata={**ckpt.metadata, "finetune_shots": len(images), "finetune_iterations": iterations},
    )


def warmup_backbone(
    model: ModelState,
    normal_images: list,
    steps: int,
    seed: int,
    lr: float = 1e-3,
    mask_ratio: float = 0.5,
) -> list:
    """Masked-patch reconstruction pretraining of the backbone, then freeze it again.

    A throw-away linear head maps patch tokens back to pixels. Returns the
    loss per step.
    """
    if not normal_images:
        raise ContractError("Backbone warmup needs normal images")
    config = model.config
    rng = np.random.default_rng(seed)
    head = {
        "weight": Tensor(vit.trunc_normal(rng, (config.patch_dim, config.embed_dim)), requires_grad=True),
        "bias": Tensor(np.zeros(config.patch_dim), requires_grad=True),
    }
    backbone = model.backbone_parameters()
    for tensor in backbone.values():
        tensor.requires_grad = True
    params = {**backbone, **{f"warmup_head.{k}": v for k, v in head.items()}}
    opt_cfg = TrainConfig(iterations=max(1, steps), lr=lr, weight_decay=0.0, freeze_backbone=False)
    adam = AdamState()
    losses = []
    try:
        for _ in range(steps):
            image = normal_images[rng.integers(len(normal_images))] * 2.0 - 1.0
            masked = rng.random(config.num_patches) < mask_ratio
            masked[rng.integers(config.num_patches)] = True
            for tensor in params.values():
                tensor.zero_grad()
            with GradTape() as tape:
                loss = vit.masked_patch_loss(image, model.backbone, head["weight"], head["bias"], masked)
            backward(tape, loss)
            adamw_step(params, {name: t.grad for name, t in params.items()}, adam, opt_cfg)
            losses.append(loss.item())
    finally:
        for tensor in params.values():
            tensor.zero_grad()
        model.apply_trainability()
    logger.info("Backbone warmup: %d steps, reconstruction loss %.5f -> %.5f", steps, losses[0] if losses else 0.0, losses[-1] if losses else 0.0)
    return losses
