"""
Pipeline stages shared by the run services: generate, train, finetune, evaluate, infer
"""
import csv
import logging
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from .engine import checkpoint, datagen, storage
from .engine.errors import ConfigurationError
from .engine.heads import predict
from .engine.metrics import MetricsReport, evaluate_dataset
from .engine.model import ModelState, build_model
from .engine.trainer import finetune_few_shot, train_zero_shot, warmup_backbone
from .engine.vocabulary import load_vocabulary, split_vocabulary
from .runconfig import RunConfig

logger = logging.getLogger(__name__)

SPLITS = ("train", "eval")
ROC_FIELDS = ("curve", "threshold", "fpr", "tpr")


def dataset_seed(seed: int, split: str) -> int:
    """Master seed of one split's generator, derived from the run seed"""
    state = np.random.SeedSequence([seed, SPLITS.index(split)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def object_split(rc: RunConfig) -> tuple:
    """(vocabulary, train objects, held-out objects)"""
    section = rc["datagen"]
    vocab = load_vocabulary(section["vocabulary"])
    train, held_out = split_vocabulary(vocab, section["n_train_objects"], section["n_eval_objects"], section["split_seed"])
    limit = section["n_object_tags"]
    if limit is not None:
        if not 1 <= limit <= len(train):
            raise ConfigurationError(f"datagen.n_object_tags must lie in [1, {len(train)}], got {limit}")
        train = train[:limit]
    return vocab, train, held_out


def build_model_for(rc: RunConfig, seed: Optional[int] = None) -> ModelState:
    return build_model(
        rc.backbone_config(),
        rc["lora"]["positions"],
        np.random.default_rng(rc.seed if seed is None else seed),
        decoder_groups=rc["decoder"]["groups"],
        backbone_mode=rc["backbone"]["mode"],
    )


def generate_split(
    rc: RunConfig,
    out_dir: Path,
    split: Optional[str] = None,
    n: Optional[int] = None,
    progress: Optional[Callable] = None,
) -> dict:
    split = split or rc["datagen"]["split"]
    cfg = rc.datagen_config()
    vocab, train, held_out = object_split(rc)
    objects, others = (train, held_out) if split == "train" else (held_out, train)
    backbone = build_model_for(rc).backbone if cfg.extractor == "backbone" else None
    stats = datagen.generate_dataset(
        n=n or rc["datagen"]["n"],
        vocab=vocab,
        objects=objects,
        cfg=cfg,
        out_dir=Path(out_dir),
        master_seed=dataset_seed(rc.seed, split),
        extractor=datagen.make_extractor(cfg, backbone),
        workers=rc.workers,
        held_out_objects=others,
        split=split,
        progress=progress,
    )
    return stats.to_dict()


def _fresh_log(path: Path) -> storage.TrainingLog:
    if path.exists():
        path.unlink()
    return storage.TrainingLog(path)


def train_checkpoint(rc: RunConfig, dataset_dir: Path, out_dir: Path, on_iteration: Optional[Callable] = None) -> tuple:
    """Zero-shot training; returns (checkpoint, checkpoint path, sha256)"""
    dataset = storage.TripletDataset(dataset_dir)
    model = build_model_for(rc)
    if rc["backbone"]["mode"] == "warmup":
        warmup_backbone(model, dataset.normals(), rc["backbone"]["warmup_steps"], rc.seed, lr=rc["backbone"]["warmup_lr"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = train_zero_shot(
        model,
        dataset.triplets(),
        rc.train_config(),
        log=_fresh_log(out_dir / "train_log.csv"),
        on_iteration=on_iteration,
        metadata={"dataset": str(dataset_dir), "objects": dataset.objects},
    )
    path = out_dir / "model.avfm"
    return ckpt, path, checkpoint.save(ckpt, path)


def finetune_checkpoint(
    rc: RunConfig, source: Path, dataset_dir: Path, out_dir: Path, on_iteration: Optional[Callable] = None
) -> tuple:
    """Few-shot finetuning on the first ``finetune.shots`` normals of ``dataset_dir``"""
    base = checkpoint.load(source)
    normals = storage.TripletDataset(dataset_dir).normals(limit=rc["finetune"]["shots"])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = finetune_few_shot(
        base,
        normals,
        iterations=rc["finetune"]["iterations"],
        log=_fresh_log(out_dir / "train_log.csv"),
        on_iteration=on_iteration,
    )
    path = out_dir / "model.avfm"
    return ckpt, path, checkpoint.save(ckpt, path)


def evaluate_model(
    model: ModelState,
    dataset_dir: Path,
    rc: RunConfig,
    maps_dir: Optional[Path] = None,
) -> MetricsReport:
    dataset = storage.TripletDataset(dataset_dir)
    on_prediction = None
    if maps_dir is not None:
        maps_dir = Path(maps_dir)
        maps_dir.mkdir(parents=True, exist_ok=True)

        def on_prediction(index, sample, prediction):
            name = f"{storage.sample_name(sample.sample_id)}_{sample.half}.png"
            storage.save_map16(maps_dir / name, prediction.anomaly_map)

    return evaluate_dataset(
        model,
        dataset.eval_samples(),
        workers=rc.workers,
        smoothing_sigma=float(rc["eval"]["smoothing_sigma"]),
        with_curves=True,
        on_prediction=on_prediction,
    )


def write_report(report: MetricsReport, out_dir: Path) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_table())
    with open(out_dir / "roc_points.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROC_FIELDS)
        for curve, points in sorted(report.curves.items()):
            for threshold, fpr, tpr in points:
                writer.writerow([curve, repr(threshold), repr(fpr), repr(tpr)])
    return [out_dir / name for name in ("report.json", "report.txt", "roc_points.csv")]


def infer_image(model: ModelState, image_path: Path, map_out: Path) -> float:
    """Score one image of any size; the map is resized back to the input's extents"""
    size = model.config.image_size
    with Image.open(image_path) as img:
        rgb = img.convert("RGB")
        width, height = rgb.size
        if (width, height) != (size, size):
            rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
        image = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0
    prediction = predict(image, model)
    anomaly_map = prediction.anomaly_map
    if anomaly_map.shape != (height, width):
        resized = Image.fromarray(anomaly_map.astype(np.float32)).resize((width, height), Image.Resampling.BILINEAR)
        anomaly_map = np.asarray(resized, dtype=np.float64)
    Path(map_out).parent.mkdir(parents=True, exist_ok=True)
    storage.save_map16(Path(map_out), anomaly_map)
    return float(prediction.image_score)
