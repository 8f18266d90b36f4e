"""
Django service for running pipeline commands and recording them as Run rows
"""
import csv
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from django.utils import timezone

from . import pipeline
from .engine import checkpoint
from .engine.errors import ConfigurationError, UndefinedMetricError
from .models import Run
from .runconfig import RunConfig

logger = logging.getLogger(__name__)

SWEEP_KNOBS = ("threshold", "rank", "n_images", "n_object_tags")
SWEEP_DEFAULTS = {
    "threshold": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
    "rank": [32, 64, 128],
    "n_images": [100, 500, 1000],
    "n_object_tags": [1, 2, 4, 6],
}
# knob -> dotted config key it overrides
SWEEP_KEYS = {
    "threshold": "datagen.threshold",
    "rank": "lora.rank",
    "n_images": "datagen.n",
    "n_object_tags": "datagen.n_object_tags",
}
SWEEP_FIELDS = ("knob", "value", "rejection_rate", "image_auroc", "image_f1max", "pixel_auroc", "pixel_f1max")
METRIC_NAMES = ("image_auroc", "image_f1max", "pixel_auroc", "pixel_f1max")


class RunService:
    """Runs one pipeline command and keeps its Run row up to date"""

    def __init__(self, run_id: int):
        self.run = Run.objects.get(id=run_id)
        self.rc = RunConfig(self.run.config).validate()
        self.out = Path(self.run.output_dir)

    class RunStoppedException(Exception):
        pass

    def _check_stopped(self):
        """Refresh from DB and raise if stop was requested."""
        self.run.refresh_from_db(fields=["stop_requested"])
        if self.run.stop_requested:
            raise RunService.RunStoppedException("Run stopped by user")

    def update_status(self, step: str, message: str = ""):
        """Update run status and add to logs"""
        log_message = f"[{step}] {message}"
        logger.info("[Run %s] %s", self.run.id, log_message)
        self.run.add_log(log_message)

    def execute(self, **kwargs) -> dict:
        handlers = {
            "gen": self.generate,
            "train": self.train,
            "eval": self.evaluate,
            "infer": self.infer,
            "sweep": self.sweep,
            "benchmark": self.benchmark,
        }
        try:
            self.run.status = "running"
            self.run.save(update_fields=["status"])
            result = handlers[self.run.kind](**kwargs)

            self.run.status = "completed"
            self.run.result = result
            self.run.completed_at = timezone.now()
            self.run.current_step = f"Completed {self.run.get_kind_display().lower()}"
            self.run.save()
            return result
        except RunService.RunStoppedException:
            self.run.status = "failed"
            self.run.error_message = "Run stopped by user"
            self.run.completed_at = timezone.now()
            self.run.add_log("Run stopped by user")
            self.run.save()
            raise
        except Exception as e:
            self.run.status = "failed"
            self.run.error_message = str(e)
            self.run.completed_at = timezone.now()
            self.run.save()
            raise

    # -- progress callbacks -------------------------------------------------

    def _on_generation(self, stats):
        self._check_stopped()
        self.update_status("GEN", f"{stats.accepted}/{stats.requested} accepted after {stats.attempts} attempts")

    def _on_iteration(self, step: int, breakdown):
        if step % 25 == 0:
            self._check_stopped()
            self.update_status("TRAIN", f"iteration {step}: loss {breakdown.total:.5f}")

    # -- commands -------------------------------------------------------------

    def generate(self) -> dict:
        split = self.rc["datagen"]["split"]
        self.update_status("GEN", f"Generating {self.rc['datagen']['n']} {split} samples into {self.out}")
        stats = pipeline.generate_split(self.rc, self.out, progress=self._on_generation)
        self.update_status("GEN", f"Rejection rate {stats['rejection_rate']:.3f}")
        return {
            "out": str(self.out),
            "split": split,
            "accepted": stats["accepted"],
            "attempts": stats["attempts"],
            "rejection_rate": stats["rejection_rate"],
            "mean_anomalous_area": stats["anomalous_area"]["mean"],
        }

    def train(self) -> dict:
        dataset = self.rc["paths"]["dataset"]
        if not dataset:
            raise ConfigurationError("Training needs a dataset (paths.dataset / --dataset)")
        source = self.rc["finetune"]["checkpoint"]
        if source:
            self.update_status("FINETUNE", f"Finetuning {source} on {self.rc['finetune']['shots']} normals")
            ckpt, path, digest = pipeline.finetune_checkpoint(self.rc, Path(source), Path(dataset), self.out, self._on_iteration)
        else:
            self.update_status("TRAIN", f"Training on {dataset}")
            ckpt, path, digest = pipeline.train_checkpoint(self.rc, Path(dataset), self.out, self._on_iteration)
        self.update_status("TRAIN", f"Saved {path}")
        return {
            "checkpoint": str(path),
            "sha256": digest,
            "iteration": ckpt.iteration,
            "census": ckpt.census,
        }

    def evaluate(self) -> dict:
        ckpt_path = self.rc["paths"]["checkpoint"]
        dataset = self.rc["paths"]["eval_dataset"] or self.rc["paths"]["dataset"]
        if not ckpt_path or not dataset:
            raise ConfigurationError("Evaluation needs a checkpoint and a dataset")
        ckpt = checkpoint.load(ckpt_path)
        maps_dir = self.out / "maps" if self.rc["eval"]["save_maps"] else None
        self.update_status("EVAL", f"Evaluating {ckpt_path} on {dataset}")
        report = pipeline.evaluate_model(ckpt.model, Path(dataset), self.rc, maps_dir=maps_dir)
        pipeline.write_report(report, self.out)
        if report.overall.errors:
            raise UndefinedMetricError("; ".join(report.overall.errors))
        return {name: getattr(report, name) for name in METRIC_NAMES}

    def infer(self, image: str, map_out: Optional[str] = None) -> dict:
        ckpt_path = self.rc["paths"]["checkpoint"]
        if not ckpt_path:
            raise ConfigurationError("Inference needs a checkpoint (paths.checkpoint / --checkpoint)")
        ckpt = checkpoint.load(ckpt_path)
        map_path = Path(map_out) if map_out else self.out / f"{Path(image).stem}_map.png"
        score = pipeline.infer_image(ckpt.model, Path(image), map_path)
        self.update_status("INFER", f"{image}: score {score:.6f}")
        return {"image": str(image), "score": score, "map": str(map_path)}

    def _variant(self, **overrides) -> RunConfig:
        return self.rc.with_overrides(overrides)

    def _evaluate_variant(self, rc: RunConfig, train_dir: Path, eval_dir: Path, model_dir: Path) -> dict:
        ckpt, _, _ = pipeline.train_checkpoint(rc, train_dir, model_dir, self._on_iteration)
        report = pipeline.evaluate_model(ckpt.model, eval_dir, rc)
        pipeline.write_report(report, model_dir)
        return {name: getattr(report, name) for name in METRIC_NAMES}

    def sweep(self) -> dict:
        knob = self.rc["sweep"]["knob"]
        if knob not in SWEEP_KNOBS:
            raise ConfigurationError(f"Unknown sweep knob '{knob}' (choose from {SWEEP_KNOBS})")
        values = self.rc["sweep"]["values"] or SWEEP_DEFAULTS[knob]
        root = self.out / f"sweep_{knob}"

        eval_dir = root / "eval"
        self.update_status("SWEEP", "Generating the held-out evaluation split")
        pipeline.generate_split(self.rc, eval_dir, split="eval", n=self.rc["datagen"]["eval_n"])

        base_train = None
        rows = []
        for value in values:
            self._check_stopped()
            rc = self._variant(**{SWEEP_KEYS[knob]: value})
            point = root / f"{knob}_{value}"
            if knob == "rank":
                if base_train is None:
                    base_train = root / "train"
                    base_stats = pipeline.generate_split(self.rc, base_train, split="train")
                train_dir, stats = base_train, base_stats
            else:
                train_dir = point / "train"
                stats = pipeline.generate_split(rc, train_dir, split="train")
            self.update_status("SWEEP", f"{knob}={value}: rejection rate {stats['rejection_rate']:.3f}")
            metrics = self._evaluate_variant(rc, train_dir, eval_dir, point / "model")
            rows.append({"knob": knob, "value": value, "rejection_rate": stats["rejection_rate"], **metrics})

        csv_path = self.out / f"sweep_{knob}.csv"
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if row[k] is None else row[k]) for k in SWEEP_FIELDS})
        return {"csv": str(csv_path), "rows": rows}

    def benchmark(self) -> dict:
        """Zero-shot protocol over several seeds: untrained baseline, trained model, optional ablations"""
        variants = {"default": {}}
        if self.rc["benchmark"]["ablations"]:
            variants["no_filtering"] = {"datagen.filtering": False}
            variants["no_foreground"] = {"datagen.foreground": False}

        per_seed = []
        for seed in self.rc["benchmark"]["seeds"]:
            self._check_stopped()
            seed_dir = self.out / f"seed_{seed}"
            base = self._variant(seed=seed)
            eval_dir = seed_dir / "eval"
            pipeline.generate_split(base, eval_dir, split="eval", n=base["datagen"]["eval_n"])
            baseline = pipeline.evaluate_model(pipeline.build_model_for(base), eval_dir, base)
            entry = {"seed": seed, "untrained": {name: getattr(baseline, name) for name in METRIC_NAMES}}
            for name, overrides in variants.items():
                rc = self._variant(seed=seed, **overrides)
                train_dir = seed_dir / name / "train"
                stats = pipeline.generate_split(rc, train_dir, split="train")
                metrics = self._evaluate_variant(rc, train_dir, eval_dir, seed_dir / name / "model")
                entry[name] = {**metrics, "rejection_rate": stats["rejection_rate"]}
                self.update_status("BENCHMARK", f"seed {seed} {name}: {json.dumps(metrics, sort_keys=True)}")
            per_seed.append(entry)

        summary = {"seeds": per_seed, "mean": {}}
        for name in ["untrained", *variants]:
            summary["mean"][name] = {
                metric: _mean([entry[name][metric] for entry in per_seed]) for metric in METRIC_NAMES
            }
        path = self.out / "benchmark.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return {"benchmark": str(path), "mean": summary["mean"]}


def _mean(values: list) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def start_run(kind: str, rc: RunConfig, output_dir: Path, **kwargs) -> tuple:
    """Create a Run row and execute it in the calling thread; returns (run, result)"""
    run = Run.objects.create(kind=kind, config=rc.data, output_dir=str(output_dir), status="pending")
    result = RunService(run.id).execute(**kwargs)
    run.refresh_from_db()
    return run, result
