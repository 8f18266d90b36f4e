"""
On-disk formats: PNG images and masks, dataset metadata, training log CSV
"""
import csv
import json
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
from PIL import Image

from .losses import CSV_FIELDS

ID_WIDTH = 6
MAP_SCALE = 65535


def sample_name(sample_id: int) -> str:
    return f"{sample_id:0{ID_WIDTH}d}"


# ---------------------------------------------------------------------------
# PNG


def save_rgb(path: Path, image: np.ndarray):
    """[3×H×W] image in [0, 1] -> 8-bit RGB PNG"""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path, format="PNG")


def load_rgb(path: Union[str, Path]) -> np.ndarray:
    """Any image Pillow can read -> [3×H×W] float64 in [0, 1]"""
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    return pixels.transpose(2, 0, 1) / 255.0


def save_mask(path: Path, mask: np.ndarray):
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG")


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def save_map16(path: Path, anomaly_map: np.ndarray):
    """Anomaly map in [0, 1] -> 16-bit grayscale PNG"""
    pixels = np.round(np.clip(anomaly_map, 0.0, 1.0) * MAP_SCALE).astype(np.uint16)
    Image.fromarray(pixels).save(path, format="PNG")


def load_map16(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / MAP_SCALE


# ---------------------------------------------------------------------------
# training log


class TrainingLog:
    def __init__(self, csv_path: Union[str, Path] = "train_log.csv"):
        self.csv_path = Path(csv_path)
        self._ensure_file_exists()

    def _ensure_file_exists(self):
        """Create CSV file with headers if it doesn't exist"""
        if not self.csv_path.exists():
            self.csv_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.csv_path, "w", newline="") as f:
                csv.writer(f).writerow(CSV_FIELDS)

    def add_row(self, step: int, breakdown) -> str:
        with open(self.csv_path, "a", newline="") as f:
            csv.writer(f).writerow([step] + [repr(float(v)) for v in breakdown.as_row(step)[1:]])
        return f"Step {step}: total {breakdown.total:.6f}"

    def rows(self) -> list:
        with open(self.csv_path, newline="") as f:
            return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# datasets


class DatasetWriter:
    """Writes meta.jsonl for every attempt and PNGs for accepted samples"""

    def __init__(self, root: Path):
        self.root = Path(root)
        for sub in ("normal", "anomalous", "mask"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.meta_path = self.root / "meta.jsonl"
        self.meta_path.write_text("")

    def write(self, sample):
        with open(self.meta_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(sample.meta_record()) + "\n")
        if not sample.accepted:
            return
        name = sample_name(sample.sample_id)
        save_rgb(self.root / "normal" / f"{name}.png", sample.normal_image)
        save_rgb(self.root / "anomalous" / f"{name}.png", sample.anomalous_image)
        save_mask(self.root / "mask" / f"{name}.png", sample.mask)

    def write_stats(self, stats: dict):
        (self.root / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")


class Triplet(NamedTuple):
    sample_id: int
    object_tag: str
    normal: np.ndarray
    anomalous: np.ndarray
    mask: np.ndarray


class EvalSample(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    label: int
    class_tag: str
    sample_id: int
    half: str


class TripletDataset:
    """Reader for a generated dataset directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        meta_path = self.root / "meta.jsonl"
        if not meta_path.exists():
            raise FileNotFoundError(f"No meta.jsonl in dataset directory {self.root}")
        with open(meta_path, encoding="utf-8") as f:
            self.records = [json.loads(line) for line in f if line.strip()]
        self.accepted = [record for record in self.records if record["accepted"]]
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.accepted)

    @property
    def stats(self) -> Optional[dict]:
        path = self.root / "stats.json"
        return json.loads(path.read_text()) if path.exists() else None

    @property
    def objects(self) -> list:
        return sorted({record["object"] for record in self.accepted})

    def triplet(self, position: int) -> Triplet:
        if position not in self._cache:
            record = self.accepted[position]
            name = sample_name(record["id"])
            self._cache[position] = Triplet(
                sample_id=record["id"],
                object_tag=record["object"],
                normal=load_rgb(self.root / "normal" / f"{name}.png"),
                anomalous=load_rgb(self.root / "anomalous" / f"{name}.png"),
                mask=load_mask(self.root / "mask" / f"{name}.png"),
            )
        return self._cache[position]

    def triplets(self) -> list:
        return [self.triplet(i) for i in range(len(self))]

    def normals(self, limit: Optional[int] = None) -> list:
        count = len(self) if limit is None else min(limit, len(self))
        return [self.triplet(i).normal for i in range(count)]

    def eval_samples(self):
        """Both halves of every accepted triplet, ordered by sample id then half"""
        for triplet in self.triplets():
            yield EvalSample(
                triplet.normal, np.zeros_like(triplet.mask), 0, triplet.object_tag, triplet.sample_id, "normal"
            )
            yield EvalSample(triplet.anomalous, triplet.mask, 1, triplet.object_tag, triplet.sample_id, "anomalous")
