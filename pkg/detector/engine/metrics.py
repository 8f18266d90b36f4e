"""
Image- and pixel-level AUROC / F1-max.

AUROC is the Mann-Whitney statistic computed from mid-rank sums, so ties
count one half. F1-max sweeps every distinct score as a threshold
(positive when score >= t).
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata
from sklearn.metrics import roc_curve

from .errors import UndefinedMetricError

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("class", "img_auroc", "img_f1", "px_auroc", "px_f1")


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if self.scores.shape != self.labels.shape:
            raise ValueError(f"{self.scores.size} scores but {self.labels.size} labels")

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


def auroc(s: ScoredSet) -> float:
    n_pos, n_neg = s.positives, s.negatives
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    rank_sum = rankdata(s.scores, method="average")[s.labels == 1].sum()
    u_statistic = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def _threshold_counts(s: ScoredSet) -> tuple:
    """Distinct thresholds in descending order with cumulative TP/FP at each"""
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    last_of_run = np.r_[scores[1:] != scores[:-1], True]
    tp = np.cumsum(labels)[last_of_run]
    fp = np.cumsum(1 - labels)[last_of_run]
    return scores[last_of_run], tp, fp


def f1_max(s: ScoredSet) -> float:
    n_pos = s.positives
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive label")
    _, tp, fp = _threshold_counts(s)
    fn = n_pos - tp
    denominator = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 2 * tp / np.maximum(denominator, 1), 0.0)
    return float(f1.max())


def roc_points(s: ScoredSet) -> list:
    """(threshold, fpr, tpr) triples, starting at the (0, 0) corner"""
    n_pos, n_neg = s.positives, s.negatives
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC curve needs both labels")
    fpr, tpr, thresholds = roc_curve(s.labels, s.scores, drop_intermediate=False)
    # sklearn versions differ on the corner threshold (max + 1 or inf)
    thresholds = np.r_[np.inf, thresholds[1:]]
    return [(float(t), float(f), float(p)) for t, f, p in zip(thresholds, fpr, tpr)]


def _safe(metric: Callable, s: ScoredSet, errors: list, label: str) -> Optional[float]:
    try:
        return metric(s)
    except UndefinedMetricError as e:
        errors.append(f"{label}: {e}")
        return None


@dataclass
class SliceReport:
    image_auroc: Optional[float]
    image_f1max: Optional[float]
    pixel_auroc: Optional[float]
    pixel_f1max: Optional[float]
    images: int
    anomalous_images: int
    pixels: int
    anomalous_pixels: int
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @property
    def defined(self) -> bool:
        return not self.errors


@dataclass
class MetricsReport:
    overall: SliceReport
    per_class: dict
    curves: dict = field(default_factory=dict)

    @property
    def image_auroc(self):
        return self.overall.image_auroc

    @property
    def image_f1max(self):
        return self.overall.image_f1max

    @property
    def pixel_auroc(self):
        return self.overall.pixel_auroc

    @property
    def pixel_f1max(self):
        return self.overall.pixel_f1max

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_class": {name: rep.to_dict() for name, rep in sorted(self.per_class.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [TABLE_COLUMNS]
        for name, rep in sorted(self.per_class.items()):
            rows.append(_table_row(name, rep))
        rows.append(_table_row("all", self.overall))
        widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows) + "\n"


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _table_row(name: str, rep: SliceReport) -> tuple:
    return (name, _fmt(rep.image_auroc), _fmt(rep.image_f1max), _fmt(rep.pixel_auroc), _fmt(rep.pixel_f1max))


def gaussian_smooth(anomaly_map: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur truncated at 3 sigma, edges replicated"""
    if sigma <= 0:
        return anomaly_map
    return gaussian_filter(np.asarray(anomaly_map, dtype=np.float64), sigma=sigma, mode="nearest", truncate=3.0)


def _slice_report(image_scores, image_labels, pixel_scores, pixel_labels) -> SliceReport:
    errors = []
    images = ScoredSet(np.asarray(image_scores), np.asarray(image_labels))
    pixels = ScoredSet(
        np.concatenate(pixel_scores) if pixel_scores else np.zeros(0),
        np.concatenate(pixel_labels) if pixel_labels else np.zeros(0),
    )
    return SliceReport(
        image_auroc=_safe(auroc, images, errors, "image_auroc"),
        image_f1max=_safe(f1_max, images, errors, "image_f1max"),
        pixel_auroc=_safe(auroc, pixels, errors, "pixel_auroc"),
        pixel_f1max=_safe(f1_max, pixels, errors, "pixel_f1max"),
        images=images.scores.size,
        anomalous_images=images.positives,
        pixels=pixels.scores.size,
        anomalous_pixels=pixels.positives,
        errors=errors,
    )


def evaluate_predictions(records: Iterable, smoothing_sigma: float = 0.0, with_curves: bool = False) -> MetricsReport:
    """Score (prediction, m_gt, label, class_tag) records.

    Pixels of all images are pooled into one set; per-class slices are
    pooled the same way. Undefined metrics are reported per slice.
    """
    by_class: dict = {}
    pooled = ([], [], [], [])
    for prediction, m_gt, label, class_tag in records:
        anomaly_map = gaussian_smooth(np.asarray(prediction.anomaly_map, dtype=np.float64), smoothing_sigma)
        mask = (np.asarray(m_gt) > 0).astype(np.int64)
        entry = (float(prediction.image_score), int(label), anomaly_map.reshape(-1), mask.reshape(-1))
        for target in (pooled, by_class.setdefault(class_tag, ([], [], [], []))):
            for bucket, value in zip(target, entry):
                bucket.append(value)

    overall = _slice_report(*pooled)
    for message in overall.errors:
        logger.warning("Metric undefined on the full set: %s", message)
    per_class = {name: _slice_report(*buckets) for name, buckets in by_class.items()}

    curves = {}
    if with_curves:
        if overall.image_auroc is not None:
            curves["image"] = roc_points(ScoredSet(np.asarray(pooled[0]), np.asarray(pooled[1])))
        if overall.pixel_auroc is not None:
            curves["pixel"] = roc_points(ScoredSet(np.concatenate(pooled[2]), np.concatenate(pooled[3])))
    return MetricsReport(overall=overall, per_class=per_class, curves=curves)


def evaluate_dataset(
    model,
    samples: Iterable,
    predict_fn: Callable = None,
    workers: int = 1,
    smoothing_sigma: float = 0.0,
    with_curves: bool = False,
    on_prediction: Callable = None,
) -> MetricsReport:
    """Run the model over (image, m_gt, label, class_tag) samples and score them.

    Predictions may run on several threads; records are merged in sample
    order, so the report does not depend on ``workers``.
    """
    if predict_fn is None:
        from .heads import predict as predict_fn

    samples = list(samples)
    if not samples:
        raise UndefinedMetricError("Evaluation set is empty")

    def run(sample):
        return predict_fn(sample[0], model)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(run, samples))
    else:
        predictions = [run(sample) for sample in samples]

    if on_prediction is not None:
        for index, prediction in enumerate(predictions):
            on_prediction(index, samples[index], prediction)

    records = [(pred, s[1], s[2], s[3]) for pred, s in zip(predictions, samples)]
    return evaluate_predictions(records, smoothing_sigma=smoothing_sigma, with_curves=with_curves)
