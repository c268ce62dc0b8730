"""Zero-shot cosine classification, top-1 accuracy, macro F1, and the ID/OOD
robustness gap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import DualEncoder
from .numerics import NumericsError, normalize_rows


@dataclass
class MetricReport:
    top1: float          # percent
    macro_f1: float      # percent
    per_class_f1: list[float]
    n_samples: int


@dataclass
class RobustnessGap:
    id_metric: float
    ood_metric: float
    gap: float


def zero_shot_predict(model: DualEncoder, images: np.ndarray, captions: np.ndarray) -> np.ndarray:
    """Predicted labels for a batch: argmax over classes of the cosine
    similarity between image and caption embeddings. Ties break to the lowest
    class index (numpy argmax convention)."""
    captions = np.atleast_2d(captions)
    if captions.shape[0] == 0:
        raise NumericsError("need at least one class caption")
    img_emb = np.atleast_2d(model.encode_image(images))
    txt_emb = np.atleast_2d(model.encode_text(captions))
    u, _ = normalize_rows(img_emb)
    v, _ = normalize_rows(txt_emb)
    return np.argmax(u @ v.T, axis=1)


def zero_shot_classify(model: DualEncoder, image: np.ndarray, captions: np.ndarray) -> int:
    return int(zero_shot_predict(model, np.atleast_2d(image), captions)[0])


def top1_accuracy(predictions, truths) -> float:
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.size != truths.size or predictions.size == 0:
        raise NumericsError("predictions and truths must be equal-length and non-empty")
    return float(100.0 * np.mean(predictions == truths))


def macro_f1(predictions, truths, num_classes: int) -> float:
    return compute_metrics(predictions, truths, num_classes).macro_f1


def compute_metrics(predictions, truths, num_classes: int) -> MetricReport:
    """Top-1 and macro F1 in one pass. Macro F1 averages only over classes
    present in the ground truth; a class with zero precision+recall scores 0."""
    predictions = np.asarray(predictions, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if predictions.size != truths.size or predictions.size == 0:
        raise NumericsError("predictions and truths must be equal-length and non-empty")
    if np.any(truths < 0) or np.any(truths >= num_classes) or np.any(predictions < 0) or np.any(predictions >= num_classes):
        raise NumericsError("label outside [0, num_classes)")

    top1 = float(100.0 * np.mean(predictions == truths))
    per_class = []
    f1_present = []
    for c in range(num_classes):
        tp = int(np.sum((predictions == c) & (truths == c)))
        fp = int(np.sum((predictions == c) & (truths != c)))
        fn = int(np.sum((predictions != c) & (truths == c)))
        if 2 * tp + fp + fn == 0:
            f1 = 0.0
        else:
            f1 = 2.0 * tp / (2 * tp + fp + fn)
        per_class.append(f1)
        if tp + fn > 0:  # class appears in truths
            f1_present.append(f1)
    macro = float(100.0 * np.mean(f1_present)) if f1_present else 0.0
    return MetricReport(top1, macro, per_class, int(predictions.size))


def random_baseline(num_classes: int) -> float:
    if num_classes < 1:
        raise NumericsError("num_classes must be >= 1")
    return 100.0 / num_classes


def robustness_gap(id_metric: float, ood_metric: float) -> RobustnessGap:
    return RobustnessGap(id_metric, ood_metric, id_metric - ood_metric)
