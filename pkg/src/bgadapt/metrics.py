"""Prediction rule, confusion counts and grouped mIoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .background import aggregate_inference
from .segnet import LogitBundle, SegmentationModel
from .synthdata import TaskProtocol


def _sigmoid64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def background_logit(model: SegmentationModel, bundle: LogitBundle) -> T.Tensor:
    if model.background_mode == "shared":
        return bundle.adapt[0]
    return aggregate_inference(bundle.adapt[0], bundle.adapt[1:], use_filter=model.use_filter)


def score_maps(model: SegmentationModel, images: np.ndarray) -> np.ndarray:
    """Sigmoid scores, channel 0 for background then every class in id order."""
    with T.no_grad():
        bundle = model.forward(T.tensor(images))
        mu_b = background_logit(model, bundle)
    stacked = np.concatenate([mu_b.data] + [c.data for c in bundle.class_logits], axis=-3)
    return _sigmoid64(stacked)


def predict(model: SegmentationModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Per-pixel arg-max over background and class probabilities; ties go to the lowest id."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        return predict(model, images[None], batch_size)[0]
    out = [score_maps(model, images[i : i + batch_size]).argmax(axis=1) for i in range(0, len(images), batch_size)]
    return np.concatenate(out).astype(np.int64)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def empty(cls, num_ids: int) -> "ConfusionCounts":
        z = np.zeros(num_ids, np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    @property
    def num_ids(self) -> int:
        return len(self.tp)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        """Per-id IoU; NaN where the id never occurs in truth or prediction."""
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


def accumulate(counts: ConfusionCounts, prediction: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    prediction = np.asarray(prediction).ravel().astype(np.int64)
    truth = np.asarray(truth).ravel().astype(np.int64)
    if prediction.shape != truth.shape:
        raise ValueError(f"prediction has {prediction.size} pixels but truth has {truth.size}")
    k = counts.num_ids
    for name, arr in (("prediction", prediction), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} contains ids outside [0, {k})")
    cm = np.bincount(truth * k + prediction, minlength=k * k).reshape(k, k)
    tp = np.diag(cm)
    return counts.merge(ConfusionCounts(tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp))


def _group_mean(iou: np.ndarray, ids: list[int], group: str) -> float:
    vals = iou[ids]
    vals = vals[~np.isnan(vals)]
    if not len(vals):
        raise ValueError(f"mIoU group '{group}' has no class present in truth or prediction")
    return float(vals.mean())


def grouped_miou(counts: ConfusionCounts, protocol: TaskProtocol, t: int) -> dict:
    """mIoU of initial classes (with background), incremental classes and all.

    ``miou_incremental`` is omitted when ``t == 1``.
    """
    seen = protocol.classes_up_to(t)
    if counts.num_ids < len(seen) + 1:
        raise ValueError(f"counts cover {counts.num_ids} ids but step {t} knows {len(seen) + 1}")
    iou = counts.iou()
    initial = [0] + protocol.classes_of_step(1)
    result = {
        "miou_initial": _group_mean(iou, initial, "initial"),
        "miou_all": _group_mean(iou, [0] + seen, "all"),
    }
    if t > 1:
        result["miou_incremental"] = _group_mean(iou, seen[len(initial) - 1 :], "incremental")
    result["per_class_iou"] = [None if np.isnan(v) else float(v) for v in iou[: len(seen) + 1]]
    return result


def evaluate(model: SegmentationModel, images: np.ndarray, labels: np.ndarray, protocol: TaskProtocol, t: int) -> dict:
    counts = ConfusionCounts.empty(protocol.classes_up_to(t)[-1] + 1)
    counts = accumulate(counts, predict(model, images), labels)
    return grouped_miou(counts, protocol, t)
