"""Pseudo labels: confident teacher predictions backfilled into background."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

BACKGROUND = 0

SOURCE_GROUND_TRUTH = 0
SOURCE_TEACHER = 1
SOURCE_BACKGROUND = 2


@dataclass
class PseudoLabel:
    labels: np.ndarray
    source: np.ndarray
    num_known: int  # background plus every class seen so far

    def teacher_count(self) -> int:
        return int((self.source == SOURCE_TEACHER).sum())


def generate_pseudo_label(
    gt: np.ndarray, teacher_probs: np.ndarray | None, tau: float, novel_classes: Sequence[int]
) -> PseudoLabel:
    """Merge step labels with the previous model's predictions.

    ``teacher_probs`` holds one sigmoid channel per old class (ids
    ``1..K`` in order) on the channel axis preceding ``gt``'s spatial axes;
    ``None`` means there is no teacher yet. A background pixel takes the
    teacher's arg-max class when the maximum probability is at least
    ``tau``; ties go to the lowest class id.
    """
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    gt = np.asarray(gt)
    n_old = 0 if teacher_probs is None else teacher_probs.shape[-3]
    num_known = 1 + n_old + len(novel_classes)
    if gt.size and (gt.min() < 0 or gt.max() >= num_known):
        raise ValueError(f"label ids must lie in [0, {num_known}), found range [{gt.min()}, {gt.max()}]")

    labels = gt.astype(np.int64).copy()
    source = np.full(gt.shape, SOURCE_GROUND_TRUTH, np.uint8)
    bg = gt == BACKGROUND
    source[bg] = SOURCE_BACKGROUND
    if n_old:
        if teacher_probs.shape[-2:] != gt.shape[-2:] or teacher_probs.shape[:-3] != gt.shape[:-2]:
            raise ValueError(f"teacher probabilities {teacher_probs.shape} do not match labels {gt.shape}")
        top = teacher_probs.max(axis=-3)
        arg = teacher_probs.argmax(axis=-3) + 1  # argmax returns the first maximum
        take = bg & (top >= tau)
        labels[take] = arg[take]
        source[take] = SOURCE_TEACHER
    return PseudoLabel(labels, source, num_known)


def binary_class_map(pl: PseudoLabel, class_id: int) -> np.ndarray:
    """1 where the pseudo label equals ``class_id``, with a singleton channel axis."""
    if not 0 <= class_id < pl.num_known:
        raise ValueError(f"class id {class_id} is not among the {pl.num_known} known ids")
    return np.expand_dims((pl.labels == class_id).astype(np.float32), axis=-3)
