"""Training losses for incremental steps and their weighted sum.

All losses take batched ``N x C x H x W`` tensors (a single ``C x H x W``
image works too) and average over images. Probabilities pass through the
guarded logarithm, so saturated sigmoids never produce infinities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .pseudo import PseudoLabel, binary_class_map
from .tensor import Tensor

LOSS_KEYS = ("loss_pbbce", "loss_bga_plus", "loss_bga_minus", "loss_gkd", "loss_bfd", "loss_total")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 1.0
    lambda4: float = 4.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class RegionMasks:
    """Novel-class region and its complement, built from step labels."""

    novel: np.ndarray
    complement: np.ndarray

    @classmethod
    def from_labels(cls, gt: np.ndarray, novel_classes: Sequence[int]) -> "RegionMasks":
        novel = np.expand_dims(np.isin(gt, list(novel_classes)), axis=-3).astype(np.float32)
        return cls(novel, 1 - novel)


def _pixels(x: Tensor) -> int:
    """Pixels per image times number of images."""
    return int(np.prod(x.shape[-2:])) * (x.shape[0] if x.ndim == 4 else 1)


def _bce_terms(phi: Tensor, target: np.ndarray, guard: bool = True) -> Tensor:
    """Elementwise ``-[q log p + (1-q) log(1-p)]`` for probability ``p`` and target ``q``."""
    target = np.asarray(target, dtype=phi.dtype)
    pos = T.log(phi, guard=guard) * target
    negs = T.log(1.0 - phi, guard=guard) * (1 - target)
    return -(pos + negs)


def pb_bce(phi: Tensor, pseudo: PseudoLabel, classes: Sequence[int], guard: bool = True) -> Tensor:
    """Binary cross-entropy over background plus the novel classes only.

    ``phi`` channel ``j`` holds the probability of class ``classes[j]``;
    channel 0 is expected to be the background (class 0). Old classes have
    no channel here, so they receive no gradient from this loss.
    """
    if phi.shape[-3] != len(classes):
        raise T.ShapeError(f"pb_bce: {phi.shape[-3]} channels for {len(classes)} classes")
    target = np.concatenate([binary_class_map(pseudo, c) for c in classes], axis=-3)
    return T.sum(_bce_terms(phi, target, guard)) * (1.0 / _pixels(phi))


def bga_plus(mu_bt: Tensor, novel_region: np.ndarray) -> Tensor:
    """Push the current adaptation logit towards -inf inside the novel region."""
    return T.masked_mean(-T.log(T.sigmoid(-mu_bt), guard=True), novel_region)


def bga_minus(phi_bt: Tensor, novel_region: np.ndarray) -> Tensor:
    """Triplet hinge with anchors 0 and 1 outside the novel region.

    The per-pixel term ``max(0, (1-p)^2 - p^2)`` equals ``max(0, 1-2p)`` and
    vanishes once ``p`` reaches 0.5.
    """
    per_pixel = T.hinge(T.square(1.0 - phi_bt) - T.square(phi_bt))
    return T.masked_mean(per_pixel, 1 - np.asarray(novel_region))


def gkd(student_phis: Sequence[Tensor], teacher_phis: Sequence) -> Tensor:
    """Soft-target BCE between student and teacher probabilities of every old head."""
    if len(student_phis) != len(teacher_phis):
        raise T.ShapeError(f"gkd: {len(student_phis)} student groups vs {len(teacher_phis)} teacher groups")
    if not student_phis:
        raise ValueError("gkd needs at least one old step")
    total = None
    for s, t in zip(student_phis, teacher_phis):
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        if s.shape != t.shape:
            raise T.ShapeError(f"gkd: channel groups misaligned, student {s.shape} vs teacher {t.shape}")
        term = T.sum(_bce_terms(s, t))
        total = term if total is None else total + term
    return total * (1.0 / _pixels(student_phis[0]))


def _masked_sq_distance(student: Sequence[Tensor], teacher: Sequence, mask: np.ndarray | None) -> Tensor:
    if len(student) != len(teacher):
        raise T.ShapeError(f"feature groups differ: {len(student)} vs {len(teacher)}")
    if not student:
        raise ValueError("feature distillation needs at least one old step")
    total = None
    for s, t in zip(student, teacher):
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        if s.shape != t.shape:
            raise T.ShapeError(f"feature shape mismatch: student {s.shape} vs teacher {t.shape}")
        diff = s - t
        if mask is not None:
            diff = diff * np.broadcast_to(np.asarray(mask, dtype=s.dtype), s.shape)
        term = T.mean(T.square(diff))
        total = term if total is None else total + term
    return total


def bfd(student_feats: Sequence[Tensor], teacher_feats: Sequence, psi_b: np.ndarray) -> Tensor:
    """Squared distance of old-head hidden features, restricted to ``psi_b`` pixels.

    Each head contributes its squared distance divided by the feature
    element count (masked-out pixels count as zeros), so the scale does not
    grow with resolution or width.
    """
    return _masked_sq_distance(student_feats, teacher_feats, psi_b)


def feature_mse(student_feats: Sequence[Tensor], teacher_feats: Sequence) -> Tensor:
    """Unmasked counterpart of :func:`bfd` (feature distillation over every pixel)."""
    return _masked_sq_distance(student_feats, teacher_feats, None)


def mse_zero(mu_bt: Tensor, novel_region: np.ndarray) -> Tensor:
    """Hold the adaptation logit at 0 outside the novel region."""
    return T.masked_mean(T.square(mu_bt), 1 - np.asarray(novel_region))


def bce_one(phi_bt: Tensor, novel_region: np.ndarray) -> Tensor:
    """Push the adaptation probability towards 1 outside the novel region."""
    return T.masked_mean(-T.log(phi_bt, guard=True), 1 - np.asarray(novel_region))


def total_objective(components: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum; components that are absent contribute nothing."""
    scale = {
        "loss_pbbce": 1.0,
        "loss_bga_plus": weights.lambda1,
        "loss_bga_minus": weights.lambda2,
        "loss_gkd": weights.lambda3,
        "loss_bfd": weights.lambda4,
    }
    unknown = set(components) - set(scale)
    if unknown:
        raise KeyError(f"unknown loss components: {sorted(unknown)}")
    total = None
    for key, value in components.items():
        term = value * scale[key]
        total = term if total is None else total + term
    if total is None:
        return T.tensor(0.0)
    return total
