"""Residual background aggregation.

The background logit of a model trained for ``t`` steps is the initial
head's background channel plus the non-positive part of every later
head's adaptation channel. While step ``t`` trains, its own channel enters
unclipped so that gradients reach it everywhere.
"""

from __future__ import annotations

from typing import Sequence

from . import tensor as T
from .tensor import Tensor


class ContractError(RuntimeError):
    """A caller broke a documented precondition."""


def filter_residual(adapt: Tensor) -> Tensor:
    return T.clamp_nonpositive(adapt)


def _check_shapes(b1: Tensor, maps: Sequence[Tensor]) -> None:
    for m in maps:
        if m.shape != b1.shape:
            raise T.ShapeError(f"adaptation map shape {m.shape} differs from background {b1.shape}")


def aggregate_inference(b1: Tensor, adapts: Sequence[Tensor], use_filter: bool = True) -> Tensor:
    _check_shapes(b1, adapts)
    return T.stack_sum([b1] + [filter_residual(a) if use_filter else a for a in adapts])


def aggregate_training(
    b1: Tensor, old_adapts: Sequence[Tensor], current_adapt: Tensor, use_filter: bool = True
) -> Tensor:
    """Background logit used by the losses of the step being trained.

    ``b1`` and ``old_adapts`` must arrive detached; only ``current_adapt``
    may carry gradient.
    """
    _check_shapes(b1, list(old_adapts) + [current_adapt])
    if b1.requires_grad or any(a.requires_grad for a in old_adapts):
        raise ContractError("old background contributions must be detached before training aggregation")
    old = [filter_residual(a) if use_filter else a for a in old_adapts]
    # same summation as inference, so a non-positive current residual reproduces it bit for bit
    return T.stack_sum([b1] + old + [current_adapt])
