"""Soft Jaccard distance loss and its weighted multi-stage combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import add, add_scalar, div, mul, scale, sub, tsum

DENOM_EPS = 1e-7


@dataclass(frozen=True)
class StageWeights:
    """Per-stage loss weights; later stages weigh at least as much."""

    alphas: tuple = (0.7, 0.8, 0.9, 1.0)

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        if not alphas:
            raise ShapeError("StageWeights needs at least one weight")
        if any(a <= 0 for a in alphas):
            raise ShapeError("stage weights must be strictly positive")
        if alphas[-1] != max(alphas):
            raise ShapeError("the last stage weight must be the maximum")

    def __len__(self):
        return len(self.alphas)


def jaccard_distance_loss(target, prob, eps=DENOM_EPS):
    """1 - soft IoU between a binary target and a probability map.

    loss = 1 - sum(t*p) / (sum(t^2) + sum(p^2) - sum(t*p)), summed jointly
    over batch and pixels. If the denominator falls below ``eps`` (both maps
    empty), the loss is 0 by convention: nothing to segment, nothing wrong.
    Differentiable w.r.t. ``prob`` through the graph.
    """
    if target.shape != prob.shape:
        raise ShapeError(
            f"jaccard loss: target {target.shape} vs prob {prob.shape}"
        )
    if np.isnan(target.data).any() or np.isnan(prob.data).any():
        raise ValueError("jaccard loss: NaN input")
    inter = tsum(mul(target, prob))
    denom = sub(add(tsum(mul(target, target)), tsum(mul(prob, prob))), inter)
    if denom.item() < eps:
        return scale(tsum(mul(prob, prob)), 0.0)  # exact 0, keeps graph dtype
    return add_scalar(scale(div(inter, denom), -1.0), 1.0)


def weighted_loss(stage_losses, weights):
    """Weighted sum of per-stage losses: the deep-supervision objective."""
    alphas = weights.alphas if isinstance(weights, StageWeights) else tuple(weights)
    if len(stage_losses) != len(alphas):
        raise ShapeError(
            f"{len(stage_losses)} stage losses vs {len(alphas)} weights"
        )
    total = scale(stage_losses[0], alphas[0])
    for loss, alpha in zip(stage_losses[1:], alphas[1:]):
        total = add(total, scale(loss, alpha))
    return total


def loss_no_ds(stage_losses):
    """Ablation baseline: supervise only the final stage's output."""
    if not stage_losses:
        raise ShapeError("loss_no_ds: empty stage-loss list")
    return stage_losses[-1]
