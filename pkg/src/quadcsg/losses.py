"""Reconstruction losses and regularisers for the three training stages.

Masks are built with ``indicator`` nodes, so they are recomputed from the
current activations on every evaluation but never carry gradient.
"""

from __future__ import annotations

from typing import NamedTuple

from .autodiff import ShapeError, expression

W_LEFT = 10.0
W_RIGHT = 2.5


class LossBreakdown(NamedTuple):
    total: object
    reconstruction: object
    selection: object
    weight: object


@expression
def selection_regularizer(T):
    g = T.graph
    return (g.max_const(-T, 0.0) + g.max_const(T - 1.0, 0.0)).sum()


@expression
def weight_regularizer(W):
    return (W - 1.0).abs().sum()


def _check_lengths(*vectors):
    shapes = {v.shape for v in vectors}
    if len(shapes) != 1:
        raise ShapeError(f"length mismatch: {sorted(shapes)}")


@expression
def stage0_loss(a_left, a_right, gt, T, W) -> LossBreakdown:
    """Masked squared error on the soft left/right indicators plus both regularisers."""
    _check_lengths(a_left, a_right, gt)
    g = gt.graph
    mask_l = g.maximum(gt, g.indicator(a_right, "<", 0.5))
    mask_r = g.maximum(gt, g.indicator(a_left, ">", 0.5))
    left = mask_l * (gt - a_left).square()
    right = mask_r * ((1.0 - gt) - a_right).square()
    rec = (left + right).mean()
    reg_t = selection_regularizer(T)
    reg_w = weight_regularizer(W)
    return LossBreakdown(rec + reg_t + reg_w, rec, reg_t, reg_w)


@expression
def stage12_sides(a_left, a_right, gt, w_left=W_LEFT, w_right=W_RIGHT):
    """The left and right terms of the stage 1/2 reconstruction loss.

    Each indicator is saturated to [0, 1] inside the loss: the "push towards
    one" terms stop at ``a = 1`` and the "push towards zero" terms stop at
    ``a = 0``.  Without this the loss is unbounded below (inflated primitives,
    or transiently negative selection entries) and training diverges.
    """
    _check_lengths(a_left, a_right, gt)
    g = gt.graph
    outside = 1.0 - gt
    mask_l = g.maximum(gt, g.indicator(a_right, ">", 0.01))
    mask_r = g.maximum(gt, g.indicator(a_left, "<", 0.01))
    left = mask_l * (outside * (1.0 - g.min_const(a_left, 1.0)) + w_left * (gt * g.max_const(a_left, 0.0)))
    right = mask_r * (gt * (1.0 - g.min_const(a_right, 1.0)) + w_right * (outside * g.max_const(a_right, 0.0)))
    return left.mean(), right.mean()


@expression
def stage12_loss(a_left, a_right, gt, T, w_left=W_LEFT, w_right=W_RIGHT) -> LossBreakdown:
    """Weighted L1-like loss on the hard indicators plus the selection regulariser."""
    loss_l, loss_r = stage12_sides(a_left, a_right, gt, w_left, w_right)
    rec = loss_l + loss_r
    reg_t = selection_regularizer(T)
    return LossBreakdown(rec + reg_t, rec, reg_t, 0.0)
