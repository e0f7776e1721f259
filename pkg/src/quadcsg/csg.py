"""Intersection, union and difference layers over signed-distance matrices.

Two conventions coexist.  The *hard* indicators (``C``, ``a*``, ``s*``) are
non-negative with 0 meaning inside.  The *soft* indicators (``a+``, ``s+``)
live in [0, 1] with 1 meaning (approximately) inside.

The layer functions are written against :class:`~quadcsg.autodiff.Node` so
they can sit inside a training graph, and also accept plain arrays.
:func:`hard_field` / :func:`evaluate_hard` are a direct numpy path used for
inference, pruning and meshing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, expression
from .primitives import quadric_values

DIFFERENCE_MARGIN = 0.2


@expression
def intersect(D, T):
    """Point-to-convex indicator ``relu(D) @ T``."""
    return D.relu() @ T


@expression
def hard_union(C_half):
    return C_half.graph.rowmin(C_half)


@expression
def soft_union(C_half, W, ramp_scale=1.0):
    """``clip01(sum_i ramp * W_i * clip01(1 - C[:, i]))`` with one weight per convex.

    ``ramp_scale`` may be a float or a node with the shape of ``W``.
    """
    weights = W * ramp_scale
    return ((1.0 - C_half).clip01() @ weights).clip01()


@expression
def hard_difference(a_left, a_right, margin=DIFFERENCE_MARGIN):
    return a_left.graph.maximum(a_left, margin - a_right)


@expression
def soft_difference(a_left, a_right):
    return a_left.graph.minimum(a_left, 1.0 - a_right)


def split_halves(C: Node, n_left: int | None = None):
    n_left = C.shape[1] // 2 if n_left is None else n_left
    return C.cols(0, n_left), C.cols(n_left, C.shape[1])


def quantize_selection(T, eta: float) -> np.ndarray:
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    return (np.asarray(T) > eta).astype(np.float64)


def is_binary(T) -> bool:
    T = np.asarray(T)
    return bool(np.all((T == 0) | (T == 1)))


def convex_sum(RT, rows) -> np.ndarray:
    """Sequential sum of the rows ``RT[rows]`` in the given order.

    Fixed left-to-right accumulation means dropping a term that is exactly 0 at
    some point leaves that point's sum bit-identical, which pruning relies on.
    """
    acc = np.zeros(RT.shape[1])
    for r in rows:
        acc += RT[r]
    return acc


def convex_columns(R, T) -> np.ndarray:
    """``R @ T`` for binary ``T``, one :func:`convex_sum` per column.

    ``R`` is the n x p matrix of relu'd quadric values.
    """
    RT = np.ascontiguousarray(R.T)
    out = np.empty((R.shape[0], T.shape[1]))
    for j in range(T.shape[1]):
        out[:, j] = convex_sum(RT, np.flatnonzero(T[:, j]))
    return out


def combine(C, n_left, margin=DIFFERENCE_MARGIN) -> np.ndarray:
    """``s*`` from a full convex indicator matrix split at ``n_left``.

    An empty left union contains nothing; an empty right union subtracts nothing.
    """
    n = C.shape[0]
    a_l = C[:, :n_left].min(axis=1) if n_left > 0 else np.full(n, np.inf)
    a_r = C[:, n_left:].min(axis=1) if C.shape[1] > n_left else np.full(n, np.inf)
    return np.maximum(a_l, margin - a_r)


def hard_field(P, T, points, n_left=None, margin=DIFFERENCE_MARGIN,
               chunk=32768) -> np.ndarray:
    """Continuous ``s*`` at each point (0 inside, > 0 outside).

    Columns ``[:n_left]`` of ``T`` form the left union, the rest the right one.
    """
    P = np.asarray(P, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    n_left = T.shape[1] // 2 if n_left is None else n_left
    used = np.flatnonzero(np.any(T != 0, axis=1))
    P, T = P[used], T[used]
    binary = is_binary(T)
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        R = np.maximum(quadric_values(P, pts[start:start + chunk]), 0.0)
        C = convex_columns(R, T) if binary else R @ T
        out[start:start + chunk] = combine(C, n_left, margin)
    return out


def evaluate_hard(P, T, points, n_left=None, margin=DIFFERENCE_MARGIN) -> np.ndarray:
    """Boolean occupancy of the binary-selection CSG model."""
    return hard_field(P, T, points, n_left, margin) <= 0.0


@dataclass
class HardModel:
    """Primitives with a binary selection split into left and right convexes."""

    P: np.ndarray
    T: np.ndarray
    n_left: int
    margin: float = DIFFERENCE_MARGIN

    @property
    def n_right(self) -> int:
        return self.T.shape[1] - self.n_left

    def used_primitives(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.T != 0, axis=1))

    def field(self, points) -> np.ndarray:
        return hard_field(self.P, self.T, points, self.n_left, self.margin)

    def occupancy(self, points) -> np.ndarray:
        return self.field(points) <= 0.0
