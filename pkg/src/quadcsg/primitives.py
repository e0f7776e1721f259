"""Quadric primitives, the point feature map and the primitive decoder.

A primitive row ``(a, b, c, d, e, f, g)`` describes the solid
``a x^2 + b y^2 + c z^2 + d x + e y + f z + g <= 0``.  With ``a, b, c >= 0``
that solid is convex (planes, slabs, cylinders, ellipsoids, paraboloids).
The quadric value is an algebraic distance, not a Euclidean one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node

LATENT_SIZE = 256
HIDDEN_SIZE = 512
LEAKY_SLOPE = 0.01

DECODER_PARAMS = ("latent", "w1", "b1", "w2", "b2")


def feature_map(points) -> np.ndarray:
    """Return the 7 x n matrix whose column j is (x^2, y^2, z^2, x, y, z, 1)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be n x 3, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite coordinates")
    n = pts.shape[0]
    Q = np.empty((7, n), dtype=np.float64)
    Q[0:3] = (pts * pts).T
    Q[3:6] = pts.T
    Q[6] = 1.0
    return Q


def signed_distances(P, Q) -> np.ndarray:
    """n x p matrix ``D`` with ``D.T = P @ Q``; non-positive entries are inside."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != 7 or Q.ndim != 2 or Q.shape[0] != 7:
        raise ValueError(f"expected p x 7 and 7 x n, got {P.shape} and {Q.shape}")
    return (P @ Q).T


def quadric_values(P, points) -> np.ndarray:
    """n x p quadric values, accumulated term by term in a fixed order.

    Agrees with :func:`signed_distances` up to rounding, but each entry depends
    only on its own primitive and point, never on matrix sizes or BLAS blocking.
    """
    P = np.asarray(P, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    x, y, z = (pts[:, k:k + 1] for k in range(3))
    out = (x * x) * P[:, 0]
    out += (y * y) * P[:, 1]
    out += (z * z) * P[:, 2]
    out += x * P[:, 3]
    out += y * P[:, 4]
    out += z * P[:, 5]
    out += P[:, 6]
    return out


def constrain(raw) -> np.ndarray:
    """Absolute value on the quadratic coefficients, identity elsewhere."""
    P = np.array(raw, dtype=np.float64)
    P[:, :3] = np.abs(P[:, :3])
    return P


@dataclass
class Decoder:
    """Latent code plus a two-layer MLP mapping it to ``p x 7`` raw coefficients."""

    latent: np.ndarray  # 1 x L
    w1: np.ndarray  # L x H
    b1: np.ndarray  # 1 x H
    w2: np.ndarray  # H x 7p
    b2: np.ndarray  # 1 x 7p

    @property
    def num_primitives(self) -> int:
        return self.w2.shape[1] // 7

    @classmethod
    def init(cls, p, rng, latent_size=LATENT_SIZE, hidden=HIDDEN_SIZE,
             weight_std=0.02, latent_std=0.1):
        return cls(
            latent=rng.normal(0.0, latent_std, (1, latent_size)),
            w1=rng.normal(0.0, weight_std, (latent_size, hidden)),
            b1=np.zeros((1, hidden)),
            w2=rng.normal(0.0, weight_std, (hidden, 7 * p)),
            b2=np.zeros((1, 7 * p)),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in DECODER_PARAMS}


def primitive_expr(graph: Graph, p: int, latent_size: int = LATENT_SIZE,
                   hidden: int = HIDDEN_SIZE) -> Node:
    """Add decoder parameters to ``graph`` and return the constrained ``p x 7`` node."""
    z = graph.param("latent", (1, latent_size))
    w1 = graph.param("w1", (latent_size, hidden))
    b1 = graph.param("b1", (1, hidden))
    w2 = graph.param("w2", (hidden, 7 * p))
    b2 = graph.param("b2", (1, 7 * p))
    h = graph.leaky_relu(z @ w1 + b1, LEAKY_SLOPE)
    raw = graph.reshape(h @ w2 + b2, (p, 7))
    keep = np.ones((p, 7))
    keep[:, :3] = 0.0
    return raw * graph.const(keep) + raw.abs() * graph.const(1.0 - keep)


def decode_primitives(decoder: Decoder) -> np.ndarray:
    graph = Graph()
    P = primitive_expr(graph, decoder.num_primitives, decoder.latent.shape[1],
                       decoder.w1.shape[1])
    (out,) = graph.evaluate(decoder.params(), [P])
    return out
