"""Chamfer distance, normal consistency and edge Chamfer distance on surface samples.

Nearest neighbours come from an exact k-d tree query (``eps=0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_SAMPLES = 8192
EDGE_RADIUS = 0.01
EDGE_THRESHOLD = 0.1


@dataclass
class SurfaceSampleSet:
    points: np.ndarray  # k x 3
    normals: np.ndarray  # k x 3, unit
    source: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("sample set is empty")
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals differ in shape")

    def __len__(self):
        return len(self.points)


def sample_surface(mesh, k: int = DEFAULT_SAMPLES, rng=None, source: str = "") -> SurfaceSampleSet:
    """Area-weighted uniform samples on a triangle mesh, with face normals."""
    rng = np.random.default_rng(0) if rng is None else rng
    if len(mesh.faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    normals = mesh.face_normals()
    double_area = np.linalg.norm(normals, axis=1)
    if double_area.sum() <= 0:
        raise ValueError("cannot sample a mesh with zero area")
    tri = rng.choice(len(mesh.faces), size=k, p=double_area / double_area.sum())
    r1 = np.sqrt(rng.random(k))
    r2 = rng.random(k)
    a, b, c = (mesh.vertices[mesh.faces[tri, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    unit = normals[tri] / double_area[tri, None]
    return SurfaceSampleSet(pts, unit, source)


def nearest(source, target):
    """Squared distance and index of the nearest ``target`` point for each ``source`` point."""
    dist, idx = cKDTree(target).query(source, k=1, eps=0.0)
    return dist ** 2, idx


def _points(s):
    return s.points if isinstance(s, SurfaceSampleSet) else np.asarray(s, dtype=np.float64)


def chamfer_distance(A, B) -> float:
    """``1000 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2)``."""
    a, b = _points(A), _points(B)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty sets")
    return 1000.0 * float(nearest(a, b)[0].mean() + nearest(b, a)[0].mean())


def normal_consistency(A: SurfaceSampleSet, B: SurfaceSampleSet) -> float:
    """Symmetric mean of ``|n_a . n_nn(a)|``, orientation-agnostic."""
    _, ab = nearest(A.points, B.points)
    _, ba = nearest(B.points, A.points)
    nc_ab = np.abs(np.einsum("ij,ij->i", A.normals, B.normals[ab])).mean()
    nc_ba = np.abs(np.einsum("ij,ij->i", B.normals, A.normals[ba])).mean()
    return float(0.5 * (nc_ab + nc_ba))


def edge_mask(S: SurfaceSampleSet, radius: float = EDGE_RADIUS,
              threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Samples with a neighbour within ``radius`` whose normal cross product exceeds ``threshold``."""
    pairs = cKDTree(S.points).query_pairs(radius, output_type="ndarray")
    mask = np.zeros(len(S), dtype=bool)
    if len(pairs):
        cross = np.linalg.norm(np.cross(S.normals[pairs[:, 0]], S.normals[pairs[:, 1]]), axis=1)
        sharp = pairs[cross > threshold]
        mask[sharp[:, 0]] = True
        mask[sharp[:, 1]] = True
    return mask


def edge_chamfer_distance(A: SurfaceSampleSet, B: SurfaceSampleSet,
                          threshold: float = EDGE_THRESHOLD, radius: float = EDGE_RADIUS) -> float:
    """Chamfer distance between the edge samples of ``A`` and ``B``.

    If only one side has edge samples, the result is ``1000 *`` the mean squared
    distance from those samples to the full other set; no edges at all gives 0.
    """
    ea = A.points[edge_mask(A, radius, threshold)]
    eb = B.points[edge_mask(B, radius, threshold)]
    if len(ea) and len(eb):
        return chamfer_distance(ea, eb)
    if len(ea):
        return 1000.0 * float(nearest(ea, B.points)[0].mean())
    if len(eb):
        return 1000.0 * float(nearest(eb, A.points)[0].mean())
    return 0.0


def evaluate_surfaces(recon: SurfaceSampleSet, gt: SurfaceSampleSet) -> dict:
    return {
        "cd": chamfer_distance(recon, gt),
        "nc": normal_consistency(recon, gt),
        "ecd": edge_chamfer_distance(recon, gt),
    }
