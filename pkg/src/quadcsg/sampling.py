"""Input ingestion and query-set generation.

Voxel grids use a small binary container (``.capv``)::

    bytes 0-3    b"CAPV"
    bytes 4-15   nx, ny, nz as little-endian uint32
    then         nx*ny*nz bytes of 0/1, index = x + nx*(y + ny*z)

Point clouds are text files of ``x y z nx ny nz`` lines; ``#`` starts a
comment line and blank lines are ignored.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

VOXEL_MAGIC = b"CAPV"
RNG_ALGORITHM = "numpy.PCG64"
QUERY_BOX = 0.6

# independent random streams derived from the single user seed
STREAMS = {"queries": 0, "model": 1, "prune": 2, "metrics": 3, "holdout": 4, "batches": 5}


def make_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([STREAMS[purpose], int(seed)]))


class InputFormatError(ValueError):
    pass


@dataclass
class VoxelGrid:
    occupancy: np.ndarray  # bool, indexed [x, y, z]

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) == 0:
            raise InputFormatError(f"voxel dims must be positive, got {self.occupancy.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    def centers(self) -> np.ndarray:
        """World coordinates of all voxel centres, in ``[x, y, z]`` raveled order."""
        axes = [(np.arange(n) + 0.5 - n / 2.0) / max(self.dims) for n in self.dims]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)


def load_voxel_grid(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise InputFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != VOXEL_MAGIC:
        raise InputFormatError(
            f"{path}: bad magic {data[:4]!r}, expected {VOXEL_MAGIC.decode()!r}"
        )
    nx, ny, nz = struct.unpack("<3I", data[4:16])
    if nx == 0 or ny == 0 or nz == 0:
        raise InputFormatError(f"{path}: zero dimension in {(nx, ny, nz)}")
    count = nx * ny * nz
    body = np.frombuffer(data, dtype=np.uint8, offset=16)
    if body.size < count:
        raise InputFormatError(f"{path}: truncated body, {body.size} of {count} voxels")
    if body.size > count:
        raise InputFormatError(f"{path}: {body.size - count} trailing bytes")
    if np.any(body > 1):
        raise InputFormatError(f"{path}: voxel values must be 0 or 1")
    occ = body.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool)
    return VoxelGrid(occ)


def save_voxel_grid(grid: VoxelGrid, path) -> None:
    nx, ny, nz = grid.dims
    body = grid.occupancy.transpose(2, 1, 0).astype(np.uint8).tobytes()
    Path(path).write_bytes(VOXEL_MAGIC + struct.pack("<3I", nx, ny, nz) + body)


def voxelize(inside, resolution: int) -> VoxelGrid:
    """Occupancy of ``inside(points)`` sampled at the centres of a cubic grid."""
    grid = VoxelGrid(np.zeros((resolution,) * 3, dtype=bool))
    occ = np.asarray(inside(grid.centers()), dtype=bool)
    return VoxelGrid(occ.reshape(grid.dims))


def near_surface_mask(occupancy: np.ndarray) -> np.ndarray:
    """Voxels whose occupancy differs from at least one face neighbour.

    Neighbours outside the grid count as empty.
    """
    occ = np.pad(np.asarray(occupancy, dtype=bool), 1, constant_values=False)
    core = occ[1:-1, 1:-1, 1:-1]
    differs = np.zeros_like(core)
    for axis in range(3):
        for step in (-1, 1):
            differs |= core != np.roll(occ, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return differs


@dataclass
class QuerySet:
    points: np.ndarray  # n x 3
    occupancy: np.ndarray  # n bool
    source: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be n x 3, got {self.points.shape}")
        if len(self.points) != len(self.occupancy):
            raise ValueError("points and occupancy lengths differ")

    def __len__(self):
        return len(self.points)


def sample_voxel_queries(grid: VoxelGrid, n_total: int = 32768, rng=None,
                         near_fraction: float = 0.5) -> QuerySet:
    """Near-surface voxel centres first, then uniformly drawn other centres.

    At most ``ceil(near_fraction * n_total)`` near-surface voxels are taken.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    occ = grid.occupancy.ravel()
    if occ.all() or not occ.any():
        raise InputFormatError("voxel grid has no surface (all empty or all full)")
    near = np.flatnonzero(near_surface_mask(grid.occupancy).ravel())
    quota = min(len(near), n_total, math.ceil(near_fraction * n_total))
    if quota < len(near):
        near = np.sort(rng.choice(near, quota, replace=False))
    rest = n_total - len(near)
    pool = np.setdiff1d(np.arange(occ.size), near, assume_unique=True)
    if rest > 0:
        far = rng.choice(pool, rest, replace=rest > len(pool))
    else:
        far = np.empty(0, dtype=np.int64)
    idx = np.concatenate([near, far])
    centers = grid.centers()
    return QuerySet(centers[idx], occ[idx], "voxel",
                    {"near_surface": int(len(near)), "rng": RNG_ALGORITHM})


@dataclass
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        if len(self.points) < 1 or self.points.shape != self.normals.shape:
            raise InputFormatError("point cloud needs at least one point with a normal")


def read_xyzn(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise InputFormatError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise InputFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not all(math.isfinite(v) for v in values):
            raise InputFormatError(f"{path}:{lineno}: non-finite value")
        if values[3] == values[4] == values[5] == 0.0:
            raise InputFormatError(f"{path}:{lineno}: zero-length normal")
        rows.append(values)
    if not rows:
        raise InputFormatError(f"{path}: no points")
    data = np.array(rows)
    normals = data[:, 3:] / np.linalg.norm(data[:, 3:], axis=1, keepdims=True)
    return data[:, :3], normals


def normalize_points(points: np.ndarray) -> np.ndarray:
    """Centre the bounding box at the origin and scale its longest side to 1."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float(np.max(hi - lo))
    return (points - (lo + hi) / 2.0) / (extent if extent > 0 else 1.0)


def load_point_cloud(path) -> OrientedPointCloud:
    points, normals = read_xyzn(path)
    return OrientedPointCloud(normalize_points(points), normals)


def save_point_cloud(points, normals, path) -> None:
    lines = [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}"
             for p, n in zip(points, normals)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sample_pointcloud_queries(cloud: OrientedPointCloud, k: int = 8, sigma: float = 1 / 64,
                              rng=None) -> QuerySet:
    """``k`` Gaussian offsets along each normal; negative offsets are inside."""
    if k < 1 or sigma <= 0:
        raise ValueError("need k >= 1 and sigma > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    t = rng.normal(0.0, sigma, (len(cloud.points), k))
    queries = cloud.points[:, None, :] + t[:, :, None] * cloud.normals[:, None, :]
    queries = np.clip(queries.reshape(-1, 3), -QUERY_BOX, QUERY_BOX)
    return QuerySet(queries, (t < 0).ravel(), "pointcloud", {"k": k, "sigma": sigma,
                                                              "rng": RNG_ALGORITHM})


def voxelize_point_cloud(cloud: OrientedPointCloud, resolution: int = 64) -> VoxelGrid:
    """Occupancy grid from an oriented cloud.

    A voxel centre is inside when it lies behind the nearest sample, i.e. its
    offset from that sample points against the sample's normal.
    """
    if len(cloud.points) == 0:
        raise InputFormatError("point cloud is empty")
    grid = VoxelGrid(np.zeros((resolution,) * 3, dtype=bool))
    centers = grid.centers()
    _, nearest = cKDTree(cloud.points).query(centers)
    offset = centers - cloud.points[nearest]
    inside = np.einsum("ij,ij->i", offset, cloud.normals[nearest]) < 0
    return VoxelGrid(inside.reshape(grid.occupancy.shape))


def merge_queries(first: QuerySet, second: QuerySet) -> QuerySet:
    """Concatenate two query sets; the result keeps the first one's source tag."""
    return QuerySet(np.vstack([first.points, second.points]),
                    np.concatenate([first.occupancy, second.occupancy]), first.source,
                    {**first.meta, "extra": {"count": len(second), **second.meta}})
