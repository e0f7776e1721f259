"""Pruning, CSG tree extraction, meshing and OBJ / tree JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .csg import DIFFERENCE_MARGIN, HardModel, convex_sum
from .primitives import quadric_values

TREE_FORMAT = "capri-tree-v1"
ISO_LEVEL = 1e-4
DEFAULT_RESOLUTION = 128
N_UNIFORM_VALIDATION = 8192


class EmptyReconstructionError(ValueError):
    pass


class TreeFormatError(ValueError):
    pass


# ---------------------------------------------------------------- pruning


def validation_points(query_points, rng, n_uniform: int = N_UNIFORM_VALIDATION) -> np.ndarray:
    """Training query points followed by uniform points in the unit box."""
    uniform = rng.uniform(-0.5, 0.5, (n_uniform, 3))
    return np.concatenate([np.asarray(query_points, dtype=np.float64), uniform])


class _PruneState:
    """Per-point bookkeeping that makes each removal test exact and local.

    Left convexes only matter through "is the sum zero", tracked as integer
    counts of positive terms.  Right convexes only matter through "is the sum
    below the margin": that flag is stored exactly next to a running estimate
    of the sum.  Dropping a non-negative term never raises a sequential float
    sum, so flags can only flip from False to True, and the estimate settles
    every point except those within ``1e-9`` (relative to the initial sum) of
    the margin, which are recomputed exactly.
    """

    BAND = 1e-9

    def __init__(self, model: HardModel, points):
        self.T = (np.asarray(model.T) != 0).astype(np.float64)
        self.n_left = model.n_left
        self.margin = model.margin
        self.RT = np.ascontiguousarray(np.maximum(quadric_values(model.P, points), 0.0).T)
        self.pos = self.RT > 0
        self.alive = np.ones(self.T.shape[1], dtype=bool)
        n, c = self.RT.shape[1], self.T.shape[1]
        self.K = np.zeros((n, self.n_left), dtype=np.int64)
        self.S = np.zeros((n, c - self.n_left))
        for j in range(c):
            rows = np.flatnonzero(self.T[:, j])
            if j < self.n_left:
                self.K[:, j] = self.pos[rows].sum(axis=0)
            else:
                self.S[:, j - self.n_left] = convex_sum(self.RT, rows)
        self.cut = self.S < self.margin
        self.S0 = self.S.copy()  # bounds every later sum, term and rounding error

    def occupancy(self, K, cut, alive):
        inside = np.any(K[:, alive[:self.n_left]] == 0, axis=1)
        return inside & ~np.any(cut[:, alive[self.n_left:]], axis=1)

    def _cut_without(self, i, j, idx, S_est):
        """Exact ``sum < margin`` flags for right column ``j`` without row ``i``."""
        cut = self.cut[idx, j].copy()
        band = self.BAND * np.maximum(1.0, self.S0[idx, j])
        todo = ~cut & (np.abs(S_est - self.margin) <= band)
        cut |= ~cut & (S_est < self.margin - band)
        if todo.any():
            rows = [r for r in np.flatnonzero(self.T[:, self.n_left + j]) if r != i]
            sub = idx[todo]
            cut[todo] = convex_sum(self.RT[:, sub], rows) < self.margin
        return cut

    def try_remove_row(self, i, target) -> bool:
        cols = np.flatnonzero(self.T[i] != 0)
        idx = np.flatnonzero(self.pos[i])
        if len(idx) == 0:
            self.T[i] = 0.0
            return True
        K, cut, S = self.K[idx], self.cut[idx], self.S[idx]
        for col in cols:
            if col < self.n_left:
                K[:, col] -= 1
            else:
                j = col - self.n_left
                S[:, j] -= self.RT[i, idx]
                cut[:, j] = self._cut_without(i, j, idx, S[:, j])
        if not np.array_equal(self.occupancy(K, cut, self.alive), target[idx]):
            return False
        self.K[idx], self.cut[idx], self.S[idx] = K, cut, S
        self.T[i] = 0.0
        return True

    def try_drop_column(self, j, target) -> bool:
        alive = self.alive.copy()
        alive[j] = False
        if not np.array_equal(self.occupancy(self.K, self.cut, alive), target):
            return False
        self.alive = alive
        self.T[:, j] = 0.0
        return True


def prune_primitives(model: HardModel, points) -> HardModel:
    """Greedy removal of primitives, then convexes, repeated to a fixed point.

    Primitives are visited in ascending id order; zeroing a row of ``T`` is kept
    when the occupancy of every validation point is unchanged.  Convexes whose
    removal changes nothing are then dropped (this covers convexes containing
    no validation point).  Pruned primitives keep their row in ``P`` with an
    all-zero selection row, so ids stay stable.
    """
    points = np.asarray(points, dtype=np.float64)
    target = model.occupancy(points)
    state = _PruneState(model, points)
    if not np.array_equal(state.occupancy(state.K, state.cut, state.alive), target):
        raise AssertionError("pruning bookkeeping disagrees with evaluate_hard")
    changed = True
    while changed:
        changed = False
        for i in np.flatnonzero(np.any(state.T != 0, axis=1)):
            changed |= state.try_remove_row(i, target)
        for j in np.flatnonzero(state.alive):
            changed |= state.try_drop_column(j, target)
    keep = np.flatnonzero(state.alive)
    pruned = HardModel(np.array(model.P, dtype=np.float64), state.T[:, keep],
                       int(np.sum(keep < model.n_left)), model.margin)
    if not np.array_equal(pruned.occupancy(points), target):
        raise AssertionError("pruning changed occupancy of a validation point")
    return pruned


# ---------------------------------------------------------------- CSG tree


@dataclass
class CSGTree:
    """``(union of left convexes) - (union of right convexes)``.

    A left convex contains the points where all of its quadrics are <= 0.  A
    right convex subtracts the points where the sum of its positive quadric
    parts is below ``margin``, which is how the hard difference reads.
    """

    primitives: dict[int, np.ndarray]
    left: list[list[int]]
    right: list[list[int]] = field(default_factory=list)
    margin: float = DIFFERENCE_MARGIN

    def __post_init__(self):
        self.primitives = {int(k): np.asarray(v, dtype=np.float64).reshape(7)
                           for k, v in self.primitives.items()}
        self.left = [[int(i) for i in conv] for conv in self.left]
        self.right = [[int(i) for i in conv] for conv in self.right]
        for conv in self.left + self.right:
            missing = [i for i in conv if i not in self.primitives]
            if missing:
                raise TreeFormatError(f"convex references unknown primitive ids {missing}")

    @property
    def num_primitives(self) -> int:
        return len({i for conv in self.left + self.right for i in conv})

    @property
    def num_convexes(self) -> int:
        return len(self.left) + len(self.right)

    def occupancy(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        ids = sorted(self.primitives)
        values = {}
        if ids:
            Q = quadric_values(np.stack([self.primitives[i] for i in ids]), pts)
            values = {i: Q[:, k] for k, i in enumerate(ids)}
        inside = np.zeros(len(pts), dtype=bool)
        for conv in self.left:
            member = np.ones(len(pts), dtype=bool)
            for i in conv:
                member &= values[i] <= 0.0
            inside |= member
        for conv in self.right:
            total = np.zeros(len(pts))
            for i in conv:
                total += np.maximum(values[i], 0.0)
            inside &= ~(total < self.margin)
        return inside

    def to_dict(self) -> dict:
        return {
            "format": TREE_FORMAT,
            "difference_margin": float(self.margin),
            "primitives": [{"id": i, "coeffs": [float(v) for v in self.primitives[i]]}
                           for i in sorted(self.primitives)],
            "left_convexes": self.left,
            "right_convexes": self.right,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CSGTree":
        if data.get("format") != TREE_FORMAT:
            raise TreeFormatError(f"expected format {TREE_FORMAT!r}, got {data.get('format')!r}")
        try:
            prims = {}
            for entry in data["primitives"]:
                if len(entry["coeffs"]) != 7:
                    raise TreeFormatError(f"primitive {entry['id']} needs 7 coefficients")
                prims[int(entry["id"])] = entry["coeffs"]
            return cls(prims, data["left_convexes"], data["right_convexes"],
                       float(data.get("difference_margin", DIFFERENCE_MARGIN)))
        except (KeyError, TypeError) as exc:
            raise TreeFormatError(f"malformed tree: {exc}") from None

    def __eq__(self, other):
        if not isinstance(other, CSGTree):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def extract_csg_tree(model: HardModel) -> CSGTree:
    """Tree of the non-empty convexes of a (pruned) hard model."""
    T = np.asarray(model.T) != 0
    convexes = [np.flatnonzero(T[:, j]).tolist() for j in range(T.shape[1])]
    left = [c for c in convexes[:model.n_left] if c]
    right = [c for c in convexes[model.n_left:] if c]
    used = sorted({i for c in left + right for i in c})
    return CSGTree({i: model.P[i] for i in used}, left, right, model.margin)


def tree_to_model(tree: CSGTree) -> HardModel:
    ids = sorted(tree.primitives)
    row = {i: k for k, i in enumerate(ids)}
    P = np.stack([tree.primitives[i] for i in ids]) if ids else np.zeros((0, 7))
    convexes = tree.left + tree.right
    T = np.zeros((len(ids), len(convexes)))
    for j, conv in enumerate(convexes):
        T[[row[i] for i in conv], j] = 1.0
    return HardModel(P, T, len(tree.left), tree.margin)


def save_tree(tree: CSGTree, path) -> None:
    text = json.dumps(tree.to_dict(), indent=2) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write tree to {path}: {exc}") from exc


def load_tree(path) -> CSGTree:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TreeFormatError(f"{path}: invalid JSON ({exc})") from None
    return CSGTree.from_dict(data)


# ---------------------------------------------------------------- meshes


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # m x 3
    faces: np.ndarray  # f x 3, 0-based

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def _corners(self):
        v = self.vertices[self.faces]
        return v[:, 0], v[:, 1], v[:, 2]

    def face_normals(self) -> np.ndarray:
        """Unnormalised normals (length = twice the triangle area)."""
        a, b, c = self._corners()
        return np.cross(b - a, c - a)

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def signed_volume(self) -> float:
        a, b, c = self._corners()
        return float(np.sum(np.einsum("ij,ij->i", a, np.cross(b, c))) / 6.0)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0))
        n_verts = len(np.unique(self.faces))
        return n_verts - n_edges + len(self.faces)

    def is_watertight(self) -> bool:
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(len(counts)) and bool(np.all(counts == 2))


def _collapse_degenerate(vertices, faces, min_area: float = 1e-12, max_rounds: int = 50):
    """Merge the shortest edge of every triangle with area <= ``min_area``.

    Dropping such triangles would open holes; collapsing them keeps the mesh
    closed.  Triangles that end up with a repeated vertex disappear.
    """
    faces = np.asarray(faces, dtype=np.int64)
    for _ in range(max_rounds):
        a, b, c = (vertices[faces[:, k]] for k in range(3))
        bad = np.flatnonzero(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1) <= min_area)
        if len(bad) == 0:
            break
        parent = np.arange(len(vertices))

        def root(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for f in bad:
            tri = faces[f]
            lengths = [np.linalg.norm(vertices[tri[k]] - vertices[tri[(k + 1) % 3]]) for k in range(3)]
            k = int(np.argmin(lengths))
            u, v = root(tri[k]), root(tri[(k + 1) % 3])
            if u != v:
                parent[max(u, v)] = min(u, v)
        roots = np.array([root(i) for i in range(len(vertices))])
        faces = roots[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        faces = faces[keep]
    return faces


def _clean(vertices, faces, min_area: float = 1e-12) -> TriangleMesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = _collapse_degenerate(vertices, faces, min_area)
    mesh = TriangleMesh(vertices, faces)
    faces = mesh.faces[mesh.areas() > min_area]
    used, inverse = np.unique(faces, return_inverse=True)
    mesh = TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3))
    if mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def marching_cubes(field_fn, resolution: int = DEFAULT_RESOLUTION, iso: float = ISO_LEVEL,
                   bounds=(-0.5, 0.5), chunk: int = 1 << 18) -> TriangleMesh:
    """Isosurface ``field = iso`` of a field that is <= 0 inside.

    The field is sampled at ``resolution + 1`` points per axis over ``bounds``
    and padded with an outside layer so the result is closed.
    """
    from skimage import measure

    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution + 1)
    h = (hi - lo) / resolution
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.empty(len(grid))
    for start in range(0, len(grid), chunk):
        values[start:start + chunk] = field_fn(grid[start:start + chunk])
    if not np.any(values < iso):
        raise EmptyReconstructionError("empty reconstruction")
    finite = values[np.isfinite(values)]
    outside = max(float(finite.max()) if len(finite) else 0.0, iso) + 1.0
    values = np.where(np.isfinite(values), values, outside)
    volume = np.pad(values.reshape((resolution + 1,) * 3), 1, constant_values=outside)
    verts, faces, _, _ = measure.marching_cubes(volume, level=iso, spacing=(h, h, h),
                                                allow_degenerate=False)
    return _clean(verts + (lo - h), faces)


def mesh_model(model: HardModel, resolution: int = DEFAULT_RESOLUTION) -> TriangleMesh:
    return marching_cubes(model.field, resolution)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def load_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed record") from None
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))


__all__ = [
    "CSGTree", "EmptyReconstructionError", "TREE_FORMAT", "TreeFormatError", "TriangleMesh",
    "extract_csg_tree", "load_obj", "load_tree", "marching_cubes", "mesh_model",
    "prune_primitives", "save_obj", "save_tree", "tree_to_model", "validation_points",
]
