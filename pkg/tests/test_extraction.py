import json

import numpy as np
import pytest

from quadcsg.csg import HardModel, evaluate_hard
from quadcsg.extraction import (TREE_FORMAT, CSGTree, EmptyReconstructionError, TreeFormatError,
                                TriangleMesh, extract_csg_tree, load_obj, load_tree,
                                marching_cubes, mesh_model, prune_primitives, save_obj, save_tree,
                                tree_to_model, validation_points)
from quadcsg.sampling import make_rng

CUBE = np.array([
    [0, 0, 0, 1, 0, 0, -0.3], [0, 0, 0, -1, 0, 0, -0.3],
    [0, 0, 0, 0, 1, 0, -0.3], [0, 0, 0, 0, -1, 0, -0.3],
    [0, 0, 0, 0, 0, 1, -0.3], [0, 0, 0, 0, 0, -1, -0.3],
], dtype=float)
CYLINDER = np.array([[10, 10, 0, 0, 0, 0, -0.4]])  # radius 0.2 about z


def cube_minus_cylinder():
    P = np.vstack([CUBE, CYLINDER])
    T = np.zeros((7, 2))
    T[:6, 0] = 1
    T[6, 1] = 1
    return HardModel(P, T, n_left=1)


def uniform(n, seed=0, box=0.6):
    return np.random.default_rng(seed).uniform(-box, box, (n, 3))


def random_model(rng, p=8, c=4):
    P = rng.normal(size=(p, 7))
    P[:, :3] = np.abs(P[:, :3])
    P[:, 6] -= 0.5
    T = (rng.random((p, c)) < 0.5).astype(float)
    return HardModel(P, T, c // 2)


# -- pruning ----------------------------------------------------------------------

def test_redundant_half_space_is_pruned():
    P = np.array([[0, 0, 0, 1, 0, 0, -0.3], [0, 0, 0, 1, 0, 0, -0.5]], dtype=float)
    model = HardModel(P, np.ones((2, 1)), n_left=1)
    pts = uniform(5000)
    pruned = prune_primitives(model, pts)
    assert pruned.T[:, 0].tolist() == [1.0, 0.0]
    assert np.array_equal(pruned.occupancy(pts), model.occupancy(pts))


def test_needed_primitive_is_kept():
    model = cube_minus_cylinder()
    pts = uniform(20000, 1)
    pruned = prune_primitives(model, pts)
    assert pruned.used_primitives().tolist() == list(range(7))
    assert (pruned.n_left, pruned.n_right) == (1, 1)


def test_convex_without_validation_points_is_dropped():
    far = np.array([[1, 1, 1, -8, -8, -8, 47.99]])  # small sphere around (4, 4, 4)
    P = np.vstack([CUBE, far])
    T = np.zeros((7, 2))
    T[:6, 0] = 1
    T[6, 1] = 1
    pruned = prune_primitives(HardModel(P, T, n_left=2), uniform(3000))
    assert pruned.T.shape[1] == 1 and pruned.n_left == 1


@pytest.mark.parametrize("seed", range(10))
def test_pruning_preserves_occupancy_exactly(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    pts = uniform(4000, seed + 100)
    pruned = prune_primitives(model, pts)
    assert np.array_equal(evaluate_hard(pruned.P, pruned.T, pts, pruned.n_left), model.occupancy(pts))
    assert len(pruned.used_primitives()) <= len(model.used_primitives())


@pytest.mark.parametrize("seed", range(3))
def test_pruning_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    pts = uniform(3000, seed)
    once = prune_primitives(random_model(rng, p=10, c=6), pts)
    twice = prune_primitives(once, pts)
    assert np.array_equal(once.T, twice.T) and once.n_left == twice.n_left


def test_validation_points_layout():
    q = uniform(100, box=0.5)
    pts = validation_points(q, make_rng(0, "prune"), 50)
    assert pts.shape == (150, 3)
    assert np.array_equal(pts[:100], q)
    assert np.all(np.abs(pts[100:]) <= 0.5)


# -- trees ------------------------------------------------------------------------

def test_single_convex_tree():
    tree = extract_csg_tree(HardModel(CUBE, np.ones((6, 1)), n_left=1))
    assert tree.left == [[0, 1, 2, 3, 4, 5]] and tree.right == []
    data = tree.to_dict()
    assert data["right_convexes"] == [] and data["format"] == TREE_FORMAT
    assert tree.occupancy([[0, 0, 0], [0.4, 0, 0]]).tolist() == [True, False]


def test_cube_minus_cylinder_tree_structure():
    tree = extract_csg_tree(cube_minus_cylinder())
    assert tree.left == [[0, 1, 2, 3, 4, 5]] and tree.right == [[6]]
    assert tree.num_primitives == 7 and tree.num_convexes == 2


def test_empty_convexes_are_left_out():
    T = np.zeros((7, 4))
    T[:6, 0] = 1
    T[6, 2] = 1
    tree = extract_csg_tree(HardModel(np.vstack([CUBE, CYLINDER]), T, n_left=2))
    assert tree.left == [[0, 1, 2, 3, 4, 5]] and tree.right == [[6]]


@pytest.mark.parametrize("seed", range(5))
def test_tree_agrees_with_hard_evaluation(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    pts = uniform(10000, seed + 7)
    pruned = prune_primitives(model, pts)
    tree = extract_csg_tree(pruned)
    assert np.array_equal(tree.occupancy(pts), pruned.occupancy(pts))
    assert np.array_equal(tree_to_model(tree).occupancy(pts), pruned.occupancy(pts))


def test_tree_round_trip(tmp_path):
    tree = extract_csg_tree(random_model(np.random.default_rng(3)))
    save_tree(tree, tmp_path / "t.json")
    assert load_tree(tmp_path / "t.json") == tree
    data = json.loads((tmp_path / "t.json").read_text())
    assert set(data) >= {"format", "primitives", "left_convexes", "right_convexes"}
    assert all(len(p["coeffs"]) == 7 for p in data["primitives"])


@pytest.mark.parametrize("data", [
    {"format": "other", "primitives": [], "left_convexes": [], "right_convexes": []},
    {"format": TREE_FORMAT, "primitives": [{"id": 0, "coeffs": [1, 2]}], "left_convexes": [[0]],
     "right_convexes": []},
    {"format": TREE_FORMAT, "primitives": [], "left_convexes": [[3]], "right_convexes": []},
    {"format": TREE_FORMAT, "primitives": []},
])
def test_bad_trees_rejected(data):
    with pytest.raises(TreeFormatError):
        CSGTree.from_dict(data)


def test_invalid_tree_json(tmp_path):
    (tmp_path / "t.json").write_text("{not json")
    with pytest.raises(TreeFormatError):
        load_tree(tmp_path / "t.json")


# -- meshing ------------------------------------------------------------------------

def sphere_field(points):
    return np.sum(np.asarray(points) ** 2, axis=1) - 0.0625


def cube_field(points):
    return np.max(np.abs(points), axis=1) - 0.3


def test_sphere_vertices_within_a_cell_of_the_radius():
    mesh = marching_cubes(sphere_field, 64)
    delta = np.sqrt(3) / 64
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.25) <= delta)
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2


def test_cube_is_closed_genus_zero_and_outward():
    mesh = marching_cubes(cube_field, 32)
    assert mesh.euler_characteristic() == 2 and mesh.is_watertight()
    assert mesh.signed_volume() == pytest.approx(0.216, rel=0.05)
    assert mesh.areas().min() > 1e-12


def test_outward_normals_point_away_from_centre():
    mesh = marching_cubes(sphere_field, 32)
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", mesh.face_normals(), centroids) > 0)


def test_empty_field_is_an_error():
    with pytest.raises(EmptyReconstructionError, match="empty reconstruction"):
        marching_cubes(lambda p: np.ones(len(p)), 16)


def test_resolution_lower_bound():
    with pytest.raises(ValueError):
        marching_cubes(sphere_field, 7)


def test_model_mesh_vertices_lie_near_the_zero_set():
    model = cube_minus_cylinder()
    res = 48
    mesh = mesh_model(model, res)
    assert mesh.is_watertight()
    assert mesh.euler_characteristic() == 0  # a through-hole makes a torus
    axis = np.linspace(-0.5, 0.5, res + 1)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1)
    f = model.field(grid.reshape(-1, 3)).reshape(grid.shape[:3])
    variation = max(np.abs(np.diff(f, axis=k)).max() for k in range(3))
    assert np.all(np.abs(model.field(mesh.vertices)) <= variation)


# -- OBJ -----------------------------------------------------------------------------

def test_single_triangle_obj(tmp_path):
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    save_obj(mesh, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == 3
    assert [line for line in lines if line.startswith("f ")] == ["f 1 2 3"]
    back = load_obj(tmp_path / "t.obj")
    assert np.array_equal(back.vertices, mesh.vertices) and np.array_equal(back.faces, mesh.faces)


def test_obj_round_trip_is_exact(tmp_path):
    mesh = marching_cubes(sphere_field, 16)
    save_obj(mesh, tmp_path / "s.obj")
    back = load_obj(tmp_path / "s.obj")
    assert back.vertices.tobytes() == mesh.vertices.tobytes()
    assert np.array_equal(back.faces, mesh.faces)


def test_obj_polygons_and_texture_indices(tmp_path):
    (tmp_path / "q.obj").write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\n"
                                    "f 1/1/1 2/2/1 3/3/1 4/4/1\n")
    mesh = load_obj(tmp_path / "q.obj")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_errors(tmp_path):
    (tmp_path / "bad.obj").write_text("v 0 0 0\nf 1 x 2\n")
    with pytest.raises(ValueError, match=":2:"):
        load_obj(tmp_path / "bad.obj")
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0]], [[0, 1, 2]])
