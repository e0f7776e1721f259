"""Acceptance suite: one test per primary criterion.

The two synthetic reconstructions are fitted once per session (several minutes each
on one CPU core) and shared by the reconstruction, pruning and quantisation tests.
"""
import time

import numpy as np
import pytest
from test_csg import analytic_primitive, oracle

from quadcsg import cli, engine, metrics
from quadcsg.autodiff import finite_difference_check
from quadcsg.csg import evaluate_hard
from quadcsg.extraction import extract_csg_tree, mesh_model, validation_points
from quadcsg.losses import stage0_loss, stage12_loss
from quadcsg.primitives import feature_map
from quadcsg.sampling import (OrientedPointCloud, make_rng, sample_pointcloud_queries,
                              sample_voxel_queries, voxelize)
from quadcsg.shapes import SHAPES


def col(*v):
    return np.array(v, dtype=float).reshape(-1, 1)


# -- gradients -------------------------------------------------------------------------

GRAD_CFG = engine.FitConfig(p=16, c=4, latent_size=8, hidden=8)
FD_EPS = 1e-7


def random_bindings(stage, rng):
    """Random stage bindings, redrawn until every kink is well clear of the step size."""
    sg = engine.build_stage_graph(GRAD_CFG, stage, 64, straight_through=False)
    L, H, p, c = GRAD_CFG.latent_size, GRAD_CFG.hidden, GRAD_CFG.p, GRAD_CFG.c
    while True:
        b = {"latent": rng.normal(0, 1, (1, L)),
             "w1": rng.normal(0, 0.5, (L, H)), "b1": rng.normal(0, 0.5, (1, H)),
             "w2": rng.normal(0, 0.1, (H, 7 * p)), "b2": rng.normal(0, 0.1, (1, 7 * p)),
             "T": rng.uniform(0.05, 0.95, (p, c)),
             "features": feature_map(rng.uniform(-0.5, 0.5, (64, 3))).T,
             "gt": (rng.random((64, 1)) < 0.5).astype(float)}
        if stage == 0:
            b["W"] = rng.uniform(0.5, 1.5, (c, 1))
            b["ramp"] = np.full((c, 1), 0.3)
        sg.graph.evaluate(b)
        if sg.graph.kink_margin(skip_exact=True) > 100 * FD_EPS:
            return sg, b


def test_gradient_suite():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    errors = []
    for stage in (0, 1):
        for _ in range(20):
            sg, b = random_bindings(stage, rng)
            assert set(sg.graph.param_names) >= {"latent", "w1", "b1", "w2", "b2", "T"}
            assert stage or "W" in sg.graph.param_names
            errors.append(finite_difference_check(sg.graph, b, sg.loss.total, FD_EPS))
    elapsed = time.perf_counter() - start
    assert max(errors) < 1e-3
    assert elapsed < 30


# -- CSG oracle ------------------------------------------------------------------------

def test_csg_oracle_suite():
    rng = np.random.default_rng(77)
    agree = total = 0
    for _ in range(200):
        p = int(rng.integers(1, 9))
        c = int(rng.choice([2, 4]))
        prims = [analytic_primitive(rng) for _ in range(p)]
        P = np.array([row for row, _ in prims], dtype=float)
        T = (rng.random((p, c)) < 0.5).astype(float)
        pts = rng.uniform(-0.6, 0.6, (1000, 3))
        got = evaluate_hard(P, T, pts, n_left=c // 2)
        want = np.array([oracle([f(pt) for _, f in prims], T, c // 2) for pt in pts])
        agree += int(np.sum(got == want))
        total += len(pts)
    assert agree == total == 200_000


# -- losses ----------------------------------------------------------------------------

def test_loss_hand_values():
    T, W = np.full((4, 2), 0.5), np.ones((2, 1))
    assert abs(stage0_loss(col(0.8), col(0.1), col(0.0), T, W).reconstruction - 1.45) <= 1e-12
    assert abs(stage0_loss(col(0.2), col(0.9), col(0.0), T, W).reconstruction) <= 1e-12
    assert abs(stage12_loss(col(0.0), col(1.0), col(1.0), T, 10, 2.5).reconstruction) <= 1e-12
    assert abs(stage12_loss(col(0.3), col(1.0), col(1.0), T, 10, 2.5).reconstruction - 3.0) <= 1e-12
    assert abs(stage12_loss(col(0.0), col(0.0), col(0.0), T, 10, 2.5).reconstruction) <= 1e-12


# -- synthetic reconstruction ------------------------------------------------------------

FIT = engine.FitConfig(p=256, c=32, iterations=4000, learning_rate=1e-4,
                       precision="float32", seed=0)


class Reconstruction:
    def __init__(self, name):
        self.shape = SHAPES[name]
        start = time.perf_counter()
        self.grid = voxelize(self.shape.contains, 64)
        self.queries = sample_voxel_queries(self.grid, 32768, make_rng(FIT.seed, "queries"))
        self.fitted = engine.reconstruct(self.queries, FIT)
        self.tree, self.pruned = cli.derive_tree(self.fitted.hard, self.queries, FIT.seed)
        self.mesh = mesh_model(self.pruned, 128)
        self.seconds = time.perf_counter() - start
        self.validation = validation_points(self.queries.points, make_rng(FIT.seed, "prune"))

    def holdout(self):
        return sample_voxel_queries(self.grid, 32768, make_rng(FIT.seed, "holdout"))

    def chamfer(self):
        rng = make_rng(FIT.seed, "metrics")
        pts, normals = self.shape.sample_surface(8192, rng)
        recon = metrics.sample_surface(self.mesh, 8192, rng)
        return metrics.chamfer_distance(recon, metrics.SurfaceSampleSet(pts, normals))


@pytest.fixture(scope="session")
def sphere():
    return Reconstruction("sphere")


@pytest.fixture(scope="session")
def box():
    return Reconstruction("box_minus_cylinder")


def check_reconstruction(rec, min_accuracy):
    hold = rec.holdout()
    accuracy = np.mean(rec.fitted.occupancy(hold.points) == hold.occupancy)
    uniform = make_rng(FIT.seed, "holdout").uniform(-0.5, 0.5, (50000, 3))
    analytic = np.mean(rec.pruned.occupancy(uniform) == rec.shape.contains(uniform))
    cd = rec.chamfer()
    print(f"accuracy {accuracy:.4f} analytic {analytic:.4f} cd {cd:.4f} "
          f"primitives {rec.tree.num_primitives} convexes {rec.tree.num_convexes} "
          f"seconds {rec.seconds:.0f}")
    assert accuracy >= min_accuracy
    assert analytic >= min_accuracy
    assert cd <= 1.5
    assert rec.seconds <= 15 * 60


def test_synthetic_sphere(sphere):
    check_reconstruction(sphere, 0.97)


def test_synthetic_box_minus_cylinder(box):
    check_reconstruction(box, 0.93)
    assert len(box.tree.right) >= 1


# -- pruning ---------------------------------------------------------------------------

def test_pruning_suite(sphere, box):
    for rec in (sphere, box):
        before = rec.fitted.hard.occupancy(rec.validation)
        assert np.array_equal(rec.pruned.occupancy(rec.validation), before)
        assert np.array_equal(extract_csg_tree(rec.pruned).occupancy(rec.validation), before)
    assert box.tree.num_primitives <= 30
    assert box.tree.num_convexes <= 8


# -- quantisation ----------------------------------------------------------------------

def test_quantization_suite(sphere, box):
    assert FIT.eta == 0.01
    for rec in (sphere, box):
        hold = rec.holdout()
        soft = rec.fitted.soft_occupancy(hold.points)
        hard = rec.fitted.occupancy(hold.points)
        assert np.mean(soft != hard) <= 0.02


# -- metrics ---------------------------------------------------------------------------

def test_metrics_suite():
    rng = np.random.default_rng(11)
    pts, normals = SHAPES["sphere"].sample_surface(4000, rng)
    X = metrics.SurfaceSampleSet(pts, normals)
    assert metrics.chamfer_distance(X, X) == 0.0
    assert abs(metrics.normal_consistency(X, X) - 1.0) <= 1e-12
    pts2, normals2 = SHAPES["sphere"].sample_surface(4000, rng)
    assert metrics.edge_chamfer_distance(X, metrics.SurfaceSampleSet(pts2, normals2)) == 0.0

    for k in (1, 64, 500):
        a, b = rng.uniform(-0.5, 0.5, (k, 3)), rng.uniform(-0.5, 0.5, (k, 3))
        d2, idx = metrics.nearest(a, b)
        full = ((a[:, None] - b[None]) ** 2).sum(-1)
        assert np.array_equal(idx, full.argmin(axis=1))
        assert np.allclose(d2, full.min(axis=1), rtol=1e-12, atol=0)

    cloud_pts, cloud_normals = SHAPES["sphere"].sample_surface(8192, rng)
    q = sample_pointcloud_queries(OrientedPointCloud(cloud_pts, cloud_normals),
                                  rng=make_rng(0, "queries"))
    assert len(q) == 65536


# -- determinism -----------------------------------------------------------------------

def test_determinism(tmp_path):
    from conftest import FAST_FIT
    src = tmp_path / "sphere.capv"
    assert cli.main(["synth", "--shape", "sphere", "--out", str(src), "--resolution", "16"]) == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code = cli.main(["reconstruct", "--input", str(src), "--input-type", "voxel",
                         "--out-dir", str(out), "--seed", "0", *FAST_FIT])
        assert code == 0
        outs.append(out)
    for name in ("tree.json", "model.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
