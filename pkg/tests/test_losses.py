import numpy as np
import pytest

from quadcsg.autodiff import Graph, ShapeError
from quadcsg.losses import (W_LEFT, W_RIGHT, selection_regularizer, stage0_loss, stage12_loss,
                            stage12_sides, weight_regularizer)


def col(*v):
    return np.array(v, dtype=float).reshape(-1, 1)


T_OK = np.full((4, 2), 0.5)
W_ONE = np.ones((2, 1))


def test_selection_regularizer_examples():
    assert selection_regularizer(np.random.default_rng(0).uniform(0, 1, (5, 3))) == 0.0
    assert selection_regularizer([[1.5]]) == pytest.approx(0.5)
    assert selection_regularizer([[-0.2]]) == pytest.approx(0.2)


def test_weight_regularizer_examples():
    assert weight_regularizer(np.ones((4, 1))) == 0.0
    assert weight_regularizer([[1e-5]]) == pytest.approx(0.99999)
    assert weight_regularizer(col(0.5, 1.5)) == pytest.approx(1.0)


def test_stage0_perfect_fit():
    out = stage0_loss(col(1.0), col(0.0), col(1.0), T_OK, W_ONE)
    assert out.total == 0.0


def test_stage0_hand_values():
    assert stage0_loss(col(0.8), col(0.1), col(0.0), T_OK, W_ONE).reconstruction == pytest.approx(1.45, abs=1e-12)
    assert stage0_loss(col(0.2), col(0.9), col(0.0), T_OK, W_ONE).reconstruction == 0.0


def test_stage0_total_is_sum_of_terms():
    out = stage0_loss(col(0.8, 0.3), col(0.1, 0.6), col(0.0, 1.0), [[1.5, -0.2]], col(0.5, 1.5))
    assert out.selection == pytest.approx(0.7)
    assert out.weight == pytest.approx(1.0)
    assert out.total == pytest.approx(out.reconstruction + 0.7 + 1.0, abs=1e-15)


def test_stage12_hand_values():
    assert stage12_loss(col(0.0), col(1.0), col(1.0), T_OK).reconstruction == 0.0
    assert stage12_loss(col(0.3), col(1.0), col(1.0), T_OK).reconstruction == pytest.approx(3.0, abs=1e-12)
    assert stage12_loss(col(0.0), col(0.0), col(0.0), T_OK).reconstruction == 0.0
    # with a_r = 0.4 the left mask switches on as well; the example concerns L_r
    left, right = stage12_sides(col(0.0), col(0.4), col(0.0))
    assert left == pytest.approx(1.0)
    assert right == pytest.approx(1.0, abs=1e-12)


def test_default_weights():
    assert (W_LEFT, W_RIGHT) == (10.0, 2.5)


def test_stage12_has_no_weight_term():
    out = stage12_loss(col(0.3), col(1.0), col(1.0), [[2.0]])
    assert out.weight == 0.0
    assert out.total == pytest.approx(3.0 + 1.0)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        stage0_loss(col(0.1, 0.2), col(0.1), col(0.0), T_OK, W_ONE)
    with pytest.raises(ShapeError):
        stage12_loss(col(0.1), col(0.1, 0.2), col(0.0), T_OK)


def test_losses_are_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 20))
        gt = (rng.random((n, 1)) < 0.5).astype(float)
        s0 = stage0_loss(rng.random((n, 1)), rng.random((n, 1)), gt, T_OK, W_ONE)
        s1 = stage12_loss(rng.exponential(0.3, (n, 1)), rng.exponential(0.3, (n, 1)), gt, T_OK)
        assert s0.reconstruction >= 0 and s1.reconstruction >= 0


def test_left_weight_slope():
    # g = 1 and a_r large: L_l grows by w_l / n per unit of a_l
    n = 4
    gt = np.ones((n, 1))
    a_r = np.full((n, 1), 1.0)
    base = np.full((n, 1), 0.1)
    bumped = base.copy()
    bumped[2] += 0.05
    l0, _ = stage12_sides(base, a_r, gt)
    l1, _ = stage12_sides(bumped, a_r, gt)
    assert (l1 - l0) / 0.05 == pytest.approx(W_LEFT / n, rel=1e-9)


def test_mask_flip_changes_only_the_masked_term():
    # g = 0, a_l = 0.8: M_l depends on whether a_r < 0.5
    on = stage0_loss(col(0.8), col(0.4), col(0.0), T_OK, W_ONE).reconstruction
    off = stage0_loss(col(0.8), col(0.6), col(0.0), T_OK, W_ONE).reconstruction
    assert on == pytest.approx(0.8 ** 2 + 0.6 ** 2)
    assert off == pytest.approx(0.4 ** 2)


def test_masks_carry_no_gradient():
    g = Graph()
    a_l, a_r = g.param("a_l", (1, 1)), g.param("a_r", (1, 1))
    out = stage0_loss(a_l, a_r, g.const([[0.0]]), g.const(T_OK), g.const(W_ONE))
    g.evaluate({"a_l": [[0.2]], "a_r": [[0.9]]})
    grads = g.backward(out.total)
    # both masks are off, and the mask indicators themselves give no gradient
    assert grads["a_l"][0, 0] == 0.0 and grads["a_r"][0, 0] == 0.0
