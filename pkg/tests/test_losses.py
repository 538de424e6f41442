import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carmnav.anatomy import SKELETON_EDGES
from carmnav.losses import nll_loss, skeleton_pose_loss, total_loss

finite_floats = st.floats(min_value=-100, max_value=100, allow_nan=False)


class TestNllLoss:
    def test_perfect_prediction_unit_variance_is_zero(self):
        target = np.array([[0.1, -0.2, 0.3]])
        loss, _, _ = nll_loss(target, np.ones((1, 3)), target, beta=1.0)
        assert loss == 0.0

    def test_hand_evaluated_single_axis(self):
        # mu=0, target=2, var=4, beta=1 -> 0.5*(log 4 + 4/4)
        loss, _, _ = nll_loss(np.array([[0.0]]), np.array([[4.0]]),
                              np.array([[2.0]]), beta=1.0)
        assert np.isclose(loss, 0.5 * (np.log(4.0) + 1.0))
        assert np.isclose(loss, 1.1931471805599454)

    def test_logvar_gradient_stationary_at_residual_variance(self):
        # var equal to squared residual makes the variance gradient vanish
        residual = 0.7
        loss, _, grad_logvar = nll_loss(
            np.array([[0.0]]), np.array([[residual**2]]),
            np.array([[residual]]), beta=1.0)
        assert grad_logvar[0, 0] == 0.0

    def test_unit_variance_reduces_to_half_squared_error(self):
        rng = np.random.default_rng(0)
        mean = rng.normal(size=(5, 14, 3))
        target = rng.normal(size=(5, 14, 3))
        loss, _, _ = nll_loss(mean, np.ones_like(mean), target, beta=3.7)
        half_se = 0.5 * ((target - mean) ** 2).sum(axis=-1).mean()
        assert np.isclose(loss, half_se)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            nll_loss(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-5
        worst = 0.0
        for _ in range(100):
            shape = (2, 3, 3)
            mean = rng.normal(size=shape)
            logvar = rng.uniform(-2.0, 1.0, size=shape)
            target = rng.normal(size=shape)
            beta = rng.uniform(0.2, 2.0)
            loss, grad_mean, grad_logvar = nll_loss(mean, np.exp(logvar), target, beta)

            i = tuple(rng.integers(0, s) for s in shape)
            up, down = mean.copy(), mean.copy()
            up[i] += h
            down[i] -= h
            fd_mean = (nll_loss(up, np.exp(logvar), target, beta)[0]
                       - nll_loss(down, np.exp(logvar), target, beta)[0]) / (2 * h)
            worst = max(worst, abs(grad_mean[i] - fd_mean) / max(1.0, abs(fd_mean)))

            up, down = logvar.copy(), logvar.copy()
            up[i] += h
            down[i] -= h
            fd_logvar = (nll_loss(mean, np.exp(up), target, beta)[0]
                         - nll_loss(mean, np.exp(down), target, beta)[0]) / (2 * h)
            worst = max(worst, abs(grad_logvar[i] - fd_logvar) / max(1.0, abs(fd_logvar)))
        assert worst < 1e-4


class TestSkeletonPoseLoss:
    def test_identical_graphs_give_zero(self):
        rng = np.random.default_rng(0)
        positions = rng.random((14, 3))
        loss, grad = skeleton_pose_loss(positions, positions, SKELETON_EDGES)
        assert loss == 0.0
        assert not grad.any()

    def test_single_edge_hand_value(self):
        # predicted length 5 vs true length 3 -> |5 - 3| = 2
        pred = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        true = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        loss, _ = skeleton_pose_loss(pred, true, [(1, 2)])
        assert loss == 2.0

    def test_translation_invariance_exact_on_dyadic_inputs(self):
        # positions on a dyadic grid with a dyadic shift: the additions
        # are exact, so pairwise differences and the loss are bit-identical
        rng = np.random.default_rng(1)
        pred = np.round(rng.random((14, 3)) * 2**16) / 2**16
        true = rng.random((14, 3))
        shift = np.array([0.25, -1.5, 3.0])
        base, _ = skeleton_pose_loss(pred, true, SKELETON_EDGES)
        shifted, _ = skeleton_pose_loss(pred + shift, true, SKELETON_EDGES)
        assert shifted == base

    def test_translation_invariance_generic(self):
        rng = np.random.default_rng(5)
        pred = rng.random((14, 3))
        true = rng.random((14, 3))
        base, _ = skeleton_pose_loss(pred, true, SKELETON_EDGES)
        shifted, _ = skeleton_pose_loss(pred + rng.normal(size=3), true, SKELETON_EDGES)
        assert np.isclose(shifted, base, rtol=1e-12, atol=1e-12)

    def test_nonnegative_and_zero_iff_lengths_match(self):
        rng = np.random.default_rng(2)
        true = np.round(rng.random((14, 3)) * 2**16) / 2**16
        # a rigid (exact) translation preserves every edge length
        loss, _ = skeleton_pose_loss(true + 0.125, true, SKELETON_EDGES)
        assert loss == 0.0
        # perturbing one endpoint breaks at least one edge length
        perturbed = true.copy()
        perturbed[0] += 0.05
        loss, _ = skeleton_pose_loss(perturbed, true, SKELETON_EDGES)
        assert loss > 0.0

    def test_coincident_endpoints_use_zero_subgradient(self):
        pred = np.zeros((2, 3))
        true = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        loss, grad = skeleton_pose_loss(pred, true, [(1, 2)])
        assert loss == 1.0
        assert np.all(np.isfinite(grad))
        assert not grad.any()

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        worst = 0.0
        for _ in range(100):
            pred = rng.random((14, 3)) * 2.0
            true = rng.random((14, 3)) * 2.0
            _, grad = skeleton_pose_loss(pred, true, SKELETON_EDGES)
            i = (int(rng.integers(0, 14)), int(rng.integers(0, 3)))
            up, down = pred.copy(), pred.copy()
            up[i] += h
            down[i] -= h
            fd = (skeleton_pose_loss(up, true, SKELETON_EDGES)[0]
                  - skeleton_pose_loss(down, true, SKELETON_EDGES)[0]) / (2 * h)
            worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(fd)))
        assert worst < 1e-4

    def test_batched_matches_mean_of_singles(self):
        rng = np.random.default_rng(4)
        pred = rng.random((3, 14, 3))
        true = rng.random((3, 14, 3))
        batch_loss, _ = skeleton_pose_loss(pred, true, SKELETON_EDGES)
        singles = [skeleton_pose_loss(pred[i], true[i], SKELETON_EDGES)[0]
                   for i in range(3)]
        assert np.isclose(batch_loss, np.mean(singles))


class TestTotalLoss:
    def test_zero_weight_is_nll_only(self):
        assert total_loss(2.5, 100.0, 0.0) == 2.5

    def test_hand_value(self):
        assert total_loss(2.0, 0.5, 1.0) == 2.5

    @settings(max_examples=50)
    @given(nll=finite_floats, skeleton=st.floats(min_value=0, max_value=100),
           lam=st.floats(min_value=0, max_value=100))
    def test_weighted_sum(self, nll, skeleton, lam):
        assert total_loss(nll, skeleton, lam) == nll + lam * skeleton

    def test_ablation_weights_accepted(self):
        for lam in (0.0, 0.5, 1.0, 5.0, 10.0):
            assert np.isfinite(total_loss(1.0, 1.0, lam))
