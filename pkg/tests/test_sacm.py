import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfadet import autodiff as ad
from sfadet import sacm
from sfadet.autodiff import Tensor

from oracles import check_grad, gram_loops, sacm_loss_loops


def randf(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


class TestGram:
    def test_zero_feature_zero_gram(self):
        g = sacm.gram(Tensor(np.zeros((2, 3, 4, 4))))
        np.testing.assert_array_equal(g.data, np.zeros((3, 3)))

    def test_hand_outer_product(self):
        # single pixel, channels [a, b]
        a, b = 2.0, -3.0
        f = Tensor(np.array([a, b], dtype=np.float32).reshape(1, 2, 1, 1))
        g = sacm.gram(f)
        np.testing.assert_allclose(
            g.data, [[a * a, a * b], [a * b, b * b]], rtol=1e-6
        )

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(0)
        f = randf(rng, 2, 4, 3, 5)
        flat = f.reshape(2, 4, 15)
        perm = rng.permutation(15)
        shuf = flat[:, :, perm].reshape(2, 4, 3, 5)
        g1 = sacm.gram(Tensor(f)).data
        g2 = sacm.gram(Tensor(shuf)).data
        np.testing.assert_allclose(g1, g2, rtol=1e-5)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        g = sacm.gram(Tensor(randf(rng, 3, 6, 4, 4))).data
        np.testing.assert_allclose(g, g.T, atol=1e-5)

    def test_positive_semidefinite_rayleigh(self):
        rng = np.random.default_rng(2)
        g = sacm.gram(Tensor(randf(rng, 2, 5, 3, 3))).data.astype(np.float64)
        for _ in range(50):
            v = rng.normal(size=5)
            v /= np.linalg.norm(v)
            assert v @ g @ v >= -1e-5

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        f = randf(rng, 2, 4, 3, 3)
        np.testing.assert_allclose(
            sacm.gram(Tensor(f)).data, gram_loops(f), rtol=1e-5
        )

    def test_normalize_divides_by_positions(self):
        rng = np.random.default_rng(4)
        f = randf(rng, 1, 3, 2, 5)
        g = sacm.gram(Tensor(f)).data
        gn = sacm.gram(Tensor(f), normalize=True).data
        np.testing.assert_allclose(gn, g / 10.0, rtol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ad.ShapeError):
            sacm.gram(Tensor(np.zeros((0, 3, 2, 2))))

    def test_gram_values_matches_tensor_path(self):
        rng = np.random.default_rng(5)
        f = randf(rng, 2, 3, 2, 2)
        np.testing.assert_array_equal(
            sacm.gram_values(f), sacm.gram(Tensor(f)).data
        )


class TestSacmLoss:
    def test_identical_features_zero(self):
        rng = np.random.default_rng(6)
        f = randf(rng, 2, 4, 3, 3)
        assert float(sacm.sacm_loss(Tensor(f), Tensor(f)).data) == 0.0

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(7)
        a, b = randf(rng, 2, 4, 3, 3), randf(rng, 2, 4, 3, 3)
        l1 = float(sacm.sacm_loss(Tensor(a), Tensor(b)).data)
        l2 = float(sacm.sacm_loss(Tensor(b), Tensor(a)).data)
        assert l1 == pytest.approx(l2, rel=1e-6)

    def test_permutation_of_either_side_invariant(self):
        rng = np.random.default_rng(8)
        a, b = randf(rng, 1, 3, 2, 4), randf(rng, 1, 3, 2, 4)
        perm = rng.permutation(8)
        a_shuf = a.reshape(1, 3, 8)[:, :, perm].reshape(1, 3, 2, 4)
        l1 = float(sacm.sacm_loss(Tensor(a), Tensor(b)).data)
        l2 = float(sacm.sacm_loss(Tensor(a_shuf), Tensor(b)).data)
        assert l1 == pytest.approx(l2, rel=1e-4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            sacm.sacm_loss(Tensor(np.zeros((1, 3, 2, 2))),
                           Tensor(np.zeros((1, 4, 2, 2))))

    def test_different_spatial_sizes_allowed(self):
        rng = np.random.default_rng(9)
        a, b = randf(rng, 1, 3, 2, 2), randf(rng, 1, 3, 4, 4)
        assert float(sacm.sacm_loss(Tensor(a), Tensor(b)).data) > 0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(1, 4))
        w = int(rng.integers(1, 4))
        a, b = randf(rng, n, c, h, w), randf(rng, n, c, h, w)
        fast = float(sacm.sacm_loss(Tensor(a), Tensor(b)).data)
        slow = sacm_loss_loops(a, b)
        assert fast == pytest.approx(slow, rel=1e-5, abs=1e-7)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = randf(rng, 1, 3, 2, 2), randf(rng, 1, 3, 2, 2)
        assert float(sacm.sacm_loss(Tensor(a), Tensor(b)).data) >= 0.0


class TestGradients:
    @pytest.mark.parametrize("which", [0, 1])
    def test_loss_gradients(self, which):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a = randf(rng, 1, 3, 2, 2)
            b = randf(rng, 1, 3, 2, 2)
            check_grad(lambda fa, fb: sacm.sacm_loss(fa, fb), [a, b],
                       which=which)

    def test_gram_gradient_via_frobenius(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            f = randf(rng, 2, 3, 2, 2)
            check_grad(lambda t: ad.frobenius_sq(sacm.gram(t)), [f])

    def test_normalized_loss_gradient(self):
        rng = np.random.default_rng(12)
        a = randf(rng, 1, 3, 2, 3)
        b = randf(rng, 1, 3, 2, 3)
        check_grad(
            lambda fa, fb: sacm.sacm_loss(fa, fb, normalize=True), [a, b]
        )
