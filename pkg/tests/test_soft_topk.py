import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softbeam import autodiff as ad
from softbeam.autodiff import Tensor
from softbeam.errors import ContractError, NumericError
from softbeam.hard_beam import top_k_argmax
from softbeam.soft_topk import continuous_top_k_argmax, soft_backpointer, vocab_contribution

S = np.array([[5.0, 1.0], [3.0, 2.0]])


def gapped_scores(rng, shape, gap):
    """Random matrix whose sorted entries are at least ``gap`` apart."""
    n = int(np.prod(shape))
    steps = gap + rng.exponential(1.0, size=n)
    return rng.permutation(np.cumsum(steps) - steps.sum() / 2).reshape(shape)


class TestExamples:
    def test_alpha_one_values(self):
        # p_1 proportional to exp(-(s - 5)^2) = exp(-{0, 16, 4, 9})
        oracle = np.exp(-np.array([0.0, 16.0, 4.0, 9.0]))
        oracle /= oracle.sum()
        p1 = continuous_top_k_argmax(S, 2, 1.0)[0].data.reshape(-1)
        np.testing.assert_allclose(p1, oracle, atol=1e-12)
        assert p1[0] == pytest.approx(0.98189, abs=1e-5)
        np.testing.assert_allclose(p1[1:], [1.1e-7, 0.01794, 0.00012], atol=1e-4)

    def test_alpha_one_backpointer(self):
        p1 = continuous_top_k_argmax(S, 2, 1.0)[0]
        p = p1.data
        np.testing.assert_allclose(soft_backpointer(p1).data, [p[0, 0] + p[0, 1], p[1, 0] + p[1, 1]], atol=1e-15)
        np.testing.assert_allclose(soft_backpointer(p1).data, [0.98189 + 1.1e-7, 0.01794 + 0.00012], atol=1e-4)

    def test_peaked_limit(self):
        sel = continuous_top_k_argmax(S, 2, 1e4)
        assert sel[0].data[0, 0] > 1 - 1e-6
        assert sel[1].data[1, 0] > 1 - 1e-6

    def test_all_equal_uniform(self):
        p = continuous_top_k_argmax(np.full((2, 3), 0.7), 1, 3.0)[0].data
        np.testing.assert_allclose(p, 1 / 6, atol=1e-15)

    def test_one_hot_sums(self):
        p = np.zeros((3, 4))
        p[1, 2] = 1.0
        np.testing.assert_array_equal(soft_backpointer(Tensor(p)).data, [0, 1, 0])
        np.testing.assert_array_equal(vocab_contribution(Tensor(p)).data, [0, 0, 1, 0])

    def test_uniform_sums(self):
        p = Tensor(np.full((2, 5), 0.1))
        np.testing.assert_allclose(soft_backpointer(p).data, 0.5)
        np.testing.assert_allclose(vocab_contribution(p).data, 0.2)

    def test_tie_gives_equal_matrices(self):
        sel = continuous_top_k_argmax(np.array([[4.0, 4.0], [1.0, 0.0]]), 2, 2.0)
        np.testing.assert_array_equal(sel[0].data, sel[1].data)


class TestErrors:
    def test_non_finite(self):
        with pytest.raises(NumericError):
            continuous_top_k_argmax(np.array([[1.0, np.nan]]), 1, 1.0)

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ContractError):
            continuous_top_k_argmax(S, 1, alpha)

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            continuous_top_k_argmax(S, 5, 1.0)


class TestProperties:
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 1.0, 10.0, 1e4]))
    @settings(max_examples=60, deadline=None)
    def test_simplex(self, seed, alpha):
        rng = np.random.default_rng(seed)
        s = rng.normal(scale=3.0, size=(3, 5))
        sel = continuous_top_k_argmax(s, 3, alpha)
        for i in range(3):
            p = sel[i].data
            assert np.all(p >= 0)
            assert abs(p.sum() - 1) < 1e-9
            assert abs(soft_backpointer(sel[i]).data.sum() - 1) < 1e-9
            assert abs(vocab_contribution(sel[i]).data.sum() - 1) < 1e-9

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_hard_limit_with_clear_gaps(self, seed):
        rng = np.random.default_rng(seed)
        s = gapped_scores(rng, (3, 4), gap=0.05)
        sel = continuous_top_k_argmax(s, 3, 1e4)
        rows, cols = top_k_argmax(s, 3)
        for i in range(3):
            p = sel[i].data
            assert np.unravel_index(p.argmax(), p.shape) == (rows[i], cols[i])
            assert p.max() > 1 - 1e-6

    def test_small_gap_is_not_peaked_at_1e4(self):
        # alpha * gap^2 = 1e-2: the two closest entries share the mass almost evenly
        s = np.array([[1.0, 1.0 - 1e-3], [-3.0, -5.0]])
        p = continuous_top_k_argmax(s, 1, 1e4)[0].data
        assert p.argmax() == 0
        assert p.max() < 0.51

    @given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_shift_invariance(self, seed, c):
        s = np.random.default_rng(seed).normal(size=(2, 4))
        a = continuous_top_k_argmax(s, 2, 2.0).p.data
        b = continuous_top_k_argmax(s + c, 2, 2.0).p.data
        np.testing.assert_allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 5.0])
    def test_gradient(self, alpha):
        rng = np.random.default_rng(7)
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 4)))
        report = ad.check_gradients(
            lambda: ad.reduce_sum(continuous_top_k_argmax(s, 3, alpha).p * w), {"s": s}
        )
        assert report["s"] < 1e-4

    def test_detach_changes_gradient(self):
        s1 = Tensor(S.copy(), requires_grad=True)
        s2 = Tensor(S.copy(), requires_grad=True)
        ad.reduce_sum(continuous_top_k_argmax(s1, 2, 1.0).p[0, 1, :]).backward()
        ad.reduce_sum(continuous_top_k_argmax(s2, 2, 1.0, detach_max=True).p[0, 1, :]).backward()
        assert not np.allclose(s1.grad, s2.grad)
