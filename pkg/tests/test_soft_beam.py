import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softbeam import autodiff as ad
from softbeam.checks import convergence_check, hinge_zero_fixture
from softbeam.costs import CostFunction, direct_loss
from softbeam.errors import ContractError, InputError
from softbeam.hard_beam import beam_search, beam_search_batch, greedy_decode, rescore
from softbeam.model import ModelSizes, init_params
from softbeam.soft_beam import (
    soft_beam_decode,
    soft_beam_decode_batch,
    soft_beam_forward,
    soft_beam_loss,
    soft_hinge_forward,
    soft_hinge_loss,
)

from .conftest import tiny_model

HAMMING4 = CostFunction("hamming", 4)


def wide_model(seed, n_labels=4):
    """Random model with a wide score spread, so alpha = 1e4 is effectively hard."""
    sizes = ModelSizes(n_inputs=8, n_labels=n_labels, hidden=4, label_dim=3, input_dim=3)
    return init_params(seed, 5.0, sizes)


class TestSoftDirect:
    def test_zero_cost_gives_zero_loss_and_grads(self):
        m = tiny_model(seed=2)
        L, _ = soft_beam_forward([1, 2, 3, 4], [0, 1, 2, 3], m, 3, 1.0, CostFunction("zero", 4))
        assert L.item() == 0.0
        L.backward()
        for p in m.parameters():
            assert p.grad is None or not np.any(p.grad)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            soft_beam_forward([1, 2, 3], [0, 1], tiny_model(), 2, 1.0, HAMMING4)

    def test_bad_args(self):
        with pytest.raises(ContractError):
            soft_beam_forward([1, 2], [0, 1], tiny_model(), 0, 1.0, HAMMING4)
        with pytest.raises(ContractError):
            soft_beam_forward([1, 2], [0, 1], tiny_model(), 2, 0.0, HAMMING4)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_hard_beam_at_large_alpha(self, seed):
        m = wide_model(seed)
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 8, 4), rng.integers(0, 4, 4)
        hard = beam_search(x, m, 3)
        if min(g[0] for g in hard.trace.gaps) < 1e-3:
            pytest.skip("near-tie draw")
        L, _ = soft_beam_forward(x, y, m, 3, 1e4, HAMMING4)
        assert L.item() == pytest.approx(direct_loss(hard.labels, y, HAMMING4), abs=1e-3)

    @pytest.mark.parametrize("seed", range(5))
    def test_k1_matches_greedy(self, seed):
        m = wide_model(seed + 20)
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 8, 4), rng.integers(0, 4, 4)
        L, _ = soft_beam_forward(x, y, m, 1, 1e4, HAMMING4)
        assert L.item() == pytest.approx(direct_loss(greedy_decode(x, m).labels, y, HAMMING4), abs=1e-3)

    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 1.0, 5.0, 50.0]), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed, alpha, k):
        rng = np.random.default_rng(seed)
        m = tiny_model(seed=seed % 1000, scale=1.0)
        T = int(rng.integers(1, 6))
        x, y = rng.integers(0, 8, T), rng.integers(0, 4, T)
        cost = CostFunction("weighted_hamming", 4, default_id=0)
        with ad.no_grad():
            L, trace = soft_beam_forward(x, y, m, k, alpha, cost)
        assert 0.0 <= L.item() <= T * cost.local_costs(y).max() + 1e-12
        for back in trace.backpointers:
            np.testing.assert_allclose(back.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_deterministic(self):
        m = tiny_model(seed=3)
        a = soft_beam_forward([1, 2, 3], [1, 1, 0], m, 2, 2.0, HAMMING4)[0].item()
        b = soft_beam_forward([1, 2, 3], [1, 1, 0], m, 2, 2.0, HAMMING4)[0].item()
        assert a == b

    def test_batch_matches_single(self):
        m = tiny_model(seed=5, scale=1.0)
        X = np.array([[1, 2, 3], [4, 5, 6], [7, 0, 1]])
        Y = np.array([[0, 1, 2], [3, 3, 3], [1, 0, 1]])
        with ad.no_grad():
            batch = soft_beam_loss(X, Y, m, 3, 2.0, HAMMING4).data
            single = [soft_beam_forward(X[b], Y[b], m, 3, 2.0, HAMMING4)[0].item() for b in range(3)]
        np.testing.assert_allclose(batch, single, atol=1e-12)

    @pytest.mark.parametrize("alpha", [1.0, 5.0])
    def test_gradient(self, alpha):
        m = tiny_model(seed=11, n_labels=3, hidden=3, n_inputs=4)
        x, y = np.array([1, 3, 0]), np.array([2, 0, 1])
        cost = CostFunction("hamming", 3)
        report = ad.check_gradients(lambda: soft_beam_forward(x, y, m, 2, alpha, cost)[0], m.params)
        assert max(report.values()) < 1e-4

    def test_convergence_family(self):
        cases, _ = convergence_check(n_models=10, seed=3)
        assert all(c.loss_error < 1e-3 and c.same_output for c in cases)


class TestSoftHinge:
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.5, 1.0, 10.0, 1e4]))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed, alpha):
        rng = np.random.default_rng(seed)
        m = tiny_model(seed=seed % 997, scale=float(rng.uniform(0.1, 3.0)))
        T = int(rng.integers(1, 6))
        x, y = rng.integers(0, 8, T), rng.integers(0, 4, T)
        with ad.no_grad():
            assert soft_hinge_forward(x, y, m, 3, alpha, HAMMING4).item() >= 0.0

    def test_zero_on_dominant_gold(self):
        m, x, y, margin = hinge_zero_fixture(seed=0)
        assert margin >= 1.0
        value = soft_hinge_forward(x, y, m, 3, 1e4, CostFunction("zero", m.sizes.n_labels)).item()
        assert value < 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_cost_augmented_beam(self, seed):
        m = wide_model(seed + 40)
        rng = np.random.default_rng(seed)
        x, y = rng.integers(0, 8, 4), rng.integers(0, 4, 4)
        offsets = HAMMING4.local_costs(y)[None]
        _, best, trace = beam_search_batch(x[None], m, 3, score_offsets=offsets, keep_trace=True)
        if min(g[0] for g in trace.gaps) < 1e-3:
            pytest.skip("near-tie draw")
        expected = max(0.0, best[0] - rescore(x, y, m))
        assert soft_hinge_forward(x, y, m, 3, 1e4, HAMMING4).item() == pytest.approx(expected, abs=1e-3)

    def test_batch_matches_single(self):
        m = tiny_model(seed=6, scale=1.0)
        X, Y = np.array([[1, 2], [3, 4]]), np.array([[0, 1], [2, 3]])
        with ad.no_grad():
            batch = soft_hinge_loss(X, Y, m, 2, 1.0, HAMMING4).data
            single = [soft_hinge_forward(X[b], Y[b], m, 2, 1.0, HAMMING4).item() for b in range(2)]
        np.testing.assert_allclose(batch, single, atol=1e-12)


class TestSoftDecode:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_hard_beam_at_large_alpha(self, seed):
        m = wide_model(seed + 60)
        x = np.random.default_rng(seed).integers(0, 8, 4)
        hard = beam_search(x, m, 3)
        if min(g[0] for g in hard.trace.gaps) < 1e-3:
            pytest.skip("near-tie draw")
        np.testing.assert_array_equal(soft_beam_decode(x, m, 3, 1e4).labels, hard.labels)

    def test_k1_follows_argmax_of_soft_states(self):
        m = tiny_model(seed=4)
        res = soft_beam_decode(np.array([1, 2, 3]), m, 1, 1.0)
        # with one element every backpointer is 0 and each label is the MAP label
        for t, labels in enumerate(res.trace.map_labels):
            assert labels[0, 0] == res.labels[t]
            assert res.trace.map_backpointers[t][0, 0] == 0

    def test_output_length_and_batch(self):
        m = tiny_model(seed=4)
        X = np.array([[1, 2, 3, 4, 5], [5, 4, 3, 2, 1]])
        labels, _, _ = soft_beam_decode_batch(X, m, 3, 0.5)
        assert labels.shape == (2, 5)
        for b in range(2):
            np.testing.assert_array_equal(labels[b], soft_beam_decode(X[b], m, 3, 0.5).labels)
