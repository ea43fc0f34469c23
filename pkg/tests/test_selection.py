import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from collabfuse.autodiff import Tape, Tensor, grad_check
from collabfuse.selection import (
    ACCEPT, REJECT, SelectionPolicy, decide_frame, gumbel_noise, hard_select, policy_logits, soft_select,
    straight_through,
)


class _FixedU:
    """Stands in for a Generator whose uniform draws are fixed."""

    def __init__(self, u):
        self.u = u

    def uniform(self, low, high, size=None):
        return np.full(size if size is not None else (), self.u)


class TestPolicy:
    def test_zero_weights_give_bias(self, rng):
        policy = SelectionPolicy(rng)
        for p in policy.parameters():
            p.data[...] = 0.0
        np.testing.assert_array_equal(policy_logits(0.3, 1.2, policy).data, [0.0, 0.0])

    def test_deterministic(self, rng):
        policy = SelectionPolicy(rng)
        assert np.array_equal(policy_logits(0.3, 1.2, policy).data, policy_logits(0.3, 1.2, policy).data)

    def test_token_gradients(self, rng):
        policy = SelectionPolicy(rng)
        ego, nbr = Tensor(0.4), Tensor(1.7)
        assert grad_check(lambda a, b: policy_logits(a, b, policy)[ACCEPT], [ego, nbr]) < 1e-4

    def test_broadcast_ego_over_neighbors(self, rng):
        policy = SelectionPolicy(rng)
        batch = policy_logits(Tensor(np.array([[0.5]])), Tensor(np.array([[0.1, 0.9, 2.0]])), policy)
        assert batch.shape == (1, 3, 2)
        np.testing.assert_allclose(batch.data[0, 1], policy_logits(0.5, 0.9, policy).data, atol=1e-14)


class TestGumbel:
    def test_fixed_points(self):
        assert gumbel_noise(_FixedU(math.exp(-1))) == pytest.approx(0.0, abs=1e-15)
        assert gumbel_noise(_FixedU(0.5)) == pytest.approx(-math.log(math.log(2)), abs=1e-12)

    def test_mean_is_euler_gamma(self):
        g = gumbel_noise(np.random.default_rng(0), 1_000_000)
        assert abs(g.mean() - np.euler_gamma) < 0.01

    def test_finite(self):
        assert np.all(np.isfinite(gumbel_noise(np.random.default_rng(1), 100_000)))


class TestSoftHard:
    def test_soft_examples(self):
        assert soft_select(Tensor([0.0, 0.0]), [0, 0]).item() == 0.5
        assert soft_select(Tensor([0.0, math.log(3)]), [0, 0]).item() == pytest.approx(0.75, abs=1e-15)
        assert soft_select(Tensor([0.0, 1.0]), [0, 0], temperature=0.01).item() > 0.99

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            soft_select(Tensor([0.0, 0.0]), [0, 0], temperature=0.0)

    def test_hard_examples(self):
        assert hard_select([5.0, 0.0], [0, 0]) == REJECT
        assert hard_select([0.0, 5.0], [0, 0]) == ACCEPT
        assert hard_select([1.0, 1.0]) == REJECT  # ties go to Reject

    def test_accept_frequency(self):
        rng = np.random.default_rng(2)
        l = np.broadcast_to([0.0, math.log(3)], (100_000, 2))
        assert abs(hard_select(l, gumbel_noise(rng, l.shape)).mean() - 0.75) < 0.01

    @given(st.floats(-4, 4), st.floats(-4, 4), st.integers(0, 2**31))
    def test_gumbel_max_law(self, l0, l1, seed):
        rng = np.random.default_rng(seed)
        n = 100_000
        z = hard_select(np.broadcast_to([l0, l1], (n, 2)), gumbel_noise(rng, (n, 2)))
        p1 = 1.0 / (1.0 + math.exp(l0 - l1))
        k = int(z.sum())
        expected = np.array([n * (1 - p1), n * p1])
        if expected.min() < 5:  # chi-square needs populated cells
            return
        pval = stats.chisquare([n - k, k], expected).pvalue
        # a correct sampler fails this 0.1% of the time; the seed set is fixed by the database
        assert pval > 1e-3


class TestStraightThrough:
    @pytest.mark.parametrize("z, expect", [(1.0, 1.0), (0.0, 0.0)])
    def test_forward_cancels(self, z, expect):
        p = Tensor(0.6, requires_grad=True)
        with Tape():
            assert straight_through(z, p).item() == expect

    @given(st.floats(-6, 6), st.floats(-6, 6), st.floats(0.1, 3), st.floats(-3, 3), st.integers(0, 2**31))
    def test_gradient_equals_soft_path(self, l0, l1, temp, c, seed):
        g = gumbel_noise(np.random.default_rng(seed), 2)

        def grad(through_z):
            l = Tensor([l0, l1], requires_grad=True)
            with Tape() as tape:
                p = soft_select(l, g, temp)
                out = straight_through(hard_select(l, g), p) if through_z else p
                tape.backward(out * c)
            return l.grad

        zg, pg = grad(True), grad(False)
        assert np.max(np.abs(zg - pg)) <= 1e-12
        s = 1.0 / (1.0 + math.exp(-((l1 + g[1]) - (l0 + g[0])) / temp))
        manual = c * s * (1 - s) / temp * np.array([-1.0, 1.0])
        assert np.max(np.abs(zg - manual)) <= 1e-12

    @given(st.integers(0, 2**31))
    def test_forward_always_binary(self, seed):
        rng = np.random.default_rng(seed)
        l = Tensor(rng.normal(scale=3, size=(256, 2)), requires_grad=True)
        g = gumbel_noise(rng, (256, 2))
        with Tape():
            z = straight_through(hard_select(l, g), soft_select(l, g))
        assert set(np.unique(z.data)) <= {0.0, 1.0}


class TestDecideFrame:
    def test_permutation_invariance(self, rng):
        policy = SelectionPolicy(rng)
        tokens = {(i, m): float(rng.uniform(0, 3)) for i in (1, 2, 3) for m in ("R", "L")}
        ego = {"R": 0.2, "L": 1.1}
        a = decide_frame(ego, tokens, policy)
        keys = list(tokens)[::-1]
        b = decide_frame(ego, {k: tokens[k] for k in keys}, policy)
        assert list(b.entries) == keys
        for k in tokens:
            assert a.z(*k) == b.z(*k)
            np.testing.assert_array_equal(a.entries[k].logits, b.entries[k].logits)

    def test_adding_neighbor_touches_only_its_rows(self, rng):
        policy = SelectionPolicy(rng)
        tokens = {(1, "R"): 0.5, (2, "R"): 2.5}
        a = decide_frame({"R": 0.3}, tokens, policy)
        b = decide_frame({"R": 0.3}, {**tokens, (3, "R"): 1.0, (3, "L"): 4.0}, policy)
        for k in tokens:
            assert a.z(*k) == b.z(*k)
        assert set(b.entries) - set(a.entries) == {(3, "R"), (3, "L")}

    def test_missing_ego_modality_uses_sentinel(self, rng):
        policy = SelectionPolicy(rng)
        a = decide_frame({}, {(1, "L"): 0.7}, policy, sentinel=6.0)
        b = decide_frame({"L": 6.0}, {(1, "L"): 0.7}, policy)
        assert a.z(1, "L") == b.z(1, "L")

    def test_unknown_pair_is_rejected(self, rng):
        assert decide_frame({"R": 0.0}, {}, SelectionPolicy(rng)).z(1, "R") == 0
