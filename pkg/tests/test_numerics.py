import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ssa_tta.numerics import (check_prob_dist, derive_tau_beta_upper, derive_tau_neg_lower,
                              entropy, softmax, softmax_backward, sort_desc, tail_mass_bound,
                              verify_theorem1)


def dists(min_c=2, max_c=12):
    return st.integers(min_c, max_c).flatmap(
        lambda c: hnp.arrays(np.float64, c, elements=st.floats(0.0, 1.0))
    ).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_log_two(self):
        np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)

    def test_direct_oracle(self):
        z = np.array([1.0, 2.0, 3.0])
        e = [math.exp(v) for v in z]
        want = [v / sum(e) for v in e]
        np.testing.assert_allclose(softmax(z), want, rtol=1e-14)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError, match="non-finite"):
            softmax([0.0, bad])

    @given(hnp.arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_shift_invariant_and_valid(self, z, c):
        p = softmax(z)
        check_prob_dist(p)
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)

    def test_backward_matches_jacobian(self, rng):
        z = rng.normal(size=5)
        p = softmax(z)
        g = rng.normal(size=5)
        J = np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(softmax_backward(p, g), J.T @ g, atol=1e-15)


class TestEntropy:
    def test_one_hot(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_four(self):
        assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)
        assert entropy(np.full(4, 0.25)) == pytest.approx(1.386294, abs=1e-6)

    def test_three_point(self):
        assert entropy([0.7, 0.2, 0.1]) == pytest.approx(0.801819, abs=1e-6)

    def test_batched(self):
        h = entropy(np.array([[0.5, 0.5], [1.0, 0.0]]))
        np.testing.assert_allclose(h, [math.log(2), 0.0])

    @given(dists())
    def test_bounds(self, p):
        h = entropy(p)
        assert 0.0 <= h <= math.log(p.size) + 1e-12


class TestSortDesc:
    def test_example(self):
        s = sort_desc([0.1, 0.7, 0.2])
        np.testing.assert_array_equal(s.values, [0.7, 0.2, 0.1])
        # 1-based classes (2, 3, 1)
        np.testing.assert_array_equal(s.perm + 1, [2, 3, 1])

    def test_ties_keep_class_order(self):
        np.testing.assert_array_equal(sort_desc(np.full(4, 0.25)).perm, [0, 1, 2, 3])

    def test_sorted_input_identity(self):
        np.testing.assert_array_equal(sort_desc([0.5, 0.3, 0.2]).perm, [0, 1, 2])

    def test_all_three_element_permutations(self):
        import itertools
        base = np.array([0.6, 0.3, 0.1])
        for order in itertools.permutations(range(3)):
            p = base[list(order)]
            s = sort_desc(p)
            np.testing.assert_array_equal(s.values, base)
            np.testing.assert_array_equal(p[s.perm], base)

    @given(dists())
    def test_round_trip(self, p):
        s = sort_desc(p)
        assert np.all(np.diff(s.values) <= 0)
        np.testing.assert_array_equal(s.unsort(), p)
        assert sorted(s.perm.tolist()) == list(range(p.size))


class TestCheckProbDist:
    @pytest.mark.parametrize("bad", [[1.0], [0.5, 0.6], [-0.1, 1.1], [[0.5, 0.5]], [np.nan, 1.0]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_prob_dist(bad)


class TestTailBound:
    def test_worked_value(self):
        assert tail_mass_bound(0.42805, 0.05) == pytest.approx(0.142889, abs=1e-5)

    def test_zero_entropy(self):
        assert tail_mass_bound(0.0, 0.3) == 0.0

    def test_eps_case(self):
        assert tail_mass_bound(0.5, 4.54e-5) == pytest.approx(0.05, abs=1e-4)

    @pytest.mark.parametrize("tb", [0.0, 1.0, -0.5, 2.0])
    def test_rejects_tau(self, tb):
        with pytest.raises(ValueError):
            tail_mass_bound(0.5, tb)

    @given(dists(3, 20), st.floats(1e-6, 0.5))
    def test_property(self, p, tb):
        h = entropy(p)
        if h <= 0.0:
            return
        tail = p[p <= tb].sum()
        assert tail <= tail_mass_bound(h, tb) + 1e-12


class TestDerivations:
    def test_tau_beta_worked(self):
        assert derive_tau_beta_upper(0.5, 0.05) == pytest.approx(math.exp(-10), abs=1e-9)
        assert derive_tau_beta_upper(0.5, 0.05) == pytest.approx(4.54e-5, rel=1e-3)

    def test_tau_beta_zero_entropy(self):
        assert derive_tau_beta_upper(0.0, 0.1) == 1.0

    def test_tau_beta_direct(self):
        assert derive_tau_beta_upper(1.0, 0.5) == pytest.approx(0.13534, abs=1e-5)

    def test_tau_beta_rejects(self):
        with pytest.raises(ValueError):
            derive_tau_beta_upper(0.5, 0.0)

    @given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.01, 2.0))
    def test_tau_beta_monotone(self, h1, h2, eps):
        lo, hi = sorted((h1, h2))
        assert derive_tau_beta_upper(lo, eps) >= derive_tau_beta_upper(hi, eps)
        assert derive_tau_beta_upper(hi, eps) <= derive_tau_beta_upper(hi, eps * 1.5)

    def test_tau_neg_worked(self):
        got = derive_tau_neg_lower(0.9, 0.05, 10, 1)
        assert got == pytest.approx(0.894444444, abs=1e-9)
        assert got == pytest.approx(0.8944, abs=1e-4)

    def test_tau_neg_direct(self):
        assert derive_tau_neg_lower(0.9, 0.09, 10, 1) == pytest.approx(0.89, abs=1e-12)

    def test_tau_neg_clamped(self):
        assert derive_tau_neg_lower(0.9, 100.0, 10, 1) == 0.0

    @pytest.mark.parametrize("C,k", [(3, 3), (2, 5), (4, 0)])
    def test_tau_neg_rejects(self, C, k):
        with pytest.raises(ValueError):
            derive_tau_neg_lower(0.9, 0.05, C, k)


class TestTheorem:
    def test_worked_example(self):
        rep = verify_theorem1([0.9, 0.05, 0.03, 0.02], 0.9, 0.05, 0.5)
        assert rep.Y_plus == (0,)
        assert rep.Y_minus == (1, 2, 3)
        assert rep.pos_term == pytest.approx(math.log(0.9))
        assert rep.tail_mass == pytest.approx(0.10)
        assert rep.tail_bound == pytest.approx(0.5 / -math.log(0.05))
        assert rep.ok

    def test_combined_counterexample_is_reported(self):
        rep = verify_theorem1([0.9, 0.05, 0.03, 0.02], 0.9, 0.05, 0.5)
        assert rep.kappa == pytest.approx(math.log(0.9) - math.log(0.95))
        w = np.array([0.05, 0.03, 0.02]) / 0.10
        neg = float(np.dot(w, np.log1p(-np.array([0.05, 0.03, 0.02]))))
        assert rep.neg_term == pytest.approx(neg, abs=1e-15)
        assert rep.combined == pytest.approx(math.log(0.9) - neg, abs=1e-15)
        assert rep.combined < rep.kappa == pytest.approx(-0.0541, abs=1e-4)
        assert rep.combined_holds is False
        assert rep.ok  # informational only

    def test_one_hot(self):
        rep = verify_theorem1([0.0, 1.0, 0.0], 0.8, 0.1, 0.1)
        assert rep.tail_mass == 0.0 and rep.ok

    def test_precondition_flag(self):
        rep = verify_theorem1(np.full(4, 0.25), 0.9, 0.05, 0.5)
        assert not rep.precondition_ok
        assert rep.ok

    def test_rejects_thresholds(self):
        with pytest.raises(ValueError):
            verify_theorem1([0.5, 0.5], 0.3, 0.4, 0.5)

    @given(dists(3, 20), st.floats(0.5, 0.99), st.floats(1e-6, 0.45))
    def test_sets_partition_and_bounds(self, p, ta, tb):
        rep = verify_theorem1(p, ta, tb, max(entropy(p), 1e-9))
        sets = rep.Y_plus + rep.Y_minus + rep.Y_zero
        assert sorted(sets) == list(range(p.size))
        assert rep.tail_ok and rep.pos_ok and rep.neg_ok
