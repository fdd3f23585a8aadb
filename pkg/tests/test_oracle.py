import numpy as np
import pytest

from gridsurf.loss import ColorMetric
from gridsurf.oracle import (attached_expectation_grads,
                             detached_expectation_grads, enumerate_expectation,
                             expectation_constant, finite_diff_check,
                             grad_equivalence, product_form_grads,
                             product_form_value, random_ray,
                             relative_discrepancy)


class TestEnumeration:
    def test_two_opaque_samples(self):
        # candidate 1 carries everything; the terminal candidate has weight 0
        assert enumerate_expectation([1.0, 1.0], [0.7, 0.3]) == pytest.approx(0.7)

    def test_all_zero_losses(self):
        assert enumerate_expectation([0.3, 0.6, 1.0], [0.0, 0.0, 0.0]) == 0.0

    def test_hand_enumerated_three_samples(self):
        # alphas (0.5, 0.5, 1), losses (0.2, 0, 0.4)
        # i=1: 1.0 * (0.5*0.2 + 0.5*(0.5*0 + 0.5*0.4)) = 0.2
        # i=2: 0.5 * (0.5*0 + 0.5*0.4)                 = 0.1
        # i=3: 0.25 * 0.4                              = 0.1
        val = enumerate_expectation([0.5, 0.5, 1.0], [0.2, 0.0, 0.4])
        assert val == pytest.approx(0.4)
        assert product_form_value([0.5, 0.5, 1.0], [0.2, 0.0, 0.4]) == \
            pytest.approx(0.2)
        assert expectation_constant([0.5, 0.5, 1.0], [0.2, 0.0, 0.4]) == \
            pytest.approx(0.2)

    def test_rejects_missing_terminal(self):
        with pytest.raises(ValueError):
            enumerate_expectation([0.5, 0.9], [0.1, 0.1])


class TestGradEquivalence:
    def test_trivial_opaque_case_exact(self):
        metric = ColorMetric("l2")
        colors = np.array([[0.2, 0.4, 0.6], [0.5, 0.5, 0.5]])
        rep = grad_equivalence([1.0, 1.0], colors, np.zeros(3), metric)
        assert rep.max_rel_discrepancy == 0.0

    def test_hundred_random_batches_below_1e9(self):
        rng = np.random.default_rng(0)
        metric = ColorMetric("l2")
        worst = 0.0
        for _ in range(100):
            alphas, colors, target = random_ray(rng, 8)
            rep = grad_equivalence(alphas, colors, target, metric)
            worst = max(worst, rep.max_rel_discrepancy)
        assert worst < 1e-9

    def test_negative_control_diverges(self):
        rng = np.random.default_rng(1)
        metric = ColorMetric("l2")
        alphas, colors, target = random_ray(rng, 8)
        rep = grad_equivalence(alphas, colors, target, metric, detach=False)
        assert rep.max_rel_discrepancy > 1e-3

    def test_attached_color_grads_scale_with_index(self):
        rng = np.random.default_rng(2)
        metric = ColorMetric("l2")
        alphas, colors, target = random_ray(rng, 5)
        _, dc_det = detached_expectation_grads(alphas, colors, target, metric)
        _, dc_att = attached_expectation_grads(alphas, colors, target, metric)
        for i in range(len(alphas)):
            assert np.allclose(dc_att[i], (i + 1) * dc_det[i])


class TestFiniteDiffCheck:
    def test_linear_toy_loss_is_machine_precision(self):
        w = np.array([0.3, -0.7, 2.0])

        def fn(p):
            return float(w @ p), w

        err = finite_diff_check(fn, np.array([0.1, 0.2, 0.3]), eps=1e-4)
        assert err < 1e-9

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda p: (0.0, p), np.zeros(2), eps=1e-2)

    def test_catches_a_wrong_gradient(self):
        def fn(p):
            return float(np.sum(p ** 2)), 2.5 * p   # wrong factor

        err = finite_diff_check(fn, np.array([0.5, -0.3]), eps=1e-5)
        assert err > 0.1


def test_relative_discrepancy_floors_tiny_values():
    a = (np.array([1e-15]),)
    b = (np.array([0.0]),)
    assert relative_discrepancy(a, b) < 1e-2
