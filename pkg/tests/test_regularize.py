import numpy as np
import pytest

from gridsurf.field import Bounds, OccupancyField, logit, sigmoid
from gridsurf.regularize import (LaplacianSchedule, WarmStartSchedule,
                                 clamp_occupancy, laplacian_penalty,
                                 schedule_weight)


class TestLaplacianSchedule:
    def test_endpoints_and_midpoint(self):
        s = LaplacianSchedule(initial_weight=2e-3, final_weight=2e-5,
                              total_iters=1000, eps=0.01)
        assert schedule_weight(s, 0) == pytest.approx(2e-3)
        assert schedule_weight(s, 1000) == pytest.approx(2e-5)
        assert schedule_weight(s, 2000) == pytest.approx(2e-5)
        mid = schedule_weight(s, 500)
        assert mid == pytest.approx(np.sqrt(2e-3 * 2e-5))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LaplacianSchedule(initial_weight=-1.0)
        with pytest.raises(ValueError):
            schedule_weight(LaplacianSchedule(), -1)

    def test_zero_initial_disables(self):
        s = LaplacianSchedule(initial_weight=0.0, final_weight=0.0,
                              total_iters=10, eps=0.01)
        assert schedule_weight(s, 5) == 0.0


class TestWarmStart:
    def test_cap_formula(self):
        s = WarmStartSchedule(duration=1000)
        assert s.alpha_max(0) == pytest.approx(0.1)
        assert s.alpha_max(500) == pytest.approx(0.55)
        assert s.alpha_max(1000) == 1.0
        assert s.alpha_max(5000) == 1.0

    def test_clamp_caps_decoded_alpha(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds, init_logit=4.0)
        clamp_occupancy(occ, 0, WarmStartSchedule(duration=1000))
        assert occ.decoded_vertex_alphas().max() <= 0.1 + 1e-6
        occ2 = OccupancyField(4, unit_bounds, init_logit=4.0)
        clamp_occupancy(occ2, 500, WarmStartSchedule(duration=1000))
        assert occ2.decoded_vertex_alphas().max() <= 0.55 + 1e-6

    def test_noop_after_duration(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds, init_logit=9.0)
        before = occ.logits.copy()
        clamp_occupancy(occ, 1000, WarmStartSchedule(duration=1000))
        assert np.array_equal(occ.logits, before)

    def test_duration_zero_disables(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds, init_logit=9.0)
        before = occ.logits.copy()
        clamp_occupancy(occ, 0, WarmStartSchedule(duration=0))
        assert np.array_equal(occ.logits, before)


class TestLaplacianPenalty:
    def test_constant_field_is_zero(self, unit_bounds):
        occ = OccupancyField(8, unit_bounds, init_logit=1.3)
        pts = np.random.default_rng(0).uniform(0.2, 0.8, (20, 3))
        pen, used, skipped = laplacian_penalty(occ, pts, eps=0.05)
        assert pen == pytest.approx(0.0, abs=1e-18)
        assert used == 20 and skipped == 0

    def test_quadratic_raw_interpolant_has_laplacian_two(self, unit_bounds):
        # vertex logits x^2: the stencil at grid vertices with eps = one cell
        # reproduces the quadratic's second derivative exactly
        res = 4
        occ = OccupancyField(res, unit_bounds)
        vp = occ.vertex_positions().reshape(-1, 3)
        occ.logits = vp[:, 0] ** 2
        h = 1.0 / res
        pts = vp.reshape(res + 1, res + 1, res + 1, 3)[1:-1, 1:-1, 1:-1] \
            .reshape(-1, 3)
        pen, used, skipped = laplacian_penalty(occ, pts, eps=h, raw=True)
        assert used == (res - 1) ** 3
        assert pen == pytest.approx(4.0, rel=1e-9)   # laplacian 2 -> squared 4

    def test_boundary_points_skipped_and_counted(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        pts = np.array([[0.5, 0.5, 0.5], [0.001, 0.5, 0.5], [0.5, 0.999, 0.5]])
        _, used, skipped = laplacian_penalty(occ, pts, eps=0.05)
        assert used == 1 and skipped == 2

    def test_sign_flip_invariance(self, unit_bounds):
        rng = np.random.default_rng(4)
        occ = OccupancyField(6, unit_bounds)
        occ.logits = rng.normal(0, 2, occ.n_vertices)
        pts = rng.uniform(0.2, 0.8, (30, 3))
        p1, _, _ = laplacian_penalty(occ, pts, eps=0.04)
        occ.logits = -occ.logits
        p2, _, _ = laplacian_penalty(occ, pts, eps=0.04)
        assert p1 == pytest.approx(p2, rel=1e-12)

    def test_gradient_matches_finite_differences(self, unit_bounds):
        rng = np.random.default_rng(5)
        occ = OccupancyField(4, unit_bounds)
        base = rng.normal(0, 1, occ.n_vertices)
        pts = rng.uniform(0.2, 0.8, (8, 3))
        eps_st = 0.06

        occ.logits = base.copy()
        occ.reset_grad()
        pen, _, _ = laplacian_penalty(occ, pts, eps_st, accumulate_grad=True)
        analytic = occ.grad.copy()

        num = np.zeros_like(analytic)
        fd = 1e-5
        for k in range(occ.n_vertices):
            occ.logits = base.copy(); occ.logits[k] += fd
            hi, _, _ = laplacian_penalty(occ, pts, eps_st)
            occ.logits = base.copy(); occ.logits[k] -= fd
            lo, _, _ = laplacian_penalty(occ, pts, eps_st)
            num[k] = (hi - lo) / (2 * fd)
        scale = max(np.abs(analytic).max(), np.abs(num).max(), 1e-12)
        assert np.max(np.abs(analytic - num)) / scale < 1e-4

    def test_empty_point_set(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        pen, used, skipped = laplacian_penalty(occ, np.zeros((0, 3)), 0.05)
        assert (pen, used, skipped) == (0.0, 0, 0)
