import numpy as np
import pytest

from gridsurf.field import Bounds, OccupancyField, RadianceGrid, logit
from gridsurf.march import intersect_bounds, march, synthetic_batch
from gridsurf.sensor import Ray, RayBatch

from conftest import random_field_pair

ENV = np.array([0.5, 0.5, 0.5])


class TestIntersectBounds:
    def test_through_unit_cube(self, unit_bounds):
        ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
        assert intersect_bounds(ray, unit_bounds) == pytest.approx((1.0, 2.0))

    def test_parallel_outside_misses(self, unit_bounds):
        ray = Ray(np.array([-2.0, 2.0, 0.5]), np.array([1.0, 0.0, 0.0]))
        assert intersect_bounds(ray, unit_bounds) is None

    def test_grazing_edge_counts_as_miss(self, unit_bounds):
        # along the y=0, z=0 edge of the cube: degenerate interval
        ray = Ray(np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))
        assert intersect_bounds(ray, unit_bounds) is None
        # along the y=0 face plane as well
        face = Ray(np.array([-1.0, 0.0, 0.5]), np.array([1.0, 0.0, 0.0]))
        assert intersect_bounds(face, unit_bounds) is None

    def test_clipped_by_t_range(self, unit_bounds):
        ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]),
                  t_min=1.5, t_max=1.8)
        assert intersect_bounds(ray, unit_bounds) == pytest.approx((1.5, 1.8))


class TestMarch:
    def test_near_empty_field_alphas(self, unit_bounds):
        occ = OccupancyField(8, unit_bounds, init_logit=float(logit(0.05)))
        rad = RadianceGrid(8, unit_bounds)
        ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
        batch = march(occ, rad, ray, 0.1, ENV)
        cand = batch.alpha[batch.candidate]
        assert np.allclose(cand, 0.05, atol=1e-6)
        assert np.all((cand > 0) & (cand < 1))

    def test_sample_count_for_ten_step_interval(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        rad = RadianceGrid(4, unit_bounds)
        ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
        batch = march(occ, rad, ray, 0.1, ENV)   # interval length 1.0
        assert batch.n_samples[0] == 11          # 10 candidates + terminal
        assert int(batch.candidate.sum()) == 10
        # mid-cell placement, ascending, spaced by one step
        t = batch.t[0, :10]
        assert np.allclose(np.diff(t), 0.1)
        assert t[0] == pytest.approx(1.05)

    def test_missing_ray_has_only_terminal(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        rad = RadianceGrid(4, unit_bounds)
        ray = Ray(np.array([-2.0, 5.0, 0.5]), np.array([1.0, 0.0, 0.0]))
        batch = march(occ, rad, ray, 0.1, ENV)
        assert batch.n_samples[0] == 1
        assert batch.alpha[0, 0] == 1.0
        assert np.allclose(batch.color[0, 0], ENV)

    def test_marched_alpha_matches_pointwise_eval(self, sym_bounds):
        rng = np.random.default_rng(2)
        occ, rad = random_field_pair(rng, res=8, bounds=sym_bounds)
        rays = RayBatch(rng.uniform(-3, -2.2, (16, 3)),
                        _unit(rng.normal(size=(16, 3))))
        batch = march(occ, rad, rays, 0.07, ENV)
        cand = batch.candidate
        again = occ.eval_alpha(batch.pos[cand])
        assert np.array_equal(batch.alpha[cand], again)

    def test_terminal_normalizes_weight_mass(self, sym_bounds):
        rng = np.random.default_rng(9)
        occ, rad = random_field_pair(rng, res=8, bounds=sym_bounds)
        rays = RayBatch(rng.uniform(-3, -2.2, (32, 3)),
                        _unit(rng.normal(size=(32, 3))))
        batch = march(occ, rad, rays, 0.05, ENV)
        W = batch.weights()
        wa = W * np.where(batch.valid, batch.alpha, 0.0)
        assert np.max(np.abs(wa.sum(axis=1) - 1.0)) < 1e-9
        # weights are nonincreasing along each ray
        dw = np.diff(np.where(batch.valid, W, 0.0), axis=1)
        assert np.all(dw <= 1e-15)

    def test_step_must_be_positive(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        rad = RadianceGrid(4, unit_bounds)
        ray = Ray(np.zeros(3) + 0.5, np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            march(occ, rad, ray, 0.0, ENV)


class TestSyntheticBatch:
    def test_layout(self):
        batch = synthetic_batch(
            [[0.5, 1.0], [0.2, 0.3, 1.0]],
            [np.full((2, 3), 0.5), np.full((3, 3), 0.25)],
            np.zeros((2, 3)))
        assert batch.n_rays == 2
        assert batch.n_samples.tolist() == [2, 3]
        assert batch.terminal[0, 1] and batch.terminal[1, 2]
        assert not batch.valid[0, 2]

    def test_requires_terminal(self):
        with pytest.raises(ValueError):
            synthetic_batch([[0.5, 0.9]], [np.zeros((2, 3))], np.zeros((1, 3)))


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
