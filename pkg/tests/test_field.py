import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsurf.field import (Bounds, FieldPoint, OccupancyField, RadianceGrid,
                            load_fields, save_fields, sh_basis, sigmoid)


class TestEvalAlpha:
    def test_zero_logits_give_half(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        p = np.array([[0.3, 0.7, 0.5], [0.01, 0.99, 0.5]])
        assert np.allclose(occ.eval_alpha(p), 0.5)

    def test_outside_bounds_is_exactly_zero(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds, init_logit=3.0)
        p = np.array([[1.5, 0.5, 0.5], [-0.1, 0.2, 0.2], [0.5, 0.5, 2.0]])
        assert np.all(occ.eval_alpha(p) == 0.0)

    def test_log3_logits_give_three_quarters(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds, init_logit=float(np.log(3.0)))
        assert np.allclose(occ.eval_alpha(np.array([0.37, 0.62, 0.11])), 0.75)

    def test_continuity(self, unit_bounds):
        rng = np.random.default_rng(3)
        occ = OccupancyField(8, unit_bounds)
        occ.logits = rng.normal(0, 2, occ.n_vertices)
        p = rng.uniform(0.1, 0.9, (50, 3))
        eps = 1e-6
        for ax in range(3):
            q = p.copy()
            q[:, ax] += eps
            delta = np.abs(occ.eval_alpha(q) - occ.eval_alpha(p))
            # K bounded by max logit gradient / cell size (h = 1/8)
            k = 8 * np.max(np.abs(occ.logits)) * 0.25
            assert np.all(delta <= k * eps + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0 - 1e-9), min_size=3, max_size=3))
def test_trilinear_weights_sum_to_one(p):
    occ = OccupancyField(5, Bounds(np.zeros(3), np.ones(3)))
    c = occ.coords(np.asarray([p]))
    assert np.all(c.w8 >= 0)
    assert abs(c.w8.sum() - 1.0) < 1e-12


class TestScatterAlpha:
    def test_zero_upstream_is_noop(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        occ.scatter_grad_alpha(np.array([[0.5, 0.5, 0.5]]), np.array([0.0]))
        assert np.all(occ.grad == 0.0)

    def test_outside_is_noop(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        occ.scatter_grad_alpha(np.array([[1.5, 0.5, 0.5]]), np.array([2.0]))
        assert np.all(occ.grad == 0.0)

    def test_exact_vertex_hits_single_vertex(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        occ.scatter_grad_alpha(np.array([[0.25, 0.5, 0.75]]), np.array([1.0]))
        nz = np.nonzero(occ.grad)[0]
        assert len(nz) == 1
        # d alpha / d logit at alpha = 0.5 is 0.25
        assert np.isclose(occ.grad[nz[0]], 0.25)

    def test_matches_finite_differences(self, unit_bounds):
        rng = np.random.default_rng(11)
        occ = OccupancyField(3, unit_bounds)
        occ.logits = rng.normal(0, 1.5, occ.n_vertices)
        pts = rng.uniform(0.05, 0.95, (5, 3))
        up = rng.normal(size=5)
        occ.reset_grad()
        occ.scatter_grad_alpha(pts, up)
        analytic = occ.grad.copy()
        eps = 1e-5
        num = np.zeros_like(analytic)
        for k in range(occ.n_vertices):
            orig = occ.logits[k]
            occ.logits[k] = orig + eps
            hi = float(np.dot(up, occ.eval_alpha(pts)))
            occ.logits[k] = orig - eps
            lo = float(np.dot(up, occ.eval_alpha(pts)))
            occ.logits[k] = orig
            num[k] = (hi - lo) / (2 * eps)
        scale = max(np.abs(analytic).max(), 1e-12)
        assert np.max(np.abs(analytic - num)) / scale < 1e-4

    def test_grad_buffer_is_additive_and_resettable(self, unit_bounds):
        occ = OccupancyField(4, unit_bounds)
        p = np.array([[0.4, 0.4, 0.4]])
        occ.scatter_grad_alpha(p, np.array([1.0]))
        g1 = occ.grad.copy()
        occ.scatter_grad_alpha(p, np.array([1.0]))
        assert np.allclose(occ.grad, 2 * g1)
        occ.reset_grad()
        assert np.all(occ.grad == 0.0)


class TestEvalColor:
    def test_degree0_constant_coeff_isotropy(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds, sh_degree=0, init_rgb=0.0)
        rad.coeffs[:, :, 0] = [0.2, 0.5, 0.8]
        p = np.array([0.3, 0.6, 0.7])
        for d in ([0, 0, 1], [1, 0, 0], [0.577350269, 0.577350269, 0.577350269]):
            c = rad.eval_color(p, np.asarray(d, dtype=np.float64))
            assert np.allclose(c, [0.2, 0.5, 0.8], atol=1e-9)

    def test_zero_coeffs_give_black(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds, sh_degree=2, init_rgb=0.0)
        c = rad.eval_color(np.array([0.5, 0.5, 0.5]), np.array([0.0, 0.0, 1.0]))
        assert np.all(c == 0.0)

    def test_degree2_band_parity_against_basis_table(self, unit_bounds):
        # independent basis table: [1, y, z, x, xy, yz, 3z^2-1, xz, x^2-y^2]
        def table(d):
            x, y, z = d
            return np.array([1.0, y, z, x, x * y, y * z, 3 * z * z - 1.0,
                             x * z, x * x - y * y])

        rad = RadianceGrid(4, unit_bounds, sh_degree=2, init_rgb=0.0)
        rad.coeffs[:, 0, 5] = 0.3   # yz band on the red channel
        up = np.array([0.0, 0.6, 0.8])
        dn = np.array([0.0, 0.6, -0.8])
        p = np.array([0.5, 0.5, 0.5])
        c_up = rad.eval_color(p, up)
        c_dn = rad.eval_color(p, dn)
        exp_up = np.clip(0.3 * table(up)[5], 0, 1)
        exp_dn = np.clip(0.3 * table(dn)[5], 0, 1)
        assert np.isclose(c_up[0], exp_up) and np.isclose(c_dn[0], exp_dn)
        assert c_up[0] != c_dn[0]   # odd parity band flips with z

    def test_rejects_non_unit_direction(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds)
        with pytest.raises(ValueError):
            rad.eval_color(np.array([0.5, 0.5, 0.5]), np.array([0.0, 0.0, 1.1]))

    def test_clamped_to_unit_interval(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds, sh_degree=0, init_rgb=0.0)
        rad.coeffs[:, :, 0] = [3.0, -2.0, 0.5]
        c = rad.eval_color(np.array([0.5, 0.5, 0.5]), np.array([0, 0, 1.0]))
        assert np.allclose(c, [1.0, 0.0, 0.5])


class TestScatterColor:
    def test_zero_upstream_noop(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds)
        rad.scatter_grad_color(np.array([[0.5, 0.5, 0.5]]),
                               np.array([[0.0, 0.0, 1.0]]),
                               np.zeros((1, 3)))
        assert np.all(rad.grad == 0.0)

    def test_clamped_channel_gets_zero_gradient(self, unit_bounds):
        rad = RadianceGrid(4, unit_bounds, sh_degree=0, init_rgb=0.0)
        rad.coeffs[:, :, 0] = [2.0, 0.5, 0.5]   # red clamps at 1.0
        rad.scatter_grad_color(np.array([[0.5, 0.5, 0.5]]),
                               np.array([[0.0, 0.0, 1.0]]),
                               np.ones((1, 3)))
        assert np.all(rad.grad[:, 0, :] == 0.0)
        assert np.any(rad.grad[:, 1, :] != 0.0)

    def test_matches_finite_differences(self, unit_bounds):
        rng = np.random.default_rng(7)
        rad = RadianceGrid(2, unit_bounds, sh_degree=1)
        rad.coeffs = rng.uniform(0.1, 0.3, rad.coeffs.shape)
        pts = rng.uniform(0.1, 0.9, (4, 3))
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        up = rng.normal(size=(4, 3))
        rad.reset_grad()
        rad.scatter_grad_color(pts, dirs, up)
        analytic = rad.grad.copy()

        eps = 1e-5
        num = np.zeros_like(analytic)
        flat = rad.coeffs.reshape(-1)
        nflat = num.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = float(np.sum(up * rad.eval_color(pts, dirs)))
            flat[k] = orig - eps
            lo = float(np.sum(up * rad.eval_color(pts, dirs)))
            flat[k] = orig
            nflat[k] = (hi - lo) / (2 * eps)
        scale = max(np.abs(analytic).max(), 1e-12)
        assert np.max(np.abs(analytic - num)) / scale < 1e-4


class TestFieldPoint:
    def test_unit_norm_enforced(self):
        FieldPoint(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            FieldPoint(np.zeros(3), np.array([0.0, 0.0, 1.01]))


class TestCheckpointFile:
    def test_round_trip(self, tmp_path, sym_bounds):
        rng = np.random.default_rng(0)
        occ = OccupancyField((8, 6, 4), sym_bounds)
        occ.logits = rng.normal(0, 2, occ.n_vertices).astype(np.float32)
        rad = RadianceGrid((8, 6, 4), sym_bounds, sh_degree=1)
        rad.coeffs = rng.uniform(size=rad.coeffs.shape).astype(np.float32)
        path = tmp_path / "f.bin"
        save_fields(path, occ, rad)
        occ2, rad2, version, trailer = load_fields(path)
        assert version == 1 and trailer == b""
        assert np.array_equal(occ.logits, occ2.logits)
        assert np.array_equal(rad.coeffs, rad2.coeffs)
        assert rad2.sh_degree == 1
        assert np.array_equal(occ2.resolution, [8, 6, 4])
        assert np.allclose(occ2.bounds.lo, sym_bounds.lo)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_fields(p)


def test_sh_basis_degree_sizes():
    d = np.array([0.0, 0.0, 1.0])
    assert sh_basis(0, d).shape == (1,)
    assert sh_basis(1, d).shape == (4,)
    assert sh_basis(2, d).shape == (9,)
    with pytest.raises(ValueError):
        sh_basis(3, d)


def test_sigmoid_matches_reference():
    x = np.linspace(-30, 30, 101)
    assert np.allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), atol=1e-12)
