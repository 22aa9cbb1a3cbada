"""
Geometry: affine/TPS warp, ridge period and 500 ppi scaling, warp gradients
"""
import math

import numpy as np
import pytest

from c2cl.exceptions import DimensionMismatchError, NoRidgeStructureError, ParameterError, SingularSystemError
from c2cl.services.geometry import (
    AffineParams, TPSField, WarpParams, affine_matrix, canvas_center, canvas_scale_params, control_lattice,
    estimate_ridge_period, estimate_tps_field, normalize_angle, scale_to_500ppi, stn_param_count,
    stn_params_from_vector, stn_params_to_vector, tps_basis, tps_bending_energy, tps_flow, tps_map_points,
    warp_array, warp_flow, warp_image, warp_param_gradients,
)
from c2cl.services.gradcheck import check_loss_gradients, check_warp_gradients, run_gradcheck
from c2cl.services.imaging import GrayImage
from c2cl.services.synthetic import stripes


# ==================== Affine ====================

class TestAffine:
    def test_matrix_identity(self):
        np.testing.assert_allclose(affine_matrix(AffineParams.identity()), [[1, 0, 0], [0, 1, 0]])

    def test_matrix_scaled_rotation(self):
        m = affine_matrix(AffineParams(2.0, math.pi / 2, 3.0, -1.0))
        np.testing.assert_allclose(m, [[0, -2, 3], [2, 0, -1]], atol=1e-12)

    def test_warp_applies_matrix_about_canvas_center(self):
        w, h = 48, 36
        p = AffineParams(1.1, 0.3, 4.0, -2.5)
        flow = warp_flow(p, TPSField.zero(w, h), w, h)
        m = affine_matrix(p, center=canvas_center(w, h))
        src = np.stack([flow.x_src.ravel(), flow.y_src.ravel(), np.ones(w * h)])
        dst = m @ src
        ys, xs = np.mgrid[0:h, 0:w]
        np.testing.assert_allclose(dst[0], xs.ravel(), atol=1e-9)
        np.testing.assert_allclose(dst[1], ys.ravel(), atol=1e-9)

    def test_centered_matrix_fixes_the_center(self):
        ctr = canvas_center(41, 41)
        m = affine_matrix(AffineParams(2.0, math.pi / 2), center=ctr)
        np.testing.assert_allclose(m @ [ctr[0], ctr[1], 1.0], ctr, atol=1e-12)
        np.testing.assert_allclose(m[:, :2], affine_matrix(AffineParams(2.0, math.pi / 2))[:, :2])

    def test_angle_is_normalized(self):
        assert AffineParams(1.0, 3 * math.pi / 2).theta == pytest.approx(-math.pi / 2)
        assert normalize_angle(-math.pi) == pytest.approx(math.pi)
        assert normalize_angle(math.pi) == pytest.approx(math.pi)

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan")])
    def test_invalid_scale(self, s):
        with pytest.raises(ParameterError):
            AffineParams(s)


# ==================== Warp ====================

class TestWarp:
    def test_identity_warp_is_exact(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (40, 56)))
        out = warp_image(img, AffineParams.identity(), TPSField.zero(56, 40))
        assert out.equals(img)

    def test_translation_shifts_content(self, rng):
        pixels = rng.uniform(0.0, 1.0, (32, 32))
        out = warp_array(pixels, AffineParams(1.0, 0.0, 7.0, 0.0), TPSField.zero(32, 32))
        np.testing.assert_allclose(out[:, 7:], pixels[:, :-7], atol=1e-12)
        assert not out[:, :7].any()

    def test_output_dimensions_match_input(self, rng):
        img = GrayImage(rng.uniform(0.0, 1.0, (30, 44)))
        field = TPSField.zero(44, 30).with_displacements(rng.uniform(-2, 2, (4, 4, 2)))
        assert warp_image(img, AffineParams(1.1, 0.2, 1.0, -2.0), field).shape == (30, 44)

    def test_displacement_bound(self):
        field = TPSField.zero(16, 16).with_displacements(np.full((4, 4, 2), 100.0))
        with pytest.raises(ParameterError):
            warp_array(np.zeros((16, 16)), AffineParams.identity(), field)

    def test_warp_params_json(self, rng):
        field = TPSField.zero(480, 480).with_displacements(rng.uniform(-3, 3, (4, 4, 2)))
        params = WarpParams(AffineParams(1.2, 0.1, 4.0, -5.0), field, (480, 480))
        restored = WarpParams.from_json(params.to_json())
        assert restored.affine == params.affine
        np.testing.assert_allclose(restored.field.displacements, field.displacements)
        assert restored.canvas == (480, 480)


# ==================== Thin-plate spline ====================

class TestTPS:
    def test_lattice(self):
        anchors = control_lattice(101, 51, 3, 0.1)
        assert anchors.shape == (3, 3, 2)
        np.testing.assert_allclose(anchors[0, 0], [10.0, 5.0])
        np.testing.assert_allclose(anchors[2, 2], [90.0, 45.0])

    def test_interpolates_anchor_displacements(self, rng):
        disp = rng.uniform(-5.0, 5.0, (4, 4, 2))
        field = TPSField.zero(480, 480).with_displacements(disp)
        anchors = field.control_points.reshape(-1, 2)
        np.testing.assert_allclose(tps_map_points(field, anchors), anchors + disp.reshape(-1, 2), atol=1e-6)

    def test_zero_field_flow_is_identity(self):
        flow = tps_flow(TPSField.zero(20, 10), 20, 10)
        gx, gy = np.meshgrid(np.arange(20.0), np.arange(10.0))
        np.testing.assert_array_equal(flow.x_src, gx)
        np.testing.assert_array_equal(flow.y_src, gy)

    def test_affine_displacements_have_no_bending(self):
        field = TPSField.zero(480, 480)
        anchors = field.control_points
        disp = np.stack([0.01 * anchors[..., 0] + 0.02 * anchors[..., 1] + 3.0,
                         -0.015 * anchors[..., 0] + 1.0], axis=-1)
        assert tps_bending_energy(field.with_displacements(disp)) < 1e-6

    def test_local_bump_bends(self):
        disp = np.zeros((4, 4, 2))
        disp[1, 1] = (4.0, -4.0)
        assert tps_bending_energy(TPSField.zero(480, 480).with_displacements(disp)) > 1e-3

    def test_basis_is_linear_in_displacements(self, rng):
        field = TPSField.zero(100, 100, 3)
        points = rng.uniform(0, 99, (10, 2))
        basis = tps_basis(field, points)
        assert basis.shape == (10, 9)
        np.testing.assert_allclose(basis.sum(axis=1), 1.0, atol=1e-9)

    def test_coincident_controls(self):
        anchors = np.array([[[0.0, 0.0], [10.0, 0.0]], [[0.0, 0.0], [10.0, 10.0]]])
        field = TPSField(2, np.zeros((2, 2, 2)), anchors)
        with pytest.raises(SingularSystemError):
            tps_basis(field, np.zeros((1, 2)))

    def test_grid_shape_checked(self):
        with pytest.raises(DimensionMismatchError):
            TPSField(4, np.zeros((3, 3, 2)), control_lattice(10, 10, 4))


# ==================== STN output layout ====================

class TestStnLayout:
    @pytest.mark.parametrize("n, expected", [(2, 12), (4, 36), (5, 54)])
    def test_param_count(self, n, expected):
        assert stn_param_count(n) == expected

    def test_vector_layout(self, rng):
        vector = np.concatenate([[1.1, 0.2, 3.0, -4.0], rng.normal(0, 1, 32)])
        affine, field = stn_params_from_vector(vector, 480, 480)
        assert (affine.s, affine.tx, affine.ty) == (1.1, 3.0, -4.0)
        np.testing.assert_array_equal(field.displacements[0, 1], vector[6:8])
        np.testing.assert_allclose(stn_params_to_vector(affine, field), vector)

    def test_wrong_length(self):
        with pytest.raises(DimensionMismatchError):
            stn_params_from_vector(np.zeros(35), 480, 480)


# ==================== Ridge period ====================

class TestRidgePeriod:
    def test_stripes_period(self):
        assert estimate_ridge_period(stripes(256, 256, 9.0, angle=0.3)) == pytest.approx(9.0, abs=0.5)

    def test_doubled_period(self):
        assert estimate_ridge_period(stripes(256, 256, 18.0)) == pytest.approx(18.0, abs=1.0)

    def test_uniform_image(self):
        with pytest.raises(NoRidgeStructureError):
            estimate_ridge_period(GrayImage(np.full((128, 128), 0.5)))

    def test_scale_to_500ppi(self):
        scaled, params = scale_to_500ppi(stripes(256, 256, 18.0))
        assert params.s == pytest.approx(0.5, abs=0.03)
        assert scaled.ppi == 500.0
        assert scaled.width == pytest.approx(128, abs=4)
        assert estimate_ridge_period(scaled) == pytest.approx(9.0, abs=0.5)

    def test_canvas_scale_params(self):
        params, period = canvas_scale_params(stripes(256, 256, 12.0))
        assert period == pytest.approx(12.0, abs=0.6)
        assert params.s == pytest.approx(9.0 / period)

    def test_uniform_stripes_need_no_deformation(self):
        field = estimate_tps_field(stripes(256, 256, 9.0))
        assert field.is_zero


# ==================== Gradients ====================

class TestWarpGradients:
    def test_zero_upstream(self, rng):
        pixels = rng.uniform(0, 1, (16, 16))
        field = TPSField.zero(16, 16, 3).with_displacements(rng.uniform(-1, 1, (3, 3, 2)))
        grads = warp_param_gradients(pixels, AffineParams(1.1, 0.1, 0.5, 0.3), field, np.zeros((16, 16)))
        assert not grads.as_vector().any()
        assert grads.displacements.shape == (3, 3, 2)

    def test_upstream_shape_checked(self):
        with pytest.raises(DimensionMismatchError):
            warp_param_gradients(np.zeros((8, 8)), AffineParams.identity(), TPSField.zero(8, 8), np.zeros((8, 9)))

    def test_warp_matches_finite_differences(self, rng):
        result = check_warp_gradients(rng)
        assert result.passed, result.max_rel_error
        assert result.checked == stn_param_count(3)

    def test_losses_match_finite_differences(self, rng):
        results = check_loss_gradients(rng)
        assert {r.name for r in results} >= {"identity.y1", "identity.r2", "adversarial.q", "stn.r_cl"}
        assert all(r.passed for r in results), [r.to_dict() for r in results if not r.passed]

    def test_run_gradcheck(self):
        results = run_gradcheck(seed=5, configurations=2)
        assert len(results) == 2 * 9
        assert all(r.passed for r in results)
