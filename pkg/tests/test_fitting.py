import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sphlight as sl
from sphlight.fitting import (ComputationError, FitConfig, evaluate_pair,
                              fit_gradient_descent, fit_least_squares, m_rmse)
from sphlight.losses import LossWeights
from sphlight.render import C4, irradiance_basis, relight, dering
from sphlight.sh import ShCoefficients, reconstruct

from conftest import dc_dominant_coeffs, full_sphere_normals, random_image


def synthetic_scene(rng, width=128, height=64):
    base = random_image(rng, width, height)
    normals = full_sphere_normals(width, height)
    truth = dc_dominant_coeffs(rng)
    target = relight(base, normals, truth)
    return base, normals, truth, target


class TestLeastSquares:
    def test_recovers_imposed_lighting(self, rng):
        base, normals, truth, target = synthetic_scene(rng)
        est = fit_least_squares(base, normals, target, ridge=1e-8)
        assert np.abs(est.values - truth.values).max() <= 1e-6

    def test_black_target_gives_zero(self, rng):
        base, normals, _, _ = synthetic_scene(rng)
        black = sl.EquirectImage(np.zeros((normals.height, normals.width, 3)))
        est = fit_least_squares(base, normals, black, ridge=1e-8)
        np.testing.assert_allclose(est.values, 0.0, atol=1e-12)

    def test_normal_equations_optimality(self, rng):
        # Residual gradient of the weighted objective vanishes at the solution.
        base, normals, _, target = synthetic_scene(rng, 64, 32)
        est = fit_least_squares(base, normals, target, ridge=0.0)
        from sphlight.render import irradiance_basis_for
        from sphlight.sh import solid_angle_weights
        b = irradiance_basis_for(normals.normals).reshape(-1, 9)
        dom = solid_angle_weights(64, 32).reshape(-1)
        for c in range(3):
            resid = (b @ est.values[c]) * base.pixels.reshape(-1, 3)[:, c] \
                - target.pixels.reshape(-1, 3)[:, c]
            grad = b.T @ (dom * base.pixels.reshape(-1, 3)[:, c] * resid)
            scale = np.abs(b.T @ (dom * base.pixels.reshape(-1, 3)[:, c]
                                  * target.pixels.reshape(-1, 3)[:, c])).max()
            assert np.abs(grad).max() <= 1e-8 * max(scale, 1.0)

    def test_single_plane_is_rank_deficient(self, rng):
        width, height = 32, 16
        base = random_image(rng, width, height, 0.2, 1.0)
        normals = sl.NormalMap(np.tile([0.0, 0.0, 1.0], (height, width, 1)))
        e0 = 2.0
        target = sl.EquirectImage(e0 * base.pixels)
        with pytest.raises(ComputationError, match="rank"):
            fit_least_squares(base, normals, target, ridge=0.0)
        est = fit_least_squares(base, normals, target, ridge=1e-8)
        # Minimum-norm solution still reproduces the irradiance on that plane.
        b = irradiance_basis(np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(est.values @ b, e0, rtol=1e-4)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            fit_least_squares(random_image(rng, 8, 4), full_sphere_normals(8, 4),
                              random_image(rng, 16, 8))


class TestGradientDescent:
    def test_photometric_only_recovery(self, rng):
        base, normals, truth, target = synthetic_scene(rng, 128, 64)
        est, trace = fit_gradient_descent(base, normals, target)
        result = evaluate_pair(est, truth, 128, 64)
        assert result.m_rmse <= 1e-3
        assert all(trace[i + 1] <= trace[i] + 1e-6 for i in range(len(trace) - 1))

    def test_trace_starts_at_init_and_descends(self, rng):
        base, normals, _, target = synthetic_scene(rng, 64, 32)
        _, trace = fit_gradient_descent(base, normals, target)
        assert len(trace) >= 2
        assert trace[-1] < trace[0]

    def test_huge_sh_weight_pins_to_ground_truth(self, rng):
        # The coefficient anchor dominates the photometric pull from an
        # unrelated target; 100x shrinks the equilibrium offset accordingly.
        width, height = 64, 32
        base = random_image(rng, width, height)
        normals = full_sphere_normals(width, height)
        target = random_image(rng, width, height, 0.1, 1.0)
        gt = dc_dominant_coeffs(rng)
        est, _ = fit_gradient_descent(
            base, normals, target, gt=gt,
            weights=LossWeights(lambda_sh=1e4, lambda_rc=0.3, lambda_rl=0.7))
        assert np.abs(est.values - gt.values).max() <= 1e-4

    def test_zero_iterations_returns_initialization(self, rng):
        base, normals, _, target = synthetic_scene(rng, 32, 16)
        cfg = FitConfig(method="gradient_descent", max_iters=0)
        est, trace = fit_gradient_descent(base, normals, target, config=cfg)
        assert len(trace) == 1
        expected_dc = target.pixels.reshape(-1, 3).mean(0) \
            / (C4 * base.pixels.reshape(-1, 3).mean(0))
        np.testing.assert_allclose(est.values[:, 0], expected_dc, rtol=1e-12)
        assert np.all(est.values[:, 1:] == 0)

    def test_agrees_with_least_squares(self, rng):
        base, normals, truth, target = synthetic_scene(rng, 128, 64)
        lsq = fit_least_squares(base, normals, target, ridge=1e-8)
        gd, _ = fit_gradient_descent(base, normals, target)
        assert evaluate_pair(lsq, gd, 128, 64).m_rmse <= 1e-3

    def test_prior_reparameterization_runs(self, rng):
        base, normals, truth, target = synthetic_scene(rng, 64, 32)
        cfg = FitConfig(method="gradient_descent", max_iters=150, use_prior=True)
        est, trace = fit_gradient_descent(base, normals, target, config=cfg)
        # Post-prior coefficients are positive by construction and the fit improves.
        assert np.all(est.values > 0)
        assert trace[-1] < trace[0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(method="annealing")
        with pytest.raises(ValueError):
            FitConfig(step_size=0.0)


class TestMrmse:
    def test_identical_maps_zero(self, rng):
        img = random_image(rng, 32, 16)
        assert m_rmse(img, img).m_rmse == 0.0

    def test_positive_scaling_removed(self, rng):
        img = random_image(rng, 32, 16, 0.1, 1.0)
        doubled = sl.EquirectImage(2.0 * img.pixels)
        res = m_rmse(doubled, img)
        assert res.scale_applied == pytest.approx(0.5, rel=1e-12)
        assert res.m_rmse == pytest.approx(0.0, abs=1e-15)

    def test_pred_scaling_cancels_for_any_factor(self, rng):
        img = random_image(rng, 32, 16, 0.1, 1.0)
        for c in (0.1, 2.0, 10.0):
            res = m_rmse(sl.EquirectImage(c * img.pixels), img)
            assert res.m_rmse == pytest.approx(0.0, abs=1e-12)

    def test_homogeneous_in_joint_scaling(self, rng):
        # The metric is an absolute RMSE: scaling both maps scales it linearly,
        # while the median scaling keeps the residual structure unchanged.
        a = random_image(rng, 32, 16, 0.1, 1.0)
        b = random_image(rng, 32, 16, 0.1, 1.0)
        plain = m_rmse(a, b).m_rmse
        for c in (0.1, 2.0, 10.0):
            scaled = m_rmse(sl.EquirectImage(c * a.pixels),
                            sl.EquirectImage(c * b.pixels)).m_rmse
            assert scaled == pytest.approx(c * plain, rel=1e-9)

    def test_hemisphere_closed_form(self):
        # Median 2 -> scale 0.5 -> |0.5*pred - 1| = 0.25 on every pixel: rmse 0.5.
        width, height = 512, 256
        gt = sl.EquirectImage(np.ones((height, width, 3)))
        pred_px = np.ones((height, width, 3))
        pred_px[:, width // 2:, :] = 3.0
        res = m_rmse(sl.EquirectImage(pred_px), gt)
        assert res.scale_applied == pytest.approx(0.5, abs=1e-12)
        assert res.m_rmse == pytest.approx(0.5, abs=1e-12)

    def test_positive_on_perturbed_pairs(self, rng):
        for _ in range(50):
            img = random_image(rng, 16, 8, 0.1, 1.0)
            bumped = img.pixels.copy()
            bumped[rng.integers(8), rng.integers(16)] += rng.uniform(0.05, 0.5)
            assert m_rmse(sl.EquirectImage(bumped), img).m_rmse > 0

    def test_non_positive_median_rejected(self, rng):
        gt = random_image(rng, 8, 4, 0.1, 1.0)
        with pytest.raises(ComputationError, match="median"):
            m_rmse(sl.EquirectImage(np.zeros((4, 8, 3))), gt)

    def test_per_channel_scaling_mode(self, rng):
        img = random_image(rng, 16, 8, 0.1, 1.0)
        scaled = sl.EquirectImage(img.pixels * np.array([2.0, 0.5, 1.25]))
        res = m_rmse(scaled, img, per_channel_scale=True)
        np.testing.assert_allclose(res.scale_applied, [0.5, 2.0, 0.8], rtol=1e-12)
        assert res.m_rmse == pytest.approx(0.0, abs=1e-15)

    def test_json_schema(self, rng):
        import json
        payload = json.loads(m_rmse(random_image(rng, 8, 4, 0.1, 1.0),
                                    random_image(rng, 8, 4, 0.1, 1.0)).to_json())
        assert set(payload) == {"m_rmse", "scale", "per_channel"}
        assert len(payload["per_channel"]) == 3


class TestEvaluatePair:
    def test_equal_coefficients_zero(self, rng):
        c = dc_dominant_coeffs(rng)
        assert evaluate_pair(c, c, 128, 64).m_rmse == 0.0

    def test_doubled_coefficients_zero(self, rng):
        c = dc_dominant_coeffs(rng)
        res = evaluate_pair(ShCoefficients(2 * c.values), c, 128, 64)
        assert res.m_rmse == pytest.approx(0.0, abs=1e-12)

    def test_band_removal_is_visible(self, rng):
        c = dc_dominant_coeffs(rng)
        assert np.abs(c.values[:, 1:4]).max() > 1e-3   # band-1 energy present
        chopped = dering(c, 1)
        assert evaluate_pair(chopped, c, 128, 64).m_rmse > 1e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 20.0))
def test_mrmse_scalar_invariance_property(factor):
    rng = np.random.default_rng(7)
    img = random_image(rng, 16, 8, 0.1, 1.0)
    scaled = sl.EquirectImage(factor * img.pixels)
    assert m_rmse(scaled, img).m_rmse == pytest.approx(0.0, abs=1e-12)
