"""Analytic velocity fields: point-target exactness and the Gaussian-pair
marginal velocity against a Monte-Carlo conditional-expectation oracle."""

from __future__ import annotations

import numpy as np
import pytest

from styledistill.flow import (
    Direction,
    InversionConfig,
    ScheduleWindow,
    gaussian_pair_field,
    generate,
    invert,
    point_target_field,
)
from styledistill.latents import Latent


def lat(*values) -> Latent:
    return Latent(np.array(values, dtype=np.float64))


class TestPointTargetField:
    def test_reverse_velocity_is_controller(self):
        field = point_target_field(lat(1.0))
        assert field.evaluate(lat(0.0), 0.0).data[0] == 1.0

    def test_euler_exact_at_any_step_count(self):
        field = point_target_field(lat(1.0))
        for steps in (1, 3, 7, 50):
            traj = generate(lat(0.0), lat(1.0), field, ScheduleWindow(0.0, 0.0, 1.0), steps)
            assert traj.terminal.data[0] == pytest.approx(1.0, abs=1e-12)

    def test_terminal_time_clamped_finite(self):
        field = point_target_field(lat(1.0))
        v = field.evaluate(lat(0.0), 1.0)
        assert np.isfinite(v.data).all()
        assert v.data[0] == pytest.approx(1e4)

    def test_forward_drift_state_independent(self):
        field = point_target_field(lat(2.0))
        v1 = field.evaluate(lat(0.0), 0.2, None, Direction.FORWARD_TO_NOISE)
        v2 = field.evaluate(lat(5.0), 0.8, None, Direction.FORWARD_TO_NOISE)
        assert np.array_equal(v1.data, v2.data)

    def test_forward_trajectory_affine(self):
        field = point_target_field(lat(2.0))
        traj = invert(lat(2.0), lat(0.0), field, InversionConfig(gamma=0.0, steps=10))
        values = np.array([s.data[0] for s in traj.states])
        diffs = np.diff(values)
        assert np.allclose(diffs, diffs[0])


class TestGaussianPairField:
    def test_velocity_at_zero_time_is_mu_minus_x(self):
        field = gaussian_pair_field(1.0, 1.0, 1)
        assert field.evaluate(lat(0.0), 0.0).data[0] == pytest.approx(1.0)
        assert field.evaluate(lat(0.4), 0.0).data[0] == pytest.approx(0.6)

    def test_symmetric_cancellation_at_midpoint(self):
        field = gaussian_pair_field(0.0, 1.0, 1)
        assert field.evaluate(lat(1.0), 0.5).data[0] == 0.0

    def test_matches_monte_carlo_conditional_expectation(self):
        # oracle: Nadaraya-Watson estimate of E[X1 - X0 | X_t = x] from the
        # interpolation definition, 2e6 endpoint pairs, bandwidth 0.02.
        mu, sigma, t, x = 2.0, 0.5, 0.3, 1.0
        field = gaussian_pair_field(mu, sigma, 1)
        formula = field.evaluate(lat(x), t).data[0]

        rng = np.random.default_rng(12345)
        n = 2 * 10**6
        x0 = rng.standard_normal(n)
        x1 = mu + sigma * rng.standard_normal(n)
        xt = (1 - t) * x0 + t * x1
        bandwidth = 0.02
        weights = np.exp(-0.5 * ((xt - x) / bandwidth) ** 2)
        diffs = x1 - x0
        estimate = float(np.sum(weights * diffs) / np.sum(weights))
        std_error = float(
            np.sqrt(np.sum(weights**2 * (diffs - estimate) ** 2)) / np.sum(weights)
        )
        assert abs(estimate - formula) <= 3 * std_error

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            gaussian_pair_field(0.0, 0.0, 4)
        with pytest.raises(ValueError):
            gaussian_pair_field(0.0, 1.0, 0)

    def test_dimension_checked(self):
        field = gaussian_pair_field(0.0, 1.0, 3)
        with pytest.raises(ValueError):
            field.evaluate(lat(0.0), 0.0)

    def test_forward_is_time_mirror_of_reverse(self):
        field = gaussian_pair_field(1.5, 0.7, 2)
        state = lat(0.3, -0.8)
        fwd = field.evaluate(state, 0.2, None, Direction.FORWARD_TO_NOISE)
        rev = field.evaluate(state, 0.8, None, Direction.REVERSE_TO_DATA)
        assert np.allclose(fwd.data, -rev.data)
