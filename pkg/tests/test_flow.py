"""Integrator contracts: controller drift, schedule law, both ODE stages, and
the two-stage composition, checked against independent brute-force references.

The fine-step references below are recomputed in-test by a standalone Euler
loop that never touches the library integrator; frozen tolerances were
measured from those oracle runs.
"""

from __future__ import annotations

import numpy as np
import pytest

from styledistill.flow import (
    Direction,
    FlowNumericsError,
    InversionConfig,
    ScheduleWindow,
    conditional_drift,
    cross_domain_reversal,
    eta_at,
    gaussian_pair_field,
    generate,
    invert,
    point_target_field,
)
from styledistill.latents import Latent, LatentShapeError


def lat(*values) -> Latent:
    return Latent(np.array(values, dtype=np.float64))


def euler_oracle(drift, x0: np.ndarray, steps: int) -> np.ndarray:
    """Plain reference Euler loop, independent of the library integrator."""
    x = x0.copy()
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * drift(x, k / steps)
    return x


class TestConditionalDrift:
    def test_full_gap_at_origin(self):
        assert conditional_drift(lat(0.0), 0.0, lat(1.0), 1e-4).data[0] == 1.0

    def test_halfway(self):
        assert conditional_drift(lat(0.5), 0.5, lat(1.0), 1e-4).data[0] == 1.0

    def test_zero_displacement(self):
        for t in (0.0, 0.3, 0.9):
            assert conditional_drift(lat(1.0), t, lat(1.0), 1e-4).data[0] == 0.0

    def test_clamp_at_terminal_time(self):
        drift = conditional_drift(lat(0.0), 1.0, lat(1.0), 1e-4)
        assert drift.data[0] == pytest.approx(1e4)
        assert np.isfinite(drift.data).all()

    def test_shape_mismatch(self):
        with pytest.raises(LatentShapeError):
            conditional_drift(lat(0.0), 0.0, lat(1.0, 2.0), 1e-4)

    def test_time_out_of_range(self):
        with pytest.raises(ValueError):
            conditional_drift(lat(0.0), 1.5, lat(1.0), 1e-4)


class TestEtaAt:
    def test_inside_window(self):
        assert eta_at(0.1, ScheduleWindow(0.9, 0.0, 0.25)) == 0.9

    def test_outside_window(self):
        assert eta_at(0.5, ScheduleWindow(0.9, 0.0, 0.25)) == 0.0

    def test_closed_boundaries(self):
        window = ScheduleWindow(0.9, 0.0, 0.25)
        assert eta_at(0.0, window) == 0.9
        assert eta_at(0.25, window) == 0.9

    def test_random_samples_match_case_analysis(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            a, b = sorted(rng.uniform(0.0, 1.0, size=2))
            eta = rng.uniform(0.0, 1.0)
            window = ScheduleWindow(eta, a, b)
            t = rng.uniform(0.0, 1.0)
            expected = eta if a <= t <= b else 0.0
            assert eta_at(t, window) == expected

    def test_window_validation(self):
        with pytest.raises(ValueError):
            ScheduleWindow(0.5, 0.6, 0.4)
        with pytest.raises(ValueError):
            ScheduleWindow(1.2, 0.0, 1.0)


class TestInvert:
    def test_gamma_one_reaches_anchor_exactly(self):
        field = point_target_field(lat(1.0))
        for steps in (1, 4, 28):
            traj = invert(lat(0.0), lat(2.0), field, InversionConfig(gamma=1.0, steps=steps))
            assert traj.terminal.data[0] == pytest.approx(2.0, abs=1e-12)
            assert traj.times[0] == 0.0 and traj.times[-1] == 1.0
            assert len(traj.states) == steps + 1

    def test_gamma_zero_matches_pure_field_bitwise(self):
        field = gaussian_pair_field(1.0, 0.5, 2)
        y_s = lat(0.3, -0.2)
        traj = invert(y_s, lat(5.0, 5.0), field, InversionConfig(gamma=0.0, steps=16))

        def drift(x, t):
            return field.evaluate(Latent(x), t, None, Direction.FORWARD_TO_NOISE).data

        x = y_s.data.copy()
        for k, state in enumerate(traj.states[1:]):
            x = x + (1.0 / 16) * drift(x, k / 16)
            assert np.array_equal(state.data, x)

    def test_gamma_half_tracks_fine_step_oracle(self):
        # frozen bound: oracle run measured |x64 - x4096| = 0.0891
        field = gaussian_pair_field(1.0, 1.0, 1)
        y_s, y_1 = lat(0.0), lat(0.7)

        def drift(x, t):
            u = field.evaluate(Latent(x), t, None, Direction.FORWARD_TO_NOISE).data
            ctrl = (y_1.data - x) / max(1.0 - t, 1e-4)
            return 0.5 * u + 0.5 * ctrl

        reference = euler_oracle(drift, y_s.data, 4096)
        traj = invert(y_s, y_1, field, InversionConfig(gamma=0.5, steps=64))
        assert np.linalg.norm(traj.terminal.data - reference) <= 2 * 0.09

    def test_determinism_is_bitwise(self):
        field = gaussian_pair_field(0.5, 0.8, 3)
        y_s, y_1 = lat(0.1, 0.2, 0.3), lat(-1.0, 0.0, 1.0)
        cfg = InversionConfig(gamma=0.3, steps=12)
        a = invert(y_s, y_1, field, cfg)
        b = invert(y_s, y_1, field, cfg)
        assert a.config_digest == b.config_digest
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.data, sb.data)

    def test_shape_preserved_along_trajectory(self):
        field = gaussian_pair_field(1.0, 0.5, 6)
        y = Latent(np.zeros(6), (2, 3))
        traj = invert(y, Latent(np.ones(6), (2, 3)), field, InversionConfig(steps=5))
        assert all(s.shape == (2, 3) for s in traj.states)

    def test_divergence_names_step(self):
        # controller drift toward a near-float-max anchor overflows on the
        # final step, where the remaining gap is divided by 1/steps
        field = point_target_field(lat(0.0))
        with pytest.raises(FlowNumericsError) as err:
            invert(lat(0.0), lat(5e307), field, InversionConfig(gamma=0.5, steps=28))
        assert err.value.step == 26
        assert "26" in str(err.value)

    def test_shape_mismatch_rejected(self):
        field = point_target_field(lat(1.0))
        with pytest.raises(LatentShapeError):
            invert(lat(0.0), lat(1.0, 2.0), field, InversionConfig())


class TestGenerate:
    def test_full_window_unit_eta_reaches_reference(self):
        field = point_target_field(lat(9.0))  # field irrelevant at eta=1
        traj = generate(lat(0.0), lat(3.0), field, ScheduleWindow(1.0, 0.0, 1.0), steps=50)
        assert traj.terminal.data[0] == pytest.approx(3.0, abs=1e-9)

    def test_zero_eta_matches_unguided_bitwise(self):
        field = gaussian_pair_field(1.0, 0.5, 2)
        y_init, y_r = lat(0.2, -0.5), lat(1.0, 1.0)
        guided = generate(y_init, y_r, field, ScheduleWindow(0.0, 0.0, 1.0), steps=20)

        def drift(x, s):
            return field.evaluate(Latent(x), s, None, Direction.REVERSE_TO_DATA).data

        x = y_init.data.copy()
        for k, state in enumerate(guided.states[1:]):
            x = x + (1.0 / 20) * drift(x, k / 20)
            assert np.array_equal(state.data, x)

    def test_windowed_point_field_tracks_fine_step_oracle(self):
        # frozen bound: post-window controller telescopes exactly; oracle gap ~0
        field = point_target_field(lat(1.0))
        window = ScheduleWindow(0.9, 0.0, 0.25)
        y_init, y_r = lat(0.0), lat(2.0)

        def drift(x, s):
            v = (1.0 - x) / max(1.0 - s, 1e-4)
            if 0.0 <= s <= 0.25:
                ctrl = (2.0 - x) / max(1.0 - s, 1e-4)
                return v + 0.9 * (ctrl - v)
            return v

        reference = euler_oracle(drift, y_init.data, 4096)
        traj = generate(y_init, y_r, field, window, steps=200)
        assert np.linalg.norm(traj.terminal.data - reference) <= 1e-9

    def test_windowed_gaussian_field_tracks_fine_step_oracle(self):
        field = gaussian_pair_field(1.0, 0.5, 2)
        window = ScheduleWindow(0.9, 0.0, 0.25)
        y_init, y_r = lat(0.5, -0.5), lat(1.5, 1.0)

        def drift(x, s):
            v = field.evaluate(Latent(x), s, None, Direction.REVERSE_TO_DATA).data
            if 0.0 <= s <= 0.25:
                ctrl = (y_r.data - x) / max(1.0 - s, 1e-4)
                return v + 0.9 * (ctrl - v)
            return v

        reference = euler_oracle(drift, y_init.data, 4096)
        traj = generate(y_init, y_r, field, window, steps=200)
        # frozen bound from the oracle run: first-order error at 200 steps < 4e-3
        assert np.linalg.norm(traj.terminal.data - reference) <= 8e-3


class TestConvergenceOrder:
    def test_first_order_ratio_under_step_doubling(self):
        rng = np.random.default_rng(0)
        y_s = Latent(rng.standard_normal(4))
        field = gaussian_pair_field(1.0, 0.5, 4)
        reference = invert(y_s, y_s, field, InversionConfig(gamma=0.0, steps=4096)).terminal.data
        errors = {
            n: np.linalg.norm(
                invert(y_s, y_s, field, InversionConfig(gamma=0.0, steps=n)).terminal.data
                - reference
            )
            for n in (32, 64, 128)
        }
        assert 1.7 <= errors[32] / errors[64] <= 2.3
        assert 1.7 <= errors[64] / errors[128] <= 2.3


class TestCrossDomainReversal:
    def test_identity_of_composition_with_unit_gamma_zero_eta(self):
        field = gaussian_pair_field(1.0, 0.5, 2)
        y_s, y_r, y_1 = lat(0.4, 0.6), lat(1.2, 0.8), lat(-0.3, 0.9)
        out = cross_domain_reversal(
            y_s, y_r, field,
            InversionConfig(gamma=1.0, steps=8),
            ScheduleWindow(0.0, 0.0, 1.0),
            gen_steps=20, y_1=y_1,
        )
        unguided = generate(y_1, y_r, field, ScheduleWindow(0.0, 0.0, 1.0), steps=20)
        assert np.array_equal(out.data, unguided.terminal.data)

    def test_exact_controllers_collapse_to_reference(self):
        field = gaussian_pair_field(1.0, 0.5, 2)
        for y_s in (lat(0.0, 0.0), lat(5.0, -5.0)):
            out = cross_domain_reversal(
                y_s, lat(1.0, 2.0), field,
                InversionConfig(gamma=1.0, steps=28),
                ScheduleWindow(1.0, 0.0, 1.0),
                gen_steps=50, y_1=lat(0.1, 0.1),
            )
            assert np.allclose(out.data, [1.0, 2.0], atol=1e-9)

    def test_matches_fine_step_oracle(self):
        x_star = lat(1.0, 1.0)
        field = point_target_field(x_star)
        y_s, y_r, y_1 = lat(0.2, -0.4), lat(1.5, 0.5), lat(0.3, -0.1)
        window = ScheduleWindow(0.9, 0.0, 0.25)

        def fwd_drift(x, t):
            u = -x_star.data
            ctrl = (y_1.data - x) / max(1.0 - t, 1e-4)
            return 0.5 * u + 0.5 * ctrl

        mid = euler_oracle(fwd_drift, y_s.data, 4096)

        def rev_drift(x, s):
            v = (x_star.data - x) / max(1.0 - s, 1e-4)
            if 0.0 <= s <= 0.25:
                ctrl = (y_r.data - x) / max(1.0 - s, 1e-4)
                return v + 0.9 * (ctrl - v)
            return v

        reference = euler_oracle(rev_drift, mid, 4096)
        out = cross_domain_reversal(
            y_s, y_r, field, InversionConfig(gamma=0.5, steps=28), window,
            gen_steps=50, y_1=y_1,
        )
        # frozen bound: both runs land on the attractor; oracle gap ~1e-16
        assert np.linalg.norm(out.data - reference) <= 1e-9

    def test_sampled_noise_requires_seed(self):
        field = point_target_field(lat(1.0))
        with pytest.raises(ValueError, match="seed"):
            cross_domain_reversal(
                lat(0.0), lat(1.0), field, InversionConfig(), ScheduleWindow(0.9, 0.0, 0.25),
            )

    def test_sampled_noise_is_seed_deterministic(self):
        field = gaussian_pair_field(0.0, 1.0, 2)
        kwargs = dict(
            y_s=lat(0.5, 0.5), y_r=lat(1.0, 0.0), field=field,
            inv_cfg=InversionConfig(gamma=0.5, steps=6),
            window=ScheduleWindow(0.5, 0.0, 0.5), gen_steps=6, seed=99,
        )
        assert np.array_equal(cross_domain_reversal(**kwargs).data,
                              cross_domain_reversal(**kwargs).data)
