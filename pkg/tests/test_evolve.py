import math

import numpy as np
import pytest

from conftest import gaussian, sine
from itm.services.geometry import ScalarField, VectorField, div_b_grad, l2_norm, make_grid, zeros
from itm.services.media import ItmWindow, Medium, constant_profile, gaussian_bump, make_schedule, preset_free
from itm.services.evolve import (
    WaveState, adaptive_run, apply_jump, apply_jump_first_order, cfl_dt, first_order_run, init_first_order,
    init_state, plan_segments, step_first_order, step_second_order, time_reverse, wave_state_from_first_order,
)
from itm.services.spectral_oracle import evolve_exact
from itm.utils.errors import ItmError


def rest_state(u0):
    return init_state(u0, u0.with_values(np.zeros(u0.grid.shape)))


def rel_err(a, b):
    return l2_norm(a - b) / l2_norm(b)


class TestInitState:
    def test_zero_state(self, grid_2pi):
        state = init_state(zeros(grid_2pi), zeros(grid_2pi))
        assert state.t == 0.0
        assert not np.any(state.u.values)

    def test_rest_state(self, grid_2pi):
        state = rest_state(sine(grid_2pi))
        np.testing.assert_array_equal(state.ut.values, 0.0)

    def test_grid_mismatch(self, grid_2pi):
        with pytest.raises(ItmError) as exc:
            init_state(zeros(grid_2pi), zeros(make_grid(1, 2 * math.pi, 32)))
        assert exc.value.code == "ITM-102"


class TestCflDt:
    def test_free_medium(self):
        medium = preset_free(make_grid(1, 6.4, 64))
        assert cfl_dt(medium, make_schedule(), (0.0, 1.0)) == pytest.approx(0.05)

    def test_inside_window_shrinks_by_ten(self):
        medium = preset_free(make_grid(1, 6.4, 64))
        sched = make_schedule([ItmWindow(1.0, 0.01, 0.99)])
        assert cfl_dt(medium, sched, (0.995, 1.005)) == pytest.approx(0.005)

    def test_uses_max_speed(self):
        grid = make_grid(2, 6.4, 64)
        one = constant_profile(grid, 1.0)
        medium = Medium(a=one, b=gaussian_bump(grid, width=0.5, amplitude=3.0, base=1.0), chi=one)
        assert cfl_dt(medium, make_schedule(), (0.0, 1.0)) == pytest.approx(0.5 * 0.1 / (math.sqrt(2) * 2.0))


class TestSecondOrder:
    def test_zero_state_stays_zero(self, free_line):
        state = init_state(zeros(free_line.grid), zeros(free_line.grid))
        out = step_second_order(state, free_line, make_schedule(), 0.01)
        assert not np.any(out.u.values)
        assert out.t == pytest.approx(0.01)

    def test_straddled_edge_rejected(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.1, 0.5)])
        state = WaveState(u=gaussian(line_grid), ut=zeros(line_grid), t=0.93)
        with pytest.raises(ItmError) as exc:
            step_second_order(state, free_line, sched, 0.03)
        assert exc.value.code == "ITM-401"

    def test_cfl_violation_rejected(self, free_line, line_grid):
        with pytest.raises(ItmError) as exc:
            step_second_order(rest_state(gaussian(line_grid)), free_line, make_schedule(), 0.2)
        assert exc.value.code == "ITM-400"
        assert "stability bound" in exc.value.message
        assert "sqrt(d) c_max dt / h <= 1.0" in exc.value.message

    def test_converges_at_second_order(self):
        sched = make_schedule([ItmWindow(1.0, 0.05, 1.0)])
        errors = []
        for N in (32, 64, 128):
            grid = make_grid(1, 2 * math.pi, N)
            u0 = sine(grid) + 0.5 * sine(grid, 2, math.pi / 2)
            medium = preset_free(grid)
            trace = adaptive_run(rest_state(u0), medium, sched, 2.0)
            exact = evolve_exact(u0, zeros(grid), sched, 2.0)
            errors.append(l2_norm(trace.final.u - exact.u))
        orders = [math.log2(c / f) for c, f in zip(errors, errors[1:])]
        for order in orders:
            assert 1.8 <= order <= 2.2

    def test_silenced_run_is_bitwise_unperturbed(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.05, 0.0)])
        state = rest_state(gaussian(line_grid))
        quiet = adaptive_run(state, free_line, sched, 2.0)
        free = adaptive_run(state, free_line, make_schedule(), 2.0)
        np.testing.assert_array_equal(quiet.final.u.values, free.final.u.values)
        np.testing.assert_array_equal(quiet.final.ut.values, free.final.ut.values)

    def test_single_step_matches_run(self, free_line, line_grid):
        state = rest_state(gaussian(line_grid))
        dt = cfl_dt(free_line, make_schedule(), (0.0, 0.05))
        stepped = step_second_order(state, free_line, make_schedule(), dt)
        run = adaptive_run(state, free_line, make_schedule(), dt)
        np.testing.assert_allclose(stepped.u.values, run.final.u.values, atol=1e-15)


class TestAdaptiveRun:
    def test_observer_stamps(self, free_line, line_grid):
        seen = []
        trace = adaptive_run(rest_state(gaussian(line_grid)), free_line, make_schedule(), 1.0,
                             observers=[0.5, 1.0], callback=lambda s: seen.append(s.t))
        assert trace.snapshot_times == [0.5, 1.0]
        assert seen == [0.5, 1.0]
        assert trace.state_at(0.5).u.time_stamp == 0.5

    def test_edges_hit_exactly(self, free_line, line_grid):
        w = ItmWindow(1.0, 0.05, 0.5)
        trace = adaptive_run(rest_state(gaussian(line_grid)), free_line, make_schedule([w]), 2.0)
        assert trace.edges_hit() == [w.start, w.end]

    def test_segments_never_straddle_edges(self, free_line):
        sched = make_schedule([ItmWindow(1.0, 0.05, 0.5), ItmWindow(1.6, 0.1, 0.2)])
        for seg in plan_segments(free_line, sched, 0.0, 3.0, [0.33, 1.62]):
            for edge in sched.edges() + [0.33, 1.62]:
                assert not seg.t0 < edge < seg.t1

    def test_window_steps_are_counted(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.05, 0.5)])
        trace = adaptive_run(rest_state(gaussian(line_grid)), free_line, sched, 2.0, record='window')
        assert trace.in_window_steps > 0
        stored = sum(len(states) for states in trace.segment_states.values())
        assert stored == trace.in_window_steps + 1

    def test_pace_shares_step_points(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.05, 0.5)])
        state = rest_state(gaussian(line_grid))
        perturbed = adaptive_run(state, free_line, sched, 2.0)
        paced = adaptive_run(state, free_line, sched.silenced(), 2.0, pace=sched)
        assert paced.dt_log == perturbed.dt_log

    def test_matches_oracle_at_twice_window_time(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.05, 1.0)])
        u0 = gaussian(line_grid)
        trace = adaptive_run(rest_state(u0), free_line, sched, 2.0)
        exact = evolve_exact(u0, zeros(line_grid), sched, 2.0)
        assert rel_err(trace.final.u, exact.u) < 0.02

    def test_finite_speed(self, free_line, line_grid):
        u0 = gaussian(line_grid, width=0.5, center=10.0)
        t = 2.0
        trace = adaptive_run(rest_state(u0), free_line, make_schedule(), t)
        support = 0.5 * math.sqrt(2 * math.log(1e10))
        far = np.abs(line_grid.coordinates()[0] - 10.0) > support + t + 4 * line_grid.h
        assert np.any(far)
        assert np.max(np.abs(trace.final.u.values[far])) <= 1e-6 * np.max(np.abs(u0.values))

    def test_end_before_start_rejected(self, free_line, line_grid):
        state = WaveState(u=gaussian(line_grid), ut=zeros(line_grid), t=1.0)
        with pytest.raises(ItmError) as exc:
            adaptive_run(state, free_line, make_schedule(), 0.5)
        assert exc.value.code == "ITM-403"

    def test_jump_applied_once(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.0, 0.5)])
        state = rest_state(gaussian(line_grid))
        trace = adaptive_run(state, free_line, sched, 1.0, observers=[1.0])
        before = adaptive_run(state, free_line, make_schedule(), 1.0, pace=sched)
        kicked = apply_jump(before.final, free_line, 0.5)
        np.testing.assert_allclose(trace.state_at(1.0).ut.values, kicked.ut.values, atol=1e-14)
        assert (1.0, 'jump') in trace.events


class TestApplyJump:
    def test_zero_weight_is_identity(self, grid_2pi):
        state = rest_state(sine(grid_2pi))
        assert apply_jump(state, preset_free(grid_2pi), 0.0) is state

    def test_sine_kick(self, grid_2pi):
        u0 = sine(grid_2pi)
        out = apply_jump(rest_state(u0), preset_free(grid_2pi), 1.0)
        np.testing.assert_array_equal(out.u.values, u0.values)
        np.testing.assert_allclose(out.ut.values, -u0.values, atol=grid_2pi.h ** 2)

    def test_commutes_with_translation(self, grid_2pi, rng):
        medium = preset_free(grid_2pi)
        u = rng.standard_normal(64)
        shifted = apply_jump(rest_state(ScalarField(grid_2pi, np.roll(u, 5))), medium, 0.7)
        plain = apply_jump(rest_state(ScalarField(grid_2pi, u)), medium, 0.7)
        np.testing.assert_allclose(shifted.ut.values, np.roll(plain.ut.values, 5), atol=1e-12)

    def test_uses_mask(self, line_grid):
        one = constant_profile(line_grid, 1.0)
        medium = Medium(a=one, b=one, chi=constant_profile(line_grid, 0.0))
        state = rest_state(gaussian(line_grid))
        np.testing.assert_array_equal(apply_jump(state, medium, 2.0).ut.values, 0.0)


class TestFirstOrder:
    def test_zero_velocity_gives_zero_flux(self, free_line, line_grid):
        state = init_first_order(gaussian(line_grid), zeros(line_grid), free_line)
        np.testing.assert_array_equal(state.v.components[0], 0.0)

    def test_sine_flux(self):
        grid = make_grid(1, 2 * math.pi, 64)
        h = grid.h
        x = grid.coordinates()[0]
        state = init_first_order(zeros(grid), sine(grid), preset_free(grid))
        expected = np.cos(x + h / 2) * h / (2 * math.sin(h / 2))
        np.testing.assert_allclose(state.v.components[0], expected, atol=1e-12)
        np.testing.assert_allclose(state.v.components[0], np.cos(x), atol=1e-1)

    def test_divergence_constraint(self, rng):
        grid = make_grid(2, 4.0, 16)
        one = constant_profile(grid, 1.0)
        a = gaussian_bump(grid, width=1.0, amplitude=0.5, base=1.0)
        medium = Medium(a=a, b=one, chi=one)
        q = rng.standard_normal(grid.shape)
        q -= q.mean()
        u1 = ScalarField(grid, q * a.values)
        state = init_first_order(zeros(grid), u1, medium)
        recovered = wave_state_from_first_order(state, medium)
        np.testing.assert_allclose(recovered.ut.values, u1.values, atol=1e-11)

    def test_solvability(self, free_line, line_grid):
        u1 = constant_profile(line_grid, 1.0)
        with pytest.raises(ItmError) as exc:
            init_first_order(zeros(line_grid), u1, free_line)
        assert exc.value.code == "ITM-402"
        state = init_first_order(zeros(line_grid), u1, free_line, subtract_mean=True)
        np.testing.assert_allclose(state.v.components[0], 0.0, atol=1e-12)

    def test_zero_state_stays_zero(self, free_line, line_grid):
        state = init_first_order(zeros(line_grid), zeros(line_grid), free_line)
        out = step_first_order(state, free_line, make_schedule(), 0.01)
        assert not np.any(out.u.values)
        assert not np.any(out.v.components[0])

    def test_matches_second_order(self, free_line, line_grid):
        sched = make_schedule([ItmWindow(1.0, 0.05, 0.5)])
        u0, u1 = gaussian(line_grid), zeros(line_grid)
        second = adaptive_run(init_state(u0, u1), free_line, sched, 2.0)
        first = first_order_run(init_first_order(u0, u1, free_line), free_line, sched, 2.0)
        assert rel_err(first.final.u, second.final.u) < 1e-3

    def test_time_reverse_involution(self, free_line, line_grid, rng):
        state = init_first_order(gaussian(line_grid), zeros(line_grid), free_line)
        state = type(state)(v=VectorField(line_grid, (rng.standard_normal(256),)), u=state.u, t=0.0)
        twice = time_reverse(time_reverse(state))
        np.testing.assert_array_equal(twice.v.components[0], state.v.components[0])
        np.testing.assert_array_equal(twice.u.values, state.u.values)

    @pytest.mark.parametrize('N', [64, 128, 256])
    @pytest.mark.parametrize('window', [None, ItmWindow(0.5, 0.125, 0.5), ItmWindow(0.5, 0.0, 0.5)],
                             ids=['free', 'finite-window', 'jump'])
    def test_reversal_round_trip(self, N, window):
        grid = make_grid(1, 20.0, N)
        one = constant_profile(grid, 1.0)
        medium = Medium(a=one, b=one, chi=gaussian_bump(grid, width=2.0))
        # the return leg sees the window mirrored about t = 1
        there = make_schedule([window] if window else [])
        back_again = make_schedule([ItmWindow(2.0 - window.T, window.eps, window.eta0)] if window else [])
        start = init_first_order(gaussian(grid), zeros(grid), medium)
        forward = first_order_run(start, medium, there, 1.0).final
        back = first_order_run(time_reverse(forward), medium, back_again, 2.0).final
        home = time_reverse(back)
        assert l2_norm(forward.u - start.u) > 0.1 * l2_norm(start.u)
        np.testing.assert_allclose(home.u.values, start.u.values, atol=1e-10)
        np.testing.assert_allclose(home.v.components[0], start.v.components[0], atol=1e-10)

    def test_flux_jump_matches_wave_jump(self, line_grid, rng):
        one = constant_profile(line_grid, 1.0)
        chi = gaussian_bump(line_grid, width=2.0)
        medium = Medium(a=constant_profile(line_grid, 2.0), b=one, chi=chi)
        state = init_first_order(gaussian(line_grid), zeros(line_grid), medium)
        jumped = wave_state_from_first_order(apply_jump_first_order(state, medium, 0.8), medium)
        expected = 0.8 * 2.0 * div_b_grad(state.u, ScalarField(line_grid, chi.values), nonnegative=True).values
        np.testing.assert_allclose(jumped.ut.values, expected, atol=1e-12)
