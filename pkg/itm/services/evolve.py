"""
Evolve Service
Time-domain solvers for  u_tt = a div(b (1 + chi eta(t)) grad u).

- second-order stepper: leapfrog carried in kick-drift-kick form, so u_t at a
  step point is the centered difference (u+ - u-) / (2 dt) and the first step
  is the Taylor start-up
- first-order stepper: Stormer-Verlet on (v on faces, u), exactly reversible
  under v -> -v
- jump windows (eps = 0): the run stops at T, applies the jump, resumes

Runs are split into eta-constant segments whose ends land exactly on every
window edge, jump time and snapshot time. Within a segment the step is uniform.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft

from itm.services.geometry import (
    Grid, ScalarField, VectorField, check_same_grid,
    face_average, forward_diff, backward_div, flux_laplacian,
    spectrum, laplacian_symbol, div_b_grad,
)
from itm.services import geometry
from itm.services.media import Medium, ItmSchedule, ItmWindow
from itm.utils.errors import (
    ItmError, itm_assert,
    ERR_CFL_VIOLATION, ERR_EDGE_STRADDLE, ERR_SOLVABILITY, ERR_TIME_INVALID, ERR_FIELD_INVALID,
)
from itm.utils.helpers import times_close

logger = logging.getLogger(__name__)

DEFAULT_CFL = 0.5
STABILITY_CFL = 1.0
SOLVABILITY_RTOL = 1e-12
EDGE_RTOL = 1e-12


# =============================================================================
# States and traces
# =============================================================================

@dataclass(frozen=True, eq=False)
class WaveState:
    u: ScalarField
    ut: ScalarField
    t: float

    def __post_init__(self):
        check_same_grid(self.u, self.ut)
        itm_assert(np.isfinite(self.t), f"State time must be finite, got {self.t}", ERR_TIME_INVALID)

    @property
    def grid(self) -> Grid:
        return self.u.grid


@dataclass(frozen=True, eq=False)
class FirstOrderState:
    """v lives on faces (component j at i + e_j/2), u on nodes."""
    v: VectorField
    u: ScalarField
    t: float

    def __post_init__(self):
        itm_assert(self.v.grid == self.u.grid, "Flux and height live on different grids", ERR_FIELD_INVALID)
        itm_assert(np.isfinite(self.t), f"State time must be finite, got {self.t}", ERR_TIME_INVALID)

    @property
    def grid(self) -> Grid:
        return self.u.grid


@dataclass(frozen=True)
class Segment:
    """eta-constant stretch [t0, t1] stepped with n_steps uniform steps."""
    t0: float
    t1: float
    n_steps: int
    level: float
    in_window: bool

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def step_time(self, i: int) -> float:
        """i-th step point; the last one is t1 exactly."""
        return self.t1 if i == self.n_steps else self.t0 + i * self.dt


@dataclass
class RunTrace:
    segments: List[Segment]
    snapshot_times: List[float] = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    dt_log: List[float] = field(default_factory=list)
    events: List[Tuple[float, str]] = field(default_factory=list)
    in_window_steps: int = 0
    # segment index -> {step index -> state}; step 0 and n_steps are the segment ends
    segment_states: Dict[int, Dict[int, object]] = field(default_factory=dict)
    final: Optional[object] = None

    @property
    def total_steps(self) -> int:
        return len(self.dt_log)

    def state_at(self, t: float):
        for ts, state in zip(self.snapshot_times, self.snapshots):
            if times_close(ts, t):
                return state
        raise ItmError(f"No snapshot stored at t={t}", ERR_TIME_INVALID)

    def edges_hit(self) -> List[float]:
        return [t for t, kind in self.events if kind in ('open', 'close', 'jump')]


# =============================================================================
# Initial data
# =============================================================================

def init_state(u0: ScalarField, u1: ScalarField) -> WaveState:
    check_same_grid(u0, u1)
    return WaveState(u=u0.with_values(u0.values, 0.0), ut=u1.with_values(u1.values, 0.0), t=0.0)


def init_first_order(u0: ScalarField, u1: ScalarField, medium: Medium,
                     subtract_mean: bool = False) -> FirstOrderState:
    """
    v0 = D+ psi with  D-D+ psi = -a^{-1} u1  (zero-mean psi, solved spectrally with
    the compact-stencil symbol), so  a^{-1} u1 + D- v0 = 0  holds to round-off.
    """
    check_same_grid(u0, u1, medium.a)
    grid = u0.grid
    q = u1.values / medium.a.values
    mean = float(np.mean(q))
    rms = float(np.sqrt(np.mean(q ** 2)))
    if abs(mean) > SOLVABILITY_RTOL * rms and abs(mean) > 0:
        if not subtract_mean:
            raise ItmError(f"Mean of a^-1 u1 is {mean:.3e} (rms {rms:.3e}); v0 has no periodic solution",
                           ERR_SOLVABILITY)
        logger.warning(f"[FirstOrder] Subtracting mean {mean:.3e} of a^-1 u1 for solvability")
        q = q - mean

    symbol = laplacian_symbol(grid)
    q_hat = spectrum(q)
    psi_hat = np.zeros_like(q_hat)
    nonzero = symbol != 0
    psi_hat[nonzero] = -q_hat[nonzero] / symbol[nonzero]
    psi = sfft.ifftn(psi_hat, workers=geometry.FFT_WORKERS).real
    v0 = VectorField(grid, forward_diff(psi, grid.h))
    return FirstOrderState(v=v0, u=u0.with_values(u0.values, 0.0), t=0.0)


def wave_state_from_first_order(state: FirstOrderState, medium: Medium) -> WaveState:
    """(u, u_t) with u_t = -a D- v."""
    ut = -medium.a.values * backward_div(state.v.components, state.grid.h)
    return WaveState(u=state.u, ut=ScalarField(state.grid, ut, state.t), t=state.t)


def time_reverse(state: FirstOrderState) -> FirstOrderState:
    return FirstOrderState(v=-state.v, u=state.u, t=state.t)


# =============================================================================
# CFL and segment planning
# =============================================================================

def _level(schedule: ItmSchedule, t: float) -> float:
    w = schedule.window_at(t)
    return w.height if w is not None else 0.0


def _cfl_limit(medium: Medium, level: float, cfl_number: float) -> float:
    grid = medium.grid
    c_sq = medium.c_sq.values
    if level:
        c_sq = c_sq * (1.0 + medium.chi.values * level)
    return cfl_number * grid.h / (math.sqrt(grid.d) * math.sqrt(float(np.max(c_sq))))


def cfl_dt(medium: Medium, schedule: ItmSchedule, t_interval: Tuple[float, float],
           cfl_number: float = DEFAULT_CFL) -> float:
    """
    cfl_number * h / (sqrt(d) * max_x c_eff) on an eta-constant interval, with
    c_eff^2 = a b (1 + chi eta) at the interval midpoint.
    """
    t0, t1 = t_interval
    return _cfl_limit(medium, _level(schedule.finite_part(), 0.5 * (t0 + t1)), cfl_number)


def _edge_marks(schedule: ItmSchedule) -> List[Tuple[float, str]]:
    marks = []
    for w in schedule.active:
        if w.is_jump:
            marks.append((w.T, 'jump'))
        else:
            marks.extend([(w.start, 'open'), (w.end, 'close')])
    return marks


def plan_segments(medium: Medium, schedule: ItmSchedule, t_start: float, t_end: float,
                  snapshot_times: Sequence[float] = (), cfl_number: float = DEFAULT_CFL,
                  pace: Optional[ItmSchedule] = None) -> List[Segment]:
    """
    Split [t_start, t_end] at every active window edge (of both the physics and
    the pace schedule), every jump time and every snapshot time. Each piece gets
    n = ceil(length / dt_cfl) uniform steps, dt_cfl taken from the larger of the
    two eta levels so that runs sharing a pace share their step points exactly.
    """
    pace = schedule if pace is None else pace
    marks = {t_start, t_end}
    for sched in (schedule, pace):
        for t, kind in _edge_marks(sched):
            if t_start < t < t_end or (kind == 'jump' and t == t_end):
                marks.add(t)
    marks.update(t for t in snapshot_times if t_start < t < t_end)
    marks = sorted(marks)

    physics = schedule.finite_part()
    clock = pace.finite_part()
    segments = []
    for a, b in zip(marks, marks[1:]):
        mid = 0.5 * (a + b)
        level = _level(physics, mid)
        pace_level = _level(clock, mid)
        dt_max = _cfl_limit(medium, max(level, pace_level), cfl_number)
        n = max(1, math.ceil((b - a) / dt_max * (1 - 1e-12)))
        segments.append(Segment(t0=a, t1=b, n_steps=n, level=level, in_window=max(level, pace_level) > 0))
    return segments


def _check_step(medium: Medium, schedule: ItmSchedule, t: float, dt: float) -> float:
    """Validates a single externally requested step; returns its eta level."""
    if not dt > 0:
        raise ItmError(f"Step must be positive, got {dt}", ERR_TIME_INVALID)
    tol = EDGE_RTOL * max(1.0, abs(t), abs(t + dt))
    for e, kind in _edge_marks(schedule):
        if t + tol < e < t + dt - tol:
            raise ItmError(f"Step [{t}, {t + dt}] straddles window edge {e} ({kind})",
                           ERR_EDGE_STRADDLE)
    level = _level(schedule.finite_part(), t + 0.5 * dt)
    limit = _cfl_limit(medium, level, STABILITY_CFL)
    if dt > limit * (1 + 1e-12):
        raise ItmError(f"dt={dt:.6e} exceeds the stability bound {limit:.6e} "
                       f"(sqrt(d) c_max dt / h <= {STABILITY_CFL}, eta level {level}); "
                       f"planned runs use cfl_dt, a fraction of this bound", ERR_CFL_VIOLATION)
    return level


def effective_faces(medium: Medium, level: float) -> Tuple[np.ndarray, ...]:
    """Face values of b (1 + chi level) exactly as the steppers use them."""
    return _faces(medium, level, {})


def _faces(medium: Medium, level: float, cache: dict) -> Tuple[np.ndarray, ...]:
    """Face-averaged b (1 + chi level); level 0 returns the plain b faces."""
    if 'b' not in cache:
        cache['b'] = face_average(medium.b.values)
        cache['b_chi'] = face_average(medium.b.values * medium.chi.values)
    if level == 0.0:
        return cache['b']
    return tuple(fb + level * fc for fb, fc in zip(cache['b'], cache['b_chi']))


def jumps_at(schedule: ItmSchedule, t: float) -> List[ItmWindow]:
    return [w for w in schedule.active if w.is_jump and w.T == t]


# =============================================================================
# Second-order solver
# =============================================================================

def _kdk(u, ut, acc, a, faces, h, dt, force_next=None):
    ut_half = ut + 0.5 * dt * acc
    u_new = u + dt * ut_half
    acc_new = a * flux_laplacian(u_new, faces, h)
    if force_next is not None:
        acc_new = acc_new + force_next
    return u_new, ut_half + 0.5 * dt * acc_new, acc_new


def step_second_order(state: WaveState, medium: Medium, schedule: ItmSchedule, dt: float) -> WaveState:
    """One leapfrog step from state.t; the step must sit inside one eta-constant stretch."""
    check_same_grid(state.u, medium.a)
    level = _check_step(medium, schedule, state.t, dt)
    faces = _faces(medium, level, {})
    a, h = medium.a.values, medium.grid.h
    acc = a * flux_laplacian(state.u.values, faces, h)
    u, ut, _ = _kdk(state.u.values, state.ut.values, acc, a, faces, h, dt)
    t = state.t + dt
    return WaveState(u=ScalarField(state.grid, u, t), ut=ScalarField(state.grid, ut, t), t=t)


def apply_jump(state: WaveState, medium: Medium, eta0: float, chi: Optional[ScalarField] = None) -> WaveState:
    """u_t <- u_t + eta0 a div(b chi grad u), with the stepper's own flux stencil."""
    chi = medium.chi if chi is None else chi
    if eta0 == 0:
        return state
    b_chi = ScalarField(state.grid, medium.b.values * chi.values)
    kick = eta0 * medium.a.values * div_b_grad(state.u, b_chi, nonnegative=True).values
    return WaveState(u=state.u, ut=state.ut.with_values(state.ut.values + kick), t=state.t)


def march_second_order(u: np.ndarray, ut: np.ndarray, medium: Medium, segments: Sequence[Segment],
                       forcing: Optional[Callable[[int, int], Optional[np.ndarray]]] = None,
                       impulse: Optional[Callable[[int, np.ndarray, np.ndarray], np.ndarray]] = None,
                       on_point: Optional[Callable[[int, int, np.ndarray, np.ndarray], None]] = None,
                       on_segment_end: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None):
    """
    Array-level leapfrog over planned segments.

    forcing(k, i) adds a source at step point i of segment k (trapezoid weighting).
    impulse(k, u, ut) returns the new u_t at the end of segment k.
    on_point(k, i, u, ut) sees every step point, segment ends before the impulse.
    on_segment_end(k, u, ut) runs after the impulse.
    """
    a, h = medium.a.values, medium.grid.h
    cache = {}
    for k, seg in enumerate(segments):
        faces = _faces(medium, seg.level, cache)
        dt = seg.dt
        acc = a * flux_laplacian(u, faces, h)
        if forcing is not None:
            f0 = forcing(k, 0)
            if f0 is not None:
                acc = acc + f0
        if on_point is not None:
            on_point(k, 0, u, ut)
        for i in range(1, seg.n_steps + 1):
            f = forcing(k, i) if forcing is not None else None
            u, ut, acc = _kdk(u, ut, acc, a, faces, h, dt, f)
            if on_point is not None:
                on_point(k, i, u, ut)
        if impulse is not None:
            ut = impulse(k, u, ut)
        if on_segment_end is not None:
            on_segment_end(k, u, ut)
    return u, ut


def _snapshot_times(times: Sequence[float], t_start: float, t_end: float) -> List[float]:
    out = sorted(set(float(t) for t in times))
    for t in out:
        if not t_start <= t <= t_end:
            raise ItmError(f"Snapshot time {t} outside [{t_start}, {t_end}]", ERR_TIME_INVALID)
    return out


def adaptive_run(state: WaveState, medium: Medium, schedule: ItmSchedule, t_end: float,
                 observers: Sequence[float] = (), *, callback: Optional[Callable] = None,
                 cfl_number: float = DEFAULT_CFL, pace: Optional[ItmSchedule] = None,
                 record: Optional[str] = None) -> RunTrace:
    """
    Advance state to t_end with CFL-sized steps aligned to every window edge.

    Args:
        observers: snapshot times; the trace stores the state at each of them
            (a snapshot at a jump time is taken after the jump).
        callback: called with every snapshot state as it is produced.
        pace: schedule that sets step sizes and alignment (defaults to schedule).
        record: None, 'window' (step points of in-window segments) or 'all'.
    """
    check_same_grid(state.u, medium.a)
    if t_end < state.t:
        raise ItmError(f"t_end={t_end} is before the state time {state.t}", ERR_TIME_INVALID)
    times = _snapshot_times(observers, state.t, t_end)
    segments = plan_segments(medium, schedule, state.t, t_end, times, cfl_number, pace)
    trace = RunTrace(segments=segments)
    grid = state.grid

    def deliver(t, u, ut):
        snap = WaveState(u=ScalarField(grid, u.copy(), t), ut=ScalarField(grid, ut.copy(), t), t=t)
        trace.snapshot_times.append(t)
        trace.snapshots.append(snap)
        if callback is not None:
            callback(snap)

    if times and times[0] == state.t:
        deliver(state.t, state.u.values, state.ut.values)

    edge_kinds = {}
    for t, kind in _edge_marks(pace if pace is not None else schedule) + _edge_marks(schedule):
        edge_kinds.setdefault(t, kind)

    jump_clock = pace if pace is not None else schedule
    jump_ends = {k for k, seg in enumerate(segments) if jumps_at(jump_clock, seg.t1) or jumps_at(schedule, seg.t1)}

    def on_point(k, i, u, ut):
        seg = segments[k]
        if i > 0:
            trace.dt_log.append(seg.dt)
            if seg.in_window:
                trace.in_window_steps += 1
        if (record == 'all' or (record == 'window' and seg.in_window)
                or (record == 'window' and k in jump_ends and i == seg.n_steps)):
            t = seg.step_time(i)
            trace.segment_states.setdefault(k, {})[i] = WaveState(
                u=ScalarField(grid, u, t), ut=ScalarField(grid, ut, t), t=t)

    def impulse(k, u, ut):
        t = segments[k].t1
        for w in jumps_at(schedule, t):
            jumped = apply_jump(WaveState(ScalarField(grid, u, t), ScalarField(grid, ut, t), t),
                                medium, w.eta0)
            ut = jumped.ut.values
        return ut

    def on_segment_end(k, u, ut):
        t = segments[k].t1
        if t in edge_kinds:
            trace.events.append((t, edge_kinds[t]))
        if any(times_close(t, s) for s in times):
            deliver(t, u, ut)

    u, ut = march_second_order(state.u.values, state.ut.values, medium, segments,
                               impulse=impulse, on_point=on_point, on_segment_end=on_segment_end)
    trace.final = WaveState(u=ScalarField(grid, u, t_end), ut=ScalarField(grid, ut, t_end), t=t_end)
    logger.debug(f"[Evolve] {len(segments)} segments, {trace.total_steps} steps "
                 f"({trace.in_window_steps} in window) to t={t_end}")
    return trace


# =============================================================================
# First-order solver
# =============================================================================

def _verlet(v, u, a, faces, h, dt):
    v_half = tuple(vj - 0.5 * dt * fj * gj for vj, fj, gj in zip(v, faces, forward_diff(u, h)))
    u_new = u - dt * a * backward_div(v_half, h)
    v_new = tuple(vj - 0.5 * dt * fj * gj for vj, fj, gj in zip(v_half, faces, forward_diff(u_new, h)))
    return v_new, u_new


def step_first_order(state: FirstOrderState, medium: Medium, schedule: ItmSchedule, dt: float) -> FirstOrderState:
    """
    v <- v - dt/2 b_eff D+u;  u <- u - dt a D- v;  v <- v - dt/2 b_eff D+u
    with b_eff face-averaged and constant over the step.
    """
    check_same_grid(state.u, medium.a)
    level = _check_step(medium, schedule, state.t, dt)
    faces = _faces(medium, level, {})
    v, u = _verlet(state.v.components, state.u.values, medium.a.values, faces, medium.grid.h, dt)
    t = state.t + dt
    return FirstOrderState(v=VectorField(state.grid, v), u=ScalarField(state.grid, u, t), t=t)


def apply_jump_first_order(state: FirstOrderState, medium: Medium, eta0: float) -> FirstOrderState:
    """v <- v - eta0 (b chi)_face D+u; the u_t it implies jumps by eta0 a div(b chi grad u)."""
    if eta0 == 0:
        return state
    faces = face_average(medium.b.values * medium.chi.values)
    grad = forward_diff(state.u.values, state.grid.h)
    v = tuple(vj - eta0 * fj * gj for vj, fj, gj in zip(state.v.components, faces, grad))
    return FirstOrderState(v=VectorField(state.grid, v), u=state.u, t=state.t)


def first_order_run(state: FirstOrderState, medium: Medium, schedule: ItmSchedule, t_end: float,
                    observers: Sequence[float] = (), *, cfl_number: float = DEFAULT_CFL,
                    pace: Optional[ItmSchedule] = None) -> RunTrace:
    """First-order counterpart of adaptive_run (same segment planner)."""
    check_same_grid(state.u, medium.a)
    if t_end < state.t:
        raise ItmError(f"t_end={t_end} is before the state time {state.t}", ERR_TIME_INVALID)
    times = _snapshot_times(observers, state.t, t_end)
    segments = plan_segments(medium, schedule, state.t, t_end, times, cfl_number, pace)
    trace = RunTrace(segments=segments)
    grid = state.grid
    a, h = medium.a.values, grid.h
    cache = {}
    v, u = state.v.components, state.u.values

    def deliver(t):
        trace.snapshot_times.append(t)
        trace.snapshots.append(FirstOrderState(v=VectorField(grid, v), u=ScalarField(grid, u, t), t=t))

    if times and times[0] == state.t:
        deliver(state.t)

    edge_kinds = {t: kind for t, kind in _edge_marks(schedule)}

    for seg in segments:
        faces = _faces(medium, seg.level, cache)
        dt = seg.dt
        for _ in range(seg.n_steps):
            v, u = _verlet(v, u, a, faces, h, dt)
            trace.dt_log.append(dt)
            if seg.in_window:
                trace.in_window_steps += 1
        t = seg.t1
        for w in jumps_at(schedule, t):
            jumped = apply_jump_first_order(FirstOrderState(VectorField(grid, v), ScalarField(grid, u, t), t),
                                            medium, w.eta0)
            v = jumped.v.components
        if t in edge_kinds:
            trace.events.append((t, edge_kinds[t]))
        if any(times_close(t, s) for s in times):
            deliver(t)

    trace.final = FirstOrderState(v=VectorField(grid, v), u=ScalarField(grid, u, t_end), t=t_end)
    return trace
