"""
Refocus Service
Remainder fields (w, W) of the perturbed solution, the refocusing prediction
-(eta0/2) u1 and the quality metrics of the refocused field at t = 2T.

The remainder is obtained by solving its own forced unperturbed problem on the
perturbed run's step points:

    w_tt = a div(b grad w) + eta a div(b chi grad(u_eps - U)),   w(0) = w_t(0) = 0
    W_t  = -b grad w - eta b chi grad(u_eps - U),                W(0) = 0

so that a^{-1} w_t + div W = 0 holds at every step point.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from itm.services.evolve import RunTrace, jumps_at, march_second_order
from itm.services.geometry import (
    ScalarField, VectorField, face_average, forward_diff, flux_laplacian,
)
from itm.services.media import ItmSchedule, Medium, periodic_distance, periodic_offsets
from itm.utils.errors import ItmError, ERR_EMPTY_BALL, ERR_TRACE_MISALIGNED
from itm.utils.helpers import times_close

logger = logging.getLogger(__name__)

SUPPORT_THRESHOLD = 1e-3


@dataclass
class RemainderRun:
    times: List[float]
    w: List[ScalarField]
    W: List[VectorField]
    # (t, ||D+(u_eps - U)||_L2) at every in-window step point
    forcing_norms: List[Tuple[float, float]] = field(default_factory=list)

    def _index(self, t: float) -> int:
        for i, ts in enumerate(self.times):
            if times_close(ts, t):
                return i
        raise ItmError(f"Remainder not stored at t={t}", ERR_TRACE_MISALIGNED)

    def w_at(self, t: float) -> ScalarField:
        return self.w[self._index(t)]

    def W_at(self, t: float) -> VectorField:
        return self.W[self._index(t)]

    @property
    def max_forcing_norm(self) -> float:
        return max((n for _, n in self.forcing_norms), default=0.0)


@dataclass(frozen=True)
class RefocusReport:
    peak_location_error: float
    amplitude_ratio: float
    shape_correlation: float
    epsilon: Optional[float] = None
    eta0: Optional[float] = None
    T: Optional[float] = None
    radius: Optional[float] = None
    argmax_distance: Optional[float] = None

    def as_row(self) -> dict:
        return {
            'epsilon': self.epsilon, 'eta0': self.eta0, 'T': self.T, 'radius': self.radius,
            'peak_location_error': self.peak_location_error,
            'argmax_distance': self.argmax_distance,
            'amplitude_ratio': self.amplitude_ratio,
            'shape_correlation': self.shape_correlation,
        }


# =============================================================================
# Forced solves
# =============================================================================

def _check_aligned(perturbed: RunTrace, unperturbed: RunTrace) -> None:
    a_segs, b_segs = perturbed.segments, unperturbed.segments
    if len(a_segs) != len(b_segs) or any(
            (x.t0, x.t1, x.n_steps) != (y.t0, y.t1, y.n_steps) for x, y in zip(a_segs, b_segs)):
        raise ItmError("Perturbed and unperturbed runs do not share step points "
                       "(run the unperturbed problem with pace=<perturbed schedule>)",
                       ERR_TRACE_MISALIGNED)


def _recorded(trace: RunTrace, k: int, i: int, label: str) -> np.ndarray:
    try:
        return trace.segment_states[k][i].u.values
    except KeyError:
        raise ItmError(f"{label} run has no recorded state at segment {k}, step {i} "
                       f"(run it with record='window')", ERR_TRACE_MISALIGNED)


def _target_times(times: Sequence[float], trace: RunTrace) -> List[float]:
    ends = [trace.segments[0].t0] + [s.t1 for s in trace.segments] if trace.segments else []
    out = []
    for t in sorted(set(float(t) for t in times)):
        if not any(times_close(t, e) for e in ends):
            raise ItmError(f"Time {t} is not a step point of the perturbed run; add it to its snapshot times",
                           ERR_TRACE_MISALIGNED)
        out.append(t)
    return out


def _forced_solve(perturbed: RunTrace, medium: Medium, schedule: ItmSchedule, times: Sequence[float],
                  source, with_flux: bool):
    """
    Zero-data unperturbed solve on the perturbed step points, forced by
    level * a * div(b chi grad source(k, i)) inside windows and kicked by
    eta0 * a * div(b chi grad source) at jump times.
    """
    grid = medium.grid
    h = grid.h
    a = medium.a.values
    b_faces = face_average(medium.b.values)
    bchi_faces = face_average(medium.b.values * medium.chi.values)
    segments = perturbed.segments
    targets = _target_times(times, perturbed)

    zero = np.zeros(grid.shape)
    stored: Dict[float, Tuple[np.ndarray, Tuple[np.ndarray, ...]]] = {}
    flux = {'W': tuple(zero.copy() for _ in range(grid.d)), 'g_prev': None}

    def forcing(k, i):
        seg = segments[k]
        if seg.level == 0.0:
            return None
        return seg.level * a * flux_laplacian(source(k, i), bchi_faces, h)

    def flux_rate(k, i, w):
        seg = segments[k]
        g = tuple(-fb * gw for fb, gw in zip(b_faces, forward_diff(w, h)))
        if seg.level != 0.0:
            gd = forward_diff(source(k, i), h)
            g = tuple(gj - seg.level * fc * gdj for gj, fc, gdj in zip(g, bchi_faces, gd))
        return g

    def on_point(k, i, w, wt):
        if not with_flux:
            return
        g = flux_rate(k, i, w)
        if i > 0:
            dt = segments[k].dt
            flux['W'] = tuple(W + 0.5 * dt * (gp + gn) for W, gp, gn in zip(flux['W'], flux['g_prev'], g))
        flux['g_prev'] = g

    def impulse(k, w, wt):
        t = segments[k].t1
        for jw in jumps_at(schedule, t):
            s = source(k, segments[k].n_steps)
            wt = wt + jw.eta0 * a * flux_laplacian(s, bchi_faces, h)
            if with_flux:
                gd = forward_diff(s, h)
                flux['W'] = tuple(W - jw.eta0 * fc * gdj for W, fc, gdj in zip(flux['W'], bchi_faces, gd))
        return wt

    def on_segment_end(k, w, wt):
        t = segments[k].t1
        for target in targets:
            if times_close(target, t):
                stored[target] = (w.copy(), tuple(W.copy() for W in flux['W']))

    t_start = segments[0].t0 if segments else 0.0
    for target in targets:
        if times_close(target, t_start):
            stored[target] = (zero.copy(), tuple(zero.copy() for _ in range(grid.d)))

    # same step points, unperturbed operator; the window enters only through the forcing
    clock = [replace(seg, level=0.0) for seg in segments]
    march_second_order(zero.copy(), zero.copy(), medium, clock, forcing=forcing, impulse=impulse,
                       on_point=on_point, on_segment_end=on_segment_end)
    return targets, stored


def remainder_fields(perturbed: RunTrace, unperturbed: RunTrace, medium: Medium,
                     schedule: ItmSchedule, times: Sequence[float]) -> RemainderRun:
    """
    w and W at the requested times. Both traces must come from runs with
    record='window' on the same step points; requested times must be step
    points (snapshot times of the perturbed run).
    """
    _check_aligned(perturbed, unperturbed)
    grid = medium.grid

    def difference(k, i):
        return _recorded(perturbed, k, i, "Perturbed") - _recorded(unperturbed, k, i, "Unperturbed")

    targets, stored = _forced_solve(perturbed, medium, schedule, times, difference, with_flux=True)

    return RemainderRun(
        times=targets,
        w=[ScalarField(grid, stored[t][0], t) for t in targets],
        W=[VectorField(grid, stored[t][1]) for t in targets],
        forcing_norms=forcing_gradient_norms(perturbed, unperturbed, medium),
    )


def scattered_field(perturbed: RunTrace, unperturbed: RunTrace, medium: Medium,
                    schedule: ItmSchedule, times: Sequence[float]) -> List[ScalarField]:
    """
    Singly scattered part (reflected plus forward-scattered), forced by U alone.
    u_eps - U = scattered + w at every step point, up to round-off.
    """
    _check_aligned(perturbed, unperturbed)
    grid = medium.grid

    def background(k, i):
        return _recorded(unperturbed, k, i, "Unperturbed")

    targets, stored = _forced_solve(perturbed, medium, schedule, times, background, with_flux=False)
    return [ScalarField(grid, stored[t][0], t) for t in targets]


def forcing_gradient_norms(perturbed: RunTrace, unperturbed: RunTrace, medium: Medium) -> List[Tuple[float, float]]:
    """||grad(u_eps - U)|| at in-window step points (the O(eps) gradient bound)."""
    _check_aligned(perturbed, unperturbed)
    grid = medium.grid
    out = []
    for k, seg in enumerate(perturbed.segments):
        if seg.level == 0.0:
            continue
        for i in range(seg.n_steps + 1):
            diff = _recorded(perturbed, k, i, "Perturbed") - _recorded(unperturbed, k, i, "Unperturbed")
            grad = forward_diff(diff, grid.h)
            out.append((seg.step_time(i), float(np.sqrt(sum(np.sum(g ** 2) for g in grad) * grid.cell_volume))))
    return out


# =============================================================================
# Prediction and metrics
# =============================================================================

def refocus_prediction(u1: ScalarField, eta0: float) -> ScalarField:
    """-(eta0 / 2) u1: the time derivative of the initial data, mirrored."""
    if not np.any(u1.values):
        logger.warning("[Refocus] u1 is identically zero; the refocused field is invisible in u")
    return u1.with_values(-0.5 * eta0 * u1.values)


def support_radius(fields: Sequence[ScalarField], center, threshold: float = SUPPORT_THRESHOLD) -> float:
    """Largest distance from center where any field exceeds threshold * its peak."""
    radius = 0.0
    for f in fields:
        peak = float(np.max(np.abs(f.values)))
        if peak == 0:
            continue
        r = periodic_distance(f.grid, center)
        above = np.abs(f.values) > threshold * peak
        if np.any(above):
            radius = max(radius, float(np.max(r[above])))
    return radius


def refocus_ball_radius(medium: Medium, T: float, source_radius: float) -> float:
    """
    Radius of the ball around the source that the forward fronts have left by
    t = 2T: c_min * 2T - source_radius, floored at two cells.
    """
    h = medium.grid.h
    radius = medium.c_min * 2.0 * T - source_radius
    if radius < 2 * h:
        logger.warning(f"[Refocus] Forward fronts have not cleared the source region "
                       f"(radius {radius:.3f} < 2h); using 2h")
        radius = 2 * h
    return radius


def refocus_metrics(field_at_2T: ScalarField, prediction: ScalarField, source_center,
                    radius: float, *, epsilon: Optional[float] = None, eta0: Optional[float] = None,
                    T: Optional[float] = None) -> RefocusReport:
    """
    Compare the measured field with the prediction on the ball |x - center| <= radius.

    Peak location is the |field|^2-weighted centroid of the measured field in the
    ball; u1 is typically odd about the source, so its argmax is not the source.
    The argmax distance is reported alongside as argmax_distance.
    """
    grid = field_at_2T.grid
    distance = periodic_distance(grid, source_center)
    mask = distance <= radius
    if not np.any(mask):
        raise ItmError(f"No grid points within radius {radius} of {source_center}", ERR_EMPTY_BALL)

    m = field_at_2T.values[mask]
    p = prediction.values[mask]

    weight = m ** 2
    if np.sum(weight) > 0:
        offsets = [dx[mask] for dx in periodic_offsets(grid, source_center)]
        centroid = [float(np.sum(weight * dx) / np.sum(weight)) for dx in offsets]
        location_error = float(np.sqrt(sum(c ** 2 for c in centroid)))
    else:
        location_error = float('inf')

    peak_idx = int(np.argmax(np.abs(m)))
    argmax_distance = float(distance[mask][peak_idx])

    p_peak = float(np.max(np.abs(p)))
    ratio = float(np.max(np.abs(m))) / p_peak if p_peak > 0 else float('inf')

    norm = float(np.linalg.norm(m) * np.linalg.norm(p))
    correlation = float(np.clip(np.dot(m, p) / norm, -1.0, 1.0)) if norm > 0 else 0.0

    return RefocusReport(peak_location_error=location_error, amplitude_ratio=ratio,
                         shape_correlation=correlation, epsilon=epsilon, eta0=eta0, T=T, radius=radius,
                         argmax_distance=argmax_distance)
