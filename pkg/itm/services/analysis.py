"""
Analysis Service
Discrete Sobolev norms, the energies E and F, conservation and uniformity
diagnostics, and log-log rate fitting.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from itm.services.evolve import FirstOrderState, RunTrace, WaveState, effective_faces
from itm.services.geometry import (
    ScalarField, VectorField, check_same_grid, face_average, forward_diff, flux_laplacian,
    fourier_multiplier, l2_norm, sobolev_symbol,
)
from itm.services.media import ItmSchedule, Medium
from itm.utils.errors import (
    ItmError, ERR_NONCONSTANT_A, ERR_RATE_INPUT, ERR_SCENARIO_MISMATCH,
)

logger = logging.getLogger(__name__)

MAX_SOBOLEV_INDEX = 4.0
UNIFORMITY_RATIO = 3.0


@dataclass(frozen=True)
class NormSpec:
    s: float

    def __post_init__(self):
        if not abs(self.s) <= MAX_SOBOLEV_INDEX:
            raise ItmError(f"Sobolev index {self.s} outside [-{MAX_SOBOLEV_INDEX}, {MAX_SOBOLEV_INDEX}]",
                           ERR_RATE_INPUT)


@dataclass(frozen=True)
class EnergyRecord:
    t: float
    E: float
    F: float
    eta_level: float
    combined: float


def _index(s: Union[float, NormSpec]) -> float:
    return (s if isinstance(s, NormSpec) else NormSpec(float(s))).s


# =============================================================================
# Norms
# =============================================================================

def sobolev_norm(f: ScalarField, s: Union[float, NormSpec]) -> float:
    """Volume-weighted L2 norm of the multiplier (1 + |k|^2)^{s/2} applied to f."""
    s = _index(s)
    if s == 0:
        return l2_norm(f)
    return l2_norm(fourier_multiplier(f, sobolev_symbol(f.grid, s)))


def vector_sobolev_norm(W: VectorField, s: Union[float, NormSpec]) -> float:
    return float(np.sqrt(sum(sobolev_norm(ScalarField(W.grid, c), s) ** 2 for c in W.components)))


# =============================================================================
# Energies
# =============================================================================

def _face_quadrature(u: ScalarField, weight_faces) -> float:
    grad = forward_diff(u.values, u.grid.h)
    return float(sum(np.sum(w * g ** 2) for w, g in zip(weight_faces, grad)) * u.grid.cell_volume)


def energy(state: WaveState, medium: Medium) -> float:
    """E = 1/2 sum (u_t^2 + c^2 |D+u|^2) h^d with c^2 face-averaged."""
    check_same_grid(state.u, medium.a)
    kinetic = float(np.sum(state.ut.values ** 2) * state.grid.cell_volume)
    return 0.5 * (kinetic + _face_quadrature(state.u, face_average(medium.c_sq.values)))


def itm_energy(state: WaveState, medium: Medium) -> float:
    """F = 1/2 sum c^2 chi |D+u|^2 h^d."""
    check_same_grid(state.u, medium.a)
    return 0.5 * _face_quadrature(state.u, face_average(medium.c_sq.values * medium.chi.values))


def first_order_energy(state: FirstOrderState, medium: Medium) -> float:
    """1/2 sum (a^-1 u^2 + b_face^-1 |v|^2) h^d; invariant under v -> -v."""
    b_faces = face_average(medium.b.values)
    height = np.sum(state.u.values ** 2 / medium.a.values)
    flux = sum(np.sum(v ** 2 / bf) for v, bf in zip(state.v.components, b_faces))
    return float(0.5 * (height + flux) * state.grid.cell_volume)


def _eta_level(schedule: ItmSchedule, t: float) -> float:
    w = schedule.finite_part().window_at(t)
    return w.height if w is not None else 0.0


def energy_record(state: WaveState, medium: Medium, schedule: ItmSchedule) -> EnergyRecord:
    E = energy(state, medium)
    F = itm_energy(state, medium)
    level = _eta_level(schedule, state.t)
    return EnergyRecord(t=state.t, E=E, F=F, eta_level=level, combined=E + level * F)


def energy_history(trace: RunTrace, medium: Medium, schedule: ItmSchedule) -> pd.DataFrame:
    rows = [vars(energy_record(s, medium, schedule)) for s in trace.snapshots]
    return pd.DataFrame(rows, columns=['t', 'E', 'F', 'eta_level', 'combined'])


def segment_invariants(trace: RunTrace, medium: Medium) -> pd.DataFrame:
    """
    Per step point: E, F, the segment's eta level and the discrete invariant
        Q = E + level F - (dt^2 / 8) || a div(b_eff grad u) ||^2
    which the leapfrog conserves exactly on an eta-constant segment when a is constant.
    """
    if not medium.has_constant_a:
        raise ItmError("Conservation diagnostics need a spatially constant a", ERR_NONCONSTANT_A)
    if len(trace.segment_states) < len(trace.segments):
        raise ItmError("Trace lacks per-step states; run with record='all'", ERR_SCENARIO_MISMATCH)

    a0 = float(medium.a.values.flat[0])
    h = medium.grid.h
    vol = medium.grid.cell_volume
    rows = []
    for k, seg in enumerate(trace.segments):
        faces = effective_faces(medium, seg.level)
        states = trace.segment_states[k]
        for i in sorted(states):
            st = states[i]
            kinetic = 0.5 * float(np.sum(st.ut.values ** 2) * vol)
            potential = 0.5 * a0 * _face_quadrature(st.u, faces)
            acc = a0 * flux_laplacian(st.u.values, faces, h)
            shadow = seg.dt ** 2 / 8.0 * float(np.sum(acc ** 2) * vol)
            rows.append({
                'segment': k, 'step': i, 't': st.t, 'level': seg.level,
                'E': energy(st, medium), 'F': itm_energy(st, medium),
                'combined': kinetic + potential, 'Q': kinetic + potential - shadow,
            })
    return pd.DataFrame(rows)


def conservation_drift(trace: RunTrace, medium: Medium, schedule: ItmSchedule) -> float:
    """
    max over segments of |Q(t) - Q(segment start)| / |Q(0)|, where Q is the
    segment invariant (E outside windows, E + (eta0/eps) F inside, with the
    leapfrog's dt^2 correction).
    """
    table = segment_invariants(trace, medium)
    if table.empty:
        return 0.0
    q0 = abs(float(table['Q'].iloc[0]))
    if q0 == 0:
        return 0.0
    drift = table.groupby('segment')['Q'].agg(lambda q: float(np.max(np.abs(q.to_numpy() - q.iloc[0]))))
    return float(drift.max() / q0)


# =============================================================================
# Rates and uniformity
# =============================================================================

def fit_rate(points: Iterable[Tuple[float, float]]) -> float:
    """Least-squares slope of log(value) against log(eps)."""
    points = list(points)
    if len(points) < 3:
        raise ItmError(f"Rate fit needs at least 3 points, got {len(points)}", ERR_RATE_INPUT)
    eps = np.array([p[0] for p in points], dtype=float)
    values = np.array([p[1] for p in points], dtype=float)
    if np.any(eps <= 0) or np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ItmError("Rate fit needs positive epsilon and positive finite values", ERR_RATE_INPUT)
    slope, _ = np.polyfit(np.log(eps), np.log(values), 1)
    return float(slope)


@dataclass
class UniformityReport:
    table: pd.DataFrame
    ratio: float
    passed: bool
    monotone_growth: bool
    threshold: float = UNIFORMITY_RATIO


def uniformity_check(states: Sequence[Tuple[float, WaveState]], norms: Tuple[float, float] = (2, 1),
                     threshold: float = UNIFORMITY_RATIO) -> UniformityReport:
    """
    ||u_eps(t)||_{H^s_u} + ||u_t eps(t)||_{H^s_ut} across an eps sweep. Passes
    when max/min <= threshold; monotone_growth flags a norm that increases as eps
    decreases.
    """
    states = sorted(states, key=lambda p: p[0], reverse=True)
    if not states:
        raise ItmError("Uniformity check needs at least one state", ERR_SCENARIO_MISMATCH)
    ref = states[0][1]
    for eps, st in states:
        if st.grid != ref.grid or abs(st.t - ref.t) > 1e-12 * max(1.0, abs(ref.t)):
            raise ItmError(f"State for eps={eps} is not from the same scenario (grid or time differs)",
                           ERR_SCENARIO_MISMATCH)

    s_u, s_ut = norms
    rows = []
    for eps, st in states:
        nu = sobolev_norm(st.u, s_u)
        nut = sobolev_norm(st.ut, s_ut)
        rows.append({'epsilon': eps, 'norm_u': nu, 'norm_ut': nut, 'norm_total': nu + nut})
    table = pd.DataFrame(rows)
    totals = table['norm_total'].to_numpy()
    ratio = float(totals.max() / totals.min()) if totals.min() > 0 else float('inf')
    growth = bool(len(totals) > 1 and np.all(np.diff(totals) > 0))
    return UniformityReport(table=table, ratio=ratio, passed=ratio <= threshold,
                            monotone_growth=growth, threshold=threshold)
