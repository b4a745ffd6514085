"""
Experiments Service
Scenario assembly and the six experiment kinds:

    run             single evolution, snapshots and energy history
    sweep           remainder norms ||w||_L2, ||W||_H^-1 against eps with rate fits
    oracle-compare  time-domain solver against the Fourier oracle, 3+ refinements
    refocus         refocused field at 2T against -(eta0/2) u1 over an eps ladder
    jump-limit      ||u_eps - u_jump|| against eps
    uniformity      H^2 x H^1 norms of the solution across an eps sweep

Independent members (eps values, refinement levels) run through
background_tasks.run_jobs and are merged in submission order. Every CSV row
carries the config hash; wall times only go to the manifest.
"""
import datetime
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy

import itm
from itm.services import background_tasks, logger as error_logger
from itm.services.analysis import (
    energy_history, energy_record, fit_rate, sobolev_norm, uniformity_check, vector_sobolev_norm,
)
from itm.services.data_manager import ExperimentConfig
from itm.services.evolve import WaveState, adaptive_run, init_state, plan_segments
from itm.services.file_handler import atomic_write, write_snapshot, write_snapshot_index, write_table
from itm.services.geometry import Grid, ScalarField, l2_norm, make_grid, real_from_spectrum, spectrum
from itm.services.media import (
    ItmSchedule, ItmWindow, Medium, build_preset, gaussian_bump, make_medium, periodic_offsets,
    profile_from_spec,
)
from itm.services.refocus import (
    refocus_ball_radius, refocus_metrics, refocus_prediction, remainder_fields, support_radius,
)
from itm.services.spectral_oracle import evolve_exact
from itm.utils.errors import (
    ItmError, ERR_EXPERIMENT_KIND, ERR_ORACLE_MEDIUM, ERR_RATE_INPUT, raise_config_error,
)
from itm.utils.helpers import sort_descending

logger = logging.getLogger(__name__)

WRAP_THRESHOLD = 1e-8
DEFAULT_WIDTH = 0.5
DEFAULT_ROUGH_DECAY = 3.0
REFOCUS_CORRELATION = 0.95
REFOCUS_RATIO_TOL = 0.15
NOT_APPLICABLE = 'n/a'


# =============================================================================
# Scenario
# =============================================================================

@dataclass
class Scenario:
    config: ExperimentConfig
    grid: Grid
    medium: Medium
    schedule: ItmSchedule
    u0: ScalarField
    u1: ScalarField
    center: Tuple[float, ...]

    @property
    def T(self) -> float:
        """Mirror time of the last window."""
        return self.schedule.windows[-1].T

    @property
    def eta0(self) -> float:
        return self.schedule.windows[-1].eta0

    @property
    def initial_state(self) -> WaveState:
        return init_state(self.u0, self.u1)


def _data_field(grid: Grid, spec: Dict[str, Any], path: str, seed: int) -> ScalarField:
    kind = spec['type']
    amplitude = float(spec.get('amplitude', 1.0))
    center = spec.get('center')

    if kind == 'zero':
        return ScalarField(grid, np.zeros(grid.shape))

    if kind == 'gaussian':
        return gaussian_bump(grid, center=center, width=float(spec.get('width', DEFAULT_WIDTH)),
                             amplitude=amplitude)

    if kind == 'gaussian-derivative':
        width = float(spec.get('width', DEFAULT_WIDTH))
        axis = int(spec.get('axis', 0))
        bump = gaussian_bump(grid, center=center, width=width, amplitude=amplitude)
        dx = periodic_offsets(grid, center)[axis]
        return bump.with_values(-dx / width ** 2 * bump.values)

    if kind == 'mode-sum':
        coords = grid.coordinates()
        values = np.zeros(grid.shape)
        for mode in spec['modes']:
            m = mode['m'] if isinstance(mode['m'], list) else [mode['m']]
            phase = sum(2 * np.pi * mj * x / grid.L for mj, x in zip(m, coords))
            values += float(mode.get('amp', 1.0)) * np.cos(phase + float(mode.get('phase', 0.0)))
        return ScalarField(grid, values)

    if kind == 'rough':
        # |u_hat| ~ (1 + |k|^2)^(-decay/2) with seeded random phases, zero mean
        rng = np.random.default_rng(int(spec.get('seed', seed)))
        noise_hat = spectrum(rng.standard_normal(grid.shape))
        mag = np.abs(noise_hat)
        phase = np.divide(noise_hat, mag, out=np.zeros_like(noise_hat), where=mag > 0)
        decay = float(spec.get('decay', DEFAULT_ROUGH_DECAY))
        u_hat = phase * (1.0 + grid.k_sq) ** (-decay / 2)
        u_hat.flat[0] = 0.0
        values = real_from_spectrum(u_hat)
        peak = float(np.max(np.abs(values)))
        return ScalarField(grid, amplitude * values / peak if peak > 0 else values)

    raise_config_error(path, f"Unknown data type '{kind}'")


def _medium(config: ExperimentConfig, grid: Grid) -> Tuple[Medium, Optional[float]]:
    spec = dict(config.medium)
    if 'preset' in spec:
        name = spec.pop('preset')
        return build_preset(grid, name, spec, 'medium')
    profiles = {key: profile_from_spec(grid, spec.get(key, 1.0), f"medium.{key}") for key in ('a', 'b', 'chi')}
    return make_medium(name=spec.get('name', 'custom'), **profiles), None


def build_scenario(config: ExperimentConfig, N: Optional[int] = None) -> Scenario:
    """Grid, medium, schedule and initial data; N overrides the configured resolution."""
    grid = make_grid(config.grid.d, config.grid.L, N or config.grid.N)
    medium, preset_eta0 = _medium(config, grid)

    windows = []
    for i, w in enumerate(config.schedule):
        eta0 = w.eta0 if w.eta0 is not None else preset_eta0
        if eta0 is None:
            raise_config_error(f"schedule[{i}].eta0", "Window weight is required for this medium")
        windows.append(ItmWindow(T=w.T, eps=w.eps, eta0=eta0))
    schedule = ItmSchedule(tuple(windows))

    u0 = _data_field(grid, config.initial['u0'], 'initial.u0', config.seed)
    u1 = _data_field(grid, config.initial['u1'], 'initial.u1', config.seed)

    center = config.refocus.center
    if center is None:
        center = config.initial['u1'].get('center') or config.initial['u0'].get('center')
    if center is None:
        center = (grid.L / 2,) * grid.d
    elif np.isscalar(center):
        center = (float(center),) * grid.d
    return Scenario(config=config, grid=grid, medium=medium, schedule=schedule,
                    u0=u0, u1=u1, center=tuple(float(c) for c in center))


# =============================================================================
# Solves
# =============================================================================

def _use_oracle(scenario: Scenario) -> bool:
    solver = scenario.config.solver
    if solver == 'oracle':
        if not scenario.medium.is_constant:
            raise ItmError("Oracle solver needs a spatially constant medium", ERR_ORACLE_MEDIUM)
        return True
    return solver == 'auto' and scenario.medium.is_constant


def _exact(scenario: Scenario, schedule: ItmSchedule, t: float) -> WaveState:
    a0, b0, chi0 = scenario.medium.constants()
    return evolve_exact(scenario.u0, scenario.u1, schedule, t, c0_sq=a0 * b0, chi0=chi0)


def _window_steps(scenario: Scenario, schedule: ItmSchedule, t_end: float, times: Sequence[float]) -> int:
    segments = plan_segments(scenario.medium, schedule, 0.0, t_end, times, scenario.config.run.cfl)
    return sum(s.n_steps for s in segments if s.in_window)


def solve_at(scenario: Scenario, schedule: ItmSchedule, times: Sequence[float]) -> List[WaveState]:
    """States at the requested times with the configured solver."""
    times = sorted(set(float(t) for t in times))
    if _use_oracle(scenario):
        return [_exact(scenario, schedule, t) for t in times]
    trace = adaptive_run(scenario.initial_state, scenario.medium, schedule, times[-1],
                         observers=times, cfl_number=scenario.config.run.cfl)
    return [trace.state_at(t) for t in times]


def wrap_around_check(fields: Sequence[ScalarField], threshold: float = WRAP_THRESHOLD) -> float:
    """Largest |field| on the box faces relative to the field's peak; warns above threshold."""
    worst = 0.0
    for f in fields:
        peak = float(np.max(np.abs(f.values)))
        if peak == 0:
            continue
        edge = 0.0
        for axis in range(f.grid.d):
            for idx in (0, -1):
                edge = max(edge, float(np.max(np.abs(np.take(f.values, idx, axis=axis)))))
        worst = max(worst, edge / peak)
    if worst > threshold:
        error_logger.log_error(f"Field reaches the periodic boundary ({worst:.2e} of peak); "
                               f"wrap-around may contaminate results", level="WARNING", source="Harness")
    return worst


# =============================================================================
# Reports
# =============================================================================

@dataclass
class SweepReport:
    rows: pd.DataFrame
    slopes: pd.DataFrame
    passed: Optional[bool]
    provenance: Dict[str, Any]
    runtimes: Dict[float, float] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    kind: str
    out_dir: str
    outputs: List[str]
    summary: Dict[str, Any]
    manifest: str


def _provenance(config: ExperimentConfig) -> Dict[str, Any]:
    return {'config_hash': config.hash, 'seed': config.seed, 'version': itm.__version__}


def _slope_flag(slope, band) -> str:
    if slope is None:
        return NOT_APPLICABLE
    return 'pass' if band[0] <= slope <= band[1] else 'fail'


def _fit_or_none(points: List[Tuple[float, float]], label: str) -> Optional[float]:
    if len(points) < 3:
        logger.warning(f"[Sweep] {label}: only {len(points)} reliable rows, no slope fitted")
        return None
    if any(v <= 0 for _, v in points):
        logger.warning(f"[Sweep] {label}: zero norm in reliable rows, no slope fitted")
        return None
    return fit_rate(points)


# =============================================================================
# sweep
# =============================================================================

def _sweep_times(scenario: Scenario) -> List[float]:
    spec = scenario.config.sweep
    if spec.tau is not None:
        return [spec.tau]
    return [2 * scenario.T, 2 * scenario.T + spec.late_offset]


def _sweep_member(scenario: Scenario, eps: float, taus: List[float]) -> List[Dict[str, Any]]:
    config = scenario.config
    schedule = scenario.schedule.with_eps(eps)
    t_end = max(taus)
    steps = _window_steps(scenario, schedule, t_end, taus)
    base = {'epsilon': eps, 'config_hash': config.hash, 'window_steps': steps}

    if steps > config.sweep.max_window_steps:
        logger.warning(f"[Sweep] eps={eps}: {steps} in-window steps exceed the cap "
                       f"{config.sweep.max_window_steps}; row marked unreliable")
        return [dict(base, tau=tau, norm_w_L2=float('nan'), norm_W_Hm1=float('nan'),
                     max_grad_forcing=float('nan'), reliable=False) for tau in taus]

    state = scenario.initial_state
    cfl = config.run.cfl
    perturbed = adaptive_run(state, scenario.medium, schedule, t_end, observers=taus,
                             cfl_number=cfl, record='window')
    unperturbed = adaptive_run(state, scenario.medium, schedule.silenced(), t_end, observers=taus,
                               cfl_number=cfl, pace=schedule, record='window')
    remainder = remainder_fields(perturbed, unperturbed, scenario.medium, schedule, taus)
    wrap_around_check([s.u for s in perturbed.snapshots])

    rows = []
    for tau in taus:
        rows.append(dict(base, tau=tau,
                         norm_w_L2=sobolev_norm(remainder.w_at(tau), 0),
                         norm_W_Hm1=vector_sobolev_norm(remainder.W_at(tau), -1),
                         max_grad_forcing=remainder.max_forcing_norm,
                         reliable=True))
    return rows


def sweep_epsilon(config: ExperimentConfig, eps_list: Optional[Sequence[float]] = None) -> SweepReport:
    """
    Remainder norms at tau = 2T and 2T + late_offset for every eps, with a
    log-log slope per norm and tau. Rows above the in-window step cap are kept
    but flagged unreliable and never fitted.
    """
    eps_list = sort_descending(eps_list if eps_list is not None else config.sweep.eps)
    if len(eps_list) < 3:
        raise ItmError(f"Sweep needs at least 3 eps values, got {len(eps_list)}", ERR_RATE_INPUT)
    scenario = build_scenario(config)
    taus = _sweep_times(scenario)
    inert = not scenario.schedule.active

    jobs = [(f"sweep eps={eps}", (lambda e=eps: _sweep_member(scenario, e, taus))) for eps in eps_list]
    results = background_tasks.run_jobs(jobs, max_workers=config.threads)
    status = background_tasks.status_snapshot()
    runtimes = {eps: status['wall_times'].get(name, float('nan')) for eps, (name, _) in zip(eps_list, jobs)}

    rows = pd.DataFrame([row for member in results for row in member])
    rows = rows.sort_values(['epsilon', 'tau'], ascending=[False, True], kind='mergesort').reset_index(drop=True)

    band = config.sweep.slope_band
    summary = []
    for tau in taus:
        sub = rows[(rows['tau'] == tau) & rows['reliable']]
        if inert:
            slope_w = slope_W = None
        else:
            slope_w = _fit_or_none(list(zip(sub['epsilon'], sub['norm_w_L2'])), f"w at tau={tau}")
            slope_W = _fit_or_none(list(zip(sub['epsilon'], sub['norm_W_Hm1'])), f"W at tau={tau}")
        flags = (_slope_flag(slope_w, band), _slope_flag(slope_W, band))
        if NOT_APPLICABLE in flags:
            flag = NOT_APPLICABLE
        else:
            flag = 'pass' if flags == ('pass', 'pass') else 'fail'
        rows.loc[rows['tau'] == tau, 'slope_flag'] = flag
        summary.append({'tau': tau,
                        'slope_w_L2': slope_w if slope_w is not None else NOT_APPLICABLE,
                        'slope_W_Hm1': slope_W if slope_W is not None else NOT_APPLICABLE,
                        'band_low': band[0], 'band_high': band[1], 'slope_flag': flag,
                        'config_hash': config.hash})

    slopes = pd.DataFrame(summary)
    primary = slopes.iloc[0]['slope_flag']
    passed = None if primary == NOT_APPLICABLE else primary == 'pass'
    columns = ['epsilon', 'tau', 'norm_w_L2', 'norm_W_Hm1', 'slope_flag', 'reliable',
               'window_steps', 'max_grad_forcing', 'config_hash']
    logger.info(f"[Sweep] {len(eps_list)} eps values, primary slope flag: {primary}")
    return SweepReport(rows=rows[columns], slopes=slopes, passed=passed,
                       provenance=_provenance(config), runtimes=runtimes)


# =============================================================================
# oracle-compare
# =============================================================================

def _oracle_level(config: ExperimentConfig, N: int, times: List[float]) -> List[Dict[str, Any]]:
    scenario = build_scenario(config, N=N)
    trace = adaptive_run(scenario.initial_state, scenario.medium, scenario.schedule, max(times),
                         observers=times, cfl_number=config.run.cfl)
    rows = []
    for t in times:
        numeric = trace.state_at(t)
        exact = _exact(scenario, scenario.schedule, t)
        diff = numeric.u - exact.u
        rows.append({'N': N, 'h': scenario.grid.h, 't': t,
                     'err_L2': l2_norm(diff), 'err_H1': sobolev_norm(diff, 1),
                     'steps': trace.total_steps})
    return rows


def compare_oracle(config: ExperimentConfig, levels: Optional[int] = None) -> pd.DataFrame:
    """
    L2 and H1 errors of the time-domain solver against evolve_exact at
    N0 * 2^l, l = 0..levels-1, with the observed order log2(err_coarse / err_fine).
    """
    levels = levels or config.oracle.levels
    reference = build_scenario(config)
    if not reference.medium.is_constant:
        raise ItmError(f"Oracle comparison needs a constant medium ('{reference.medium.name}' varies in space)",
                       ERR_ORACLE_MEDIUM)
    times = sorted(set(config.oracle.times))
    sizes = [config.grid.N * 2 ** l for l in range(levels)]

    jobs = [(f"oracle N={N}", (lambda n=N: _oracle_level(config, n, times))) for N in sizes]
    results = background_tasks.run_jobs(jobs, max_workers=config.threads)

    table = pd.DataFrame([row for level in results for row in level])
    table = table.sort_values(['t', 'N'], kind='mergesort').reset_index(drop=True)
    for norm in ('L2', 'H1'):
        prev = table.groupby('t')[f'err_{norm}'].shift(1)
        table[f'order_{norm}'] = np.log2(prev / table[f'err_{norm}'])
    table['config_hash'] = config.hash
    last = table.groupby('t').tail(1)
    logger.info(f"[Oracle] finest-level orders (L2): {last['order_L2'].round(3).tolist()}")
    return table


# =============================================================================
# refocus
# =============================================================================

def _prediction_weight(scenario: Scenario) -> float:
    """eta0 chi at the source; for a constant medium the wave speed drops out."""
    chi = scenario.medium.chi
    if scenario.medium.is_constant:
        return scenario.eta0 * scenario.medium.constants()[2]
    idx = tuple(int(round(c / scenario.grid.h)) % scenario.grid.N for c in scenario.center)
    return scenario.eta0 * float(chi.values[idx])


def _refocus_member(scenario: Scenario, eps: float, radius: float) -> Dict[str, Any]:
    schedule = scenario.schedule.with_eps(eps)
    t_refocus = 2 * scenario.T
    state = solve_at(scenario, schedule, [t_refocus])[0]
    prediction = refocus_prediction(scenario.u1, _prediction_weight(scenario))
    report = refocus_metrics(state.u, prediction, scenario.center, radius,
                             epsilon=eps, eta0=scenario.eta0, T=scenario.T)
    return report.as_row()


def refocus_summary(rows: pd.DataFrame, h: float, monotone_tol: float = 0.0) -> Dict[str, Any]:
    """
    Finest-eps metrics plus monotonicity over the descending eps ladder.

    Correlation may not drop, and |ratio - 1| may not grow, by more than
    monotone_tol between neighbouring rows. passed needs both trends and the
    finest-row thresholds.
    """
    corr = rows['shape_correlation'].to_numpy()
    miss = np.abs(rows['amplitude_ratio'].to_numpy() - 1.0)
    finest = rows.iloc[-1]
    summary = {
        'correlation_monotone': bool(np.all(np.diff(corr) >= -monotone_tol)),
        'ratio_monotone': bool(np.all(np.diff(miss) <= monotone_tol)),
        'monotone_tol': monotone_tol,
        'finest_correlation': float(finest['shape_correlation']),
        'finest_amplitude_ratio': float(finest['amplitude_ratio']),
        'finest_location_error': float(finest['peak_location_error']),
    }
    summary['passed'] = bool(summary['correlation_monotone']
                             and summary['ratio_monotone']
                             and summary['finest_correlation'] >= REFOCUS_CORRELATION
                             and abs(summary['finest_amplitude_ratio'] - 1.0) <= REFOCUS_RATIO_TOL
                             and summary['finest_location_error'] <= 2 * h)
    return summary


def refocus_experiment(config: ExperimentConfig) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    scenario = build_scenario(config)
    source = support_radius([scenario.u0, scenario.u1], scenario.center)
    radius = config.refocus.radius or refocus_ball_radius(scenario.medium, scenario.T, source)
    eps_list = sort_descending(config.refocus.eps)

    jobs = [(f"refocus eps={eps}", (lambda e=eps: _refocus_member(scenario, e, radius))) for eps in eps_list]
    rows = pd.DataFrame(background_tasks.run_jobs(jobs, max_workers=config.threads))
    rows['config_hash'] = config.hash

    summary = dict(radius=radius, source_radius=source,
                   **refocus_summary(rows, scenario.grid.h, config.refocus.monotone_tol))
    if not (summary['correlation_monotone'] and summary['ratio_monotone']):
        logger.warning(f"[Refocus] metrics do not improve monotonically as eps halves "
                       f"(tolerance {summary['monotone_tol']})")
    logger.info(f"[Refocus] finest eps={rows.iloc[-1]['epsilon']}: corr={summary['finest_correlation']:.4f}, "
                f"ratio={summary['finest_amplitude_ratio']:.4f}")
    return rows, summary


# =============================================================================
# jump-limit
# =============================================================================

def _jump_member(scenario: Scenario, eps: float, t_star: float, reference: WaveState) -> Dict[str, Any]:
    schedule = scenario.schedule.with_eps(eps)
    row = {'epsilon': eps, 't': t_star}
    if not _use_oracle(scenario):
        steps = _window_steps(scenario, schedule, t_star, [t_star])
        if steps > scenario.config.sweep.max_window_steps:
            logger.warning(f"[JumpLimit] eps={eps}: {steps} in-window steps exceed the cap; row unreliable")
            return dict(row, norm_diff_L2=float('nan'), reliable=False)
    state = solve_at(scenario, schedule, [t_star])[0]
    return dict(row, norm_diff_L2=l2_norm(state.u - reference.u), reliable=True)


def jump_limit_experiment(config: ExperimentConfig) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """||u_eps(t*) - u_jump(t*)||_L2 at t* = 2T for the sweep eps list."""
    scenario = build_scenario(config)
    eps_list = sort_descending(config.sweep.eps)
    t_star = config.sweep.tau or 2 * scenario.T
    reference = solve_at(scenario, scenario.schedule.with_eps(0.0), [t_star])[0]

    jobs = [(f"jump-limit eps={eps}", (lambda e=eps: _jump_member(scenario, e, t_star, reference)))
            for eps in eps_list]
    rows = pd.DataFrame(background_tasks.run_jobs(jobs, max_workers=config.threads))

    band = config.sweep.jump_band
    reliable = rows[rows['reliable']]
    slope = None
    if scenario.schedule.active:
        slope = _fit_or_none(list(zip(reliable['epsilon'], reliable['norm_diff_L2'])), "jump limit")
    flag = _slope_flag(slope, band)
    rows['slope_flag'] = flag
    rows['config_hash'] = config.hash
    summary = {'t': t_star, 'slope': slope if slope is not None else NOT_APPLICABLE,
               'band': list(band), 'slope_flag': flag}
    logger.info(f"[JumpLimit] slope={summary['slope']} ({flag})")
    return rows, summary


# =============================================================================
# uniformity
# =============================================================================

def uniformity_experiment(config: ExperimentConfig) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    scenario = build_scenario(config)
    t = 2 * scenario.T
    eps_list = sort_descending(config.uniformity.eps)
    jobs = [(f"uniformity eps={eps}", (lambda e=eps: solve_at(scenario, scenario.schedule.with_eps(e), [t])[0]))
            for eps in eps_list]
    states = background_tasks.run_jobs(jobs, max_workers=config.threads)
    report = uniformity_check(list(zip(eps_list, states)), norms=config.uniformity.norms,
                              threshold=config.uniformity.threshold)
    table = report.table.copy()
    table['t'] = t
    table['config_hash'] = config.hash
    summary = {'t': t, 'ratio': report.ratio, 'threshold': report.threshold,
               'passed': report.passed, 'monotone_growth': report.monotone_growth}
    logger.info(f"[Uniformity] max/min = {report.ratio:.3f} (threshold {report.threshold})")
    return table, summary


# =============================================================================
# run
# =============================================================================

def _run_experiment_single(config: ExperimentConfig, out_dir: str) -> Tuple[List[str], Dict[str, Any]]:
    scenario = build_scenario(config)
    times = sorted(set(config.run.snapshots) | {config.run.t_end})
    oracle = _use_oracle(scenario)
    outputs = []

    if oracle:
        states = [_exact(scenario, scenario.schedule, t) for t in times]
        history = pd.DataFrame([vars(energy_record(s, scenario.medium, scenario.schedule)) for s in states])
    else:
        trace = adaptive_run(scenario.initial_state, scenario.medium, scenario.schedule, config.run.t_end,
                             observers=times, cfl_number=config.run.cfl)
        states = list(trace.snapshots)
        history = energy_history(trace, scenario.medium, scenario.schedule)
    history['config_hash'] = config.hash
    outputs.append(write_table(history, os.path.join(out_dir, 'energy.csv')))

    summary: Dict[str, Any] = {'solver': 'oracle' if oracle else 'time-domain', 'snapshots': len(states)}
    if not oracle and scenario.medium.is_constant:
        rows = []
        for s in states:
            exact = _exact(scenario, scenario.schedule, s.t)
            diff = s.u - exact.u
            rows.append({'t': s.t, 'err_L2': l2_norm(diff), 'err_H1': sobolev_norm(diff, 1),
                         'norm_exact_L2': l2_norm(exact.u), 'config_hash': config.hash})
        check = pd.DataFrame(rows)
        outputs.append(write_table(check, os.path.join(out_dir, 'oracle_check.csv')))
        summary['max_err_L2'] = float(check['err_L2'].max())

    summary['wrap_around'] = wrap_around_check([s.u for s in states])

    if config.run.write_snapshots:
        snap_dir = os.path.join(out_dir, 'snapshots')
        os.makedirs(snap_dir, exist_ok=True)
        entries = []
        for i, s in enumerate(states):
            for label, f in (('u', s.u), ('ut', s.ut)):
                name = f"{label}_{i:04d}.bin"
                path = write_snapshot(os.path.join(snap_dir, name), f.values, s.t)
                entries.append({'file': name, 'field': label, 'time': s.t, 'd': scenario.grid.d,
                                'N': scenario.grid.N, 'bytes': os.path.getsize(path)})
        outputs.append(write_snapshot_index(entries, os.path.join(snap_dir, 'index.csv')))
    return outputs, summary


# =============================================================================
# Dispatch and manifest
# =============================================================================

def _versions() -> Dict[str, str]:
    return {'itm': itm.__version__, 'python': platform.python_version(),
            'numpy': np.__version__, 'scipy': scipy.__version__, 'pandas': pd.__version__}


def write_manifest(path: str, config: ExperimentConfig, status: str, started: str,
                   wall_time: float, outputs: List[str], summary: Dict[str, Any]) -> str:
    manifest = {
        'name': config.name,
        'kind': config.kind,
        'status': status,
        'config_hash': config.hash,
        'config_source': config.source,
        'config': config.raw,
        'seed': config.seed,
        'threads': config.threads,
        'versions': _versions(),
        'started': started,
        'finished': datetime.datetime.now().isoformat(),
        'wall_time_s': wall_time,
        'jobs': background_tasks.status_snapshot(),
        'errors': error_logger.snapshot_errors(),
        'outputs': [os.path.relpath(p, os.path.dirname(path)) for p in outputs],
        'summary': summary,
    }
    with atomic_write(path, 'w') as f:
        json.dump(manifest, f, indent=2, default=str)
    return path


def _dispatch(config: ExperimentConfig, out_dir: str) -> Tuple[List[str], Dict[str, Any]]:
    kind = config.kind
    if kind == 'run':
        return _run_experiment_single(config, out_dir)
    if kind == 'sweep':
        report = sweep_epsilon(config)
        rows_path = write_table(report.rows, os.path.join(out_dir, 'sweep.csv'))
        slopes_path = write_table(report.slopes, os.path.join(out_dir, 'sweep_summary.csv'))
        summary = {'passed': report.passed, 'runtimes': report.runtimes,
                   'slopes': report.slopes.to_dict(orient='records'), **report.provenance}
        return [rows_path, slopes_path], summary
    if kind == 'oracle-compare':
        table = compare_oracle(config)
        finest = table.groupby('t').tail(1)
        summary = {'orders_L2': finest['order_L2'].tolist(), 'orders_H1': finest['order_H1'].tolist()}
        return [write_table(table, os.path.join(out_dir, 'oracle_compare.csv'))], summary
    if kind == 'refocus':
        rows, summary = refocus_experiment(config)
        return [write_table(rows, os.path.join(out_dir, 'refocus.csv'))], summary
    if kind == 'jump-limit':
        rows, summary = jump_limit_experiment(config)
        return [write_table(rows, os.path.join(out_dir, 'jump_limit.csv'))], summary
    if kind == 'uniformity':
        table, summary = uniformity_experiment(config)
        return [write_table(table, os.path.join(out_dir, 'uniformity.csv'))], summary
    raise ItmError(f"Unknown experiment kind '{kind}'", ERR_EXPERIMENT_KIND)


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentResult:
    """
    Run one experiment and write its tables plus manifest.json into out_dir
    (default config.out_dir/<name>). A failed run still writes a manifest with
    status 'failed' before the error propagates.
    """
    out_dir = out_dir or os.path.join(config.out_dir, config.name)
    os.makedirs(out_dir, exist_ok=True)
    run_id = f"{config.name}-{config.hash[:8]}"
    error_logger.RUN_CONTEXT['run_id'] = run_id
    error_logger.clear_errors()
    background_tasks.reset_status()

    started = datetime.datetime.now().isoformat()
    clock = time.perf_counter()
    manifest_path = os.path.join(out_dir, 'manifest.json')
    logger.info(f"[Harness] {run_id}: kind={config.kind}, out={out_dir}")
    try:
        outputs, summary = _dispatch(config, out_dir)
    except Exception as e:
        error_logger.log_exception(e, source=f"Harness/{config.kind}")
        write_manifest(manifest_path, config, 'failed', started, time.perf_counter() - clock, [], {})
        if isinstance(e, ItmError) and not e.context:
            e.context = f"run {run_id}"
        raise
    finally:
        error_logger.RUN_CONTEXT['run_id'] = None

    wall = time.perf_counter() - clock
    write_manifest(manifest_path, config, 'ok', started, wall, outputs, summary)
    logger.info(f"[Harness] {run_id} finished in {wall:.2f}s ({len(outputs)} tables)")
    return ExperimentResult(kind=config.kind, out_dir=out_dir, outputs=outputs,
                            summary=summary, manifest=manifest_path)
