"""
Data Manager
Experiment configuration: JSON loading with a (path, mtime) cache, schema
validation with field-path diagnostics, defaults and environment overrides.

Schema reference: docs/CONFIG.md
"""
import copy
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from itm.services.media import PRESET_NAMES, PROFILE_FAMILIES
from itm.utils.errors import ItmError, ERR_CONFIG_LOAD, ERR_CONFIG_SCHEMA, ERR_PRESET_UNKNOWN, raise_config_error
from itm.utils.helpers import config_hash, is_power_of_two

logger = logging.getLogger(__name__)

KINDS = ('run', 'sweep', 'oracle-compare', 'refocus', 'jump-limit', 'uniformity')
SOLVERS = ('auto', 'oracle', 'time-domain')
DATA_TYPES = ('zero', 'gaussian', 'gaussian-derivative', 'mode-sum', 'rough')

DEFAULT_L = 20.0
DEFAULT_N = {1: 512, 2: 256}
DEFAULT_CFL = 0.5
DEFAULT_SWEEP_EPS = (0.2, 0.1, 0.05, 0.025)
DEFAULT_REFOCUS_EPS = (0.04, 0.02, 0.01)
DEFAULT_SLOPE_BAND = (0.85, 1.15)
DEFAULT_JUMP_BAND = (0.8, 1.2)
DEFAULT_WINDOW_STEP_CAP = 20000
DEFAULT_LATE_OFFSET = 0.5

# Parsed JSON keyed by (path, mtime); shared by sweep workers
CONFIG_LOCK = threading.Lock()
CONFIG_CACHE: Dict[Tuple[str, float], Dict[str, Any]] = {}

ENV_OVERRIDES = {
    'ITM_OUT_DIR': ('out_dir', str),
    'ITM_SEED': ('seed', int),
    'ITM_THREADS': ('threads', int),
    'ITM_CFL': ('cfl', float),
}


@dataclass(frozen=True)
class GridSpec:
    d: int
    L: float
    N: int


@dataclass(frozen=True)
class WindowSpec:
    T: float
    eps: float
    eta0: Optional[float]


@dataclass(frozen=True)
class RunSpec:
    t_end: float
    snapshots: Tuple[float, ...]
    cfl: float
    write_snapshots: bool


@dataclass(frozen=True)
class SweepSpec:
    eps: Tuple[float, ...]
    tau: Optional[float]
    late_offset: float
    max_window_steps: int
    slope_band: Tuple[float, float]
    jump_band: Tuple[float, float]


@dataclass(frozen=True)
class OracleSpec:
    levels: int
    times: Tuple[float, ...]


@dataclass(frozen=True)
class RefocusSpec:
    eps: Tuple[float, ...]
    radius: Optional[float]
    center: Optional[Tuple[float, ...]]
    monotone_tol: float = 0.0


@dataclass(frozen=True)
class UniformitySpec:
    eps: Tuple[float, ...]
    threshold: float
    norms: Tuple[float, float]


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    solver: str
    grid: GridSpec
    medium: Dict[str, Any]
    schedule: Tuple[WindowSpec, ...]
    initial: Dict[str, Any]
    run: RunSpec
    sweep: SweepSpec
    oracle: OracleSpec
    refocus: RefocusSpec
    uniformity: UniformitySpec
    seed: int
    threads: int
    out_dir: str
    raw: Dict[str, Any] = field(repr=False, compare=False)
    source: Optional[str] = None

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def with_overrides(self, **changes) -> 'ExperimentConfig':
        """Copy with top-level fields replaced; the raw mapping follows so the hash changes too."""
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            if key in ('seed', 'threads', 'out_dir', 'kind', 'solver', 'name'):
                raw[key] = value
        return config_from_dict(raw, source=self.source, apply_env=False)


# =============================================================================
# Loading
# =============================================================================

def _read_json(path: str) -> Dict[str, Any]:
    try:
        mtime = os.path.getmtime(path)
    except OSError as e:
        raise ItmError(f"Config file not found: {e}", ERR_CONFIG_LOAD, context=path)

    key = (os.path.abspath(path), mtime)
    with CONFIG_LOCK:
        if key in CONFIG_CACHE:
            return copy.deepcopy(CONFIG_CACHE[key])
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ItmError(f"Config is not valid JSON: {e}", ERR_CONFIG_LOAD, context=path)
        except OSError as e:
            raise ItmError(f"Could not read config: {e}", ERR_CONFIG_LOAD, context=path)
        if not isinstance(data, dict):
            raise ItmError("Config root must be a JSON object", ERR_CONFIG_SCHEMA, context=path)
        CONFIG_CACHE[key] = data
        return copy.deepcopy(data)


def load_config(path: str, apply_env: bool = True) -> ExperimentConfig:
    """Load, validate and fill defaults; ITM_* environment variables win over the file."""
    data = _read_json(path)
    config = config_from_dict(data, source=path, apply_env=apply_env)
    logger.info(f"[Config] Loaded {path} (kind={config.kind}, hash={config.hash})")
    return config


def clear_cache() -> None:
    with CONFIG_LOCK:
        CONFIG_CACHE.clear()


def _env_overrides(data: Dict[str, Any]) -> Dict[str, Any]:
    data = copy.deepcopy(data)
    for env_key, (target, cast) in ENV_OVERRIDES.items():
        value = os.environ.get(env_key)
        if not value:
            continue
        try:
            value = cast(value)
        except ValueError:
            raise ItmError(f"Environment variable {env_key}={value!r} is not a valid {cast.__name__}",
                           ERR_CONFIG_SCHEMA, context=env_key)
        if target == 'cfl':
            data.setdefault('run', {})['cfl'] = value
        else:
            data[target] = value
    return data


# =============================================================================
# Validation
# =============================================================================

def _number(value, path, positive=False, non_negative=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise_config_error(path, f"Expected a number, got {value!r}")
    value = float(value)
    if positive and not value > 0:
        raise_config_error(path, f"Must be > 0, got {value}")
    if non_negative and value < 0:
        raise_config_error(path, f"Must be >= 0, got {value}")
    return value


def _number_list(values, path, positive=True) -> Tuple[float, ...]:
    if not isinstance(values, (list, tuple)):
        raise_config_error(path, f"Expected a list of numbers, got {values!r}")
    return tuple(_number(v, f"{path}[{i}]", positive=positive) for i, v in enumerate(values))


def _section(data, key) -> Dict[str, Any]:
    value = data.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise_config_error(key, "Expected an object")
    return value


def _grid(data) -> GridSpec:
    g = _section(data, 'grid')
    d = g.get('d', 1)
    if d not in (1, 2):
        raise_config_error('grid.d', f"Dimension must be 1 or 2, got {d}")
    N = g.get('N', DEFAULT_N[d])
    if isinstance(N, bool) or not isinstance(N, int) or not is_power_of_two(N) or N < 8:
        raise_config_error('grid.N', f"Points per axis must be a power of two >= 8, got {N}")
    L = _number(g.get('L', DEFAULT_L), 'grid.L', positive=True)
    return GridSpec(d=d, L=L, N=N)


def _profile(spec, path):
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return
    if not isinstance(spec, dict) or spec.get('family') not in PROFILE_FAMILIES:
        raise_config_error(path, f"Profile must be a number or have family in {list(PROFILE_FAMILIES)}")


def _medium(data) -> Dict[str, Any]:
    m = _section(data, 'medium') or {'preset': 'free'}
    if 'preset' in m:
        if m['preset'] not in PRESET_NAMES:
            raise ItmError(f"Unknown preset '{m['preset']}'; available: {', '.join(PRESET_NAMES)}",
                           ERR_PRESET_UNKNOWN, context='medium.preset')
        for key, value in m.items():
            if key != 'preset' and isinstance(value, dict):
                _profile(value, f"medium.{key}")
    else:
        for key in ('a', 'b', 'chi'):
            _profile(m.get(key, 1.0), f"medium.{key}")
    return m


def _schedule(data, t_end_hint: Optional[float]) -> Tuple[WindowSpec, ...]:
    raw = data.get('schedule', [])
    if not isinstance(raw, list):
        raise_config_error('schedule', "Expected a list of windows")
    windows = []
    for i, w in enumerate(raw):
        path = f"schedule[{i}]"
        if not isinstance(w, dict):
            raise_config_error(path, "Window must be an object with T, eps, eta0")
        T = _number(w.get('T'), f"{path}.T")
        eps = _number(w.get('eps', 0.0), f"{path}.eps", non_negative=True)
        eta0 = w.get('eta0')
        if eta0 is not None:
            eta0 = _number(eta0, f"{path}.eta0", non_negative=True)
        if not T - eps / 2 > 0:
            raise_config_error(path, f"ItmWindow invariant T - eps/2 > 0 violated (T={T}, eps={eps})")
        if t_end_hint is not None and not T + eps / 2 < t_end_hint:
            raise_config_error(path, f"Window must close before run.t_end={t_end_hint}")
        windows.append(WindowSpec(T=T, eps=eps, eta0=eta0))
    ordered = sorted(windows, key=lambda w: w.T)
    for i, (prev, nxt) in enumerate(zip(ordered, ordered[1:])):
        if prev.T + prev.eps / 2 > nxt.T - nxt.eps / 2 or prev.T == nxt.T:
            raise_config_error('schedule', f"Windows at T={prev.T} and T={nxt.T} overlap")
    return tuple(ordered)


def _initial(data, d) -> Dict[str, Any]:
    init = _section(data, 'initial')
    out = {}
    for key in ('u0', 'u1'):
        spec = init.get(key, {'type': 'zero'})
        if not isinstance(spec, dict) or spec.get('type') not in DATA_TYPES:
            raise_config_error(f"initial.{key}", f"Data spec needs type in {list(DATA_TYPES)}")
        if spec['type'] == 'mode-sum':
            modes = spec.get('modes')
            if not isinstance(modes, list) or not modes:
                raise_config_error(f"initial.{key}.modes", "mode-sum needs a non-empty list of modes")
            for j, mode in enumerate(modes):
                m = mode.get('m') if isinstance(mode, dict) else None
                m = [m] if isinstance(m, int) else m
                if not isinstance(m, list) or len(m) != d or not all(isinstance(x, int) for x in m):
                    raise_config_error(f"initial.{key}.modes[{j}].m", f"Expected {d} integer mode indices")
        if spec['type'] == 'gaussian-derivative' and not 0 <= spec.get('axis', 0) < d:
            raise_config_error(f"initial.{key}.axis", f"Axis must be in [0, {d})")
        out[key] = spec
    return out


def _last_T(windows) -> Optional[float]:
    return windows[-1].T if windows else None


def config_from_dict(data: Dict[str, Any], source: Optional[str] = None,
                     apply_env: bool = True) -> ExperimentConfig:
    """Validate a raw config mapping and fill defaults."""
    if apply_env:
        data = _env_overrides(data)

    kind = data.get('kind', 'run')
    if kind not in KINDS:
        raise_config_error('kind', f"Unknown experiment kind '{kind}'; expected one of {list(KINDS)}")
    solver = data.get('solver', 'auto')
    if solver not in SOLVERS:
        raise_config_error('solver', f"Unknown solver '{solver}'; expected one of {list(SOLVERS)}")

    grid = _grid(data)
    medium = _medium(data)

    run_raw = _section(data, 'run')
    prelim = _schedule(data, None)
    T_last = _last_T(prelim)
    default_t_end = 2 * T_last + DEFAULT_LATE_OFFSET if T_last is not None else 1.0
    t_end = _number(run_raw.get('t_end', default_t_end), 'run.t_end', positive=True)
    schedule = _schedule(data, t_end) if kind == 'run' else prelim
    snapshots = _number_list(run_raw.get('snapshots', [t_end]), 'run.snapshots', positive=False)
    for i, s in enumerate(snapshots):
        if not 0 <= s <= t_end:
            raise_config_error(f"run.snapshots[{i}]", f"Snapshot time {s} outside [0, {t_end}]")
    cfl = _number(run_raw.get('cfl', DEFAULT_CFL), 'run.cfl', positive=True)
    if cfl > 1:
        raise_config_error('run.cfl', f"CFL number must be <= 1, got {cfl}")
    run = RunSpec(t_end=t_end, snapshots=snapshots, cfl=cfl,
                  write_snapshots=bool(run_raw.get('write_snapshots', True)))

    sw = _section(data, 'sweep')
    sweep = SweepSpec(
        eps=_number_list(sw.get('eps', list(DEFAULT_SWEEP_EPS)), 'sweep.eps'),
        tau=_number(sw['tau'], 'sweep.tau', positive=True) if sw.get('tau') is not None else None,
        late_offset=_number(sw.get('late_offset', DEFAULT_LATE_OFFSET), 'sweep.late_offset', non_negative=True),
        max_window_steps=int(sw.get('max_window_steps', DEFAULT_WINDOW_STEP_CAP)),
        slope_band=tuple(_number_list(sw.get('slope_band', list(DEFAULT_SLOPE_BAND)), 'sweep.slope_band')),
        jump_band=tuple(_number_list(sw.get('jump_band', list(DEFAULT_JUMP_BAND)), 'sweep.jump_band')),
    )
    if len(sweep.slope_band) != 2 or len(sweep.jump_band) != 2:
        raise_config_error('sweep', "Slope bands must have two entries")

    orc = _section(data, 'oracle')
    levels = orc.get('levels', 3)
    if isinstance(levels, bool) or not isinstance(levels, int) or levels < 2:
        raise_config_error('oracle.levels', f"Need at least 2 refinement levels, got {levels}")
    default_times = [2 * T_last] if T_last is not None else [t_end]
    oracle = OracleSpec(levels=levels, times=_number_list(orc.get('times', default_times), 'oracle.times'))

    rf = _section(data, 'refocus')
    center = rf.get('center')
    if center is not None:
        center = _number_list(center if isinstance(center, list) else [center] * grid.d,
                              'refocus.center', positive=False)
        if len(center) != grid.d:
            raise_config_error('refocus.center', f"Expected {grid.d} coordinates")
    refocus = RefocusSpec(
        eps=_number_list(rf.get('eps', list(DEFAULT_REFOCUS_EPS)), 'refocus.eps'),
        radius=_number(rf['radius'], 'refocus.radius', positive=True) if rf.get('radius') is not None else None,
        center=center,
        monotone_tol=_number(rf.get('monotone_tol', 0.0), 'refocus.monotone_tol', non_negative=True),
    )

    un = _section(data, 'uniformity')
    norms = tuple(_number_list(un.get('norms', [2, 1]), 'uniformity.norms', positive=False))
    if len(norms) != 2:
        raise_config_error('uniformity.norms', "Expected two Sobolev indices (u, u_t)")
    uniformity = UniformitySpec(
        eps=_number_list(un.get('eps', list(DEFAULT_SWEEP_EPS)), 'uniformity.eps'),
        threshold=_number(un.get('threshold', 3.0), 'uniformity.threshold', positive=True),
        norms=norms,
    )

    if kind in ('sweep', 'refocus', 'jump-limit', 'uniformity') and not schedule:
        raise_config_error('schedule', f"Experiment kind '{kind}' needs at least one window")

    seed = data.get('seed', 0)
    threads = data.get('threads', 1)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise_config_error('seed', f"Seed must be a non-negative integer, got {seed!r}")
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise_config_error('threads', f"Thread count must be a positive integer, got {threads!r}")

    return ExperimentConfig(
        name=str(data.get('name') or (os.path.splitext(os.path.basename(source))[0] if source else 'experiment')),
        kind=kind,
        solver=solver,
        grid=grid,
        medium=medium,
        schedule=schedule,
        initial=_initial(data, grid.d),
        run=run,
        sweep=sweep,
        oracle=oracle,
        refocus=refocus,
        uniformity=uniformity,
        seed=seed,
        threads=threads,
        out_dir=str(data.get('out_dir', 'output')),
        raw=copy.deepcopy(data),
        source=source,
    )
