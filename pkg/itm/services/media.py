"""
Media Service
Background coefficients (a, b), the ITM mask chi, the box profile eta and the
physical presets that map material parameters to (a, b, chi, eta0).

Governing equation:  u_tt = a div(b (1 + chi eta(t)) grad u)
"""
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from itm.services.geometry import Grid, ScalarField, check_same_grid
from itm.utils.errors import (
    ItmError, itm_assert,
    ERR_MEDIUM_INVALID, ERR_WINDOW_INVALID, ERR_SCHEDULE_OVERLAP, ERR_JUMP_SAMPLED,
    ERR_PRESET_UNKNOWN, ERR_CONFIG_SCHEMA,
)

logger = logging.getLogger(__name__)


# =============================================================================
# Medium
# =============================================================================

@dataclass(frozen=True, eq=False)
class Medium:
    a: ScalarField
    b: ScalarField
    chi: ScalarField
    name: str = "custom"
    c_sq: ScalarField = field(init=False, repr=False)

    def __post_init__(self):
        check_same_grid(self.a, self.b, self.chi)
        itm_assert(bool(np.all(self.a.values > 0)), "Coefficient a must be strictly positive", ERR_MEDIUM_INVALID)
        itm_assert(bool(np.all(self.b.values > 0)), "Coefficient b must be strictly positive", ERR_MEDIUM_INVALID)
        itm_assert(bool(np.all(self.chi.values >= 0)), "ITM mask chi must be non-negative", ERR_MEDIUM_INVALID)
        object.__setattr__(self, 'c_sq', ScalarField(self.a.grid, self.a.values * self.b.values))

    @property
    def grid(self) -> Grid:
        return self.a.grid

    @property
    def c_max(self) -> float:
        return float(np.sqrt(np.max(self.c_sq.values)))

    @property
    def c_min(self) -> float:
        return float(np.sqrt(np.min(self.c_sq.values)))

    @property
    def has_constant_a(self) -> bool:
        return _is_uniform(self.a.values)

    @property
    def is_constant(self) -> bool:
        return all(_is_uniform(f.values) for f in (self.a, self.b, self.chi))

    def constants(self) -> Tuple[float, float, float]:
        """(a0, b0, chi0) of a spatially constant medium."""
        if not self.is_constant:
            raise ItmError(f"Medium '{self.name}' is not spatially constant", ERR_MEDIUM_INVALID)
        return float(self.a.values.flat[0]), float(self.b.values.flat[0]), float(self.chi.values.flat[0])


def _is_uniform(values: np.ndarray) -> bool:
    ref = values.flat[0]
    return bool(np.all(np.abs(values - ref) <= 1e-14 * max(1.0, abs(ref))))


def make_medium(a: ScalarField, b: ScalarField, chi: ScalarField, name: str = "custom") -> Medium:
    return Medium(a=a, b=b, chi=chi, name=name)


# =============================================================================
# Windows and schedules
# =============================================================================

@dataclass(frozen=True)
class ItmWindow:
    """Box perturbation eta0/eps on (T - eps/2, T + eps/2); eps = 0 is the jump limit."""
    T: float
    eps: float
    eta0: float

    def __post_init__(self):
        for name in ('T', 'eps', 'eta0'):
            value = getattr(self, name)
            itm_assert(np.isfinite(value), f"Window {name} must be finite, got {value}", ERR_WINDOW_INVALID)
        itm_assert(self.eps >= 0, f"Window width must be >= 0, got {self.eps}", ERR_WINDOW_INVALID)
        itm_assert(self.eta0 >= 0, f"Window weight must be >= 0, got {self.eta0}", ERR_WINDOW_INVALID)
        itm_assert(self.T - self.eps / 2 > 0,
                   f"Window must open strictly after t=0 (T - eps/2 = {self.T - self.eps / 2})",
                   ERR_WINDOW_INVALID)

    @property
    def start(self) -> float:
        return self.T - self.eps / 2

    @property
    def end(self) -> float:
        return self.T + self.eps / 2

    @property
    def is_jump(self) -> bool:
        return self.eps == 0

    @property
    def is_active(self) -> bool:
        return self.eta0 > 0

    @property
    def height(self) -> float:
        """eta0/eps, the amplitude of eta inside the window."""
        itm_assert(not self.is_jump, "Jump windows have no finite height", ERR_JUMP_SAMPLED)
        return self.eta0 / self.eps

    def contains(self, t: float) -> bool:
        """Open-interval membership (half-open convention: edges read as outside)."""
        return (not self.is_jump) and self.start < t < self.end


@dataclass(frozen=True)
class ItmSchedule:
    windows: Tuple[ItmWindow, ...] = ()

    def __post_init__(self):
        windows = tuple(sorted(self.windows, key=lambda w: w.T))
        object.__setattr__(self, 'windows', windows)
        for prev, nxt in zip(windows, windows[1:]):
            if prev.end > nxt.start or prev.T == nxt.T:
                raise ItmError(f"Windows overlap: T={prev.T} (eps={prev.eps}) and T={nxt.T} (eps={nxt.eps})",
                               ERR_SCHEDULE_OVERLAP)

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self) -> Iterator[ItmWindow]:
        return iter(self.windows)

    @property
    def has_jumps(self) -> bool:
        return any(w.is_jump for w in self.windows)

    @property
    def active(self) -> Tuple[ItmWindow, ...]:
        return tuple(w for w in self.windows if w.is_active)

    def edges(self) -> List[float]:
        """Every t_eps^+- (and every jump time), ascending."""
        out = []
        for w in self.windows:
            out.extend([w.T] if w.is_jump else [w.start, w.end])
        return out

    def finite_part(self) -> 'ItmSchedule':
        return ItmSchedule(tuple(w for w in self.windows if not w.is_jump))

    def jump_part(self) -> 'ItmSchedule':
        return ItmSchedule(tuple(w for w in self.windows if w.is_jump))

    def silenced(self) -> 'ItmSchedule':
        """Same windows with eta0 = 0 (the unperturbed problem on the same clock)."""
        return ItmSchedule(tuple(ItmWindow(w.T, w.eps, 0.0) for w in self.windows))

    def with_eps(self, eps: float) -> 'ItmSchedule':
        return ItmSchedule(tuple(ItmWindow(w.T, eps, w.eta0) for w in self.windows))

    def window_at(self, t: float) -> Optional[ItmWindow]:
        for w in self.windows:
            if w.contains(t):
                return w
        return None


def make_schedule(windows: Iterable[ItmWindow] = ()) -> ItmSchedule:
    return ItmSchedule(tuple(windows))


# =============================================================================
# eta and the effective coefficient
# =============================================================================

def eta(schedule: ItmSchedule, t: float) -> float:
    """eta0/eps inside a window, 0 outside and on the edges."""
    if schedule.has_jumps:
        raise ItmError("eta is not defined for jump windows; the solver applies them", ERR_JUMP_SAMPLED)
    w = schedule.window_at(t)
    return w.height if w is not None else 0.0


def integrated_eta(schedule: ItmSchedule, t0: float, t1: float) -> float:
    """Exact box quadrature of eta over [t0, t1]; jump weights count for T in (t0, t1]."""
    total = 0.0
    for w in schedule.windows:
        if w.is_jump:
            if t0 < w.T <= t1:
                total += w.eta0
            continue
        overlap = min(t1, w.end) - max(t0, w.start)
        if overlap > 0:
            total += w.eta0 * overlap / w.eps
    return total


def effective_b(medium: Medium, schedule: ItmSchedule, t: float) -> ScalarField:
    """b (1 + chi eta(t))."""
    level = eta(schedule, t)
    if level == 0.0:
        return medium.b
    return ScalarField(medium.grid, medium.b.values * (1.0 + medium.chi.values * level), t)


# =============================================================================
# Analytic profile families
# =============================================================================

def periodic_offsets(grid: Grid, center: Sequence[float]) -> Tuple[np.ndarray, ...]:
    """Minimal-image displacement x - center per axis."""
    center = _as_center(grid, center)
    L = grid.L
    return tuple((x - c + L / 2) % L - L / 2 for x, c in zip(grid.coordinates(), center))


def periodic_distance(grid: Grid, center: Sequence[float]) -> np.ndarray:
    return np.sqrt(sum(dx ** 2 for dx in periodic_offsets(grid, center)))


def _as_center(grid: Grid, center) -> Tuple[float, ...]:
    if center is None:
        return (grid.L / 2,) * grid.d
    if np.isscalar(center):
        return (float(center),) * grid.d
    center = tuple(float(c) for c in center)
    if len(center) != grid.d:
        raise ItmError(f"Center {center} has wrong dimension for a {grid.d}-d grid", ERR_CONFIG_SCHEMA)
    return center


def constant_profile(grid: Grid, value: float = 1.0) -> ScalarField:
    return ScalarField(grid, np.full(grid.shape, float(value)))


def gaussian_bump(grid: Grid, center=None, width: float = 1.0, amplitude: float = 1.0,
                  base: float = 0.0) -> ScalarField:
    r2 = periodic_distance(grid, center) ** 2
    return ScalarField(grid, base + amplitude * np.exp(-r2 / (2.0 * width ** 2)))


def _smooth_step(s: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide='ignore', over='ignore', invalid='ignore'):
        f0 = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        f1 = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return f0 / (f0 + f1)


def smooth_plateau(grid: Grid, center=None, radius: float = 1.0, width: float = 1.0,
                   amplitude: float = 1.0, base: float = 0.0) -> ScalarField:
    """
    Regularized characteristic function: equal to base + amplitude when every
    |x_j - c_j| <= radius, to base beyond radius + width, smooth in between.
    """
    if width <= 0 or radius < 0:
        raise ItmError("Plateau needs radius >= 0 and width > 0", ERR_CONFIG_SCHEMA)
    mask = np.ones(grid.shape)
    for dx in periodic_offsets(grid, center):
        mask *= 1.0 - _smooth_step((np.abs(dx) - radius) / width)
    return ScalarField(grid, base + amplitude * mask)


PROFILE_FAMILIES: Dict[str, Callable[..., ScalarField]] = {
    'constant': constant_profile,
    'gaussian-bump': gaussian_bump,
    'smooth-plateau': smooth_plateau,
}


def profile_from_spec(grid: Grid, spec, path: str = 'profile') -> ScalarField:
    """Number -> constant; mapping -> {'family': ..., **params}."""
    if isinstance(spec, (int, float)):
        return constant_profile(grid, float(spec))
    if not isinstance(spec, dict) or 'family' not in spec:
        raise ItmError("Profile must be a number or a mapping with 'family'", ERR_CONFIG_SCHEMA, context=path)
    params = dict(spec)
    family = params.pop('family')
    builder = PROFILE_FAMILIES.get(family)
    if builder is None:
        raise ItmError(f"Unknown profile family '{family}'; available: {', '.join(PROFILE_FAMILIES)}",
                       ERR_CONFIG_SCHEMA, context=f"{path}.family")
    try:
        return builder(grid, **params)
    except TypeError as e:
        raise ItmError(f"Bad parameters for '{family}': {e}", ERR_CONFIG_SCHEMA, context=path)


# =============================================================================
# Presets
# =============================================================================

def _require_positive(field_: ScalarField, label: str) -> None:
    if not np.all(field_.values > 0):
        raise ItmError(f"{label} must be strictly positive", ERR_MEDIUM_INVALID)


def preset_free(grid: Grid) -> Medium:
    one = constant_profile(grid, 1.0)
    return Medium(a=one, b=one, chi=one, name='free')


def preset_water_tank(grid: Grid, c0: float, alpha: float):
    """
    Surface waves u_tt = c0^2 (1 + alpha delta(t - T)) lap u.

    Returns (medium, template) where template(T=..., eps=...) builds the window
    carrying eta0 = alpha.
    """
    if not c0 > 0 or not alpha > 0:
        raise ItmError(f"Water tank needs c0 > 0 and alpha > 0 (got {c0}, {alpha})", ERR_MEDIUM_INVALID)
    medium = Medium(a=constant_profile(grid, c0 ** 2), b=constant_profile(grid, 1.0),
                    chi=constant_profile(grid, 1.0), name='water_tank')
    return medium, partial(ItmWindow, eta0=float(alpha))


def preset_em_tm(eps_perm: ScalarField, mu_inv: ScalarField, chi: ScalarField) -> Medium:
    """Transverse magnetic: static permittivity, ITM on the inverse permeability."""
    _require_positive(eps_perm, "Permittivity")
    _require_positive(mu_inv, "Inverse permeability")
    return Medium(a=ScalarField(eps_perm.grid, 1.0 / eps_perm.values), b=mu_inv, chi=chi, name='em_tm')


def preset_em_te(mu: ScalarField, eps_inv: ScalarField, chi: ScalarField) -> Medium:
    """Transverse electric: static permeability, ITM on the inverse permittivity."""
    _require_positive(mu, "Permeability")
    _require_positive(eps_inv, "Inverse permittivity")
    return Medium(a=ScalarField(mu.grid, 1.0 / mu.values), b=eps_inv, chi=chi, name='em_te')


def preset_elastic(lam: ScalarField, rho_inv: ScalarField, chi: ScalarField) -> Medium:
    """Pressure potential with negligible shear: a = lambda, b = 1/rho."""
    _require_positive(lam, "Lame parameter")
    _require_positive(rho_inv, "Inverse density")
    return Medium(a=lam, b=rho_inv, chi=chi, name='elastic')


PRESET_NAMES = ('free', 'water_tank', 'em_tm', 'em_te', 'elastic')


def build_preset(grid: Grid, name: str, params: dict, path: str = 'medium'):
    """
    Config-facing dispatcher. Returns (medium, eta0_default) where eta0_default is
    the preset's own ITM weight (water tank alpha) or None.
    """
    params = dict(params or {})

    def profile(key, default=1.0):
        return profile_from_spec(grid, params.get(key, default), f"{path}.{key}")

    if name == 'free':
        return preset_free(grid), None
    if name == 'water_tank':
        medium, template = preset_water_tank(grid, float(params.get('c0', 1.0)), float(params.get('alpha', 1.0)))
        return medium, template.keywords['eta0']
    if name == 'em_tm':
        return preset_em_tm(profile('eps_perm'), profile('mu_inv'), profile('chi')), None
    if name == 'em_te':
        return preset_em_te(profile('mu'), profile('eps_inv'), profile('chi')), None
    if name == 'elastic':
        return preset_elastic(profile('lambda'), profile('rho_inv'), profile('chi')), None
    raise ItmError(f"Unknown preset '{name}'; available: {', '.join(PRESET_NAMES)}",
                   ERR_PRESET_UNKNOWN, context=f"{path}.preset")
