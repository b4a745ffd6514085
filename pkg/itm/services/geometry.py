"""
Geometry Service
Periodic grids, flux-form difference stencils and Fourier multipliers.

Two derivative backends live here:
- centered / staggered differences (local, used by the time steppers)
- FFT multipliers (spectral, used by norms and the v0 Poisson solve)

All operations are pure: input fields are never mutated.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import fft as sfft

from itm.utils.errors import (
    ItmError, itm_assert,
    ERR_GRID_INVALID, ERR_FIELD_INVALID, ERR_FIELD_MISMATCH, ERR_SYMBOL_INVALID,
)
from itm.utils.helpers import is_power_of_two

logger = logging.getLogger(__name__)

MIN_POINTS = 8

# scipy.fft thread count, set once from --threads
FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    global FFT_WORKERS
    FFT_WORKERS = max(1, int(n))


# =============================================================================
# Grid
# =============================================================================

@dataclass(frozen=True)
class Grid:
    """Periodic uniform lattice [0, L)^d with N points per axis."""
    d: int
    L: float
    N: int

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N ** self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @cached_property
    def wavenumbers(self) -> Tuple[np.ndarray, ...]:
        """Per-axis k_m = 2*pi*m/L in standard FFT ordering."""
        k = 2.0 * np.pi * sfft.fftfreq(self.N, d=self.h)
        return (k,) * self.d

    @cached_property
    def k_mesh(self) -> np.ndarray:
        """Array of shape (d, N, ..., N) with the wavenumber vector at every index."""
        return np.array(np.meshgrid(*self.wavenumbers, indexing='ij'))

    @cached_property
    def k_sq(self) -> np.ndarray:
        return np.sum(self.k_mesh ** 2, axis=0)

    @cached_property
    def k_abs(self) -> np.ndarray:
        return np.sqrt(self.k_sq)

    def coordinates(self) -> Tuple[np.ndarray, ...]:
        """Node coordinates x_i = i*h, one meshgrid array per axis."""
        x = np.arange(self.N) * self.h
        return tuple(np.meshgrid(*([x] * self.d), indexing='ij'))


def make_grid(d: int, L: float, N: int) -> Grid:
    """Build a periodic grid; N must be a power of two (FFT contract)."""
    if d not in (1, 2):
        raise ItmError(f"Grid dimension must be 1 or 2, got {d}", ERR_GRID_INVALID)
    if not isinstance(N, (int, np.integer)) or not is_power_of_two(int(N)):
        raise ItmError(f"Points per axis must be a power of two, got {N}", ERR_GRID_INVALID)
    if N < MIN_POINTS:
        raise ItmError(f"Points per axis must be at least {MIN_POINTS}, got {N}", ERR_GRID_INVALID)
    if not np.isfinite(L) or L <= 0:
        raise ItmError(f"Domain length must be positive, got {L}", ERR_GRID_INVALID)
    return Grid(d=int(d), L=float(L), N=int(N))


# =============================================================================
# Fields
# =============================================================================

@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    time_stamp: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, 'values', values)
        itm_assert(values.shape == self.grid.shape,
                   f"Field shape {values.shape} does not match grid {self.grid.shape}",
                   ERR_FIELD_INVALID)
        itm_assert(bool(np.all(np.isfinite(values))), "Field contains NaN or Inf", ERR_FIELD_INVALID)

    def with_values(self, values: np.ndarray, time_stamp: Optional[float] = None) -> 'ScalarField':
        return ScalarField(self.grid, values, self.time_stamp if time_stamp is None else time_stamp)

    def _other(self, other):
        if isinstance(other, ScalarField):
            check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return self.with_values(self.values + self._other(other))

    def __sub__(self, other):
        return self.with_values(self.values - self._other(other))

    def __mul__(self, other):
        return self.with_values(self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """d components; for the staggered operators component j lives on faces i+e_j/2."""
    grid: Grid
    components: Tuple[np.ndarray, ...]

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        object.__setattr__(self, 'components', comps)
        itm_assert(len(comps) == self.grid.d,
                   f"Vector field has {len(comps)} components on a {self.grid.d}-d grid",
                   ERR_FIELD_INVALID)
        for c in comps:
            itm_assert(c.shape == self.grid.shape, "Component shape does not match grid", ERR_FIELD_INVALID)
            itm_assert(bool(np.all(np.isfinite(c))), "Vector field contains NaN or Inf", ERR_FIELD_INVALID)

    def __neg__(self):
        return VectorField(self.grid, tuple(-c for c in self.components))

    def __add__(self, other: 'VectorField'):
        return VectorField(self.grid, tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: 'VectorField'):
        return VectorField(self.grid, tuple(a - b for a, b in zip(self.components, other.components)))

    def __mul__(self, scale):
        return VectorField(self.grid, tuple(c * scale for c in self.components))

    __rmul__ = __mul__


def zeros(grid: Grid, time_stamp: Optional[float] = None) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape), time_stamp)


def check_same_grid(*fields) -> None:
    grids = {f.grid for f in fields}
    if len(grids) > 1:
        raise ItmError("Fields live on different grids", ERR_FIELD_MISMATCH)


# =============================================================================
# Array kernels (shared by the steppers, no validation)
# =============================================================================

def face_average(b: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Arithmetic mean of neighbouring cell values at faces i+e_j/2."""
    return tuple(0.5 * (b + np.roll(b, -1, axis=ax)) for ax in range(b.ndim))


def forward_diff(u: np.ndarray, h: float) -> Tuple[np.ndarray, ...]:
    return tuple((np.roll(u, -1, axis=ax) - u) / h for ax in range(u.ndim))


def backward_div(comps: Tuple[np.ndarray, ...], h: float) -> np.ndarray:
    out = np.zeros_like(comps[0])
    for ax, c in enumerate(comps):
        out += c - np.roll(c, 1, axis=ax)
    return out / h


def flux_laplacian(u: np.ndarray, b_faces: Tuple[np.ndarray, ...], h: float) -> np.ndarray:
    """sum_j [b_{i+1/2}(u_{i+1}-u_i) - b_{i-1/2}(u_i-u_{i-1})] / h^2"""
    out = np.zeros_like(u)
    for ax, bf in enumerate(b_faces):
        flux = bf * (np.roll(u, -1, axis=ax) - u)
        out += flux - np.roll(flux, 1, axis=ax)
    return out / (h * h)


# =============================================================================
# Operators
# =============================================================================

def gradient(u: ScalarField) -> VectorField:
    """Second-order centered difference per axis with periodic wrap."""
    h = u.grid.h
    comps = tuple((np.roll(u.values, -1, axis=ax) - np.roll(u.values, 1, axis=ax)) / (2.0 * h)
                  for ax in range(u.grid.d))
    return VectorField(u.grid, comps)


def face_gradient(u: ScalarField) -> VectorField:
    """Forward differences, component j sampled at faces i+e_j/2."""
    return VectorField(u.grid, forward_diff(u.values, u.grid.h))


def face_divergence(W: VectorField) -> ScalarField:
    """Backward-difference divergence; the negative adjoint of face_gradient."""
    return ScalarField(W.grid, backward_div(W.components, W.grid.h))


def div_b_grad(u: ScalarField, b_eff: ScalarField, *, nonnegative: bool = False) -> ScalarField:
    """
    Conservative flux-form discretization of div(b grad u) with face-averaged b.

    Args:
        nonnegative: accept b_eff >= 0 (masked coefficients such as b*chi).
            The default rejects any non-positive coefficient.
    """
    check_same_grid(u, b_eff)
    if nonnegative:
        itm_assert(bool(np.all(b_eff.values >= 0)), "Flux coefficient must be non-negative", ERR_FIELD_INVALID)
    else:
        itm_assert(bool(np.all(b_eff.values > 0)), "Flux coefficient must be strictly positive", ERR_FIELD_INVALID)
    values = flux_laplacian(u.values, face_average(b_eff.values), u.grid.h)
    return ScalarField(u.grid, values, u.time_stamp)


def inner(u: ScalarField, w: ScalarField) -> float:
    """Volume-weighted discrete inner product."""
    check_same_grid(u, w)
    return float(np.sum(u.values * w.values) * u.grid.cell_volume)


def l2_norm(u: ScalarField) -> float:
    return float(np.sqrt(np.sum(u.values ** 2) * u.grid.cell_volume))


# =============================================================================
# Fourier side
# =============================================================================

Symbol = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, float]


def spectrum(values: np.ndarray) -> np.ndarray:
    return sfft.fftn(values, workers=FFT_WORKERS)


def real_from_spectrum(hat: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Inverse FFT, asserting the imaginary residue is negligible."""
    out = sfft.ifftn(hat, workers=FFT_WORKERS)
    scale = float(np.max(np.abs(out.real))) if out.size else 0.0
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue > rtol * max(scale, 1e-300) and residue > 1e-300:
        raise ItmError(f"Inverse transform is not real (residue {residue:.3e}, scale {scale:.3e})",
                       ERR_FIELD_INVALID)
    return out.real


def evaluate_symbol(grid: Grid, m: Symbol) -> np.ndarray:
    if callable(m):
        values = np.asarray(m(grid.k_mesh), dtype=float)
    else:
        values = np.asarray(m, dtype=float)
    values = np.broadcast_to(values, grid.shape)
    if np.any(np.isnan(values)):
        raise ItmError("Fourier symbol is NaN on the wavenumber set", ERR_SYMBOL_INVALID)
    return values


def fourier_multiplier(u: ScalarField, m: Symbol) -> ScalarField:
    """
    inverse-FFT(m(k) * FFT(u)).

    The symbol is either an array on the grid's wavenumber set or a callable
    receiving the (d, N, ..., N) wavenumber mesh. Only the real part is returned,
    so m should be even in k.
    """
    symbol = evaluate_symbol(u.grid, m)
    out = sfft.ifftn(symbol * spectrum(u.values), workers=FFT_WORKERS)
    return ScalarField(u.grid, out.real, u.time_stamp)


def sobolev_symbol(grid: Grid, s: float) -> np.ndarray:
    return (1.0 + grid.k_sq) ** (s / 2.0)


def laplacian_symbol(grid: Grid) -> np.ndarray:
    """Symbol of the compact (b = 1) stencil: -sum_j (4/h^2) sin^2(k_j h / 2)."""
    h = grid.h
    return -np.sum((2.0 / h * np.sin(grid.k_mesh * h / 2.0)) ** 2, axis=0)
