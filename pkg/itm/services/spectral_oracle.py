"""
Spectral Oracle
Exact per-mode solution of the constant-coefficient problem via 2x2 transfer
matrices acting on (u_hat, ut_hat).

Mode equation:  u_hat'' = -c0^2 |k|^2 (1 + chi0 eta(t)) u_hat

Every function accepts |k| as a scalar or as an array of magnitudes and
returns matrices of shape (..., 2, 2); the whole spectrum is one vectorized map.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy import fft as sfft

from itm.services import geometry
from itm.services.geometry import ScalarField, check_same_grid, spectrum
from itm.services.media import ItmSchedule
from itm.services.evolve import WaveState
from itm.utils.errors import (
    ItmError, itm_assert,
    ERR_ORACLE_ALIGNMENT, ERR_ORACLE_NOT_REAL, ERR_TIME_INVALID, ERR_WINDOW_INVALID,
)

logger = logging.getLogger(__name__)

IMAG_RTOL = 1e-10
ALIGN_RTOL = 1e-9

Wavenumber = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Stack of 2x2 real matrices, shape (..., 2, 2)."""
    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        object.__setattr__(self, 'm', m)
        itm_assert(m.shape[-2:] == (2, 2), f"Transfer matrix must end in (2, 2), got {m.shape}")

    def det(self) -> np.ndarray:
        m = self.m
        return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]

    def compose(self, earlier: 'TransferMatrix') -> 'TransferMatrix':
        """self after earlier."""
        return TransferMatrix(self.m @ earlier.m)

    __matmul__ = compose

    def apply(self, u_hat, ut_hat):
        m = self.m
        return (m[..., 0, 0] * u_hat + m[..., 0, 1] * ut_hat,
                m[..., 1, 0] * u_hat + m[..., 1, 1] * ut_hat)

    @classmethod
    def identity(cls, shape: Tuple[int, ...] = ()) -> 'TransferMatrix':
        return cls(np.broadcast_to(np.eye(2), tuple(shape) + (2, 2)).copy())


@dataclass(frozen=True)
class ModeState:
    k: Union[float, Tuple[float, ...]]
    u_hat: complex
    ut_hat: complex
    t: float

    def __post_init__(self):
        itm_assert(np.isfinite(self.u_hat) and np.isfinite(self.ut_hat), "Mode state is not finite")


def _k_abs(k: Wavenumber) -> np.ndarray:
    return np.abs(np.asarray(k, dtype=float))


def _rotation(omega: np.ndarray, dt: float) -> TransferMatrix:
    """[[cos, sin/omega], [-omega sin, cos]] with the omega -> 0 limit built in."""
    wt = omega * dt
    c = np.cos(wt)
    s_over = dt * np.sinc(wt / np.pi)  # sin(omega dt)/omega, = dt at omega = 0
    m = np.empty(np.shape(omega) + (2, 2))
    m[..., 0, 0] = c
    m[..., 0, 1] = s_over
    m[..., 1, 0] = -omega ** 2 * s_over
    m[..., 1, 1] = c
    return TransferMatrix(m)


def free_mode_matrix(k: Wavenumber, dt: float) -> TransferMatrix:
    if dt < 0:
        raise ItmError(f"Duration must be >= 0, got {dt}", ERR_TIME_INVALID)
    return _rotation(_k_abs(k), dt)


def window_mode_matrix(k: Wavenumber, eps: float, eta0: float,
                       duration: Optional[float] = None) -> TransferMatrix:
    """
    Transfer through a box window of width eps and weight eta0. `duration`
    stops part-way through (same frequency, shorter time).
    """
    if not eps > 0:
        raise ItmError(f"Window width must be > 0, got {eps}", ERR_WINDOW_INVALID)
    if eta0 < 0:
        raise ItmError(f"Window weight must be >= 0, got {eta0}", ERR_WINDOW_INVALID)
    dt = eps if duration is None else duration
    if not 0 <= dt <= eps * (1 + 1e-12):
        raise ItmError(f"Partial window duration {dt} outside [0, {eps}]", ERR_TIME_INVALID)
    return _rotation(_k_abs(k) * math.sqrt(1.0 + eta0 / eps), dt)


def jump_mode_matrix(k: Wavenumber, eta0: float) -> TransferMatrix:
    if eta0 < 0:
        raise ItmError(f"Jump weight must be >= 0, got {eta0}", ERR_WINDOW_INVALID)
    k_abs = _k_abs(k)
    m = np.zeros(np.shape(k_abs) + (2, 2))
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = 1.0
    m[..., 1, 0] = -eta0 * k_abs ** 2
    return TransferMatrix(m)


def schedule_mode_matrix(k: Wavenumber, schedule: ItmSchedule, t: float,
                         c0_sq: float = 1.0, chi0: float = 1.0) -> TransferMatrix:
    """
    Composed transfer matrix from 0 to t. |k| is scaled by sqrt(c0_sq) and every
    weight by chi0. A jump at exactly T = t is included; a window still open at t
    contributes a partial window matrix.
    """
    if t < 0:
        raise ItmError(f"Time must be >= 0, got {t}", ERR_TIME_INVALID)
    k_eff = _k_abs(k) * math.sqrt(c0_sq)
    total = TransferMatrix.identity(np.shape(k_eff))
    cur = 0.0
    for w in schedule.active:
        weight = w.eta0 * chi0
        if w.is_jump:
            if w.T > t:
                break
            total = jump_mode_matrix(k_eff, weight) @ free_mode_matrix(k_eff, w.T - cur) @ total
            cur = w.T
            continue
        if w.start >= t:
            break
        total = free_mode_matrix(k_eff, w.start - cur) @ total
        stop = min(w.end, t)
        partial = None if stop == w.end else stop - w.start
        total = window_mode_matrix(k_eff, w.eps, weight, duration=partial) @ total
        cur = stop
    if t > cur:
        total = free_mode_matrix(k_eff, t - cur) @ total
    return total


def _to_real(hat: np.ndarray, label: str) -> np.ndarray:
    out = sfft.ifftn(hat, workers=geometry.FFT_WORKERS)
    scale = float(np.linalg.norm(out.real))
    residue = float(np.linalg.norm(out.imag))
    if residue > IMAG_RTOL * scale and residue > 1e-300:
        raise ItmError(f"Oracle {label} is not real: imaginary residue {residue:.3e} vs norm {scale:.3e}",
                       ERR_ORACLE_NOT_REAL)
    return out.real


def evolve_exact(u0: ScalarField, u1: ScalarField, schedule: ItmSchedule, t: float,
                 c0_sq: float = 1.0, chi0: float = 1.0) -> WaveState:
    """(u, u_t) at time t for the constant-coefficient problem, exact up to round-off."""
    check_same_grid(u0, u1)
    grid = u0.grid
    M = schedule_mode_matrix(grid.k_abs, schedule, t, c0_sq=c0_sq, chi0=chi0)
    u_hat, ut_hat = M.apply(spectrum(u0.values), spectrum(u1.values))
    u = ScalarField(grid, _to_real(u_hat, 'u'), t)
    ut = ScalarField(grid, _to_real(ut_hat, 'u_t'), t)
    return WaveState(u=u, ut=ut, t=t)


# =============================================================================
# Brute-force RK4 oracle
# =============================================================================

def _segment_steps(length: float, dt_ode: float) -> int:
    n = int(round(length / dt_ode))
    if n < 1 and length > 0:
        n = 1
    if abs(n * dt_ode - length) > ALIGN_RTOL * max(length, dt_ode):
        raise ItmError(f"ODE step {dt_ode} does not divide segment length {length}", ERR_ORACLE_ALIGNMENT)
    return n


def integrate_mode(k, schedule: ItmSchedule, t: float, dt_ode: float,
                   u_hat: complex = 1.0, ut_hat: complex = 0.0, c0_sq: float = 1.0) -> ModeState:
    """
    Classical RK4 on u'' = -c0^2 |k|^2 (1 + eta(s)) u from s = 0 to t, stepping
    exactly onto every window edge. Jump windows act as ut -= eta0 c0^2 |k|^2 u.
    """
    if not dt_ode > 0:
        raise ItmError(f"ODE step must be > 0, got {dt_ode}", ERR_ORACLE_ALIGNMENT)
    k_abs = float(np.linalg.norm(np.atleast_1d(np.asarray(k, dtype=float))))
    k_sq = c0_sq * k_abs ** 2

    marks = {0.0, float(t)}
    jumps = []
    for w in schedule.active:
        if w.is_jump:
            if w.T <= t:
                marks.add(w.T)
                jumps.append(w)
        else:
            marks.update(e for e in (w.start, w.end) if e < t)
    marks = sorted(marks)

    u, v = complex(u_hat), complex(ut_hat)
    for a, b in zip(marks, marks[1:]):
        n = _segment_steps(b - a, dt_ode)
        h = (b - a) / n
        w = schedule.window_at(0.5 * (a + b))
        rate = k_sq * (1.0 + (w.height if w is not None else 0.0))
        for _ in range(n):
            k1u, k1v = v, -rate * u
            k2u, k2v = v + 0.5 * h * k1v, -rate * (u + 0.5 * h * k1u)
            k3u, k3v = v + 0.5 * h * k2v, -rate * (u + 0.5 * h * k2u)
            k4u, k4v = v + h * k3v, -rate * (u + h * k3u)
            u += h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
            v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        for jw in jumps:
            if jw.T == b:
                v -= jw.eta0 * k_sq * u
    return ModeState(k=k, u_hat=u, ut_hat=v, t=t)


def mode_ode_bruteforce(k, schedule: ItmSchedule, t: float, dt_ode: float,
                        c0_sq: float = 1.0) -> TransferMatrix:
    """Transfer matrix assembled column by column from the (1, 0) and (0, 1) seeds."""
    first = integrate_mode(k, schedule, t, dt_ode, 1.0, 0.0, c0_sq)
    second = integrate_mode(k, schedule, t, dt_ode, 0.0, 1.0, c0_sq)
    m = np.array([[first.u_hat.real, second.u_hat.real],
                  [first.ut_hat.real, second.ut_hat.real]])
    return TransferMatrix(m)
