"""(N+3)-level Lindblad dynamics of a multi-band Rydberg receiver.

Level ordering (0-based): 0 = ground g0, 1 = excited g1, 2 = initial Rydberg
e0, 3..N+2 = final Rydberg states e1..eN. Hamiltonians are returned as H/hbar
in rad/s, so ``lindblad_rhs`` is ``1j * (rho @ H - H @ rho) + relaxation``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy import linalg

from .scenario import AtomScenario, derive_constants

log = logging.getLogger(__name__)


class SteadyStateError(RuntimeError):
    """The stationary state is not unique or the linear system is singular."""


class DivergenceError(RuntimeError):
    """Time integration left the physical region."""


def _rates(s_or_rates, dim: int) -> np.ndarray:
    if isinstance(s_or_rates, AtomScenario):
        return s_or_rates.decay_rates()
    r = np.asarray(s_or_rates, dtype=float)
    if r.ndim == 0:
        out = np.zeros(dim)
        out[1] = float(r)
        return out
    if r.shape != (dim,):
        raise ValueError(f"decay-rate vector must have length {dim}")
    return r


def build_hamiltonian(s: AtomScenario, omega) -> np.ndarray:
    """Arrow-shaped H/hbar: probe on (0,1), coupling on (1,2), RF band n on (2, 2+n)."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (s.n_bands,):
        raise ValueError(f"expected {s.n_bands} Rabi frequencies, got shape {omega.shape}")
    d = s.n_bands + 3
    H = np.zeros((d, d))
    H[0, 1] = H[1, 0] = 0.5 * s.omega_p_rabi
    H[1, 2] = H[2, 1] = 0.5 * s.omega_c_rabi
    H[2, 3:] = H[3:, 2] = 0.5 * omega
    return H


def relaxation(rho: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Incoherent part of the master equation.

    ``rates[k]`` is the total decay rate out of level k. Level 1 decays to the
    ground state, level 2 to level 1 and every final Rydberg level to the
    ground state; coherences rho_ij damp at (rates[i] + rates[j]) / 2. With
    only ``rates[1]`` nonzero this is the simplified gamma_2-only operator.
    """
    out = -0.5 * (rates[:, None] + rates[None, :]) * rho
    pops = np.real(np.diagonal(rho))
    out[0, 0] += rates[1] * pops[1] + rates[3:] @ pops[3:]
    out[1, 1] += rates[2] * pops[2]
    return out


def lindblad_rhs(rho: np.ndarray, H: np.ndarray, gamma2) -> np.ndarray:
    """d rho / dt. ``gamma2`` is either the gamma_2 rate or a full per-level rate vector."""
    rho = np.asarray(rho)
    if rho.shape != H.shape or rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"dimension mismatch: rho {rho.shape}, H {H.shape}")
    rates = _rates(gamma2, rho.shape[0])
    return 1j * (rho @ H - H @ rho) + relaxation(rho, rates)


def liouvillian(H: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Superoperator acting on row-major vec(rho)."""
    d = H.shape[0]
    eye = np.eye(d)
    L = 1j * (np.kron(eye, H.T) - np.kron(H, eye))
    L -= np.diag(0.5 * (rates[:, None] + rates[None, :]).ravel())
    idx = lambda i, j: i * d + j  # noqa: E731
    L[idx(0, 0), idx(1, 1)] += rates[1]
    L[idx(1, 1), idx(2, 2)] += rates[2]
    for k in range(3, d):
        L[idx(0, 0), idx(k, k)] += rates[k]
    return L


def ground_state(dim: int) -> np.ndarray:
    rho = np.zeros((dim, dim), dtype=complex)
    rho[0, 0] = 1.0
    return rho


def steady_state_numeric(
    s: AtomScenario,
    omega,
    initial: np.ndarray | None = None,
    require_unique: bool = False,
    rank_tol: float = 1e-10,
) -> np.ndarray:
    """Stationary density matrix from the vectorised master equation.

    A unique kernel is solved with one balance row replaced by Tr(rho) = 1.
    The gamma_2-only relaxation leaves dark superpositions of the final
    Rydberg levels undamped, so for N >= 2 the kernel is degenerate; then the
    state reached from ``initial`` (ground state by default) is returned by
    projecting onto the kernel along the conserved quantities. Pass
    ``require_unique=True`` to raise instead.
    """
    H = build_hamiltonian(s, omega)
    d = H.shape[0]
    rates = s.decay_rates()
    scale = s.gamma2
    L = liouvillian(H / scale, rates / scale)

    sv = linalg.svdvals(L)
    kernel_dim = int(np.sum(sv <= rank_tol * sv[0]))
    if kernel_dim == 0:
        raise SteadyStateError("Liouvillian has no stationary state")

    if kernel_dim == 1:
        A = L.copy()
        A[0, :] = np.eye(d).ravel()
        b = np.zeros(d * d, dtype=complex)
        b[0] = 1.0
        vec = linalg.solve(A, b)
    else:
        if require_unique:
            raise SteadyStateError(f"stationary state is not unique (kernel dimension {kernel_dim})")
        rho_init = ground_state(d) if initial is None else np.asarray(initial, dtype=complex)
        # right kernel R, left kernel W; P = R (W^H R)^-1 W^H is the spectral projector
        _, _, vh = linalg.svd(L)
        R = vh[-kernel_dim:].conj().T
        _, _, vh_left = linalg.svd(L.conj().T)
        W = vh_left[-kernel_dim:].conj().T
        coeff = linalg.solve(W.conj().T @ R, W.conj().T @ rho_init.ravel())
        vec = R @ coeff

    rho = vec.reshape(d, d)
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def _sum_square(omega) -> float:
    omega = np.asarray(omega, dtype=float)
    return float(omega @ omega)


def rho12_steady(s: AtomScenario, omega) -> complex:
    """Probe coherence j*rho0*S/(S + Gamma^2) with S the sum of squared RF Rabi frequencies."""
    d = derive_constants(s)
    S = _sum_square(omega)
    return 1j * d.rho0 * S / (S + d.Gamma2)


def steady_state_closed_form_n2(s: AtomScenario, omega, full: bool = True):
    """Dual-band stationary state written out entry by entry.

    With ``full=False`` only rho_12 is returned, which stays defined (zero)
    without RF drive; the Rydberg populations divide by Omega_1^2 + Omega_2^2.
    """
    if s.n_bands != 2:
        raise ValueError("closed-form density matrix is available for two bands only")
    o1, o2 = (float(x) for x in np.asarray(omega, dtype=float))
    op, oc, g2 = s.omega_p_rabi, s.omega_c_rabi, s.gamma2
    S = o1 * o1 + o2 * o2
    K = op * op * (oc * oc + op * op)
    den = (g2 * g2 + 2 * op * op) * S + 2 * K
    rho12 = 1j * g2 * op * S / den
    if not full:
        return rho12
    if S == 0.0:
        raise ValueError("full closed form is undefined when both RF Rabi frequencies vanish")

    rho = np.zeros((5, 5), dtype=complex)
    rho[0, 0] = ((op * op + g2 * g2) * S + oc * oc * op * op) / den
    rho[0, 1] = rho12
    rho[0, 2] = -oc * op**3 / den
    rho[0, 3] = -1j * g2 * o1 * oc * op / den
    rho[0, 4] = -1j * g2 * o2 * oc * op / den
    rho[1, 1] = op * op * S / den
    rho[1, 3] = -o1 * oc * op * op / den
    rho[1, 4] = -o2 * oc * op * op / den
    rho[2, 2] = op**4 / den
    den2 = S * den
    rho[3, 3] = o1 * o1 * K / den2
    rho[3, 4] = o1 * o2 * K / den2
    rho[4, 4] = o2 * o2 * K / den2
    upper = np.triu(rho, 1)
    return np.diag(np.diag(rho)) + upper + upper.conj().T


def check_density_matrix(rho: np.ndarray, herm_tol=1e-12, trace_tol=1e-10, psd_tol=1e-9) -> None:
    """Raise ValueError unless rho is Hermitian, unit-trace and positive semidefinite."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("density matrix must be square")
    if np.max(np.abs(rho - rho.conj().T)) > herm_tol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > trace_tol:
        raise ValueError(f"trace {np.trace(rho)} differs from 1")
    if np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))) < -psd_tol:
        raise ValueError("density matrix has a negative eigenvalue")


@dataclass
class Trajectory:
    """Sampled time evolution; ``rho`` has shape (len(t), d, d)."""

    t: np.ndarray
    rho: np.ndarray
    max_drift: float = 0.0

    def entry(self, i: int, j: int) -> np.ndarray:
        return self.rho[:, i, j]

    def to_columns(self, entries=((0, 1),)) -> dict[str, np.ndarray]:
        """Columnar export: time plus Re/Im of each requested (0-based) entry."""
        cols = {"t_s": self.t}
        for i, j in entries:
            cols[f"re_rho{i + 1}{j + 1}"] = self.rho[:, i, j].real
            cols[f"im_rho{i + 1}{j + 1}"] = self.rho[:, i, j].imag
        return cols


def max_stable_step(s: AtomScenario, omega_max: float) -> float:
    return 0.01 / max(s.omega_p_rabi, s.omega_c_rabi, s.gamma2, omega_max)


@numba.njit(cache=True, nogil=True)
def _rhs_arrow(r, op, oc, om, rates, out):
    # H/hbar is 0.5 * arrow(op, oc, om); rho @ H computed from the sparsity pattern
    d = r.shape[0]
    rh = np.empty_like(r)
    for i in range(d):
        acc = 0.0j
        for k in range(3, d):
            acc += r[i, k] * om[k - 3]
        rh[i, 0] = 0.5 * op * r[i, 1]
        rh[i, 1] = 0.5 * (op * r[i, 0] + oc * r[i, 2])
        rh[i, 2] = 0.5 * (oc * r[i, 1] + acc)
        for k in range(3, d):
            rh[i, k] = 0.5 * om[k - 3] * r[i, 2]
    # H @ rho = (rho @ H)^dagger for Hermitian rho
    for i in range(d):
        for j in range(d):
            out[i, j] = 1j * (rh[i, j] - np.conj(rh[j, i])) - 0.5 * (rates[i] + rates[j]) * r[i, j]
    feed = rates[1] * r[1, 1].real
    for k in range(3, d):
        feed += rates[k] * r[k, k].real
    out[0, 0] += feed
    out[1, 1] += rates[2] * r[2, 2].real


@numba.njit(cache=True, nogil=True)
def _rk4_steps(rho, drive_half, dt, op, oc, rates):
    """Advance len(drive_half) // 2 steps; drive_half holds the drive at t, t + dt/2, t + dt, ..."""
    d = rho.shape[0]
    k1 = np.empty((d, d), np.complex128)
    k2 = np.empty_like(k1)
    k3 = np.empty_like(k1)
    k4 = np.empty_like(k1)
    tmp = np.empty_like(k1)
    n = (drive_half.shape[0] - 1) // 2
    for s in range(n):
        a = drive_half[2 * s]
        b = drive_half[2 * s + 1]
        c = drive_half[2 * s + 2]
        _rhs_arrow(rho, op, oc, a, rates, k1)
        for i in range(d):
            for j in range(d):
                tmp[i, j] = rho[i, j] + 0.5 * dt * k1[i, j]
        _rhs_arrow(tmp, op, oc, b, rates, k2)
        for i in range(d):
            for j in range(d):
                tmp[i, j] = rho[i, j] + 0.5 * dt * k2[i, j]
        _rhs_arrow(tmp, op, oc, b, rates, k3)
        for i in range(d):
            for j in range(d):
                tmp[i, j] = rho[i, j] + dt * k3[i, j]
        _rhs_arrow(tmp, op, oc, c, rates, k4)
        for i in range(d):
            for j in range(d):
                rho[i, j] += (dt / 6.0) * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
    return rho


def _drive_values(drive, t: np.ndarray, n_bands: int) -> np.ndarray:
    try:
        vals = np.asarray(drive(t), dtype=float)
    except (TypeError, ValueError):
        vals = None
    if vals is None or vals.shape != (len(t), n_bands):
        vals = np.array([np.asarray(drive(float(x)), dtype=float) for x in t])
    if vals.shape != (len(t), n_bands):
        raise ValueError(f"drive must return {n_bands} Rabi frequencies")
    return np.ascontiguousarray(vals)


def evolve_rk4(
    s: AtomScenario,
    drive: Callable,
    rho_init: np.ndarray | None,
    dt: float,
    t_end: float,
    sample_every: int = 1,
    omega_max: float | None = None,
) -> Trajectory:
    """Fixed-step classic RK4 of the master equation under a time-dependent RF drive.

    ``drive(t)`` returns the N instantaneous Rabi frequencies; it may also
    accept an array of times and return shape (len(t), N), which is much
    faster. The Hamiltonian is rebuilt from the drive at every RK4 stage.
    Samples are taken every ``sample_every`` steps (t = 0 included); at each
    sample the state is re-Hermitised and its trace renormalised, and the
    largest correction is kept in ``max_drift``. ``omega_max`` bounds the
    drive for the step-size guard; when omitted the drive at t = 0 is used.
    """
    d = s.n_bands + 3
    rates = s.decay_rates()
    if omega_max is None:
        omega_max = float(np.max(np.abs(_drive_values(drive, np.zeros(1), s.n_bands)), initial=0.0))
    guard = max_stable_step(s, omega_max)
    if dt > guard * (1 + 1e-12):
        raise ValueError(f"dt = {dt:g} s exceeds the stability guard {guard:g} s")
    rho = ground_state(d) if rho_init is None else np.array(rho_init, dtype=complex)
    check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-8, psd_tol=1e-8)

    n_steps = int(round(t_end / dt))
    if not 1 <= sample_every <= max(n_steps, 1):
        raise ValueError(f"sample_every must lie in [1, {max(n_steps, 1)}] for {n_steps} steps")
    n_samples = n_steps // sample_every
    times = np.arange(n_samples + 1) * (sample_every * dt)
    samples = np.empty((n_samples + 1, d, d), dtype=complex)
    samples[0] = rho
    half = 0.5 * dt * np.arange(2 * sample_every + 1)
    max_drift = 0.0
    for k in range(n_samples):
        t0 = k * sample_every * dt
        drv = _drive_values(drive, t0 + half, s.n_bands)
        if np.max(drv) > omega_max * (1 + 1e-9):
            raise ValueError("drive exceeds omega_max used for the step-size guard")
        rho = _rk4_steps(rho, drv, dt, s.omega_p_rabi, s.omega_c_rabi, rates)
        if not np.all(np.isfinite(rho)) or np.max(np.abs(rho)) > 10.0:
            raise DivergenceError(f"density matrix diverged at t = {t0 + sample_every * dt:g} s")
        herm = float(np.max(np.abs(rho - rho.conj().T)))
        tr = abs(np.trace(rho) - 1.0)
        max_drift = max(max_drift, herm, tr)
        rho = 0.5 * (rho + rho.conj().T)
        rho = rho / np.trace(rho).real
        samples[k + 1] = rho
    if max_drift > 0:
        log.debug("RK4 drift before correction: %.3g", max_drift)
    return Trajectory(times, samples, max_drift)
