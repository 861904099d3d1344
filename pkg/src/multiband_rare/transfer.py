"""Probe-laser transfer function, gain decomposition, waveforms and noise."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quantum
from .scenario import CONST, TWO_PI, AtomScenario, BandPlan, derive_constants


class StrongReferenceError(ValueError):
    """Reference field not strong enough for the first-order expansion."""


def probe_power(s: AtomScenario, omega) -> float:
    """Transmitted probe power P_in * exp(-chi0 S / (S + Gamma^2)), S = sum of squared Rabi frequencies."""
    d = derive_constants(s)
    omega = np.asarray(omega, dtype=float)
    S = np.sum(omega * omega, axis=-1)
    return s.probe_power_in * np.exp(-d.chi0 * S / (S + d.Gamma2))


def probe_power_from_state(s: AtomScenario, rho) -> float:
    """Map a density matrix (or a stack of them) to transmitted power via Im rho_12."""
    d = derive_constants(s)
    rho = np.asarray(rho)
    return s.probe_power_in * np.exp(-d.C0 * rho[..., 0, 1].imag)


def power_gradient(s: AtomScenario, omega) -> np.ndarray:
    d = derive_constants(s)
    omega = np.asarray(omega, dtype=float)
    S = float(omega @ omega)
    # more RF drive means more absorption, so the slope is negative
    return -probe_power(s, omega) * 2.0 * d.chi0 * d.Gamma2 * omega / (S + d.Gamma2) ** 2


@dataclass(frozen=True)
class BandSignal:
    """Complex baseband reference and data fields (V/m) plus the band dipoles (C m)."""

    E_r: np.ndarray
    E_s: np.ndarray
    mu: np.ndarray

    @property
    def omega_r(self) -> np.ndarray:
        return self.mu * np.abs(self.E_r) / CONST.hbar

    @property
    def omega_s(self) -> np.ndarray:
        return self.mu * np.abs(self.E_s) / CONST.hbar

    @property
    def phi(self) -> np.ndarray:
        return np.angle(self.E_s) - np.angle(self.E_r)

    def strong_reference(self, ratio: float = 100.0) -> bool:
        """True when every driven band (nonzero reference) satisfies Omega_r >= ratio * Omega_s.

        Bands without a reference have zero gain and drop out of the linear model.
        """
        live = self.omega_r > 0
        return bool(np.all(self.omega_r[live] >= ratio * self.omega_s[live]))

    def with_data(self, E_s) -> "BandSignal":
        return BandSignal(self.E_r, np.asarray(E_s, dtype=complex), self.mu)


def band_signal(bands: BandPlan, E_s=None, ref_phase=None) -> BandSignal:
    """Reference fields that realise ``bands.omega_r``; data fields default to zero."""
    mag = CONST.hbar * bands.omega_r / bands.mu
    phase = np.zeros(bands.n_bands) if ref_phase is None else np.asarray(ref_phase, float)
    E_s = np.zeros(bands.n_bands, complex) if E_s is None else np.asarray(E_s, complex)
    return BandSignal(mag * np.exp(1j * phase), E_s, bands.mu)


def signal_from_rabi(omega_r, omega_s, phi, mu, ref_phase=None) -> BandSignal:
    """Build fields from Rabi magnitudes (rad/s) and data/reference phase offsets."""
    mu = np.asarray(mu, float)
    ref_phase = np.zeros_like(mu) if ref_phase is None else np.asarray(ref_phase, float)
    E_r = CONST.hbar * np.asarray(omega_r, float) / mu * np.exp(1j * ref_phase)
    E_s = CONST.hbar * np.asarray(omega_s, float) / mu * np.exp(1j * (ref_phase + np.asarray(phi, float)))
    return BandSignal(E_r, E_s, mu)


def received_field(s: AtomScenario, bands: BandPlan, payload) -> np.ndarray:
    """E_s = field_conversion * h * sqrt(P_t) * payload (symbol or unit phasor)."""
    return s.field_conversion * bands.h * np.sqrt(bands.pt) * np.asarray(payload, complex)


def rabi_drive(sig: BandSignal, delta: np.ndarray, t) -> np.ndarray:
    """Instantaneous RF Rabi frequencies; shape (..., N) for array ``t``."""
    t = np.asarray(t, dtype=float)
    phase = np.exp(1j * np.multiply.outer(t, delta))
    return sig.mu * np.abs(sig.E_r + sig.E_s * phase) / CONST.hbar


def kappa_from_gradient(s: AtomScenario, sig: BandSignal) -> np.ndarray:
    return power_gradient(s, sig.omega_r) * sig.mu / CONST.hbar


def linearized_output(s: AtomScenario, bands: BandPlan, sig: BandSignal, t, check: bool = True):
    """First-order probe power: DC bias plus each band's gain times its IF data tone."""
    if check and not sig.strong_reference(s.strong_reference_ratio):
        raise StrongReferenceError(
            f"reference Rabi frequencies must exceed {s.strong_reference_ratio:g}x the data Rabi frequencies"
        )
    t = np.asarray(t, dtype=float)
    P_r = probe_power(s, sig.omega_r)
    kappa = kappa_from_gradient(s, sig)
    tone = np.real(sig.E_s * np.exp(1j * (np.multiply.outer(t, bands.delta) - np.angle(sig.E_r))))
    return P_r + tone @ kappa


@dataclass(frozen=True)
class WaveformTrace:
    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def to_csv(self, path, header: dict | None = None) -> None:
        lines = [f"# sample_rate_hz={self.sample_rate!r}", f"# t0_s={self.t0!r}"]
        lines += [f"# {k}={v}" for k, v in (header or {}).items()]
        lines.append("t_s,power_w")
        lines += [f"{t!r},{p!r}" for t, p in zip(self.t.tolist(), self.samples.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "WaveformTrace":
        meta = {}
        rows = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line and not line.startswith("t_s"):
                rows.append(float(line.split(",")[1]))
        return cls(np.asarray(rows), float(meta["sample_rate_hz"]), float(meta.get("t0_s", 0.0)))


WAVEFORM_MODES = ("linearized", "quasi_static", "rk4")


def synthesize_waveform(
    s: AtomScenario,
    bands: BandPlan,
    sig: BandSignal,
    duration: float,
    sample_rate: float,
    mode: str = "linearized",
    t0: float = 0.0,
    settle: float = 0.0,
) -> WaveformTrace:
    """Sampled probe-laser power under the static band fields ``sig``.

    ``linearized`` uses the first-order model, ``quasi_static`` evaluates the
    steady-state transfer function at every sample, ``rk4`` integrates the
    master equation. The rk4 path starts from the stationary state of the drive
    at ``t0 - settle`` and runs ``settle`` seconds before the first sample so
    the atoms are already locked to the drive when observation begins.
    """
    if mode not in WAVEFORM_MODES:
        raise ValueError(f"mode must be one of {WAVEFORM_MODES}")
    if sample_rate <= 4.0 * np.max(bands.delta) / TWO_PI:
        raise ValueError("sample rate must exceed 4x the highest IF")
    n = int(round(duration * sample_rate))
    t = t0 + np.arange(n) / sample_rate
    if mode == "linearized":
        return WaveformTrace(linearized_output(s, bands, sig, t), sample_rate, t0)
    if mode == "quasi_static":
        return WaveformTrace(probe_power(s, rabi_drive(sig, bands.delta, t)), sample_rate, t0)

    omega_max = float(np.max(sig.omega_r + sig.omega_s))
    guard = quantum.max_stable_step(s, omega_max)
    sub = max(1, math.ceil((1.0 / sample_rate) / guard))
    dt = 1.0 / (sample_rate * sub)
    start = t0 - settle
    drive = lambda tt: rabi_drive(sig, bands.delta, start + np.asarray(tt))  # noqa: E731
    rho_init = quantum.steady_state_numeric(s, rabi_drive(sig, bands.delta, start))
    n_settle = int(round(settle * sample_rate))
    traj = quantum.evolve_rk4(
        s, drive, rho_init, dt, (n_settle + n - 1) * sub * dt, sample_every=sub, omega_max=omega_max
    )
    power = probe_power_from_state(s, traj.rho[n_settle:])
    return WaveformTrace(power[:n], sample_rate, t0)


def relative_rms_error(trace, reference) -> float:
    """||trace - reference|| / ||reference|| over samples (DC included)."""
    a = np.asarray(getattr(trace, "samples", trace), float)
    b = np.asarray(getattr(reference, "samples", reference), float)
    return float(np.sqrt(np.mean((a - b) ** 2) / np.mean(b**2)))


def ac_relative_rms_error(trace, reference) -> float:
    """Error RMS relative to the RMS of the reference's fluctuation about its mean."""
    a = np.asarray(getattr(trace, "samples", trace), float)
    b = np.asarray(getattr(reference, "samples", reference), float)
    ac = b - b.mean()
    return float(np.sqrt(np.mean((a - b) ** 2) / np.mean(ac**2)))


@dataclass(frozen=True)
class TransferModel:
    P_r: float
    kappa: np.ndarray
    varrho0: float
    A: float
    alpha: np.ndarray


def dc_bias(s: AtomScenario, A: float) -> float:
    d = derive_constants(s)
    return s.probe_power_in * math.exp(-d.chi0 * A / (A + d.Gamma2))


def global_gain(s: AtomScenario, A: float) -> float:
    """Signed global gain; negative because the probe power falls as the RF drive grows."""
    d = derive_constants(s)
    return -2.0 * d.chi0 * d.Gamma2 / CONST.hbar * dc_bias(s, A) * math.sqrt(A) / (A + d.Gamma2) ** 2


def gain_decomposition(s: AtomScenario, A: float, alpha, mu) -> TransferModel:
    """Split the per-band gains into the global gain, Rabi attentions and dipoles."""
    alpha = np.asarray(alpha, dtype=float)
    if not A > 0:
        raise ValueError("Rabi sum-square must be positive")
    if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-12:
        raise ValueError("Rabi attentions must be nonnegative and sum to one")
    varrho0 = global_gain(s, A)
    kappa = varrho0 * np.sqrt(alpha) * np.asarray(mu, float)
    return TransferModel(dc_bias(s, A), kappa, varrho0, A, alpha)


def attention_from_rabi(omega_r) -> tuple[float, np.ndarray]:
    omega_r = np.asarray(omega_r, float)
    A = float(omega_r @ omega_r)
    return A, omega_r**2 / A


def rabi_from_attention(A: float, alpha) -> np.ndarray:
    return np.sqrt(A * np.asarray(alpha, float))


def shot_noise_coefficient(s: AtomScenario) -> float:
    """C1 = hbar * omega_p (photon energy of the probe)."""
    return CONST.hbar * TWO_PI * CONST.c / s.probe_wavelength


def blackbody_coefficient(s: AtomScenario, omega) -> np.ndarray:
    """Per-band C2 = 4 hbar f^3 coth(hbar omega / 2 kB T) / (eps0 c^3), f = omega / 2 pi."""
    omega = np.asarray(omega, float)
    f = omega / TWO_PI
    x = CONST.hbar * omega / (CONST.kB * s.ambient_temp)
    occupancy = 1.0 / np.tanh(0.5 * x)  # (e^x + 1) / (e^x - 1)
    return s.blackbody_scale * 4.0 * CONST.hbar * f**3 * occupancy / (CONST.eps0 * CONST.c**3)


@dataclass(frozen=True)
class NoiseModel:
    sigma2_I: np.ndarray
    sigma2_E: np.ndarray
    C1: float
    C2: np.ndarray

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma2_I + self.sigma2_E


def noise_variances(s: AtomScenario, bands: BandPlan, P_r: float, kappa) -> NoiseModel:
    C1 = shot_noise_coefficient(s)
    C2 = blackbody_coefficient(s, bands.omega)
    B = bands.bandwidth
    kappa = np.asarray(kappa, float)
    return NoiseModel(P_r * B * C1, kappa**2 * B * C2, C1, C2)


def snr(s: AtomScenario, bands: BandPlan, tm: TransferModel, nm: NoiseModel, E_s_mag) -> np.ndarray:
    """Per-band SNR from the gain form, cross-checked against the decoupled attention form."""
    E2 = np.abs(np.asarray(E_s_mag, dtype=complex)) ** 2
    B = bands.bandwidth
    k2 = tm.kappa**2
    direct = k2 * E2 / (k2 * B * nm.C2 + tm.P_r * B * nm.C1)
    am2 = tm.alpha * bands.mu**2
    decoupled = am2 * E2 / (am2 * B * nm.C2 + tm.P_r / tm.varrho0**2 * B * nm.C1)
    if not np.allclose(direct, decoupled, rtol=1e-12, atol=0.0):
        raise AssertionError("gain-form and attention-form SNR disagree")
    return direct
