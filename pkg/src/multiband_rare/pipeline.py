"""Monte Carlo communication and sensing chain for a multi-band receiver.

Per trial: draw per-band payloads, form the received fields, pass them through
the atomic transfer function (baseband model or sampled waveform plus I/Q
demodulation), add complex Gaussian noise and detect. Seeds are split from a
master seed with ``numpy.random.SeedSequence.spawn``: child 0 draws the
payload, child 1 the noise.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.special import erfc

from . import optimize, transfer
from .scenario import CONST, TWO_PI, AtomScenario, BandPlan, ScenarioError

QAM_ORDERS = (4, 16, 64, 256)
DEFAULT_NUMTAPS = 401
DEFAULT_DEMOD_RATE = 1e6  # Hz; 401 taps here give a transition band well inside the IF spacing


def qam_constellation(order: int) -> np.ndarray:
    """Square M-QAM points with unit average energy, ordered row-major from the most negative corner."""
    if order == 1:
        return np.ones(1, complex)
    if order not in QAM_ORDERS:
        raise ValueError(f"unsupported constellation order {order}; use one of {QAM_ORDERS}")
    m = int(round(math.sqrt(order)))
    levels = np.arange(-(m - 1), m, 2, dtype=float)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / math.sqrt(np.mean(np.abs(pts) ** 2))


def unambiguous_range(omega) -> np.ndarray:
    """Half-width pi c / omega of the displacement interval."""
    return math.pi * CONST.c / np.asarray(omega, float)


def wrap_displacement(d, omega) -> np.ndarray:
    half = unambiguous_range(omega)
    return (np.asarray(d, float) + half) % (2.0 * half) - half


@dataclass(frozen=True)
class Payload:
    """``count`` draws for every band; ``phasor`` is what modulates the data field."""

    phasor: np.ndarray  # (count, N) complex
    symbol_index: np.ndarray  # (count, N), -1 on sensing bands
    displacement: np.ndarray  # (count, N) m, nan on communication bands

    @property
    def count(self) -> int:
        return self.phasor.shape[0]


def generate_payload(bands: BandPlan, count: int, rng) -> Payload:
    if count < 1:
        raise ValueError("payload count must be at least 1")
    rng = np.random.default_rng(rng)
    n = bands.n_bands
    phasor = np.empty((count, n), complex)
    index = np.full((count, n), -1, dtype=np.int64)
    disp = np.full((count, n), np.nan)
    for k, service in enumerate(bands.services):
        if service.kind == "comm":
            const = qam_constellation(service.order)
            index[:, k] = rng.integers(0, len(const), count)
            phasor[:, k] = const[index[:, k]]
        else:
            half = unambiguous_range(bands.omega[k])
            disp[:, k] = rng.uniform(-half, half, count)
            phasor[:, k] = np.exp(1j * bands.omega[k] * disp[:, k] / CONST.c)
    return Payload(phasor, index, disp)


def add_noise(clean, sigma2, rng) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise of total variance ``sigma2``."""
    clean = np.asarray(clean, complex)
    sigma2 = np.asarray(sigma2, float)
    if np.any(sigma2 < 0):
        raise ValueError("noise variance must be nonnegative")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
    return clean + np.sqrt(0.5 * sigma2) * z


def waveform_noise(sigma2: float, bandwidth: float, sample_rate: float, n: int, rng,
                   numtaps: int = DEFAULT_NUMTAPS) -> np.ndarray:
    """Real white noise for a power trace, scaled so each demodulated sample has variance ``sigma2``.

    Mixing keeps the per-sample variance v, the low-pass filter scales it by
    sum(taps^2) and the factor 2 by 4, so v = sigma2 / (4 sum(taps^2)).
    Baseband injection is the default; this exists to cross-check it.
    """
    taps = lowpass_taps(0.5 * bandwidth, sample_rate, numtaps)
    std = math.sqrt(sigma2 / (4.0 * float(taps @ taps)))
    return std * np.random.default_rng(rng).standard_normal(n)


def check_orthogonality(bands: BandPlan) -> None:
    spacing = np.diff(bands.delta) / TWO_PI
    needed = 0.5 * (bands.bandwidth[:-1] + bands.bandwidth[1:])
    if np.any(spacing <= needed):
        raise ScenarioError("orthogonality margin violated: IF spacing must exceed the mean adjacent bandwidth")


def lowpass_taps(cutoff: float, sample_rate: float, numtaps: int = DEFAULT_NUMTAPS) -> np.ndarray:
    """Hamming-windowed sinc, unit gain at DC."""
    return signal.firwin(numtaps, cutoff, window="hamming", fs=sample_rate)


def demodulate_series(trace: transfer.WaveformTrace, bands: BandPlan, ref_phase=None, numtaps: int = DEFAULT_NUMTAPS):
    """Per-band complex baseband series over the fully-settled part of the filter output."""
    x = np.asarray(trace.samples, float)
    if x.size == 0:
        raise ValueError("empty trace")
    if trace.sample_rate <= 4.0 * np.max(bands.delta) / TWO_PI:
        raise ValueError("sample rate must exceed 4x the highest IF")
    check_orthogonality(bands)
    if x.size < numtaps:
        raise ValueError(f"trace has {x.size} samples, the {numtaps}-tap filter needs at least that many")
    ref_phase = np.zeros(bands.n_bands) if ref_phase is None else np.asarray(ref_phase, float)
    t = trace.t
    ac = x - x.mean()
    out = []
    for k in range(bands.n_bands):
        taps = lowpass_taps(0.5 * bands.bandwidth[k], trace.sample_rate, numtaps)
        mixed = ac * np.exp(-1j * bands.delta[k] * t)
        base = np.convolve(mixed, taps, mode="valid")
        out.append(2.0 * base * np.exp(1j * ref_phase[k]))
    return np.array(out)


def demodulate_bands(trace: transfer.WaveformTrace, bands: BandPlan, ref_phase=None, numtaps: int = DEFAULT_NUMTAPS):
    """Per-band amplitude estimates kappa_n E_s,n for a static payload (filtered, then averaged)."""
    return demodulate_series(trace, bands, ref_phase, numtaps).mean(axis=1)


def _equalizer(kappa, h, pt, field_conversion):
    g = np.asarray(kappa) * field_conversion * np.asarray(h) * np.sqrt(pt)
    if np.any(np.abs(g) == 0):
        raise ValueError("zero gain: band is unobservable")
    return g


def ml_detect_symbol(y, kappa, h, pt, constellation, field_conversion: float = 1.0) -> np.ndarray:
    """Index of the nearest constellation point to the equalized observation (first index wins ties)."""
    z = np.asarray(y, complex) / _equalizer(kappa, h, pt, field_conversion)
    const = np.asarray(constellation, complex)
    return np.argmin(np.abs(z[..., None] - const) ** 2, axis=-1)


def ml_estimate_displacement(y, kappa, h, pt, omega, field_conversion: float = 1.0) -> np.ndarray:
    z = np.asarray(y, complex) / _equalizer(kappa, h, pt, field_conversion)
    return wrap_displacement(CONST.c / omega * np.angle(z), omega)


def qfunc(x):
    return 0.5 * erfc(np.asarray(x, float) / math.sqrt(2.0))


def qpsk_ser(snr) -> np.ndarray:
    q = qfunc(np.sqrt(snr))
    return 2.0 * q - q * q


@dataclass(frozen=True)
class ClassicBaseline:
    """Approximate superheterodyne receiver: one antenna gain, an LNA and thermal noise."""

    antenna_gain_db: float = 2.1
    lna_gain_db: float = 30.0
    lna_noise_temp: float = 100.0
    ambient_temp: float = 290.0
    label: str = "approximate baseline"


def classic_receiver_snr(bandwidth, pt, h, cfg: ClassicBaseline = ClassicBaseline()) -> np.ndarray:
    g_ant = 10.0 ** (cfg.antenna_gain_db / 10.0)
    g_lna = 10.0 ** (cfg.lna_gain_db / 10.0)
    signal_power = np.abs(np.asarray(h)) ** 2 * np.asarray(pt, float) * g_ant * g_lna
    noise_power = CONST.kB * (cfg.ambient_temp + cfg.lna_noise_temp) * np.asarray(bandwidth, float) * g_lna
    return signal_power / noise_power


TRIAL_COLUMNS = (
    "band",
    "service",
    "alpha",
    "snr_theory_db",
    "snr_empirical_db",
    "ser",
    "ser_theory",
    "se_bps_hz",
    "se_weighted_bps_hz",
    "nmse_db",
    "ncrlb_db",
    "mse_m2",
)


@dataclass
class TrialReport:
    alpha: np.ndarray
    services: tuple
    snr_theory: np.ndarray
    snr_empirical: np.ndarray
    ser: np.ndarray
    ser_theory: np.ndarray
    se: np.ndarray
    se_weighted: np.ndarray
    mse: np.ndarray
    nmse: np.ndarray
    ncrlb: np.ndarray
    count: int
    mode: str
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[list]:
        out = []
        for k in range(len(self.alpha)):
            out.append(
                [
                    k + 1,
                    str(self.services[k]),
                    float(self.alpha[k]),
                    float(optimize.to_db(self.snr_theory[k])),
                    float(optimize.to_db(self.snr_empirical[k])),
                    float(self.ser[k]),
                    float(self.ser_theory[k]),
                    float(self.se[k]),
                    float(self.se_weighted[k]),
                    float(optimize.to_db(self.nmse[k])),
                    float(optimize.to_db(self.ncrlb[k])),
                    float(self.mse[k]),
                ]
            )
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for row in self.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


def _ser_theory(snr, service) -> float:
    if service.kind != "comm":
        return math.nan
    if service.order == 4:
        return float(qpsk_ser(snr))
    # nearest-neighbour approximation for square M-QAM
    m = math.sqrt(service.order)
    q = float(qfunc(math.sqrt(3.0 * snr / (service.order - 1))))
    p = 2.0 * (1.0 - 1.0 / m) * q
    return 1.0 - (1.0 - p) ** 2


def _waveform_clean(s, bands, E_s, ref_phase, sample_rate, numtaps, waveform_mode, n_avg):
    """Demodulated clean amplitudes for each payload draw (rows of ``E_s``)."""
    E_r = transfer.band_signal(bands, ref_phase=ref_phase).E_r
    duration = (numtaps - 1 + n_avg) / sample_rate
    out = np.empty_like(E_s)
    for i, row in enumerate(E_s):
        sig = transfer.BandSignal(E_r, row, bands.mu)
        trace = transfer.synthesize_waveform(s, bands, sig, duration, sample_rate, mode=waveform_mode)
        out[i] = demodulate_bands(trace, bands, ref_phase, numtaps)
    return out


def run_trial(
    s: AtomScenario,
    bands: BandPlan,
    alpha,
    A: float,
    count: int,
    seed: int,
    mode: str = "baseband",
    waveform_mode: str = "linearized",
    sample_rate: float = DEFAULT_DEMOD_RATE,
    numtaps: int = DEFAULT_NUMTAPS,
    avg_samples: int = 200,
) -> TrialReport:
    """Simulate ``count`` independent static-payload draws and score every band.

    ``mode="baseband"`` forms y = kappa E_s + z directly; ``mode="waveform"``
    synthesizes the probe-power trace (``waveform_mode``) for each draw and
    recovers kappa E_s with :func:`demodulate_bands` before adding noise.
    """
    if mode not in ("baseband", "waveform"):
        raise ValueError("mode must be 'baseband' or 'waveform'")
    alpha = np.asarray(alpha, float)
    tm = transfer.gain_decomposition(s, A, alpha, bands.mu)
    bands = bands.with_reference(transfer.rabi_from_attention(A, alpha))
    nm = transfer.noise_variances(s, bands, tm.P_r, tm.kappa)
    seq = np.random.SeedSequence(seed)
    payload_rng, noise_rng = (np.random.default_rng(c) for c in seq.spawn(2))
    payload = generate_payload(bands, count, payload_rng)
    E_s = transfer.received_field(s, bands, payload.phasor)

    E_mag = np.abs(transfer.received_field(s, bands, np.ones(bands.n_bands)))
    snr_theory = transfer.snr(s, bands, tm, nm, E_mag)
    ref_phase = np.zeros(bands.n_bands)
    if mode == "baseband":
        clean = tm.kappa * E_s
    else:
        clean = _waveform_clean(s, bands, E_s, ref_phase, sample_rate, numtaps, waveform_mode, avg_samples)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr_emp = np.mean(np.abs(clean) ** 2, axis=0) / nm.sigma2
    y = add_noise(clean, nm.sigma2, noise_rng)

    n = bands.n_bands
    ser = np.full(n, math.nan)
    ser_th = np.full(n, math.nan)
    mse = np.full(n, math.nan)
    nmse = np.full(n, math.nan)
    gamma = bands.bandwidth / bands.bandwidth.sum()
    se = np.log2(1.0 + snr_theory)
    with np.errstate(divide="ignore"):
        ncrlb = np.where(snr_theory > 0, optimize.ncrlb_from_snr(np.where(snr_theory > 0, snr_theory, 1.0), bands.omega), np.inf)
    for k, service in enumerate(bands.services):
        live = tm.kappa[k] != 0
        if service.kind == "comm":
            ser_th[k] = _ser_theory(snr_theory[k], service)
            if live:
                const = qam_constellation(service.order)
                idx = ml_detect_symbol(y[:, k], tm.kappa[k], bands.h[k], bands.pt[k], const, s.field_conversion)
                ser[k] = float(np.mean(idx != payload.symbol_index[:, k]))
            else:
                ser[k] = 1.0 - 1.0 / service.order
        else:
            if live:
                d_hat = ml_estimate_displacement(y[:, k], tm.kappa[k], bands.h[k], bands.pt[k], bands.omega[k], s.field_conversion)
                err = wrap_displacement(d_hat - payload.displacement[:, k], bands.omega[k])
                mse[k] = float(np.mean(err**2))
            else:
                mse[k] = float(unambiguous_range(bands.omega[k]) ** 2 / 3.0)
            nmse[k] = mse[k] / (unambiguous_range(bands.omega[k]) ** 2 / 3.0)
    return TrialReport(
        alpha=alpha,
        services=bands.services,
        snr_theory=snr_theory,
        snr_empirical=snr_emp,
        ser=ser,
        ser_theory=ser_th,
        se=se,
        se_weighted=gamma * se,
        mse=mse,
        nmse=nmse,
        ncrlb=ncrlb,
        count=count,
        mode=mode,
        meta={"seed": seed, "A": A},
    )
