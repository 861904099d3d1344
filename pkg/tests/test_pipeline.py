import math
from dataclasses import replace

import numpy as np
import pytest

from multiband_rare import optimize as op
from multiband_rare import pipeline as pl
from multiband_rare import transfer as tr
from multiband_rare.scenario import CONST, ScenarioError, Service

CLASSIC_SNR_REF = 376497.52300597957


@pytest.fixture(scope="module")
def sense_bands(bands):
    return bands.with_services([Service.comm(4), Service.sense()])


# ---------------------------------------------------------------- payload


@pytest.mark.parametrize("order", pl.QAM_ORDERS)
def test_constellation_unit_energy(order):
    c = pl.qam_constellation(order)
    assert len(c) == order
    assert np.mean(np.abs(c) ** 2) == pytest.approx(1.0, rel=1e-14)


def test_constellation_unsupported():
    with pytest.raises(ValueError):
        pl.qam_constellation(8)


def test_payload_deterministic(bands):
    a = pl.generate_payload(bands, 100, 7)
    b = pl.generate_payload(bands, 100, 7)
    np.testing.assert_array_equal(a.phasor, b.phasor)
    assert not np.array_equal(a.phasor, pl.generate_payload(bands, 100, 8).phasor)


def test_payload_qpsk_unit_energy(bands):
    p = pl.generate_payload(bands, 1000, 0)
    assert np.mean(np.abs(p.phasor) ** 2) == pytest.approx(1.0, rel=1e-14)
    assert np.all(np.isnan(p.displacement))


def test_payload_displacement_variance(sense_bands):
    p = pl.generate_payload(sense_bands, 10**5, 1)
    w = sense_bands.omega[1]
    d = p.displacement[:, 1]
    assert np.var(d) + np.mean(d) ** 2 == pytest.approx(math.pi**2 * CONST.c**2 / (3 * w**2), rel=0.02)
    assert np.all(np.abs(d) <= pl.unambiguous_range(w))
    assert np.all(p.symbol_index[:, 1] == -1)


def test_payload_count_zero(bands):
    with pytest.raises(ValueError):
        pl.generate_payload(bands, 0, 0)


def test_wrap_displacement(bands):
    w = bands.omega[0]
    half = pl.unambiguous_range(w)
    np.testing.assert_allclose(pl.wrap_displacement([0.5 * half, 1.5 * half, -1.25 * half], w),
                               [0.5 * half, -0.5 * half, 0.75 * half], rtol=1e-12)


# ---------------------------------------------------------------- demodulation


def _trace(atom, bands, payload, fs=pl.DEFAULT_DEMOD_RATE, n=600):
    sig = tr.band_signal(bands).with_data(tr.received_field(atom, bands, payload))
    return sig, tr.synthesize_waveform(atom, bands, sig, n / fs, fs)


def test_demod_recovers_gain_times_field(atom, bands):
    sig, trace = _trace(atom, bands, [np.exp(0.3j), np.exp(-2.0j)])
    kappa = tr.kappa_from_gradient(atom, sig)
    np.testing.assert_allclose(pl.demodulate_bands(trace, bands), kappa * sig.E_s, rtol=1e-3)


def test_demod_reference_phase(atom, bands):
    phase = np.array([0.7, -1.2])
    sig = tr.band_signal(bands, ref_phase=phase)
    sig = sig.with_data(tr.received_field(atom, bands, [1j, 1.0]) * np.exp(1j * phase))
    trace = tr.synthesize_waveform(atom, bands, sig, 600 / 1e6, 1e6)
    kappa = tr.kappa_from_gradient(atom, sig)
    np.testing.assert_allclose(pl.demodulate_bands(trace, bands, phase), kappa * sig.E_s, rtol=1e-3)


def test_demod_leakage_floor(atom, bands):
    _, trace = _trace(atom, bands, [1.0, 0.0])
    y = pl.demodulate_bands(trace, bands)
    assert 20 * np.log10(abs(y[1]) / abs(y[0])) < -40


def test_demod_empty_trace(bands):
    with pytest.raises(ValueError, match="empty"):
        pl.demodulate_bands(tr.WaveformTrace(np.zeros(0), 1e6), bands)


def test_demod_short_trace(bands):
    with pytest.raises(ValueError):
        pl.demodulate_bands(tr.WaveformTrace(np.zeros(100), 1e6), bands)


def test_demod_orthogonality_violation(atom, bands):
    close = replace(bands, delta=2 * np.pi * np.array([100e3, 150e3]))
    _, trace = _trace(atom, bands, [1.0, 1.0])
    with pytest.raises(ScenarioError, match="orthogonality"):
        pl.demodulate_bands(trace, close)


def test_waveform_noise_matches_baseband_variance(bands):
    sigma2 = 2.5e-12
    fs = pl.DEFAULT_DEMOD_RATE
    x = pl.waveform_noise(sigma2, bands.bandwidth[0], fs, 200_000, 3)
    series = pl.demodulate_series(tr.WaveformTrace(x, fs), bands)
    assert np.var(series[0]) == pytest.approx(sigma2, rel=0.03)


# ---------------------------------------------------------------- noise


def test_add_noise_zero_variance():
    clean = np.array([1 + 2j, -3j])
    np.testing.assert_array_equal(pl.add_noise(clean, 0.0, 1), clean)


def test_add_noise_rejects_negative():
    with pytest.raises(ValueError):
        pl.add_noise(np.zeros(3), -1.0, 0)


def test_add_noise_statistics():
    n = 10**6
    z = pl.add_noise(np.zeros(n), 3.0, 42)
    assert np.mean(np.abs(z) ** 2) == pytest.approx(3.0, rel=0.005)
    cov = np.mean(z.real * z.imag)
    assert abs(cov) <= 3 * 1.5 / math.sqrt(n)
    assert np.var(z.real) == pytest.approx(1.5, rel=0.01)


def test_add_noise_deterministic():
    a = pl.add_noise(np.zeros(10), 1.0, 5)
    np.testing.assert_array_equal(a, pl.add_noise(np.zeros(10), 1.0, 5))


# ---------------------------------------------------------------- detection


def test_ml_detect_noiseless():
    c = pl.qam_constellation(16)
    kappa, h, pt = -2e-3, 3e-5 * np.exp(0.4j), 0.1
    y = kappa * h * math.sqrt(pt) * c
    np.testing.assert_array_equal(pl.ml_detect_symbol(y, kappa, h, pt, c), np.arange(16))


def test_ml_detect_single_point():
    assert np.all(pl.ml_detect_symbol(np.array([1j, -5.0]), 1.0, 1.0, 1.0, pl.qam_constellation(1)) == 0)


def test_ml_detect_tie_breaks_low_index():
    c = pl.qam_constellation(4)
    assert pl.ml_detect_symbol(0.0, 1.0, 1.0, 1.0, c) == 0


def test_ml_detect_zero_gain():
    with pytest.raises(ValueError, match="zero gain"):
        pl.ml_detect_symbol(1.0, 0.0, 1.0, 1.0, pl.qam_constellation(4))


def test_qpsk_ser_matches_formula():
    c = pl.qam_constellation(4)
    rng = np.random.default_rng(10)
    n = 10**5
    for snr_db in (4.0, 8.0):
        snr = 10 ** (snr_db / 10)
        idx = rng.integers(0, 4, n)
        y = pl.add_noise(c[idx], 1 / snr, rng)
        ser = np.mean(pl.ml_detect_symbol(y, 1.0, 1.0, 1.0, c) != idx)
        p = float(pl.qpsk_ser(snr))
        assert abs(ser - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_ml_displacement_noiseless(bands):
    w = bands.omega[1]
    for d in (0.0, math.pi * CONST.c / (2 * w), -0.3 * pl.unambiguous_range(w)):
        y = 2.0 * np.exp(1j * w * d / CONST.c)
        assert pl.ml_estimate_displacement(y, 2.0, 1.0, 1.0, w) == pytest.approx(d, abs=1e-15)


def test_ml_displacement_efficiency():
    w = 2 * np.pi * 3e9
    rng = np.random.default_rng(12)
    n = 10**5
    half = pl.unambiguous_range(w)
    for snr_db in (20.0, 30.0):
        snr = 10 ** (snr_db / 10)
        d = rng.uniform(-half, half, n)
        y = pl.add_noise(np.exp(1j * w * d / CONST.c), 1 / snr, rng)
        err = pl.wrap_displacement(pl.ml_estimate_displacement(y, 1.0, 1.0, 1.0, w) - d, w)
        nmse = np.mean(err**2) / (half**2 / 3)
        bound = float(op.ncrlb_from_snr(snr, w))
        se = nmse * math.sqrt(2 / n)
        assert nmse >= bound - 3 * se
        assert nmse <= 1.1 * bound


# ---------------------------------------------------------------- classic baseline


def test_classic_frozen():
    snr = pl.classic_receiver_snr(80e3, 0.1, 10 ** (-90 / 20))
    assert snr == pytest.approx(CLASSIC_SNR_REF, rel=1e-12)
    assert pl.ClassicBaseline().label == "approximate baseline"


def test_classic_linear_in_power():
    a = pl.classic_receiver_snr(80e3, 0.1, 1e-4)
    assert pl.classic_receiver_snr(80e3, 0.2, 1e-4) == pytest.approx(2 * a, rel=1e-14)


def test_classic_thermal_limit():
    cfg = pl.ClassicBaseline(antenna_gain_db=0.0, lna_noise_temp=0.0)
    snr = pl.classic_receiver_snr(80e3, 0.1, 1e-4, cfg)
    assert snr == pytest.approx(1e-8 * 0.1 / (CONST.kB * 290.0 * 80e3), rel=1e-14)


# ---------------------------------------------------------------- trials


def test_trial_dead_band(atom, bands, a_star):
    rep = pl.run_trial(atom, bands, [1.0, 0.0], a_star, 200, 0)
    assert rep.se[1] == 0
    assert rep.ncrlb[1] == np.inf
    assert rep.ser[1] == 0.75
    assert rep.se[0] > 0


def test_trial_dead_sensing_band(atom, sense_bands, a_star):
    rep = pl.run_trial(atom, sense_bands, [1.0, 0.0], a_star, 200, 0)
    assert rep.nmse[1] == 1.0
    assert rep.ncrlb[1] == np.inf


def test_trial_monotone_in_attention(atom, bands, a_star):
    se = np.array([pl.run_trial(atom, bands, [a, 1 - a], a_star, 10, 1).se for a in np.linspace(0, 1, 21)])
    assert np.all(np.diff(se[:, 0]) >= 0)
    assert np.all(np.diff(se[:, 1]) <= 0)


def test_trial_deterministic(atom, sense_bands, a_star):
    a = pl.run_trial(atom, sense_bands, [0.4, 0.6], a_star, 500, 99)
    b = pl.run_trial(atom, sense_bands, [0.4, 0.6], a_star, 500, 99)
    assert a.to_csv() == b.to_csv()


def test_trial_csv_schema(atom, bands, a_star):
    text = pl.run_trial(atom, bands, [0.5, 0.5], a_star, 10, 0).to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(pl.TRIAL_COLUMNS)
    assert len(lines) == 3


def test_trial_same_snr_drives_ser_and_se(atom, bands, a_star):
    rep = pl.run_trial(atom, bands, [0.3, 0.7], a_star, 10, 0)
    np.testing.assert_array_equal(rep.ser_theory, pl.qpsk_ser(rep.snr_theory))
    np.testing.assert_array_equal(rep.se, np.log2(1 + rep.snr_theory))


def test_trial_ser_bounds(atom, bands, a_star):
    low = bands.with_power(1e-9)
    rep = pl.run_trial(atom, low, [0.5, 0.5], a_star, 2000, 3)
    assert np.all((rep.ser >= 0) & (rep.ser <= 1))


@pytest.mark.parametrize("waveform_mode", ["linearized", "quasi_static"])
def test_trial_empirical_snr_matches_theory(atom, bands, a_star, waveform_mode):
    rep = pl.run_trial(atom, bands, [0.5, 0.5], a_star, 8, 4, mode="waveform", waveform_mode=waveform_mode)
    np.testing.assert_allclose(rep.snr_empirical, rep.snr_theory, rtol=0.02)


def test_trial_baseband_and_waveform_agree(atom, bands, a_star):
    base = pl.run_trial(atom, bands, [0.5, 0.5], a_star, 16, 5)
    wave = pl.run_trial(atom, bands, [0.5, 0.5], a_star, 16, 5, mode="waveform")
    np.testing.assert_array_equal(base.ser, wave.ser)


def test_trial_mse_decreases_with_power(atom, sense_bands, a_star):
    mse = []
    for dbm in np.linspace(0, 20, 5):
        b = sense_bands.with_power(1e-3 * 10 ** (dbm / 10) * 1e-8)
        mse.append(pl.run_trial(atom, b, [0.5, 0.5], a_star, 20000, 6).mse[1])
    assert np.all(np.diff(mse) < 0)


def test_trial_rejects_unknown_mode(atom, bands, a_star):
    with pytest.raises(ValueError):
        pl.run_trial(atom, bands, [0.5, 0.5], a_star, 1, 0, mode="analog")
