import math
from dataclasses import replace

import numpy as np
import pytest

from multiband_rare import quantum as q
from multiband_rare import transfer as tr
from multiband_rare.scenario import CONST

from conftest import MHZ, with_bands

# independent high-precision evaluation at A = A*, alpha = (1/2, 1/2), default bands
KAPPA_REF = np.array([0.0032353420831608318, 0.00098866147212778461])
VARRHO0_REF = 2.239270894865608e23
P_R_REF = 4.611426405143276e-5
C1_REF = 2.3289397330782883e-19
C2_REF = np.array([2.2046093449585135e-16, 2.0045586485659433e-14])
SIGMA2_I_REF = 8.591787344883641e-19
SIGMA2_E_REF = np.array([1.8461290002841687e-16, 1.5674870966784036e-15])
SIGMA2_REF = np.array([1.8547207876290524e-16, 1.5683462754128919e-15])


def test_probe_power_limits(atom, derived):
    assert tr.probe_power(atom, [0.0, 0.0]) == atom.probe_power_in
    sat = tr.probe_power(atom, [1e15, 1e15])
    assert sat == pytest.approx(atom.probe_power_in * math.exp(-derived.chi0), rel=1e-12)


def test_probe_power_two_paths(atom):
    om = [MHZ, MHZ]
    direct = tr.probe_power(atom, om)
    via_state = tr.probe_power_from_state(atom, q.steady_state_numeric(atom, om))
    assert via_state == pytest.approx(direct, rel=1e-9)


def test_probe_power_vectorised(atom):
    om = np.array([[MHZ, 0.0], [0.5 * MHZ, 2 * MHZ]])
    np.testing.assert_array_equal(tr.probe_power(atom, om), [tr.probe_power(atom, o) for o in om])


def test_gradient_zero_at_origin(atom):
    assert not np.any(tr.power_gradient(atom, [0.0, 0.0]))


def test_gradient_symmetric(atom):
    g = tr.power_gradient(atom, [MHZ, MHZ])
    assert g[0] == g[1]


def test_gradient_finite_difference(atom, derived):
    rng = np.random.default_rng(2)
    step = 1e-6 * math.sqrt(derived.Gamma2)
    for _ in range(20):
        om = rng.uniform(0.1, 5, 2) * MHZ
        g = tr.power_gradient(atom, om)
        for n in range(2):
            e = np.zeros(2)
            e[n] = step
            fd = (tr.probe_power(atom, om + e) - tr.probe_power(atom, om - e)) / (2 * step)
            assert abs(g[n] - fd) <= 1e-6 * abs(g[n])


def test_gradient_negative(atom):
    assert np.all(tr.power_gradient(atom, [MHZ, 0.3 * MHZ]) < 0)


def test_linearized_zero_data_constant(atom, bands):
    sig = tr.band_signal(bands)
    out = tr.linearized_output(atom, bands, sig, np.linspace(0, 1e-5, 50))
    np.testing.assert_array_equal(out, tr.probe_power(atom, bands.omega_r))


def test_linearized_single_band_peak(atom, bands):
    s = with_bands(atom, 1)
    b = bands
    b1 = replace(b, omega=b.omega[:1], delta=b.delta[:1], bandwidth=b.bandwidth[:1], mu=b.mu[:1],
                 h=b.h[:1], pt=b.pt[:1], omega_r=np.array([MHZ]), services=b.services[:1])
    sig = tr.band_signal(b1).with_data([1e-3 * abs(tr.band_signal(b1).E_r[0])])
    kappa = tr.kappa_from_gradient(s, sig)
    out = tr.linearized_output(s, b1, sig, 0.0)
    assert out == pytest.approx(tr.probe_power(s, [MHZ]) + kappa[0] * abs(sig.E_s[0]), rel=1e-14)


def test_linearized_rejects_weak_reference(atom, bands):
    sig = tr.band_signal(bands)
    sig = sig.with_data(0.1 * np.abs(sig.E_r))
    with pytest.raises(tr.StrongReferenceError):
        tr.linearized_output(atom, bands, sig, 0.0)


def test_strong_reference_ignores_dead_bands(bands):
    sig = tr.signal_from_rabi([MHZ, 0.0], [1e3, 0.0], [0.0, 0.0], bands.mu)
    assert sig.strong_reference(100.0)


def test_linearized_matches_nonlinear_path_qpsk(atom, bands):
    rng = np.random.default_rng(4)
    t = np.arange(0, 10e-6, 1 / 16e6)
    for _ in range(20):
        sym = np.exp(1j * (np.pi / 4 + np.pi / 2 * rng.integers(0, 4, 2)))
        sig = tr.band_signal(bands).with_data(tr.received_field(atom, bands, sym))
        lin = tr.linearized_output(atom, bands, sig, t)
        exact = tr.probe_power(atom, tr.rabi_drive(sig, bands.delta, t))
        assert tr.relative_rms_error(lin, exact) < 0.01


def test_linearization_residual_first_order(atom, bands):
    t = np.linspace(0, 10e-6, 401)
    om_r = np.array([MHZ, MHZ])
    residuals = []
    for scale in (1e-2, 5e-3, 2.5e-3):
        sig = tr.signal_from_rabi(om_r, scale * om_r, [0.3, 1.1], bands.mu)
        lin = tr.linearized_output(atom, bands, sig, t, check=False)
        exact = tr.probe_power(atom, tr.rabi_drive(sig, bands.delta, t))
        kappa = tr.kappa_from_gradient(atom, sig)
        residuals.append(np.max(np.abs(lin - exact)) / np.sum(np.abs(kappa * np.abs(sig.E_s))))
    for a, b in zip(residuals, residuals[1:]):
        assert b / a == pytest.approx(0.5, rel=0.2)


def test_waveform_zero_data_all_modes(atom, bands):
    sig = tr.band_signal(bands)
    p_r = tr.probe_power(atom, bands.omega_r)
    for mode in tr.WAVEFORM_MODES:
        trace = tr.synthesize_waveform(atom, bands, sig, 2e-6, 16e6, mode)
        np.testing.assert_allclose(trace.samples, p_r, rtol=1e-9)


def test_waveform_sample_rate_invariant(atom, bands):
    with pytest.raises(ValueError, match="4x"):
        tr.synthesize_waveform(atom, bands, tr.band_signal(bands), 1e-6, 4 * 200e3)


def test_waveform_unknown_mode(atom, bands):
    with pytest.raises(ValueError):
        tr.synthesize_waveform(atom, bands, tr.band_signal(bands), 1e-6, 16e6, "exact")


def test_waveform_csv_round_trip(tmp_path, atom, bands):
    sig = tr.band_signal(bands).with_data(tr.received_field(atom, bands, [1, 1j]))
    trace = tr.synthesize_waveform(atom, bands, sig, 5e-6, 16e6, t0=1e-6)
    path = tmp_path / "w.csv"
    trace.to_csv(path, {"scenario_hash": "abc"})
    back = tr.WaveformTrace.from_csv(path)
    np.testing.assert_array_equal(back.samples, trace.samples)
    assert back.sample_rate == trace.sample_rate and back.t0 == trace.t0
    assert "# scenario_hash=abc" in path.read_text()


def test_gain_decomposition_single_band(atom):
    s = with_bands(atom, 1)
    A = (1.7 * MHZ) ** 2
    mu = np.array([1e-28])
    tm = tr.gain_decomposition(s, A, [1.0], mu)
    sig = tr.signal_from_rabi([math.sqrt(A)], [0.0], [0.0], mu)
    assert tm.kappa[0] == pytest.approx(tr.kappa_from_gradient(s, sig)[0], rel=1e-12)


def test_gain_path_equivalence(atom, bands):
    rng = np.random.default_rng(9)
    for _ in range(50):
        om = rng.uniform(0.05, 5, 2) * MHZ
        A, alpha = tr.attention_from_rabi(om)
        tm = tr.gain_decomposition(atom, A, alpha / alpha.sum(), bands.mu)
        direct = tr.kappa_from_gradient(atom, tr.signal_from_rabi(om, [0, 0], [0, 0], bands.mu))
        np.testing.assert_allclose(tm.kappa, direct, rtol=1e-12)
        assert tm.P_r == pytest.approx(tr.probe_power(atom, om), rel=1e-12)
        assert tm.alpha.sum() == pytest.approx(1.0, abs=1e-12)


def test_gain_zero_attention(atom, bands, a_star):
    tm = tr.gain_decomposition(atom, a_star, [1.0, 0.0], bands.mu)
    assert tm.kappa[1] == 0


@pytest.mark.parametrize("alpha", [[0.6, 0.6], [1.2, -0.2]])
def test_gain_rejects_bad_attention(atom, bands, a_star, alpha):
    with pytest.raises(ValueError):
        tr.gain_decomposition(atom, a_star, alpha, bands.mu)


def test_gain_rejects_nonpositive_sum_square(atom, bands):
    with pytest.raises(ValueError):
        tr.gain_decomposition(atom, 0.0, [0.5, 0.5], bands.mu)


def test_frozen_gain_at_optimum(atom, bands, a_star):
    tm = tr.gain_decomposition(atom, a_star, [0.5, 0.5], bands.mu)
    assert tm.P_r == pytest.approx(P_R_REF, rel=1e-10)
    assert tm.varrho0 == pytest.approx(-VARRHO0_REF, rel=1e-10)
    np.testing.assert_allclose(tm.kappa, -KAPPA_REF, rtol=1e-10)


def test_rabi_attention_round_trip():
    om = np.array([0.3, 1.2, 0.8]) * MHZ
    A, alpha = tr.attention_from_rabi(om)
    np.testing.assert_allclose(tr.rabi_from_attention(A, alpha), om, rtol=1e-14)


def test_frozen_noise(atom, bands, a_star):
    tm = tr.gain_decomposition(atom, a_star, [0.5, 0.5], bands.mu)
    nm = tr.noise_variances(atom, bands, tm.P_r, tm.kappa)
    assert nm.C1 == pytest.approx(C1_REF, rel=1e-10)
    np.testing.assert_allclose(nm.C2, C2_REF, rtol=1e-10)
    np.testing.assert_allclose(nm.sigma2_I, SIGMA2_I_REF, rtol=1e-10)
    np.testing.assert_allclose(nm.sigma2_E, SIGMA2_E_REF, rtol=1e-10)
    np.testing.assert_allclose(nm.sigma2, SIGMA2_REF, rtol=1e-10)


def test_noise_monotone_in_temperature(atom, bands):
    temps = np.logspace(0, 4, 60)
    c2 = np.array([tr.blackbody_coefficient(replace(atom, ambient_temp=T), bands.omega) for T in temps])
    assert np.all(np.diff(c2, axis=0) > 0)


def test_noise_rayleigh_jeans_limit(atom, bands):
    T = 1e7
    c2 = tr.blackbody_coefficient(replace(atom, ambient_temp=T), bands.omega)
    f = bands.omega / (2 * np.pi)
    rj = 4 * CONST.hbar * f**3 * 2 * CONST.kB * T / (CONST.hbar * bands.omega) / (CONST.eps0 * CONST.c**3)
    np.testing.assert_allclose(c2, rj, rtol=1e-6)


def test_noise_zero_gain_is_intrinsic(atom, bands):
    nm = tr.noise_variances(atom, bands, 1e-5, [0.0, 0.0])
    np.testing.assert_array_equal(nm.sigma2, nm.sigma2_I)


def _snr_at(atom, bands, A, alpha, E):
    tm = tr.gain_decomposition(atom, A, alpha, bands.mu)
    nm = tr.noise_variances(atom, bands, tm.P_r, tm.kappa)
    return tr.snr(atom, bands, tm, nm, E)


def test_snr_zero_attention(atom, bands, a_star):
    assert _snr_at(atom, bands, a_star, [1.0, 0.0], [1.0, 1.0])[1] == 0


def test_snr_quadratic_in_field(atom, bands, a_star):
    a = _snr_at(atom, bands, a_star, [0.4, 0.6], [1.0, 0.5])
    b = _snr_at(atom, bands, a_star, [0.4, 0.6], [2.0, 1.0])
    np.testing.assert_allclose(b, 4 * a, rtol=1e-14)


def test_snr_monotone_in_normalised_gain(atom, bands, a_star):
    """Sweeping A below A* raises varrho0^2 / P_r, and the SNR follows."""
    As = np.linspace(0.05, 1.0, 40) * a_star
    ratio, snrs = [], []
    for A in As:
        tm = tr.gain_decomposition(atom, A, [0.5, 0.5], bands.mu)
        ratio.append(tm.varrho0**2 / tm.P_r)
        snrs.append(_snr_at(atom, bands, A, [0.5, 0.5], [1.0, 1.0]))
    order = np.argsort(ratio)
    assert np.all(np.diff(np.array(snrs)[order], axis=0) > 0)
