import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from optocool.figures import steady_measurement
from optocool.fitting import (estimate_linewidth, extract_final_temperature, fit_atom_decay,
                              fit_cooldown, fit_gain_temperature_curve, fit_inloop_spectrum,
                              fit_sympathetic_resonance, least_squares, lorentzian,
                              resonance_model)
from optocool.model import (CoolingGains, DetectionParams, MembraneParams,
                            final_temperature_combined, optimal_feedback_gain, psd_in_loop,
                            sympathetic_rate)
from optocool.spectral import Spectrum, ZeroSpanTrace, expected_spectrum

P = MembraneParams.from_hz(76e-12, 264e3, 24.5e-3, 0.5)
D = DetectionParams(7.4e-33)


def test_least_squares_matches_scipy():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 4, 60)

    def model(x, a, k, c):
        return a * np.exp(-k * x) + c

    y = model(x, 2.0, 1.3, 0.4) + 0.02 * rng.standard_normal(x.size)
    ours = least_squares(model, x, y, dict(a=1.0, k=0.5, c=0.0))
    ref = optimize.least_squares(lambda u: model(x, *u) - y, [1.0, 0.5, 0.0],
                                 xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert ours.converged
    np.testing.assert_allclose([ours["a"], ours["k"], ours["c"]], ref.x, rtol=1e-6)
    cov = np.linalg.inv(ref.jac.T @ ref.jac) * (2 * ref.cost / (x.size - 3))
    np.testing.assert_allclose([ours.stderr[k] for k in "akc"], np.sqrt(np.diag(cov)), rtol=1e-3)
    assert ours.cost_history == sorted(ours.cost_history, reverse=True)


def test_least_squares_bounds_and_flags():
    x = np.linspace(0, 1, 20)
    fit = least_squares(lambda x, a: a * x, x, -x, dict(a=1.0), bounds=dict(a=(0.0, 5.0)))
    assert fit["a"] == pytest.approx(0.0, abs=1e-9)
    assert any(f.startswith("at_bound") for f in fit.flags)
    with pytest.raises(ValueError):
        least_squares(lambda x, a: a * x, x[:1], x[:1], dict(a=1.0))


@given(g=st.floats(1.0, 1e3), t_bath=st.floats(1e-3, 10.0))
def test_cooldown_noiseless_roundtrip(g, t_bath):
    gamma_m = 2 * math.pi * 1.0
    tau = 1 / (gamma_m * (1 + g))
    t = np.linspace(0, 8 * tau, 200)
    temp = t_bath / (1 + g) * (1 + g * np.exp(-t / tau))
    fit = fit_cooldown(ZeroSpanTrace(t, temp, 1e3, 10.0), gamma_m)
    assert fit["g"] == pytest.approx(g, rel=1e-4)
    assert fit["t_bath"] == pytest.approx(t_bath, rel=1e-4)
    assert "short_trace" not in fit.flags


def test_cooldown_flags_short_trace():
    gamma_m = 2 * math.pi
    t = np.linspace(0, 0.5 / (gamma_m * 11), 20)
    temp = 1 / 11 * (1 + 10 * np.exp(-gamma_m * 11 * t))
    assert "short_trace" in fit_cooldown(ZeroSpanTrace(t, temp, 1e3, 10.0), gamma_m).flags
    with pytest.raises(ValueError):
        fit_cooldown(ZeroSpanTrace(t[:3], temp[:3], 1e3, 10.0), gamma_m)


def _inloop_spectrum(g_v, g_s, n_avg=None, seed=0, rbw_frac=0.2):
    lw = P.gamma_m * (1 + g_v + g_s) / (2 * math.pi)
    df = rbw_frac * lw / 1.5
    f = P.f_m + df * np.arange(-80, 81)
    s = Spectrum(f, np.ones_like(f), 1, 1.5 * df)
    psd = expected_spectrum(lambda ff: psd_in_loop(2 * np.pi * ff, P, D, CoolingGains(g_v, g_s)),
                            s)
    if n_avg:
        psd = psd * np.random.default_rng(seed).gamma(n_avg, 1.0 / n_avg, psd.size)
    return Spectrum(f, psd, n_avg or 1, 1.5 * df)


@pytest.mark.parametrize("g_v", [1e2, 1e3, 1e4, 3e4])
def test_inloop_noiseless_roundtrip(g_v):
    fit = fit_inloop_spectrum(_inloop_spectrum(g_v, 0.0), P, D)
    assert fit["g_v"] == pytest.approx(g_v, rel=1e-4)
    assert not fit.flags


@pytest.mark.parametrize("g_v,seed", [(1e2, 1), (1e3, 2), (1e4, 3), (3e4, 4)])
def test_inloop_noisy_roundtrip(g_v, seed):
    fit = fit_inloop_spectrum(_inloop_spectrum(g_v, 0.0, n_avg=32, seed=seed), P, D)
    assert fit["g_v"] == pytest.approx(g_v, rel=0.1)


def test_inloop_with_sympathetic_gain_and_temperature():
    fit = fit_inloop_spectrum(_inloop_spectrum(500.0, 170.0), P, D, g_s=170.0)
    assert fit["g_v"] == pytest.approx(500.0, rel=1e-4)
    t = extract_final_temperature(fit, P, D, 170.0)
    assert t == pytest.approx(final_temperature_combined(P, D, CoolingGains(500.0, 170.0)),
                              rel=1e-3)


def test_inloop_flags_under_resolved():
    fit = fit_inloop_spectrum(_inloop_spectrum(1e3, 0.0, rbw_frac=1.0), P, D)
    assert "under_resolved" in fit.flags


def test_extract_requires_convergence():
    fit = fit_inloop_spectrum(_inloop_spectrum(1e3, 0.0), P, D)
    fit.converged = False
    with pytest.raises(ValueError):
        extract_final_temperature(fit, P, D)


def test_gain_curve_roundtrip():
    gains = np.geomspace(100, 1e5, 10)
    temps = [final_temperature_combined(P, D, CoolingGains(g, 0.0)) for g in gains]
    fit = fit_gain_temperature_curve(list(zip(gains, temps)), P)
    assert fit["t_bath"] == pytest.approx(0.5, rel=1e-4)
    assert fit["s_xn_eff"] == pytest.approx(D.s_xn, rel=1e-4)
    g_opt, t_min = optimal_feedback_gain(P, D)
    assert fit.derived["g_opt"] == pytest.approx(g_opt, rel=1e-4)
    assert fit.derived["t_min"] == pytest.approx(t_min, rel=1e-4)
    assert "extrapolated" not in fit.flags
    low = fit_gain_temperature_curve(list(zip(gains[:5], temps[:5])), P)
    assert "extrapolated" in low.flags


def _resonance_points(gamma_frac, noise=0.0, seed=0):
    wm = P.omega_m
    w = wm * np.linspace(0.6, 1.4, 17)
    g_n = 1e3 * (w / wm) ** 1.5
    rate = np.array([sympathetic_rate(g, gamma_frac * wm, wa, wm) for g, wa in zip(g_n, w)])
    if noise:
        rate = rate * (1 + noise * np.random.default_rng(seed).standard_normal(rate.size))
    return np.column_stack([w, rate])


@pytest.mark.parametrize("frac", [0.11, 0.24])
def test_resonance_noiseless_roundtrip(frac):
    fit = fit_sympathetic_resonance(_resonance_points(frac))
    assert fit["gamma_a"] / P.omega_m == pytest.approx(frac, rel=1e-4)
    assert fit["omega_m"] == pytest.approx(P.omega_m, rel=1e-6)
    assert fit.derived["peak_omega_a"] > P.omega_m


@pytest.mark.parametrize("frac,seed", [(0.11, 5), (0.24, 6)])
def test_resonance_noisy_roundtrip(frac, seed):
    fit = fit_sympathetic_resonance(_resonance_points(frac, noise=0.03, seed=seed))
    assert fit.derived["gamma_a_over_omega_m"] == pytest.approx(frac, rel=0.05)


def test_resonance_model_matches_rate():
    wm = P.omega_m
    assert resonance_model(wm, 10.0, 0.1 * wm, wm) == pytest.approx(
        sympathetic_rate(10.0, 0.1 * wm, wm, wm))


def test_linewidth_roundtrip_and_no_peak():
    f = np.linspace(900, 1100, 401)
    s = Spectrum(f, lorentzian(f, 1000.0, 8.0, 1e-20, 1e-24), 1, 0.5)
    fit = estimate_linewidth(s)
    assert fit["fwhm"] == pytest.approx(8.0, rel=1e-4)
    assert fit.derived["gamma"] == pytest.approx(2 * math.pi * 8.0, rel=1e-4)
    flat = Spectrum(f, np.ones_like(f) * (1 + 0.01 * np.sin(f)), 1, 0.5)
    assert "no_peak" in estimate_linewidth(flat).flags


def test_atom_decay_roundtrip():
    t = np.linspace(0, 20, 100)
    temp = 0.5 / (1 + 40 * np.exp(-t / 5.0))
    fit = fit_atom_decay(t, temp, 0.5)
    assert fit["g_s0"] == pytest.approx(40, rel=1e-4)
    assert fit["tau"] == pytest.approx(5.0, rel=1e-4)



def test_collinear_points_give_closed_form_line():
    x = np.array([0.0, 1.0, 2.0])
    fit = least_squares(lambda x, a, b: a * x + b, x, 3 * x - 1, dict(a=1.0, b=0.0))
    assert fit["a"] == pytest.approx(3.0, rel=1e-6)
    assert fit["b"] == pytest.approx(-1.0, rel=1e-6)


def test_lorentzian_noisy_monte_carlo():
    f = np.linspace(900, 1100, 200)
    clean = lorentzian(f, 1000.0, 10.0, 1e-20, 1e-22)
    for seed in range(100):
        noisy = clean * (1 + 0.05 * np.random.default_rng(seed).standard_normal(f.size))
        fit = estimate_linewidth(Spectrum(f, noisy, 1, 0.5))
        assert abs(fit["f0"] - 1000.0) < 0.02 * 10.0
        assert fit["fwhm"] == pytest.approx(10.0, rel=0.05)


def test_cooldown_g170_and_degenerate_flat():
    gamma_m = 2 * math.pi * 0.1
    t = np.linspace(0, 5 / (gamma_m * 171), 100)
    temp = 0.5 / 171 * (1 + 170 * np.exp(-gamma_m * 171 * t))
    assert fit_cooldown(ZeroSpanTrace(t, temp, 1e3, 50.0), gamma_m)["g"] == pytest.approx(
        170, rel=0.02)
    flat = fit_cooldown(ZeroSpanTrace(t, np.full_like(t, 0.5), 1e3, 50.0), gamma_m)
    assert flat["g"] < 1e-3
    assert "degenerate" in flat.flags


def test_inloop_self_fit_500():
    assert fit_inloop_spectrum(_inloop_spectrum(500.0, 0.0), P, D)["g_v"] == pytest.approx(
        500, rel=1e-3)


SCALED_Q5 = MembraneParams.from_hz(1e-12, 1e3, 0.01, 0.5)
D_Q5 = DetectionParams(1e-22)


@pytest.mark.parametrize("g_v,tol,p,d", [
    (100.0, 0.10, MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5), DetectionParams(1e-24)),
    (1e4, 0.15, SCALED_Q5, D_Q5),
])
def test_inloop_fit_on_simulated_spectra(g_v, tol, p, d):
    m = steady_measurement(p, d, g_v, 0.0, 50e3, seed=int(g_v), n_segments=101)
    assert m["s_y"].n_averages >= 100
    fit = fit_inloop_spectrum(m["s_y"], p, d)
    assert fit.converged
    assert fit["g_v"] == pytest.approx(g_v, rel=tol)


def test_squashed_spectrum_below_noise_floor():
    m = steady_measurement(SCALED_Q5, D_Q5, 1e4, 0.0, 50e3, seed=3, n_segments=100)
    s = m["s_y"]
    near = np.abs(s.freq - SCALED_Q5.f_m) < 0.1 * 1e4 * 0.01
    assert np.mean(s.psd[near]) < D_Q5.s_xn


def test_noise_free_chain_g100():
    p = MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)
    d = DetectionParams(0.0)
    m = steady_measurement(p, d, 100.0, 0.0, 50e3, seed=8, n_segments=64)
    fit = fit_inloop_spectrum(m["s_y"], p, d)
    assert extract_final_temperature(fit, p, d) == pytest.approx(0.5 / 101, rel=0.1)


def test_gain_curve_noisy_monte_carlo():
    gains = np.geomspace(300, 3e5, 8)
    clean = np.array([final_temperature_combined(P, D, CoolingGains(g, 0.0)) for g in gains])
    _, t_min = optimal_feedback_gain(P, D)
    for seed in range(50):
        temps = clean * (1 + 0.1 * np.random.default_rng(seed).standard_normal(gains.size))
        fit = fit_gain_temperature_curve(list(zip(gains, temps)), P)
        assert fit.derived["t_min"] == pytest.approx(t_min, rel=0.15)


def test_gain_curve_with_sympathetic_gain():
    gains = np.geomspace(10, 1e5, 12)
    temps = [final_temperature_combined(P, D, CoolingGains(g, 170.0)) for g in gains]
    fit = fit_gain_temperature_curve(list(zip(gains, temps)), P, g_s=170.0)
    assert fit["t_bath"] == pytest.approx(0.5, rel=1e-4)
    pp = MembraneParams(P.mass, P.omega_m, P.gamma_m, fit["t_bath"])
    dd = DetectionParams(fit["s_xn_eff"])
    for g in (10.0, 50.0, 100.0):
        assert final_temperature_combined(pp, dd, CoolingGains(g, 170)) < \
            final_temperature_combined(pp, dd, CoolingGains(g, 0))
    for g in (3e4, 1e5):
        assert final_temperature_combined(pp, dd, CoolingGains(g, 170)) == pytest.approx(
            final_temperature_combined(pp, dd, CoolingGains(g, 0)), rel=0.05)


def test_atom_decay_noisy_roundtrip():
    t = np.linspace(0, 10, 200)
    temp = 0.5 / (1 + 100 * np.exp(-t / 2.0))
    temp = temp * (1 + 0.005 * np.random.default_rng(2).standard_normal(t.size))
    fit = fit_atom_decay(t, temp, 0.5)
    assert fit["g_s0"] == pytest.approx(100, rel=0.01)
    assert fit["tau"] == pytest.approx(2.0, rel=0.01)


def test_linewidth_of_simulated_sympathetic_damping():
    p = MembraneParams.from_hz(1e-12, 1e3, 0.2, 0.5)
    m = steady_measurement(p, DetectionParams(0.0), 0.0, 10.0, 50e3, seed=5, n_segments=64)
    fit = estimate_linewidth(m["s_x"])
    assert fit["fwhm"] == pytest.approx(11 * 0.2, rel=0.1)
