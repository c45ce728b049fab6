"""Acceptance criteria C1 to C10, one printed pass/fail line each."""
import json
import math
import time

import numpy as np
import pytest
from psd_closure import integrated_temperature

from optocool import figures
from optocool.cli import check_report, main
from optocool.figures import NOT_REPRODUCED, steady_measurement
from optocool.fitting import (estimate_linewidth, fit_atom_decay, fit_cooldown,
                              fit_gain_temperature_curve, fit_inloop_spectrum,
                              fit_sympathetic_resonance, least_squares, lorentzian)
from optocool.model import (AtomCouplingParams, CoolingGains, DetectionParams, FeedbackParams,
                            MembraneParams, coupling_rate_gN, final_temperature_combined,
                            final_temperature_feedback, hybrid_cooperativity,
                            min_temp_sympathetic, noise_heating_floor, optimal_feedback_gain,
                            psd_in_loop, psd_out_of_loop, sympathetic_rate, thermal_occupation)
from optocool.pipeline import run_seed, settle_delay
from optocool.scenario import load_bundled
from optocool.sim import SimConfig, simulate_coupled, simulate_membrane
from optocool.spectral import (Spectrum, ZeroSpanTrace, average_spectra, band_temperature,
                               expected_spectrum, welch_psd, zoom_psd)

P = MembraneParams.from_hz(76e-12, 264e3, 24.5e-3, 0.5)
D = DetectionParams(7.4e-33)
FS = 50e3


def test_c01_occupancy_anchor(acceptance):
    n = thermal_occupation(203e-6, 2 * math.pi * 264e3)
    assert acceptance("C1 occupancy anchor", abs(n - 16.0) <= 0.5, f"n(203 uK) = {n:.3f}")


def test_c02_cooperativity_anchor(acceptance):
    c = 23.3 / (2 * math.pi * 24.5e-3)
    assert acceptance("C2 cooperativity anchor", abs(c - 151) <= 1, f"C_hybrid = {c:.2f}")


def _random_params(rng):
    p = MembraneParams(10 ** rng.uniform(-15, -9), 2 * math.pi * 10 ** rng.uniform(3, 6),
                       10 ** rng.uniform(-3, 1), 10 ** rng.uniform(-3, 1))
    return p, DetectionParams(10 ** rng.uniform(-36, -28))


def test_c03_reduction_identities(acceptance):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        p, d = _random_params(rng)
        g_v, g_s = 10 ** rng.uniform(-2, 6), 10 ** rng.uniform(-2, 4)
        fb = final_temperature_combined(p, d, CoolingGains(g_v, 0.0))
        sym = final_temperature_combined(p, d, CoolingGains(0.0, g_s))
        worst = max(worst, abs(fb / final_temperature_feedback(p, d, g_v) - 1),
                    abs(sym / min_temp_sympathetic(p.t_bath, g_s * p.gamma_m, p.gamma_m) - 1))
    assert acceptance("C3 reduction identities", worst < 1e-12,
                      f"1000 draws, max relative difference {worst:.1e}")


def test_c04_psd_temperature_closure(acceptance):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        gains = CoolingGains(10 ** rng.uniform(0, 5), rng.uniform(0, 1e3))
        worst = max(worst, abs(integrated_temperature(P, D, gains)
                               / final_temperature_combined(P, D, gains) - 1))
    assert acceptance("C4 PSD-temperature closure", worst < 1e-3,
                      f"100 draws, max relative difference {worst:.1e}")


def _c5_gain(p, d, g, seed):
    """Full-band x temperature and in-loop Welch deviation at one gain."""
    lw = p.gamma_m * (1 + g) / (2 * math.pi)
    rbw = 0.5 * lw
    seg = int(round(1.5 * FS / rbw))
    total = max(3000 * seg / 2 / FS, 180.0)
    n_runs = int(math.ceil(total / 150))
    rate = p.gamma_m * (1 + g)
    settle = settle_delay(1 + g, rate)
    sx, sy = [], []
    for k in range(n_runs):
        cfg = SimConfig(FS, total / n_runs + settle, seed=run_seed(seed, k))
        tr = simulate_membrane(p, d, FeedbackParams(g), 0.0, cfg).window(settle)
        sx.append(welch_psd(tr.x, FS, segment_len=seg))
        sy.append(welch_psd(tr.y, FS, segment_len=seg))
    sx, sy = average_spectra(sx), average_spectra(sy)
    t_ratio = band_temperature(sx, p) / final_temperature_feedback(p, d, g)
    sel = sy.select(max(p.f_m - 10 * lw, 3 * rbw), p.f_m + 10 * lw)
    model = expected_spectrum(lambda f: psd_in_loop(2 * np.pi * f, p, d, CoolingGains(g, 0.0)),
                              sel)
    return t_ratio, float(np.max(np.abs(sel.psd / model - 1)))


def test_c05_simulation_matches_theory(acceptance):
    p = MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)
    d = DetectionParams(1e-24)
    t0 = time.perf_counter()
    parts, ok = [], True
    for g in (0.0, 10.0, 100.0):
        t_ratio, dev = _c5_gain(p, d, g, seed=500 + int(g))
        ok &= abs(t_ratio - 1) < 0.05 and dev < 0.15
        parts.append(f"g={g:g}: T/T_model-1={t_ratio - 1:+.3f}, max PSD dev {dev:.3f}")
    runtime = time.perf_counter() - t0
    ok &= runtime < 300
    assert acceptance("C5 simulation vs theory", ok, "; ".join(parts) + f"; {runtime:.0f} s")


def test_c06_noise_squashing(acceptance):
    p = MembraneParams.from_hz(1e-12, 1e3, 0.01, 0.5)
    d = DetectionParams(1e-22)
    parts, ok = [], True
    for g in (1e3, 1e4):
        gains = CoolingGains(g, 0.0)
        w_m = np.array([p.omega_m])
        m = steady_measurement(p, d, g, 0.0, FS, seed=60 + int(math.log10(g)), n_segments=101)
        lw = p.gamma_m * (1 + g) / (2 * math.pi)
        near = np.abs(m["s_y"].freq - p.f_m) < 0.1 * lw
        n_bins = int(near.sum())
        sy = float(np.mean(m["s_y"].psd[near]))
        floor = noise_heating_floor(2 * np.pi * m["s_x"].freq[near], p, d, gains)
        x_over_floor = float(np.mean(m["s_x"].psd[near] / floor))
        sigma = 1 / math.sqrt(m["s_x"].n_averages * n_bins)
        band = 2 * np.pi * (p.f_m + lw * np.linspace(-10, 10, 201))
        analytic_above = bool(np.all(psd_out_of_loop(band, p, d, gains)
                                     >= noise_heating_floor(band, p, d, gains)))
        sy_model = float(psd_in_loop(w_m, p, d, gains)[0])
        ok &= (sy < d.s_xn and sy_model < d.s_xn and x_over_floor >= 1 - 3 * sigma
               and analytic_above)
        parts.append(f"g={g:g}: S_y/S_xn sim {sy / d.s_xn:.3f} model {sy_model / d.s_xn:.3f}, "
                     f"S_x/floor {x_over_floor:.3f}")
    assert acceptance("C6 noise squashing", ok, "; ".join(parts))


def test_c07_adiabatic_elimination(acceptance):
    p = MembraneParams.from_hz(1e-12, 1e3, 0.1, 0.5)
    gamma_a = 0.1 * p.omega_m
    g_n = gamma_a / 20
    unit = AtomCouplingParams(1.0, p.omega_m, gamma_a, 0.42, 160.0)
    atoms = AtomCouplingParams((g_n / coupling_rate_gN(unit, p)) ** 2, p.omega_m, gamma_a,
                               0.42, 160.0)
    expected = p.gamma_m + 4 * g_n ** 2 / gamma_a
    lw = expected / (2 * math.pi)
    spectra = []
    for seed in range(3):
        cfg = SimConfig(FS, 100.0, seed=seed, coupling_mode="two-oscillator")
        tr = simulate_coupled(p, atoms, cfg).window(5.0)
        spectra.append(zoom_psd(tr.x, FS, p.f_m, 20 * lw, 0.2 * lw))
    fit = estimate_linewidth(average_spectra(spectra))
    ratio = fit.derived["gamma"] / expected
    assert acceptance("C7 adiabatic elimination", fit.converged and abs(ratio - 1) < 0.1,
                      f"fitted/expected linewidth = {ratio:.3f}")


def _noiseless_roundtrips():
    """Relative error of every fitter on exact synthetic data."""
    errs = {}
    x = np.linspace(0, 2, 30)
    fit = least_squares(lambda x, a, k: a * np.exp(-k * x), x, 2 * np.exp(-1.3 * x),
                        dict(a=1.0, k=0.5))
    errs["least_squares"] = max(abs(fit["a"] / 2 - 1), abs(fit["k"] / 1.3 - 1))

    gamma_m = 2 * math.pi
    t = np.linspace(0, 8 / (gamma_m * 101), 200)
    temp = 0.5 / 101 * (1 + 100 * np.exp(-gamma_m * 101 * t))
    errs["cooldown"] = abs(fit_cooldown(ZeroSpanTrace(t, temp, 1e3, 10.0), gamma_m)["g"] / 100
                           - 1)

    g_v = 1e3
    lw = P.gamma_m * (1 + g_v) / (2 * math.pi)
    df = 0.2 * lw / 1.5
    f = P.f_m + df * np.arange(-80, 81)
    s = Spectrum(f, np.ones_like(f), 1, 1.5 * df)
    s = Spectrum(f, expected_spectrum(
        lambda ff: psd_in_loop(2 * np.pi * ff, P, D, CoolingGains(g_v, 0.0)), s), 1, 1.5 * df)
    errs["inloop_spectrum"] = abs(fit_inloop_spectrum(s, P, D)["g_v"] / g_v - 1)

    gains = np.geomspace(100, 1e5, 10)
    temps = [final_temperature_combined(P, D, CoolingGains(g, 0.0)) for g in gains]
    fit = fit_gain_temperature_curve(list(zip(gains, temps)), P)
    errs["gain_curve"] = abs(fit.derived["t_min"] / optimal_feedback_gain(P, D)[1] - 1)

    wm = P.omega_m
    for frac in (0.11, 0.24):
        w = wm * np.linspace(0.6, 1.4, 17)
        rate = [sympathetic_rate(1e3 * (wa / wm) ** 1.5, frac * wm, wa, wm) for wa in w]
        fit = fit_sympathetic_resonance(np.column_stack([w, rate]))
        errs[f"resonance_{frac}"] = abs(fit.derived["gamma_a_over_omega_m"] / frac - 1)

    f = np.linspace(900, 1100, 401)
    fit = estimate_linewidth(Spectrum(f, lorentzian(f, 1000.0, 8.0, 1e-20, 1e-24), 1, 0.5))
    errs["linewidth"] = abs(fit["fwhm"] / 8 - 1)

    t = np.linspace(0, 20, 100)
    fit = fit_atom_decay(t, 0.5 / (1 + 40 * np.exp(-t / 5.0)), 0.5)
    errs["atom_decay"] = max(abs(fit["g_s0"] / 40 - 1), abs(fit["tau"] / 5 - 1))
    return errs


def test_c08_fit_roundtrips(acceptance):
    errs = _noiseless_roundtrips()
    worst_name = max(errs, key=errs.get)
    ok = errs[worst_name] < 1e-4

    p = MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)
    d = DetectionParams(1e-24)
    m = steady_measurement(p, d, 100.0, 0.0, FS, seed=81, n_segments=101)
    g_err = abs(fit_inloop_spectrum(m["s_y"], p, d)["g_v"] / 100 - 1)
    ok &= g_err < 0.1

    wm = P.omega_m
    ga_errs = []
    for frac, seed in ((0.11, 5), (0.24, 6)):
        w = wm * np.linspace(0.6, 1.4, 17)
        rate = np.array([sympathetic_rate(1e3 * (wa / wm) ** 1.5, frac * wm, wa, wm) for wa in w])
        rate *= 1 + 0.03 * np.random.default_rng(seed).standard_normal(rate.size)
        fit = fit_sympathetic_resonance(np.column_stack([w, rate]))
        ga_errs.append(abs(fit.derived["gamma_a_over_omega_m"] / frac - 1))
    ok &= max(ga_errs) < 0.05
    assert acceptance("C8 fit round-trips", ok,
                      f"{len(errs)} noiseless fits, worst {worst_name} {errs[worst_name]:.1e}; "
                      f"simulated g_v error {g_err:.3f}; Gamma_a errors "
                      + ", ".join(f"{e:.3f}" for e in ga_errs))


def test_c09_projection_arithmetic(acceptance):
    rep = check_report(load_bundled("measured"))
    q_mass, finesse = rep["what_if"][0], rep["what_if"][1]
    ok = (q_mass["c_ratio"] == pytest.approx(100, rel=1e-12)
          and finesse["c_ratio"] == pytest.approx((850 / 160) ** 2, rel=1e-12)
          and q_mass["margin_ratio"] == pytest.approx(100, rel=1e-12)
          and not rep["ground_state_feasible"] and q_mass["feasible"])
    assert acceptance("C9 projection arithmetic", ok,
                      f"C x{q_mass['c_ratio']:.6g}, finesse C x{finesse['c_ratio']:.6g}, "
                      f"margin x{q_mass['margin_ratio']:.6g}, feasible "
                      f"{rep['ground_state_feasible']} -> {q_mass['feasible']}")


def test_c10_not_reproduced_statement(acceptance, capsys, monkeypatch, tmp_path):
    text = " ".join(NOT_REPRODUCED)
    ok = "203 uK" in text and "atom numbers" in text and "fit curves" in text
    # a stub pipeline keeps this check fast; the full figures run in test_cli
    monkeypatch.setitem(figures._PIPELINES, "1b", lambda seed: ({}, {}, [("stub", True, "")]))
    ok &= main(["reproduce", "--figure", "1b", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    ok &= all(f"not reproduced at desk scale: {item}" in out for item in NOT_REPRODUCED)
    meta = json.loads((tmp_path / "fig1b_metadata.json").read_text())
    ok &= meta["not_reproduced"] == list(NOT_REPRODUCED)
    assert acceptance("C10 not-reproduced statement", ok,
                      f"{len(NOT_REPRODUCED)} items listed in every figure's metadata "
                      "and reproduce output")
