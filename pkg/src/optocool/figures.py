"""Canned pipelines regenerating the data behind each figure as CSV.

Every pipeline writes its tables, a ``metadata.json`` that sorts quantities
into anchored (measured-device), derived and representative ones, and evaluates shape
assertions (name, passed, detail).

Simulations run on a desk-scale membrane (:func:`desk_membrane`): the cryogenic
membrane's mass, linewidth and bath temperature at a 10 kHz resonance, with the
detection floor scaled by (264/10)^2 so that the optimum gain and the minimum
temperature are unchanged.  Sympathetic-resonance runs use a 1 kHz, Q = 1e3
oscillator so that the atomic linewidths stay resolvable in short runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .fitting import (extract_final_temperature, fit_atom_decay, fit_cooldown,
                      fit_gain_temperature_curve, fit_inloop_spectrum, fit_sympathetic_resonance,
                      resonance_model)
from .io import dumps_json, provenance_line, write_table
from .model import (AtomCouplingParams, CoolingGains, DetectionParams, FeedbackParams,
                    MembraneParams, coupling_rate_gN, final_temperature_combined,
                    final_temperature_feedback, gamma_sym_from_temperature,
                    min_temp_sympathetic, optimal_feedback_gain, psd_in_loop,
                    sympathetic_rate, thermal_occupation)
from .pipeline import decay_gamma_schedule, measure_spectrum, run_seed, settle_delay
from .sim import SimConfig, cooldown_experiment, simulate_membrane, steady_state_temperature
from .spectral import ZeroSpanTrace, average_spectra, zero_span_trace

FIGURES = ("1b", "1c", "1d", "2b", "2c", "3b", "4a", "4b", "4c")

MEASURED_F_M = 264e3
MEASURED_S_XN = 7.4e-33
DESK_F_M = 10e3
DESK_SAMPLE_RATE = 250e3
# largest zero-span bandwidth as a fraction of f_m
_ZS_BW_CAP = 0.8

# quantities the desk-scale pipelines do not reproduce; shapes and identities stand in for them
NOT_REPRODUCED = (
    "measured 203 uK minimum temperature: set by the apparatus' fitted effective noise floor",
    "absolute atom numbers behind the sympathetic-cooling traces and resonance scans",
    "fit curves of the ensemble-integrated atom-membrane model",
)


def desk_membrane():
    return MembraneParams.from_hz(76e-12, DESK_F_M, 24.5e-3, 0.5)


def desk_detection():
    return DetectionParams(MEASURED_S_XN * (MEASURED_F_M / DESK_F_M) ** 2)


def measured_membrane():
    return MembraneParams.from_hz(76e-12, MEASURED_F_M, 24.5e-3, 0.5)


def scaled_membrane():
    """1 kHz, Q = 1e3 oscillator for the sympathetic-resonance runs."""
    return MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def steady_measurement(p, d, g_v, g_s, sample_rate, seed, rbw_fraction=0.2, n_segments=32,
                       max_run=10.0):
    """Steady-state in-loop and out-of-loop spectra at fixed gains.

    The record needed for ``n_segments`` Hann segments at ``rbw_fraction`` of
    the effective linewidth is split into runs of at most ``max_run`` seconds
    whose spectra are averaged.
    """
    rate = p.gamma_m * (1 + g_v + g_s)
    lw = rate / (2 * math.pi)
    record = 0.5 * (n_segments + 1) * 1.5 / (rbw_fraction * lw)
    settle = settle_delay(1 + g_v + g_s, rate)
    n_runs = max(int(math.ceil(record / max_run)), 1)
    per_run = record / n_runs
    mode = "effective-damping" if g_s > 0 else "off"
    cfg = SimConfig(sample_rate, settle + per_run, seed=seed, coupling_mode=mode)
    n_min = max(int(n_segments // n_runs) - 1, 2)
    s_y, s_x, temps = [], [], []
    for k in range(n_runs):
        traj = simulate_membrane(p, d, FeedbackParams(g_v), g_s * p.gamma_m,
                                 replace(cfg, seed=run_seed(seed, k)))
        w = traj.window(settle)
        temps.append(steady_state_temperature(w, p))
        s_y.append(measure_spectrum(w.y, sample_rate, p, lw, rbw_fraction, min_segments=n_min))
        s_x.append(measure_spectrum(w.x, sample_rate, p, lw, rbw_fraction, min_segments=n_min))
    return dict(s_y=average_spectra(s_y), s_x=average_spectra(s_x), t_mode=float(np.mean(temps)),
                runs=n_runs, record=record)


def averaged_zero_span(p, d, gain_schedule, gamma_schedule, t_start, duration, runs, seed,
                       bandwidth, time_resolution, sample_rate, series="y"):
    """Zero-span trace averaged over ``runs`` staged realisations."""
    mode = "effective-damping" if any(g > 0 for _, g in gamma_schedule) else "off"
    cfg = SimConfig(sample_rate, duration, seed=seed, coupling_mode=mode)
    temps, tr = [], None
    for k in range(runs):
        traj = cooldown_experiment(p, d, FeedbackParams(0.0), gamma_schedule,
                                   replace(cfg, seed=run_seed(seed, k)),
                                   gain_schedule=gain_schedule, t_start=t_start)
        tr = zero_span_trace(getattr(traj, series), sample_rate, p.f_m, bandwidth,
                             time_resolution, p, t0=traj.t0)
        temps.append(tr.temperature)
    return ZeroSpanTrace(tr.t, np.mean(temps, axis=0), tr.center_freq, tr.bandwidth,
                         dict(tr.metadata, runs=runs, series=series))


def zero_span_bandwidth(p, rate):
    """50 effective linewidths, capped below f_m."""
    return min(50 * rate / (2 * math.pi), _ZS_BW_CAP * p.f_m)


def _check(assertions, name, ok, detail):
    assertions.append((name, bool(ok), detail))


def _rel(a, b):
    return abs(a - b) / abs(b)


def _params_dict(p, d=None):
    out = dict(mass_kg=p.mass, f_m_hz=p.f_m, linewidth_hz=p.gamma_m / (2 * math.pi),
               t_bath_k=p.t_bath, q_m=p.q_m)
    if d is not None:
        out["s_xn_m2_per_hz"] = d.s_xn
    return out


# --------------------------------------------------------------------------
# figure pipelines; each returns (tables, metadata, assertions)
# tables: {file name: (header, rows, comments)}
# --------------------------------------------------------------------------

def fig_1b(seed):
    """Zero-span cooldowns after switching on feedback, ten-run averages, Eq-1 fits."""
    p, d = desk_membrane(), desk_detection()
    gains = (30.0, 100.0, 300.0)
    # ten-run averages (as measured) scatter by ~30 % in g; thirty keep the fit within 25 %
    runs = 30
    tables, assertions, fits = {}, [], {}
    for i, g in enumerate(gains):
        rate = p.gamma_m * (1 + g)
        bw = zero_span_bandwidth(p, rate)
        res = max(2.0 / bw, 0.1 / rate)
        t_start = -0.2 / rate
        tr = averaged_zero_span(p, d, [(0.0, g)], [], t_start, 8.0 / rate - t_start, runs,
                                run_seed(seed, i), bw, res, DESK_SAMPLE_RATE)
        fit = fit_cooldown(tr, p.gamma_m, t_step=0.0)
        fits[g] = fit
        model = np.where(tr.t >= 0, fit.params["t_bath"] / (1 + fit.params["g"])
                         * (1 + fit.params["g"] * np.exp(-p.gamma_m * (1 + fit.params["g"])
                                                         * np.clip(tr.t, 0, None))), np.nan)
        tables[f"fig1b_trace_g{int(g)}.csv"] = (
            ["t_s", "temperature_k", "fit_k"], list(zip(tr.t, tr.temperature, model)),
            [f"g_v={g!r}", f"runs={runs}", f"bandwidth_hz={bw!r}",
             f"time_resolution_s={tr.metadata['time_resolution']!r}"])
    rows = [(g, f.params["g"], f.stderr.get("g", math.nan), f.params["t_bath"],
             f.derived["t_final"], f.derived["tau"], 1 / (p.gamma_m * (1 + g))) for g, f in fits.items()]
    tables["fig1b_fits.csv"] = (["g_v_set", "g_fit", "g_fit_stderr", "t_bath_fit", "t_final_fit",
                                 "tau_fit_s", "tau_set_s"], rows, [])
    for g, f in fits.items():
        _check(assertions, f"1b fitted gain g_v={g:g}", _rel(f.params["g"], g) < 0.25,
               f"g_fit={f.params['g']:.4g} (ten-run average, 25% tolerance)")
    taus = [f.derived["tau"] for f in fits.values()]
    finals = [f.derived["t_final"] for f in fits.values()]
    _check(assertions, "1b cooldown faster at higher gain", all(np.diff(taus) < 0),
           f"tau={', '.join(f'{t:.3g}' for t in taus)} s")
    _check(assertions, "1b final temperature falls with gain", all(np.diff(finals) < 0),
           f"T_final={', '.join(f'{t:.3g}' for t in finals)} K")
    meta = dict(anchored=dict(runs_averaged=runs, linewidth_hz=24.5e-3, t_bath_k=0.5,
                                    mass_kg=76e-12),
                derived=dict(fits={str(g): f.to_dict() for g, f in fits.items()}),
                representative=dict(gains=list(gains), membrane=_params_dict(p, d),
                                    note="feedback switched on at t = 0; measured signal y"))
    return tables, meta, assertions


def _spectra_at(p, d, gains, g_s, seed, n_segments=32):
    out = []
    for i, g in enumerate(gains):
        m = steady_measurement(p, d, g, g_s, DESK_SAMPLE_RATE, run_seed(seed, i),
                               n_segments=n_segments)
        fit = fit_inloop_spectrum(m["s_y"], p, d, g_s=g_s)
        m.update(g_v=g, fit=fit, t_final=extract_final_temperature(fit, p, d, g_s))
        out.append(m)
    return out


def _spectrum_table(m, p, d, g_s):
    s = m["s_y"]
    f_lo, f_hi = m["fit"].derived["band"]
    sub = s.select(f_lo, f_hi)
    gains = CoolingGains(m["fit"].params["g_v"], g_s)
    model = psd_in_loop(sub.omega, p, d, gains)
    sx = m["s_x"]
    sx_band = np.interp(sub.freq, sx.freq, sx.psd)
    return (["freq_hz", "s_y_m2_per_hz", "fit_m2_per_hz", "s_x_m2_per_hz"],
            list(zip(sub.freq, sub.psd, model, sx_band)),
            [f"g_v_set={m['g_v']!r}", f"g_v_fit={m['fit'].params['g_v']!r}", f"g_s={g_s!r}",
             f"resolution_bw={s.resolution_bw!r}", f"n_averages={s.n_averages}",
             f"s_xn={d.s_xn!r}"])


def fig_1c(seed):
    """In-loop spectra at four gains with single-parameter fits; squashing at high gain."""
    p, d = desk_membrane(), desk_detection()
    gains = (100.0, 1e3, 1e4, 3e4)
    ms = _spectra_at(p, d, gains, 0.0, seed, n_segments=96)
    tables, assertions = {}, []
    g_sq, _ = optimal_feedback_gain(p, d)
    rows = []
    for m in ms:
        g = m["g_v"]
        tables[f"fig1c_spectrum_g{int(g)}.csv"] = _spectrum_table(m, p, d, 0.0)
        s = m["s_y"]
        lw = p.gamma_m * (1 + g) / (2 * math.pi)
        near = np.abs(s.freq - p.f_m) <= max(0.1 * lw, s.df)
        level = float(s.psd[near].mean())
        rows.append((g, m["fit"].params["g_v"], level, level / d.s_xn, m["t_final"], m["t_mode"]))
        _check(assertions, f"1c fitted gain g_v={g:g}", _rel(m["fit"].params["g_v"], g) < 0.10,
               f"g_fit={m['fit'].params['g_v']:.5g}")
        # within a factor 1.5 of the threshold the dip is too shallow to call
        if g > 1.5 * g_sq:
            _check(assertions, f"1c squashed below S_xn at g_v={g:g}", level < d.s_xn,
                   f"S_y(f_m)/S_xn={level / d.s_xn:.3g}")
        elif g < g_sq / 1.5:
            _check(assertions, f"1c peak above S_xn at g_v={g:g}", level > d.s_xn,
                   f"S_y(f_m)/S_xn={level / d.s_xn:.3g}")
    tables["fig1c_fits.csv"] = (["g_v_set", "g_v_fit", "s_y_at_f_m", "s_y_over_s_xn",
                                 "t_final_k", "t_mode_sim_k"], rows, [f"g_squash={g_sq!r}"])
    meta = dict(anchored=dict(s_xn_measured=MEASURED_S_XN, f_m_measured_hz=MEASURED_F_M),
                derived=dict(g_squash=g_sq, fits=[m["fit"].to_dict() for m in ms]),
                representative=dict(gains=list(gains), membrane=_params_dict(p, d)))
    return tables, meta, assertions


def fig_1d(seed):
    """Final temperature versus fitted gain with the Eq-2 fit, minimum and occupation."""
    p, d = desk_membrane(), desk_detection()
    gains = tuple(float(g) for g in np.geomspace(100, 5e4, 8))
    ms = _spectra_at(p, d, gains, 0.0, seed, n_segments=96)
    pts = [(m["fit"].params["g_v"], m["t_final"]) for m in ms]
    curve = fit_gain_temperature_curve(pts, p)
    g_opt, t_min = curve.derived["g_opt"], curve.derived["t_min"]
    # independent check: the same fit to the simulated out-of-loop temperatures
    curve_sim = fit_gain_temperature_curve([(m["fit"].params["g_v"], m["t_mode"]) for m in ms], p)
    g_an, t_an = optimal_feedback_gain(p, d)
    n_min = thermal_occupation(t_min, p.omega_m)
    n_measured_freq = thermal_occupation(t_min, measured_membrane().omega_m)
    n_anchor = thermal_occupation(203e-6, measured_membrane().omega_m)
    rows = [(m["g_v"], m["fit"].params["g_v"], m["t_final"], m["t_mode"],
             final_temperature_feedback(p, d, m["fit"].params["g_v"])) for m in ms]
    grid = np.geomspace(10, 1e6, 200)
    pf = replace(p, t_bath=curve.params["t_bath"])
    curve_rows = list(zip(grid, final_temperature_feedback(pf, DetectionParams(curve.params["s_xn_eff"]), grid),
                          final_temperature_feedback(p, d, grid)))
    summary = [("t_bath_fit", curve.params["t_bath"]), ("s_xn_eff_fit", curve.params["s_xn_eff"]),
               ("g_opt", g_opt), ("t_min_k", t_min), ("n_min", n_min),
               ("n_min_at_measured_frequency", n_measured_freq), ("g_opt_analytic", g_an),
               ("t_min_analytic_k", t_an), ("n_anchor_203uK", n_anchor),
               ("g_opt_from_sim_temperatures", curve_sim.derived["g_opt"]),
               ("t_min_from_sim_temperatures_k", curve_sim.derived["t_min"])]
    tables = {
        "fig1d_points.csv": (["g_v_set", "g_v_fit", "t_final_k", "t_mode_sim_k", "t_feedback_model_at_fit_k"],
                             rows, []),
        "fig1d_curve.csv": (["g_v", "t_fit_curve_k", "t_analytic_k"], curve_rows, []),
        "fig1d_minimum.csv": (["quantity", "value"], summary, []),
    }
    assertions = []
    temps = [r[2] for r in rows]
    k = int(np.argmin(temps))
    _check(assertions, "1d interior minimum", 0 < k < len(temps) - 1,
           f"lowest point at g_v={gains[k]:.3g}")
    _check(assertions, "1d fitted optimum gain", _rel(g_opt, g_an) < 0.3,
           f"g_opt={g_opt:.4g} (analytic {g_an:.4g})")
    _check(assertions, "1d fitted minimum temperature", _rel(t_min, t_an) < 0.15,
           f"T_min={t_min * 1e6:.4g} uK (analytic {t_an * 1e6:.4g} uK), n={n_min:.3g}")
    g_sim, t_sim = curve_sim.derived["g_opt"], curve_sim.derived["t_min"]
    _check(assertions, "1d optimum from simulated temperatures", _rel(g_sim, g_an) < 0.3
           and _rel(t_sim, t_an) < 0.15, f"g_opt={g_sim:.4g}, T_min={t_sim * 1e6:.4g} uK")
    _check(assertions, "1d anchor occupation", abs(n_anchor - 16.0) < 0.5,
           f"n(203 uK, 264 kHz)={n_anchor:.4g}")
    meta = dict(anchored=dict(t_min_measured_k=203e-6, n_measured=16,
                                    n_from_203uK=n_anchor, f_m_measured_hz=MEASURED_F_M),
                derived=dict(curve_fit=curve.to_dict(), curve_fit_sim=curve_sim.to_dict(), g_opt=g_opt, t_min=t_min, n_min=n_min,
                             n_min_at_measured_frequency=n_measured_freq, g_opt_analytic=g_an,
                             t_min_analytic=t_an),
                representative=dict(gains=list(gains), membrane=_params_dict(p, d),
                                    note="the measured 203 uK minimum reflects the apparatus' "
                                         "fitted noise floor and is not reproduced"))
    return tables, meta, assertions


def _sympathetic_trace(seed, g_s0, tau, t_end, runs, label):
    p, d = desk_membrane(), desk_detection()
    gamma0 = g_s0 * p.gamma_m
    gam = decay_gamma_schedule(gamma0, tau, 0.0, t_end, step=min(tau / 50, 0.05))
    rate = p.gamma_m * (1 + g_s0)
    bw = zero_span_bandwidth(p, rate)
    res = max(2.0 / bw, 0.05)
    # the decimation filter swallows about one second at the start of the record
    t_start = -2.0
    tr = averaged_zero_span(p, d, [(t_start, 0.0)], gam, t_start, t_end - t_start, runs, seed,
                            bw, res, DESK_SAMPLE_RATE)
    t_min_model = np.where(tr.t >= 0, min_temp_sympathetic(
        p.t_bath, gamma0 * np.exp(-np.clip(tr.t, 0, None) / tau), p.gamma_m), p.t_bath)
    return p, tr, t_min_model, dict(bandwidth_hz=bw, runs=runs, label=label)


def fig_2b(seed):
    """MOT-style sympathetic cooling: fast cooldown to a quasi-steady T_min, slow atom loss."""
    g_s0, tau, runs = 24.0, 30.0, 30
    p, tr, t_model, info = _sympathetic_trace(seed, g_s0, tau, 4.0, runs, "MOT")
    cool = fit_cooldown(ZeroSpanTrace(tr.t[tr.t < 2.0], tr.temperature[tr.t < 2.0],
                                      tr.center_freq, tr.bandwidth, tr.metadata), p.gamma_m)
    win = (tr.t > 0.8) & (tr.t < 4.0)
    plateau = tr.temperature[win].mean()
    before = tr.temperature[tr.t < 0].mean()
    t_min0 = float(t_model[win].mean())
    tables = {"fig2b_trace.csv": (["t_s", "temperature_k", "t_min_model_k"],
                                  list(zip(tr.t, tr.temperature, t_model)),
                                  [f"g_s0={g_s0!r}", f"atom_decay_tau_s={tau!r}", f"runs={runs}"])}
    assertions = []
    _check(assertions, "2b quasi-steady T_min", _rel(plateau, t_min0) < 0.2,
           f"plateau {plateau * 1e3:.3g} mK (Eq-4 {t_min0 * 1e3:.3g} mK)")
    _check(assertions, "2b cooldown follows the exponential law", _rel(cool.params["g"], g_s0) < 0.25,
           f"fitted g={cool.params['g']:.3g} (g_s0={g_s0:g})")
    _check(assertions, "2b cooling below bath", plateau < 0.2 * before,
           f"before {before:.3g} K, plateau {plateau:.3g} K")
    meta = dict(anchored=dict(t_min_target_k=20e-3,
                                    gamma_sym_for_20mK=gamma_sym_from_temperature(
                                        20e-3, 0.5, p.gamma_m)),
                derived=dict(cooldown_fit=cool.to_dict(), plateau_k=plateau, t_min_sympathetic_k=t_min0),
                representative=dict(g_s0=g_s0, atom_decay_tau_s=tau, membrane=_params_dict(p),
                                    **info))
    return tables, meta, assertions


def fig_2c(seed):
    """Molasses-style trace: T_min rises exponentially as atoms leave the lattice."""
    g_s0, tau, runs, t_end = 100.0, 5.0, 30, 8.0
    p, tr, t_model, info = _sympathetic_trace(seed, g_s0, tau, t_end, runs, "molasses")
    # quasi-static: the mode lags T_min by about 1 / (tau Gamma_m (1 + g_s)), < 6 % here
    sel = tr.t > 5.0 / (p.gamma_m * (1 + g_s0))
    fit = fit_atom_decay(tr.t[sel], tr.temperature[sel], p.t_bath)
    fit_curve = np.where(tr.t >= 0, p.t_bath / (1 + fit.params["g_s0"] * np.exp(
        -np.clip(tr.t, 0, None) / fit.params["tau"])), np.nan)
    tables = {"fig2c_trace.csv": (["t_s", "temperature_k", "t_min_model_k", "decay_fit_k"],
                                  list(zip(tr.t, tr.temperature, t_model, fit_curve)),
                                  [f"g_s0={g_s0!r}", f"atom_decay_tau_s={tau!r}", f"runs={runs}"])}
    assertions = []
    early = tr.temperature[(tr.t > 0.5) & (tr.t < 1.5)].mean()
    late = tr.temperature[(tr.t > 6.5) & (tr.t < 7.5)].mean()
    _check(assertions, "2c T_min rises with time", late > 1.5 * early,
           f"{early * 1e3:.3g} mK -> {late * 1e3:.3g} mK")
    _check(assertions, "2c exponential atom loss fits", _rel(fit.params["tau"], tau) < 0.25,
           f"tau_fit={fit.params['tau']:.3g} s (set {tau:g} s)")
    _check(assertions, "2c initial sympathetic gain", _rel(fit.params["g_s0"], g_s0) < 0.25,
           f"g_s0_fit={fit.params['g_s0']:.3g} (set {g_s0:g})")
    meta = dict(anchored=dict(shape="exponential rise of T_min from atom diffusion"),
                derived=dict(decay_fit=fit.to_dict()),
                representative=dict(g_s0=g_s0, atom_decay_tau_s=tau, membrane=_params_dict(p),
                                    **info))
    return tables, meta, assertions


def fig_3b(seed):
    """Gamma_sym versus omega_a for two laser-cooling rates, and versus atom number."""
    p = scaled_membrane()
    d = DetectionParams(1e-26)
    base = AtomCouplingParams(1.0, p.omega_m, 0.11 * p.omega_m, 0.42, 160.0)
    # atom number giving g_s = 20 on resonance at gamma_a = 0.11 omega_m
    g1 = coupling_rate_gN(base, p)
    n_atoms = 20 * p.gamma_m * base.gamma_a / (4 * g1**2)
    tables, assertions, fits = {}, [], {}
    ratios = (0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.25, 1.4)
    cfg = SimConfig(50e3, 20.0, seed=seed, feedback_mode="off", coupling_mode="effective-damping")
    k = 0
    for frac in (0.11, 0.24):
        a0 = replace(base, n_atoms=n_atoms, gamma_a=frac * p.omega_m)
        rows, pts = [], []
        for r in ratios:
            a = replace(a0, omega_a=r * p.omega_m)
            gam = sympathetic_rate(coupling_rate_gN(a, p), a.gamma_a, a.omega_a, p.omega_m)
            traj = simulate_membrane(p, d, FeedbackParams(0.0), gam,
                                     replace(cfg, seed=run_seed(seed, k)))
            k += 1
            settle = 5.0 / (p.gamma_m + gam)
            t_sim = steady_state_temperature(traj, p, settle)
            g_meas = gamma_sym_from_temperature(t_sim, p.t_bath, p.gamma_m)
            rows.append((r, a.omega_a, t_sim, g_meas, gam))
            pts.append((a.omega_a, g_meas))
        fit = fit_sympathetic_resonance(pts)
        fits[frac] = fit
        grid = np.linspace(0.8, 1.5, 141) * p.omega_m
        curve = resonance_model(grid, fit.params["g_n_scale"], fit.params["gamma_a"],
                                fit.params["omega_m"])
        tables[f"fig3b_resonance_gamma_a_{frac:.2f}.csv"] = (
            ["omega_a_over_omega_m", "omega_a_rad_s", "t_min_k", "gamma_sym_meas", "gamma_sym_model"],
            rows, [f"gamma_a_over_omega_m={frac!r}", f"n_atoms={n_atoms!r}"])
        tables[f"fig3b_resonance_fit_{frac:.2f}.csv"] = (
            ["omega_a_over_omega_m", "gamma_sym_fit"], list(zip(grid / p.omega_m, curve)), [])
        ga = fit.derived["gamma_a_over_omega_m"]
        _check(assertions, f"3b recovered gamma_a={frac:g} omega_m", _rel(ga, frac) < 0.10,
               f"fit {ga:.4g} omega_m")
        _check(assertions, f"3b peak above omega_m (gamma_a={frac:g})",
               fit.derived["peak_omega_a"] > fit.params["omega_m"],
               f"peak at {fit.derived['peak_omega_a'] / p.omega_m:.4f} omega_m")

    # linear dependence on N at omega_a = 2.1 omega_m, MOT cooling rate
    a_mot = replace(base, gamma_a=0.24 * p.omega_m, omega_a=2.1 * p.omega_m)
    per_atom = sympathetic_rate(coupling_rate_gN(replace(a_mot, n_atoms=1.0), p),
                                a_mot.gamma_a, a_mot.omega_a, p.omega_m)
    ns = np.linspace(0.2, 1.0, 6) * 8.0 * p.gamma_m / per_atom
    rows = []
    for n in ns:
        gam = per_atom * n
        traj = simulate_membrane(p, d, FeedbackParams(0.0), gam,
                                 replace(cfg, seed=run_seed(seed, k)))
        k += 1
        t_sim = steady_state_temperature(traj, p, 5.0 / (p.gamma_m + gam))
        g_meas = gamma_sym_from_temperature(t_sim, p.t_bath, p.gamma_m)
        rows.append((n, t_sim, g_meas, gam, g_meas / per_atom))
    gm = np.array([r[2] for r in rows])
    slope, intercept = np.polyfit(ns, gm, 1)
    pred = slope * ns + intercept
    r2 = 1 - np.sum((gm - pred) ** 2) / np.sum((gm - gm.mean()) ** 2)
    tables["fig3b_rate_vs_atoms.csv"] = (["n_atoms", "t_min_k", "gamma_sym_meas",
                                          "gamma_sym_model", "n_res"], rows,
                                         [f"omega_a_over_omega_m=2.1", "gamma_a_over_omega_m=0.24",
                                          f"slope={slope!r}", f"intercept={intercept!r}"])
    _check(assertions, "3b Gamma_sym linear in N", r2 > 0.99, f"R^2={r2:.5f}")
    _check(assertions, "3b line through origin", abs(intercept) < 0.05 * gm.max(),
           f"intercept {intercept:.3g} 1/s of max {gm.max():.3g}")
    meta = dict(anchored=dict(gamma_a_over_omega_m=[0.11, 0.24], omega_a_for_n_scan=2.1),
                derived=dict(fits={f"{k_:.2f}": f.to_dict() for k_, f in fits.items()},
                             n_scan_slope=slope, n_scan_intercept=intercept, n_scan_r2=r2),
                representative=dict(n_atoms_resonance=n_atoms, membrane=_params_dict(p, d),
                                    note="atom numbers are representative; the measured absolute "
                                         "atom numbers are not reproduced"))
    return tables, meta, assertions


G_S_COMBINED = 170.0


def fig_4a(seed):
    """Staged sequence: feedback from t = 0, sympathetic cooling added at t = 3 s."""
    p, d = desk_membrane(), desk_detection()
    gains = (0.0, 100.0, 1e3, 1e4)
    runs, t_start, t_on, t_end = 10, -0.5, 3.0, 6.0
    tables, assertions, rows = {}, [], []
    for i, g in enumerate(gains):
        rate = p.gamma_m * (1 + g + G_S_COMBINED)
        bw = zero_span_bandwidth(p, rate)
        res = 0.05
        # out-of-loop trace: the in-loop signal is squashed at high gain
        tr = averaged_zero_span(p, d, [(0.0, g)], [(t_on, G_S_COMBINED * p.gamma_m)], t_start,
                                t_end - t_start, runs, run_seed(seed, i), bw, res,
                                DESK_SAMPLE_RATE, series="x")
        t_fb = final_temperature_feedback(p, d, g)
        t_sf = final_temperature_combined(p, d, CoolingGains(g, G_S_COMBINED))
        s1 = tr.temperature[(tr.t > 1.5) & (tr.t < t_on)].mean()
        s2 = tr.temperature[(tr.t > 4.5) & (tr.t < t_end)].mean()
        rows.append((g, s1, t_fb, s2, t_sf, bw))
        tables[f"fig4a_trace_g{int(g)}.csv"] = (["t_s", "temperature_k"],
                                                list(zip(tr.t, tr.temperature)),
                                                [f"g_v={g!r}", f"g_s={G_S_COMBINED!r}",
                                                 f"runs={runs}", f"bandwidth_hz={bw!r}"])
        if g > 0:
            _check(assertions, f"4a feedback stage g_v={g:g}", _rel(s1, t_fb) < 0.25,
                   f"{s1:.3g} K (feedback formula {t_fb:.3g} K)")
        _check(assertions, f"4a combined stage g_v={g:g}", _rel(s2, t_sf) < 0.25,
               f"{s2:.3g} K (combined formula {t_sf:.3g} K)")
    tables["fig4a_stages.csv"] = (["g_v", "t_feedback_stage_k", "t_feedback_model_k", "t_combined_stage_k",
                                   "t_combined_model_k", "bandwidth_hz"], rows, [])
    meta = dict(anchored=dict(g_s=G_S_COMBINED, t_switch_s=t_on),
                derived=dict(stages=rows),
                representative=dict(gains=list(gains), runs=runs, membrane=_params_dict(p, d),
                                    note="traces use the true displacement x; zero-span "
                                         f"bandwidth capped at {_ZS_BW_CAP:g} f_m"))
    return tables, meta, assertions


def _combined_measurements(seed, gains):
    # g_v below g_s barely changes the line, so the fit needs long averages
    p, d = desk_membrane(), desk_detection()
    return p, d, _spectra_at(p, d, gains, G_S_COMBINED, seed, n_segments=192)


def fig_4b(seed):
    """In-loop spectra during combined cooling, fitted with g_v free and g_s = 170."""
    gains = (0.0, 100.0, 1e3, 1e4)
    p, d, ms = _combined_measurements(seed, gains)
    tables, assertions, rows = {}, [], []
    for m in ms:
        g = m["g_v"]
        tables[f"fig4b_spectrum_g{int(g)}.csv"] = _spectrum_table(m, p, d, G_S_COMBINED)
        g_fit = m["fit"].params["g_v"]
        rows.append((g, g_fit, m["t_final"], m["t_mode"]))
        if g > 0:
            _check(assertions, f"4b fitted gain g_v={g:g}", _rel(g_fit, g) < 0.10,
                   f"g_fit={g_fit:.5g}")
        else:
            _check(assertions, "4b no feedback detected at g_v=0", g_fit < 0.05 * (1 + G_S_COMBINED),
                   f"g_fit={g_fit:.3g}")
    g_s_est = gamma_sym_from_temperature(ms[0]["t_mode"], p.t_bath, p.gamma_m) / p.gamma_m
    _check(assertions, "4b g_s from the g_v=0 run", _rel(g_s_est, G_S_COMBINED) < 0.15,
           f"g_s={g_s_est:.4g}")
    tables["fig4b_fits.csv"] = (["g_v_set", "g_v_fit", "t_final_k", "t_mode_sim_k"], rows,
                                [f"g_s={G_S_COMBINED!r}", f"g_s_from_g0_run={g_s_est!r}"])
    meta = dict(anchored=dict(g_s=G_S_COMBINED),
                derived=dict(g_s_from_g0_run=g_s_est, fits=[m["fit"].to_dict() for m in ms]),
                representative=dict(gains=list(gains), membrane=_params_dict(p, d)))
    return tables, meta, assertions


def fig_4c(seed):
    """T_final versus fitted g_v for feedback alone and with g_s = 170."""
    gains = (30.0, 100.0, 300.0, 1e3, 3e3, 1e4, 3e4)
    p, d, ms = _combined_measurements(seed, gains)
    grid = np.geomspace(1, 1e5, 201)
    t_f = final_temperature_feedback(p, d, grid)
    t_sf = final_temperature_combined(p, d, CoolingGains(grid, G_S_COMBINED))
    pts = [(m["fit"].params["g_v"], m["t_final"]) for m in ms]
    curve = fit_gain_temperature_curve(pts, p, g_s=G_S_COMBINED)
    g_opt_f, t_min_f = optimal_feedback_gain(p, d)
    g_opt_sf, t_min_sf = optimal_feedback_gain(p, d, G_S_COMBINED)
    rows = [(m["g_v"], m["fit"].params["g_v"], m["t_final"], m["t_mode"]) for m in ms]
    tables = {
        "fig4c_curves.csv": (["g_v", "t_feedback_k", "t_combined_k", "ratio"],
                             list(zip(grid, t_f, t_sf, t_sf / t_f)), [f"g_s={G_S_COMBINED!r}"]),
        "fig4c_points.csv": (["g_v_set", "g_v_fit", "t_final_k", "t_mode_sim_k"], rows,
                             [f"g_s={G_S_COMBINED!r}"]),
    }
    assertions = []
    low = t_sf[grid == grid[grid <= 10][-1]][0] / t_f[grid == grid[grid <= 10][-1]][0]
    _check(assertions, "4c combined cooling dominates at low gain", low < 0.2,
           f"T_sf/T_f={low:.3g} at g_v~10")
    _check(assertions, "4c curves converge at high gain", t_sf[-1] / t_f[-1] > 0.99,
           f"T_sf/T_f={t_sf[-1] / t_f[-1]:.5f} at g_v=1e5")
    _check(assertions, "4c optimum differs by a few percent", _rel(t_min_sf, t_min_f) < 0.05,
           f"T_min {t_min_sf * 1e6:.4g} uK vs {t_min_f * 1e6:.4g} uK")
    worst = max(_rel(m["t_mode"], m["t_final"]) for m in ms)
    _check(assertions, "4c simulated temperatures follow the combined formula", worst < 0.15,
           f"max |T_sim/T_fit - 1|={worst:.3g}")
    meta = dict(anchored=dict(g_s=G_S_COMBINED,
                                    claim="combined optimum within a few percent of feedback alone"),
                derived=dict(curve_fit=curve.to_dict(), g_opt_feedback=g_opt_f,
                             t_min_feedback=t_min_f, g_opt_combined=g_opt_sf,
                             t_min_combined=t_min_sf),
                representative=dict(gains=list(gains), membrane=_params_dict(p, d)))
    return tables, meta, assertions


_PIPELINES = {"1b": fig_1b, "1c": fig_1c, "1d": fig_1d, "2b": fig_2b, "2c": fig_2c,
              "3b": fig_3b, "4a": fig_4a, "4b": fig_4b, "4c": fig_4c}
_DEFAULT_SEEDS = {fid: 1000 + 10 * i for i, fid in enumerate(FIGURES)}


def reproduce(figure_id, out_dir, seed=None):
    """Run one figure pipeline and write its CSV tables and ``metadata.json``.

    Returns
    -------
    dict
        ``files``, ``assertions`` (name, passed, detail) and ``metadata``.
    """
    if figure_id not in _PIPELINES:
        raise ValueError(f"unknown figure {figure_id!r}")
    seed = _DEFAULT_SEEDS[figure_id] if seed is None else int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    tables, meta, assertions = _PIPELINES[figure_id](seed)
    prov = provenance_line()
    files = []
    for name, (header, rows, comments) in tables.items():
        write_table(out / name, header, rows, comments=[f"figure={figure_id}", f"seed={seed}",
                                                        *comments], provenance=prov)
        files.append(name)
    meta = dict(figure=figure_id, version=__version__, seed=seed,
                runtime_s=time.perf_counter() - t0, files=files,
                not_reproduced=list(NOT_REPRODUCED),
                assertions=[dict(name=n, passed=ok, detail=det) for n, ok, det in assertions],
                **meta)
    (out / f"fig{figure_id}_metadata.json").write_text(dumps_json(meta) + "\n")
    return dict(files=files, assertions=assertions, metadata=meta)
