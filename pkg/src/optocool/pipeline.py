"""Scenario-driven runs: simulate, estimate spectra and traces, fit.

Shared by the command line and the figure pipelines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fitting import (FitResult, extract_final_temperature, fit_cooldown, fit_inloop_spectrum)
from .model import (MembraneParams, gamma_sym_from_temperature, sympathetic_rate_from_params,
                    thermal_occupation)
from .scenario import Scenario
from .sim import (Trajectory, cooldown_experiment, simulate_coupled, simulate_membrane,
                  steady_state_temperature)
from .spectral import (Spectrum, ZeroSpanTrace, average_spectra, band_temperature, welch_psd,
                       zero_span_trace, zoom_psd)

# piecewise-constant steps per decay time when an atom decay model drives the run
_DECAY_STEPS_PER_TAU = 50


def run_seed(base, k):
    """Seed of run ``k`` of an ensemble; run 0 keeps the scenario seed."""
    if k == 0:
        return int(base)
    return int(np.random.SeedSequence([int(base), int(k)]).generate_state(1)[0])


def sympathetic_gain(sc: Scenario):
    """g_s = Gamma_sym / Gamma_m implied by the atoms block at its nominal atom number."""
    if sc.atoms is None:
        return 0.0
    return sympathetic_rate_from_params(sc.atoms, sc.membrane) / sc.membrane.gamma_m


def _gamma_schedule(sc: Scenario):
    """(gamma_sym schedule, gain schedule) for staged runs, or None for a constant run."""
    p = sc.membrane
    if sc.schedule:
        gam = [(t, g_s * p.gamma_m) for t, _, g_s in sc.schedule]
        gain = [(t, g_v) for t, g_v, _ in sc.schedule]
        return gam, gain
    if sc.decay is not None and sc.atoms is not None and sc.sim.coupling_mode == "effective-damping":
        g0 = sympathetic_rate_from_params(replace(sc.atoms, n_atoms=sc.decay.n0), p)
        gam = decay_gamma_schedule(g0, sc.decay.tau, sc.t_start, sc.t_start + sc.sim.duration)
        return gam, [(sc.t_start, sc.feedback.gain_v)]
    return None


def decay_gamma_schedule(gamma0, tau, t_on, t_end, step=None):
    """Piecewise-constant Gamma_sym(t) = gamma0 exp(-(t - t_on) / tau) from ``t_on``.

    Each step holds the rate at its midpoint; the default step is the smaller
    of tau / 50 and 1 % of the interval.
    """
    if step is None:
        step = min(tau / _DECAY_STEPS_PER_TAU, 0.01 * (t_end - t_on))
    n = int(math.ceil((t_end - t_on) / step))
    ts = t_on + step * np.arange(n)
    return [(float(t), float(gamma0 * math.exp(-(t - t_on + step / 2) / tau))) for t in ts]


def final_gains(sc: Scenario):
    """(g_v, g_s) of the last stage of the run."""
    g_v = sc.feedback.gain_v
    g_s = sympathetic_gain(sc) if sc.sim.coupling_mode != "off" else 0.0
    if sc.schedule:
        _, g_v, g_s = sc.schedule[-1]
    elif sc.decay is not None and sc.sim.coupling_mode == "effective-damping":
        gam, _ = _gamma_schedule(sc)
        g_s = gam[-1][1] / sc.membrane.gamma_m
    if sc.sim.feedback_mode == "off":
        g_v = 0.0
    return float(g_v), float(g_s)


def last_breakpoint(sc: Scenario):
    if sc.schedule:
        return max(sc.t_start, sc.schedule[-1][0])
    return sc.t_start


def run_scenario(sc: Scenario, seed=None) -> Trajectory:
    """Integrate one realisation of ``sc`` (optionally with another seed)."""
    cfg = sc.sim if seed is None else replace(sc.sim, seed=int(seed))
    p, d, fb = sc.membrane, sc.detection, sc.feedback
    if cfg.coupling_mode == "two-oscillator":
        return simulate_coupled(p, sc.atoms, cfg, d, fb)
    sched = _gamma_schedule(sc)
    if sched is not None:
        gam, gain = sched
        return cooldown_experiment(p, d, fb, gam, cfg, gain_schedule=gain, t_start=sc.t_start)
    gamma_sym = sympathetic_gain(sc) * p.gamma_m if cfg.coupling_mode == "effective-damping" else 0.0
    return simulate_membrane(p, d, fb, gamma_sym, cfg)


def measure_spectrum(series, sample_rate, p: MembraneParams, linewidth_hz, rbw_fraction=0.2,
                     n_linewidths=10.0, min_segments=16):
    """PSD around f_m resolved to ``rbw_fraction`` of ``linewidth_hz`` where the record allows.

    A zoom estimate is used when the band of ``n_linewidths`` on either side is
    narrow compared with f_m, a full-rate Welch estimate otherwise.
    """
    n = len(series)
    record = n / sample_rate
    # Hann segments span 1.5 / rbw; keep at least min_segments half-overlapping ones
    rbw = max(rbw_fraction * linewidth_hz, 1.5 * (min_segments + 1) / (2 * record))
    span = 2.2 * n_linewidths * linewidth_hz
    if span < p.f_m and span < sample_rate / 16:
        return zoom_psd(series, sample_rate, p.f_m, span, rbw)
    seg = min(int(math.ceil(1.5 * sample_rate / rbw)), n)
    return welch_psd(series, sample_rate, segment_len=seg)


@dataclass
class Analysis:
    """Outcome of :func:`analyze`."""

    summary: dict
    spectrum: Spectrum | None = None
    spectrum_x: Spectrum | None = None
    trace: ZeroSpanTrace | None = None
    inloop_fit: FitResult | None = None
    cooldown_fit: FitResult | None = None
    extras: dict = field(default_factory=dict)


def settle_delay(total_gain, rate):
    """Time for a bath-temperature excess to fall below 1 % of T_bath / total_gain."""
    return (math.log(max(total_gain, 1.0)) + 5.0) / rate


def settle_time(sc: Scenario):
    """Start of the steady-state window after the last change of the gains."""
    if "t_settle" in sc.analysis:
        return sc.analysis["t_settle"]
    g_v, g_s = final_gains(sc)
    rate = sc.membrane.gamma_m * (1 + g_v + g_s)
    return last_breakpoint(sc) + settle_delay(1 + g_v + g_s, rate)


def _cooldown_step(sc: Scenario):
    """(t_step, t_next, expected g) of the first schedule step after t_start, if any."""
    if not sc.schedule:
        return None
    pts = [b for b in sc.schedule if b[0] > sc.t_start]
    if not pts:
        return None
    t_step, g_v, g_s = pts[0]
    if sc.sim.feedback_mode == "off":
        g_v = 0.0
    t_next = pts[1][0] if len(pts) > 1 else math.inf
    return t_step, t_next, g_v + g_s


def zero_span_for(sc: Scenario, traj: Trajectory):
    bw = sc.analysis["zero_span_bandwidth"]
    res = sc.analysis.get("time_resolution", max(2.0 / bw, 0.01 * sc.sim.duration))
    return zero_span_trace(traj.y, traj.sample_rate, sc.membrane.f_m, bw, res, sc.membrane,
                           t0=traj.t0)


def analyze(sc: Scenario, trajs) -> Analysis:
    """Steady-state temperatures, in-loop fit and (optional) zero-span cooldown fit.

    ``trajs`` are independent realisations of the same scenario; spectra and
    zero-span traces are averaged over them.
    """
    trajs = list(trajs)
    p, d = sc.membrane, sc.detection
    g_v, g_s = final_gains(sc)
    lw = p.gamma_m * (1 + g_v + g_s) / (2 * math.pi)
    t_settle = settle_time(sc)
    summary = dict(runs=len(trajs), g_v_set=g_v, g_s=g_s, t_settle=t_settle,
                   t_bath=p.t_bath, f_m=p.f_m)
    windows = [tr.window(t_settle) for tr in trajs]
    if len(windows[0]) < 64:
        raise ValueError(f"steady-state window after t={t_settle:g} s is too short")
    summary["t_mode"] = float(np.mean([steady_state_temperature(w, p) for w in windows]))
    frac = sc.analysis.get("rbw_fraction", 0.2)
    # the segment budget is shared by the ensemble
    n_min = max(2, math.ceil(16 / len(windows)))
    s_y = average_spectra(measure_spectrum(w.y, w.sample_rate, p, lw, frac, min_segments=n_min)
                          for w in windows)
    s_x = average_spectra(measure_spectrum(w.x, w.sample_rate, p, lw, frac, min_segments=n_min)
                          for w in windows)
    half = min(10 * lw, p.f_m - s_x.freq[0], s_x.freq[-1] - p.f_m)
    summary["t_band"] = band_temperature(s_x, p, p.f_m - half, p.f_m + half)
    out = Analysis(summary, spectrum=s_y, spectrum_x=s_x)

    if sc.sim.feedback_mode == "velocity" and sc.sim.coupling_mode != "two-oscillator":
        fit = fit_inloop_spectrum(s_y, p, d, g_s=g_s)
        out.inloop_fit = fit
        summary["g_v_fit"] = fit.params["g_v"]
        summary["fit_converged"] = fit.converged
        summary["fit_flags"] = list(fit.flags)
        if fit.converged:
            summary["t_final"] = extract_final_temperature(fit, p, d, g_s)
    if "t_final" not in summary:
        summary["t_final"] = summary["t_band"]
    summary["n_mean"] = thermal_occupation(summary["t_final"], p.omega_m)
    if g_v == 0 and sc.sim.coupling_mode != "off":
        summary["gamma_sym_from_t"] = gamma_sym_from_temperature(summary["t_mode"], p.t_bath,
                                                                 p.gamma_m)

    if "zero_span_bandwidth" in sc.analysis:
        traces = [zero_span_for(sc, tr) for tr in trajs]
        mean = np.mean([tr.temperature for tr in traces], axis=0)
        tr0 = traces[0]
        out.trace = ZeroSpanTrace(tr0.t, mean, tr0.center_freq, tr0.bandwidth,
                                  dict(tr0.metadata, runs=len(traces)))
        step = _cooldown_step(sc)
        if step is not None:
            t_step, t_next, g_expected = step
            keep = out.trace.t < t_next
            sub = ZeroSpanTrace(out.trace.t[keep], out.trace.temperature[keep],
                                tr0.center_freq, tr0.bandwidth, dict(out.trace.metadata))
            cf = fit_cooldown(sub, p.gamma_m, t_step=t_step)
            out.cooldown_fit = cf
            summary["cooldown_g_fit"] = cf.params["g"]
            summary["cooldown_g_expected"] = g_expected
            summary["cooldown_t_bath_fit"] = cf.params["t_bath"]
    return out


def run_and_analyze(sc: Scenario, seed=None):
    """All ``analysis.runs`` realisations of ``sc`` plus their analysis.

    Returns the first trajectory and the :class:`Analysis`.
    """
    base = sc.sim.seed if seed is None else int(seed)
    runs = int(sc.analysis.get("runs", 1))
    trajs = [run_scenario(sc, run_seed(base, k)) for k in range(runs)]
    return trajs[0], analyze(sc, trajs)


SWEEP_COLUMNS = ["value", "g_v_fit", "t_final", "n_mean", "t_mode", "t_band", "gamma_sym"]


def sweep_point(sc: Scenario, key, value, seed):
    """One sweep row: set ``key`` to ``value``, simulate and analyse with ``seed``."""
    point = sc.with_value(key, value)
    _, res = run_and_analyze(point, seed)
    s = res.summary
    return [float(value), s.get("g_v_fit", math.nan), s["t_final"], s["n_mean"], s["t_mode"],
            s["t_band"], s.get("gamma_sym_from_t", math.nan)]
