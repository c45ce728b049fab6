"""Nonlinear least squares and the analysis chain built on it.

:func:`least_squares` is a bounded Levenberg-Marquardt solver with a numeric
Jacobian.  The domain fitters wrap it with model-specific initial guesses and
weighting: spectra are fitted in log density, time traces in linear
temperature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .model import (CoolingGains, DetectionParams, MembraneParams, _noise_heating_coefficient,
                    final_temperature_combined, optimal_feedback_gain, psd_in_loop,
                    susceptibility_mech, thermal_force_psd)
from .spectral import Spectrum, ZeroSpanTrace, expected_spectrum

GAIN_BOUNDS = (0.0, 1e7)


@dataclass
class FitResult:
    """Outcome of a least-squares fit.

    Attributes
    ----------
    params : dict
        Best-fit values by name.
    stderr : dict
        One-sigma uncertainties from the covariance; empty when the Jacobian
        is rank deficient.
    residual_norm : float
        Euclidean norm of the weighted residual vector.
    converged : bool
        True when the scaled gradient fell below ``gtol`` or the residual vanished.
    n_iter : int
        Number of Jacobian evaluations.
    flags : list of str
        Diagnostics such as ``"max_iter"``, ``"rank_deficient"``, ``"at_bound:g"``.
    derived : dict
        Quantities computed from the parameters (temperatures, optima, ...).
    cost_history : list of float
        Half squared residual norm after each accepted step, starting at init.
    optimality : float
        Largest cosine between a Jacobian column and the residual at the end.
    """

    params: dict
    stderr: dict
    residual_norm: float
    converged: bool
    n_iter: int
    flags: list = field(default_factory=list)
    derived: dict = field(default_factory=dict)
    cost_history: list = field(default_factory=list)
    optimality: float = math.nan

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self):
        return dict(params=dict(self.params), stderr=dict(self.stderr),
                    residual_norm=self.residual_norm, converged=self.converged,
                    n_iter=self.n_iter, flags=list(self.flags), derived=dict(self.derived))


# --------------------------------------------------------------------------
# generic solver
# --------------------------------------------------------------------------

def _residual_fn(model, x, y, sigma, space, names, scale):
    if space == "log":
        if np.any(y <= 0):
            raise ValueError("log-space fit needs positive data")
        target = np.log(y)
    elif space == "linear":
        target = y
    else:
        raise ValueError("space must be 'linear' or 'log'")
    w = 1.0 / sigma if sigma is not None else None

    def resid(u):
        pred = np.asarray(model(x, **dict(zip(names, u * scale))), dtype=float)
        if space == "log":
            with np.errstate(divide="ignore", invalid="ignore"):
                pred = np.log(pred)
        r = pred - target
        return r * w if w is not None else r

    t = target * w if w is not None else target
    return resid, float(np.linalg.norm(t))


def _jacobian(resid, u, r0, lo, hi):
    n = len(u)
    jac = np.empty((len(r0), n))
    for j in range(n):
        h = 6e-6 * max(abs(u[j]), 1.0)
        up, dn = u.copy(), u.copy()
        if u[j] + h > hi[j]:
            dn[j] -= h
            jac[:, j] = (r0 - resid(dn)) / h
        elif u[j] - h < lo[j]:
            up[j] += h
            jac[:, j] = (resid(up) - r0) / h
        else:
            up[j] += h
            dn[j] -= h
            jac[:, j] = (resid(up) - resid(dn)) / (2 * h)
    return jac


def _projected_gradient(g, u, lo, hi):
    g = g.copy()
    # a component that would push through an active bound is not a descent option
    g[(u <= lo) & (g > 0)] = 0.0
    g[(u >= hi) & (g < 0)] = 0.0
    return g


def _optimality(jac, g, rnorm):
    cols = np.linalg.norm(jac, axis=0)
    if rnorm == 0:
        return 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(cols > 0, np.abs(g) / (cols * rnorm), 0.0)
    return float(np.max(c))


def least_squares(model, x, y, init, bounds=None, sigma=None, space="linear",
                  max_iter=200, gtol=1e-6, xtol=1e-14, absolute_sigma=False):
    """Bounded Levenberg-Marquardt fit of ``model(x, **params)`` to ``y``.

    Parameters
    ----------
    model : callable
        ``model(x, **params) -> array`` of the same shape as ``y``.
    x, y : array_like
        Data points.
    init : dict
        Starting values; its key order fixes the parameter order.
    bounds : dict, optional
        ``name -> (lo, hi)``; missing names are unbounded.
    sigma : array_like, optional
        Per-point uncertainties (in residual space) used as weights ``1/sigma``.
    space : {"linear", "log"}
        Residuals ``model - y`` or ``log(model) - log(y)``.
    max_iter : int
        Cap on Jacobian evaluations.
    gtol : float
        Convergence threshold on the largest column/residual cosine.
    absolute_sigma : bool
        Use ``sigma`` as absolute; otherwise the covariance is rescaled by the
        reduced chi-square.

    Returns
    -------
    FitResult
        On failure the best point seen is returned with ``converged=False``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    names = list(init)
    p0 = np.array([float(init[k]) for k in names])
    if len(y) <= len(names):
        raise ValueError(f"need more points ({len(y)}) than parameters ({len(names)})")
    bounds = bounds or {}
    lo_p = np.array([bounds.get(k, (-np.inf, np.inf))[0] for k in names], dtype=float)
    hi_p = np.array([bounds.get(k, (-np.inf, np.inf))[1] for k in names], dtype=float)
    if np.any(p0 < lo_p) or np.any(p0 > hi_p):
        raise ValueError("initial values must lie within bounds")
    sig = None if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)

    scale = np.where(p0 != 0, np.abs(p0), 1.0)
    lo, hi = lo_p / scale, hi_p / scale
    resid, target_norm = _residual_fn(model, x, y, sig, space, names, scale)

    u = p0 / scale
    r = resid(u)
    if not np.all(np.isfinite(r)):
        raise ValueError("model is not finite at the initial point")
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = 1e-3
    flags = []
    tiny = 1e-12 * max(target_norm, 1e-300)
    n_iter = 0
    converged = False
    opt = math.nan
    while True:
        jac = _jacobian(resid, u, r, lo, hi)
        g = _projected_gradient(jac.T @ r, u, lo, hi)
        rnorm = math.sqrt(2 * cost)
        opt = _optimality(jac, g, rnorm)
        if rnorm <= tiny or opt < gtol:
            converged = True
            break
        if n_iter >= max_iter:
            flags.append("max_iter")
            break
        n_iter += 1
        grad = jac.T @ r
        # parameters held at a bound by the gradient are frozen for this step
        free = ~(((u <= lo) & (grad > 0)) | ((u >= hi) & (grad < 0)))
        jf = jac[:, free]
        a = jf.T @ jf
        diag = np.maximum(np.diag(a), 1e-12 * max(np.max(np.diag(a)), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                step_f = np.linalg.solve(a + lam * np.diag(diag), -grad[free])
            except np.linalg.LinAlgError:
                lam *= 4
                continue
            step = np.zeros_like(u)
            step[free] = step_f
            u_new = np.clip(u + step, lo, hi)
            r_new = resid(u_new)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam *= 4
        if not accepted:
            flags.append("stalled")
            break
        moved = np.linalg.norm(u_new - u)
        u, r, cost = u_new, r_new, cost_new
        history.append(cost)
        lam = max(lam / 3, 1e-12)
        if moved <= xtol * (np.linalg.norm(u) + xtol):
            # no further progress possible at this precision; final check above decides
            jac = _jacobian(resid, u, r, lo, hi)
            g = _projected_gradient(jac.T @ r, u, lo, hi)
            rnorm = math.sqrt(2 * cost)
            opt = _optimality(jac, g, rnorm)
            converged = rnorm <= tiny or opt < gtol
            if not converged:
                flags.append("step_tolerance")
            break

    params = dict(zip(names, (u * scale).tolist()))
    jac_p = jac / scale  # d r / d p
    stderr = {}
    ncols = np.linalg.norm(jac_p, axis=0)
    if np.all(ncols > 0):
        sv = np.linalg.svd(jac_p / ncols, compute_uv=False)
        full_rank = sv[-1] > 1e-10 * sv[0]
    else:
        full_rank = False
    if full_rank:
        dof = len(y) - len(names)
        s2 = 1.0 if (absolute_sigma and sig is not None) else 2 * cost / dof
        cov = np.linalg.inv(jac_p.T @ jac_p) * s2
        stderr = dict(zip(names, np.sqrt(np.clip(np.diag(cov), 0, None)).tolist()))
    else:
        flags.append("rank_deficient")
    for k, v, l_, h_ in zip(names, u * scale, lo_p, hi_p):
        if v <= l_ or v >= h_:
            flags.append(f"at_bound:{k}")
    return FitResult(params, stderr, math.sqrt(2 * cost), converged, n_iter, flags,
                     {}, history, opt)


# --------------------------------------------------------------------------
# cooldown traces
# --------------------------------------------------------------------------

def _bin_average_factor(k, width):
    # mean of exp(-k t) over a bin of the given width, relative to its centre value
    a = 0.5 * k * width
    return np.where(a > 1e-8, np.sinh(np.minimum(a, 700)) / np.maximum(a, 1e-300), 1.0)


def fit_cooldown(trace: ZeroSpanTrace, gamma_m, t_step=0.0, init=None):
    """Fit ``T(t) = T_b/(1+g) (1 + g exp(-Gamma_m (1+g)(t - t_step)))`` for (g, t_bath).

    Bins of a zero-span trace are time averages, so the exponential is averaged
    over the bin width stored in the trace metadata (if any).  Bins before
    ``t_step`` are ignored.

    Returns
    -------
    FitResult
        ``params = {g, t_bath}``; ``derived`` holds ``t_final`` and ``tau``.
        Flagged ``"short_trace"`` when the data cover fewer than three time
        constants of the fitted decay, ``"degenerate"`` when g is not resolved
        or is indistinguishable from zero.
    """
    keep = trace.t >= t_step
    t = trace.t[keep] - t_step
    temp = trace.temperature[keep]
    if len(t) < 4:
        raise ValueError("trace too short: need at least 4 bins after the step")
    width = float(trace.metadata.get("time_resolution", 0.0) or 0.0)
    if init is None:
        n_tail = max(len(temp) // 5, 1)
        t_inf = max(float(np.mean(temp[-n_tail:])), 1e-300)
        t_b0 = max(float(temp[0]), t_inf)
        init = dict(g=max(t_b0 / t_inf - 1.0, 0.1), t_bath=t_b0)

    def model(tt, g, t_bath):
        k = gamma_m * (1 + g)
        return t_bath / (1 + g) * (1 + g * np.exp(-k * tt) * _bin_average_factor(k, width))

    init = dict(g=min(max(init["g"], 0.0), GAIN_BOUNDS[1]), t_bath=init["t_bath"])
    fit = least_squares(model, t, temp, init,
                        bounds=dict(g=GAIN_BOUNDS, t_bath=(0.0, np.inf)))
    g = fit.params["g"]
    fit.derived = dict(t_final=fit.params["t_bath"] / (1 + g), tau=1 / (gamma_m * (1 + g)))
    if t[-1] * gamma_m * (1 + g) < 3:
        fit.flags.append("short_trace")
    # a flat trace has no decay to resolve, whatever the stderr says
    if "g" not in fit.stderr or fit.stderr["g"] >= abs(g) or abs(g) < 1e-6:
        fit.flags.append("degenerate")
    return fit


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

def _band(s, f_lo, f_hi):
    keep = (s.freq >= f_lo) & (s.freq <= f_hi) & (s.psd > 0)
    if keep.sum() < 4:
        raise ValueError("fewer than 4 positive bins in the fit band")
    return s.freq[keep], s.psd[keep]


def _initial_gain_from_peak(s: Spectrum, p: MembraneParams, d: DetectionParams, g_s):
    # S_y(omega_m) = [S_F |chi_m(omega_m)|^2 + S_xn (1+g_s)^2] / (1+g_v+g_s)^2
    near = np.abs(s.freq - p.f_m) <= max(s.resolution_bw, s.df)
    value = float(np.median(s.psd[near])) if near.any() else float(np.interp(p.f_m, s.freq, s.psd))
    a = thermal_force_psd(p) * abs(susceptibility_mech(p.omega_m, p)) ** 2
    g0 = math.sqrt((a + d.s_xn * (1 + g_s) ** 2) / max(value, 1e-300)) - 1 - g_s
    return float(np.clip(g0, 0.0, GAIN_BOUNDS[1]))


def fit_inloop_spectrum(s: Spectrum, p: MembraneParams, d: DetectionParams, g_s=0.0,
                        init=None, band=None, n_linewidths=10.0, window_average=True):
    """Fit the measured in-loop PSD with g_v as the only free parameter.

    Parameters
    ----------
    band : (f_lo, f_hi), optional
        Fit window in Hz.  By default ``f_m +- n_linewidths`` effective
        linewidths, recentred once on the first fit.
    init : float, optional
        Starting g_v; by default inferred from the level at f_m.
    window_average : bool
        Compare the data with the model averaged over each bin's Hann window
        rather than sampled at bin centres.  Needed once the squashed dip at
        f_m is comparable to a bin.

    Returns
    -------
    FitResult
        ``params = {g_v}``.  Flagged ``"narrow_band"`` if the window is narrower
        than ten effective linewidths and ``"under_resolved"`` when bins are
        wider than a third of the effective linewidth.
    """
    g0 = _initial_gain_from_peak(s, p, d, g_s) if init is None else float(init)

    def analytic(f, g_v):
        return psd_in_loop(2 * np.pi * f, p, d, CoolingGains(g_v, g_s))

    def window(g):
        half = n_linewidths * p.gamma_m * (1 + g + g_s) / (2 * np.pi)
        return max(p.f_m - half, s.freq[0]), min(p.f_m + half, s.freq[-1])

    fit = None
    for _ in range(2 if band is None else 1):
        f_lo, f_hi = band if band is not None else window(g0)
        sub = s.select(f_lo, f_hi)
        if window_average:
            def model(f, g_v, sub=sub):
                return expected_spectrum(lambda ff: analytic(ff, g_v), sub)
        else:
            model = analytic
        f, psd = _band(sub, f_lo, f_hi)
        if len(f) != len(sub.freq):
            raise ValueError("fit band contains empty bins")
        fit = least_squares(model, f, psd, dict(g_v=g0), bounds=dict(g_v=GAIN_BOUNDS),
                            space="log")
        g0 = fit.params["g_v"]
    lw = p.gamma_m * (1 + g0 + g_s) / (2 * np.pi)
    if (f_hi - f_lo) < 10 * lw:
        fit.flags.append("narrow_band")
    if s.resolution_bw > lw / 3:
        fit.flags.append("under_resolved")
    fit.derived = dict(g_s=g_s, band=(f_lo, f_hi), linewidth_hz=lw)
    return fit


def extract_final_temperature(fit: FitResult, p: MembraneParams, d: DetectionParams, g_s=0.0):
    """Out-of-loop temperature implied by an in-loop fit (pure feedback or combined)."""
    if not fit.converged:
        raise ValueError("fit did not converge")
    return final_temperature_combined(p, d, CoolingGains(fit.params["g_v"], g_s))


def fit_gain_temperature_curve(points, p: MembraneParams, g_s=0.0, init=None):
    """Fit final temperatures versus feedback gain for (t_bath, s_xn_eff).

    The curve is the steady-state feedback temperature (with fixed sympathetic
    gain ``g_s``); residuals are relative (log space) since the points span
    orders of magnitude.

    Parameters
    ----------
    points : sequence of (g_v, T)

    Returns
    -------
    FitResult
        ``params = {t_bath, s_xn_eff}``; ``derived`` has ``g_opt`` and ``t_min``.
        Flagged ``"extrapolated"`` if the optimum lies outside the sampled gains.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 5:
        raise ValueError("need at least 5 (g_v, T) points")
    g, temp = pts[:, 0], pts[:, 1]
    if init is None:
        # two-term model is linear in (t_bath, s_xn): least-squares start in relative terms
        basis = np.stack([1 / (1 + g + g_s),
                          _noise_heating_coefficient(p) * g**2 / (1 + g + g_s)], axis=1) / temp[:, None]
        coef, *_ = np.linalg.lstsq(basis / np.linalg.norm(basis, axis=0), np.ones_like(g),
                                   rcond=None)
        coef = coef / np.linalg.norm(basis, axis=0)
        init = dict(t_bath=float(coef[0]) if coef[0] > 0 else p.t_bath,
                    s_xn_eff=float(coef[1]) if coef[1] > 0 else 1e-30)

    def model(gg, t_bath, s_xn_eff):
        pp = _with_bath(p, t_bath)
        return final_temperature_combined(pp, DetectionParams(s_xn_eff), CoolingGains(gg, g_s))

    fit = least_squares(model, g, temp, dict(init), space="log",
                        bounds=dict(t_bath=(0.0, np.inf), s_xn_eff=(0.0, np.inf)))
    pp = _with_bath(p, fit.params["t_bath"])
    s_xn = fit.params["s_xn_eff"]
    if s_xn > 0:
        g_opt, t_min = optimal_feedback_gain(pp, DetectionParams(s_xn), g_s)
    else:
        g_opt, t_min = math.inf, 0.0
    fit.derived = dict(g_opt=g_opt, t_min=t_min, g_s=g_s)
    if not g.min() <= g_opt <= g.max():
        fit.flags.append("extrapolated")
    return fit


def _with_bath(p: MembraneParams, t_bath):
    return MembraneParams(p.mass, p.omega_m, p.gamma_m, max(t_bath, 1e-300))


# --------------------------------------------------------------------------
# sympathetic resonance and linewidths
# --------------------------------------------------------------------------

def resonance_model(omega_a, g_n_scale, gamma_a, omega_m):
    """Sympathetic rate versus atomic frequency with g_N growing as omega_a^(3/2)."""
    omega_a = np.asarray(omega_a, dtype=float)
    g_n = g_n_scale * (omega_a / omega_m) ** 1.5
    return g_n**2 * gamma_a / ((omega_a - omega_m) ** 2 + (gamma_a / 2) ** 2)


def fit_sympathetic_resonance(points, init=None):
    """Fit (omega_a, Gamma_sym) points with :func:`resonance_model`.

    The initial omega_m is the location of the largest rate, gamma_a the width
    of the points above half maximum, and g_n_scale follows from the peak height.

    Returns
    -------
    FitResult
        ``params = {g_n_scale, gamma_a, omega_m}``; ``derived`` has
        ``gamma_a_over_omega_m`` and ``peak_omega_a`` (maximum of the fitted curve).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 5:
        raise ValueError("need at least 5 (omega_a, gamma_sym) points")
    pts = pts[np.argsort(pts[:, 0])]
    w, rate = pts[:, 0], pts[:, 1]
    if init is None:
        k = int(np.argmax(rate))
        above = w[rate >= 0.5 * rate[k]]
        width = above.max() - above.min()
        if width <= 0:
            width = 0.5 * (w.max() - w.min())
        init = dict(g_n_scale=math.sqrt(rate[k] * width / 4), gamma_a=width, omega_m=w[k])
    fit = least_squares(resonance_model, w, rate, dict(init),
                        bounds=dict(g_n_scale=(0.0, np.inf), gamma_a=(0.0, np.inf),
                                    omega_m=(0.0, np.inf)))
    g_n, gamma_a, omega_m = (fit.params[k] for k in ("g_n_scale", "gamma_a", "omega_m"))
    peak = minimize_scalar(lambda x: -resonance_model(x, g_n, gamma_a, omega_m),
                           bounds=(omega_m - 2 * gamma_a, omega_m + 2 * gamma_a),
                           method="bounded", options=dict(xatol=1e-10 * omega_m))
    fit.derived = dict(gamma_a_over_omega_m=gamma_a / omega_m, peak_omega_a=float(peak.x))
    return fit


def lorentzian(f, f0, fwhm, height, floor):
    return floor + height / (1 + ((f - f0) / (0.5 * fwhm)) ** 2)


def estimate_linewidth(s: Spectrum, f_lo=None, f_hi=None):
    """Lorentzian-plus-floor fit (log density) to the single peak of ``s``.

    Returns
    -------
    FitResult
        ``params = {f0, fwhm, height, floor}`` in Hz and PSD units; flagged
        ``"no_peak"`` if the maximum is less than 3x the floor estimate and
        ``"under_resolved"`` if the width is below two resolution bandwidths.
    """
    f_lo = s.freq[0] if f_lo is None else f_lo
    f_hi = s.freq[-1] if f_hi is None else f_hi
    f, psd = _band(s, f_lo, f_hi)
    k = int(np.argmax(psd))
    floor0 = float(np.percentile(psd, 10))
    flags = []
    if psd[k] < 3 * floor0:
        flags.append("no_peak")
    half = floor0 + 0.5 * (psd[k] - floor0)
    left = k
    while left > 0 and psd[left] > half:
        left -= 1
    right = k
    while right < len(psd) - 1 and psd[right] > half:
        right += 1
    fwhm0 = max(f[right] - f[left], 2 * s.df)
    init = dict(f0=float(f[k]), fwhm=fwhm0, height=float(psd[k] - floor0),
                floor=max(floor0, 1e-12 * psd[k]))
    fit = least_squares(lorentzian, f, psd, init, space="log",
                        bounds=dict(fwhm=(0.0, np.inf), height=(0.0, np.inf),
                                    floor=(0.0, np.inf)))
    fit.flags.extend(flags)
    if fit.params["fwhm"] < 2 * s.resolution_bw:
        fit.flags.append("under_resolved")
    fit.derived = dict(gamma=2 * np.pi * fit.params["fwhm"])
    return fit


def fit_atom_decay(t, temperature, t_bath, init=None):
    """Fit a sympathetic-cooling trace with an exponentially decaying atom number.

    Model ``T(t) = t_bath / (1 + g_s0 exp(-t / tau))`` with ``t_bath`` fixed.

    Returns
    -------
    FitResult
        ``params = {g_s0, tau}``.
    """
    t = np.asarray(t, dtype=float)
    temp = np.asarray(temperature, dtype=float)
    if init is None:
        g0 = max(t_bath / temp[0] - 1, 1e-3)
        # time at which the cooling gain has dropped by e
        target = t_bath / (1 + g0 / math.e)
        above = np.nonzero(temp >= target)[0]
        tau0 = t[above[0]] - t[0] if above.size and t[above[0]] > t[0] else (t[-1] - t[0]) / 2
        init = dict(g_s0=g0, tau=max(tau0, 1e-12))

    def model(tt, g_s0, tau):
        return t_bath / (1 + g_s0 * np.exp(-tt / tau))

    return least_squares(model, t, temp, dict(init),
                         bounds=dict(g_s0=(0.0, np.inf), tau=(0.0, np.inf)), space="log")
