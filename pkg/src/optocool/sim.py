"""Time-domain Langevin simulation of the cooled membrane.

The membrane obeys

    x'' = -omega_m^2 x - (Gamma_m + Gamma_sym) x' - Gamma_m g_v D[y] + F_th / m,

with y = x + x_n the noisy measurement and D a band-limited digital
differentiator.  Optionally the sympathetic damping is replaced by an explicit
atomic oscillator coupled bilinearly to the membrane.

Noise conventions (one-sided PSDs, sample rate f_s):

* thermal force: Gaussian sample per step with variance S_Fth f_s / 2,
* detection noise: Gaussian sample per step with variance S_xn f_s / 2.

Random streams are derived from ``SeedSequence(seed).spawn(4)`` in the order
(thermal force, detection noise, initial state, atom force), so the membrane
series of the coupled model with g_N = 0 is bit-identical to the uncoupled run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .model import (K_B, AtomCouplingParams, DetectionParams, FeedbackParams, MembraneParams,
                    coupling_rate_gN)

SCHEMES = ("semi-implicit-euler", "stochastic-heun")
FEEDBACK_MODES = ("off", "velocity")
COUPLING_MODES = ("off", "effective-damping", "two-oscillator")
INITIAL_STATES = ("thermal", "rest")

_CHUNK = 1 << 18


class SimulationDiverged(RuntimeError):
    """The integration left the physically sensible range (usually a too-large step)."""

    def __init__(self, step):
        super().__init__(f"integration diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    """Integration settings.

    ``bandlimit_factor`` places the single pole of the feedback differentiator at
    ``bandlimit_factor * omega_m``; ``delay_samples`` adds a pure loop delay.
    Both are compensated around omega_m by the digital phase adjustment (see
    :func:`feedback_filter_coefficients`).  The stiffness is prewarped so the
    discrete resonance sits exactly at omega_m.
    """

    sample_rate: float
    duration: float
    seed: int = 0
    scheme: str = "semi-implicit-euler"
    feedback_mode: str = "velocity"
    coupling_mode: str = "off"
    bandlimit_factor: float = 5.0
    delay_samples: int = 0
    initial: str = "thermal"
    atom_temperature: float = 0.0

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.feedback_mode not in FEEDBACK_MODES:
            raise ValueError(f"feedback_mode must be one of {FEEDBACK_MODES}")
        if self.coupling_mode not in COUPLING_MODES:
            raise ValueError(f"coupling_mode must be one of {COUPLING_MODES}")
        if self.initial not in INITIAL_STATES:
            raise ValueError(f"initial must be one of {INITIAL_STATES}")
        if self.bandlimit_factor <= 0 or self.delay_samples < 0:
            raise ValueError("bandlimit_factor must be > 0 and delay_samples >= 0")
        if self.atom_temperature < 0:
            raise ValueError("atom_temperature must be >= 0")

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    @property
    def n_samples(self):
        return int(round(self.duration * self.sample_rate))

    def check_resolves(self, omega):
        if self.sample_rate <= 20 * omega / (2 * np.pi):
            raise ValueError(
                f"sample_rate {self.sample_rate:g} Hz must exceed 20x the highest mode "
                f"frequency ({omega / (2 * np.pi):g} Hz)")


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled simulation output.

    ``x`` is the true displacement, ``v`` the velocity and ``y = x + x_n`` the
    measured signal.  Sample ``k`` is at time ``t0 + k dt``.
    """

    dt: float
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    x_a: np.ndarray | None = None
    v_a: np.ndarray | None = None
    t0: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        for name in self.series_names:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError("all series must have equal length")
            arr.flags.writeable = False

    @property
    def series_names(self):
        names = ["x", "v", "y"]
        if self.x_a is not None:
            names += ["x_a", "v_a"]
        return names

    @property
    def sample_rate(self):
        return 1.0 / self.dt

    @property
    def t(self):
        return self.t0 + self.dt * np.arange(len(self.x))

    def __len__(self):
        return len(self.x)

    def window(self, t_start, t_stop=None):
        """Sub-trajectory with samples in [t_start, t_stop)."""
        i0 = max(int(math.ceil((t_start - self.t0) / self.dt - 1e-9)), 0)
        i1 = len(self) if t_stop is None else int(math.ceil((t_stop - self.t0) / self.dt - 1e-9))
        sl = slice(i0, i1)
        extra = {}
        if self.x_a is not None:
            extra = dict(x_a=self.x_a[sl].copy(), v_a=self.v_a[sl].copy())
        return Trajectory(self.dt, self.x[sl].copy(), self.v[sl].copy(), self.y[sl].copy(),
                          t0=self.t0 + i0 * self.dt, metadata=dict(self.metadata), **extra)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _membrane_kernel(state, ybuf, xi_f, xi_n, x_out, v_out, y_out, dt, omega2, damping,
                     fb_rate, c_d, c_p, c_a, alpha, kick_scale, noise_scale, heun, x_limit):
    x, v, y_prev, u, pf = state[0], state[1], state[2], state[3], state[4]
    pos = int(state[5])
    delay = ybuf.shape[0]
    for n in range(xi_f.shape[0]):
        y = x + noise_scale * xi_n[n]
        x_out[n] = x
        v_out[n] = v
        y_out[n] = y
        if delay > 0:
            yd = ybuf[pos]
            ybuf[pos] = y
            pos = (pos + 1) % delay
        else:
            yd = y
        d = (yd - y_prev) / dt
        y_prev = yd
        u_old = u
        u += alpha * (d - u)
        pf += alpha * (yd - pf)
        fb = fb_rate * (c_d * u + c_p * pf + c_a * (u - u_old))
        kick = kick_scale * xi_f[n]
        if heun:
            a1 = -omega2 * x - damping * v - fb
            xp = x + dt * v
            vp = v + dt * (a1 + kick)
            a2 = -omega2 * xp - damping * vp - fb
            x = x + 0.5 * dt * (v + vp)
            v = v + 0.5 * dt * (a1 + a2) + dt * kick
        else:
            a = -omega2 * x - damping * v - fb + kick
            v = v + dt * a
            x = x + dt * v
        if not abs(x) < x_limit:
            state[0], state[1], state[2], state[3], state[4], state[5] = x, v, y_prev, u, pf, pos
            return n
    state[0], state[1], state[2], state[3], state[4], state[5] = x, v, y_prev, u, pf, pos
    return -1


@njit(cache=True)
def _coupled_kernel(state, ybuf, xi_f, xi_n, xi_a, x_out, v_out, y_out, xa_out, va_out, dt,
                    omega2, damping, fb_rate, c_d, c_p, c_a, alpha, kick_scale, noise_scale,
                    omega2_a, damping_a, kick_scale_a, kap_m, kap_a, heun, x_limit):
    # same arithmetic order as _membrane_kernel; coupling enters as a final term
    x, v, y_prev, u, pf = state[0], state[1], state[2], state[3], state[4]
    pos = int(state[5])
    xa, va = state[6], state[7]
    delay = ybuf.shape[0]
    for n in range(xi_f.shape[0]):
        y = x + noise_scale * xi_n[n]
        x_out[n] = x
        v_out[n] = v
        y_out[n] = y
        xa_out[n] = xa
        va_out[n] = va
        if delay > 0:
            yd = ybuf[pos]
            ybuf[pos] = y
            pos = (pos + 1) % delay
        else:
            yd = y
        d = (yd - y_prev) / dt
        y_prev = yd
        u_old = u
        u += alpha * (d - u)
        pf += alpha * (yd - pf)
        fb = fb_rate * (c_d * u + c_p * pf + c_a * (u - u_old))
        kick = kick_scale * xi_f[n]
        kick_a = kick_scale_a * xi_a[n]
        if heun:
            a1 = -omega2 * x - damping * v - fb - kap_m * xa
            b1 = -omega2_a * xa - damping_a * va - kap_a * x
            xp = x + dt * v
            vp = v + dt * (a1 + kick)
            xap = xa + dt * va
            vap = va + dt * (b1 + kick_a)
            a2 = -omega2 * xp - damping * vp - fb - kap_m * xap
            b2 = -omega2_a * xap - damping_a * vap - kap_a * xp
            x = x + 0.5 * dt * (v + vp)
            v = v + 0.5 * dt * (a1 + a2) + dt * kick
            xa = xa + 0.5 * dt * (va + vap)
            va = va + 0.5 * dt * (b1 + b2) + dt * kick_a
        else:
            a = -omega2 * x - damping * v - fb + kick - kap_m * xa
            b = -omega2_a * xa - damping_a * va + kick_a - kap_a * x
            v = v + dt * a
            x = x + dt * v
            va = va + dt * b
            xa = xa + dt * va
        if not (abs(x) < x_limit and abs(xa) < 1e300):
            state[:8] = np.array([x, v, y_prev, u, pf, float(pos), xa, va])
            return n
    state[:8] = np.array([x, v, y_prev, u, pf, float(pos), xa, va])
    return -1


# --------------------------------------------------------------------------
# feedback filter
# --------------------------------------------------------------------------

def discrete_stiffness(omega, dt):
    """Squared frequency that places the undamped integrator's resonance at ``omega``.

    Both schemes advance a harmonic oscillator by an angle ``2 asin(w dt / 2)``
    per step; inverting that removes the frequency pulling, which would
    otherwise be comparable to the linewidth of a high-Q resonator.
    """
    return (2.0 / dt * math.sin(0.5 * omega * dt)) ** 2


def _velocity_target(omega, cfg: SimConfig, damping):
    """Response of the integrator's own velocity variable to x at ``omega``."""
    dt = cfg.dt
    z = np.exp(1j * omega * dt)
    if cfg.scheme == "semi-implicit-euler":
        return (1 - 1 / z) / dt
    w2 = discrete_stiffness(omega, dt)
    return (z - 1 + 0.5 * w2 * dt**2) / (dt * (1 - 0.5 * damping * dt))


def feedback_filter_coefficients(omega_m, cfg: SimConfig, damping=0.0):
    """Coefficients of the digital velocity estimator.

    The estimator is ``D = c_d u + c_p omega_m p + c_a (u_n - u_{n-1})`` where
    ``u`` is the one-pole low-passed first difference of the (delayed) signal and
    ``p`` the equally low-passed signal.  The three coefficients make D equal the
    integrator's velocity at omega_m and give it the same frequency slope of the
    in-phase part there.  The first two conditions set the loop's effective phase
    to pi/2; the third cancels the detuning-dependent phase error that the
    band-limit pole would otherwise introduce, which biases strongly damped loops.

    Parameters
    ----------
    omega_m : float
        Calibration frequency (rad/s).
    cfg : SimConfig
    damping : float
        Mechanical damping rate, only used by the Heun velocity target.

    Returns
    -------
    alpha, c_d, c_p, c_a : float
    """
    dt = cfg.dt
    alpha = 1.0 - math.exp(-cfg.bandlimit_factor * omega_m * dt)

    def basis(w):
        z = np.exp(1j * w * dt)
        pre = alpha / (1 - (1 - alpha) / z) * z ** (-cfg.delay_samples)
        diff = (1 - 1 / z)
        return np.array([pre * diff / dt, pre * omega_m, pre * diff**2 / dt])

    h = 1e-6 * omega_m
    b0 = basis(omega_m)
    db = (basis(omega_m + h) - basis(omega_m - h)) / (2 * h)
    t0 = _velocity_target(omega_m, cfg, damping)
    dtg = (_velocity_target(omega_m + h, cfg, damping)
           - _velocity_target(omega_m - h, cfg, damping)) / (2 * h)
    a = np.array([b0.real, b0.imag, db.real])
    c_d, c_p, c_a = np.linalg.solve(a, [t0.real, t0.imag, dtg.real])
    return alpha, float(c_d), float(c_p), float(c_a)


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------

def _streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def _initial_state(p, cfg, rng):
    if cfg.initial == "rest":
        return 0.0, 0.0
    sx = math.sqrt(K_B * p.t_bath / p.k_m)
    sv = math.sqrt(K_B * p.t_bath / p.mass)
    x0, v0 = rng.standard_normal(2)
    return sx * x0, sv * v0


def _x_limit(p, d, cfg):
    thermal = math.sqrt(K_B * p.t_bath / p.k_m)
    noise = math.sqrt(d.s_xn * cfg.sample_rate / 2)
    return 1e6 * max(thermal, noise)


def _segments(n_total, schedule_times, t_start, dt):
    """Split [0, n_total) at the sample indices of the schedule breakpoints."""
    edges = {0, n_total}
    for t in schedule_times:
        k = int(math.ceil((t - t_start) / dt - 1e-9))
        if 0 < k < n_total:
            edges.add(k)
    edges = sorted(edges)
    return list(zip(edges[:-1], edges[1:]))


def _value_at(schedule, t, default):
    value = default
    for t_k, v_k in schedule:
        if t_k <= t + 1e-12:
            value = v_k
    return value


def _run(p, d, cfg, gain_schedule, gamma_schedule, t_start=0.0, atoms=None):
    """Shared integration loop.  Schedules are sorted lists of (t, value)."""
    omega_max = p.omega_m if atoms is None else max(p.omega_m, atoms.omega_a)
    cfg.check_resolves(omega_max)
    n = cfg.n_samples
    dt = cfg.dt
    rng_f, rng_n, rng_0, rng_a = _streams(cfg.seed)
    alpha, c_d, c_p, c_a = feedback_filter_coefficients(p.omega_m, cfg, p.gamma_m)
    omega2 = discrete_stiffness(p.omega_m, dt)
    kick_scale = math.sqrt(4 * K_B * p.t_bath * p.mass * p.gamma_m * cfg.sample_rate / 2) / p.mass
    noise_scale = math.sqrt(d.s_xn * cfg.sample_rate / 2)
    heun = cfg.scheme == "stochastic-heun"
    x_limit = _x_limit(p, d, cfg)

    x0, v0 = _initial_state(p, cfg, rng_0)
    state = np.array([x0, v0, x0 - v0 * dt, v0, x0, 0.0, 0.0, 0.0])
    ybuf = np.full(cfg.delay_samples, x0)

    x_out = np.empty(n)
    v_out = np.empty(n)
    y_out = np.empty(n)
    if atoms is not None:
        xa_out = np.empty(n)
        va_out = np.empty(n)
        g_n = coupling_rate_gN(atoms, p)
        m_a = atoms.mass_atom * max(atoms.n_atoms, 1.0)
        kappa = 2 * g_n * math.sqrt(p.mass * p.omega_m * m_a * atoms.omega_a)
        kap_m, kap_a = kappa / p.mass, kappa / m_a
        kick_scale_a = math.sqrt(
            4 * K_B * cfg.atom_temperature * m_a * atoms.gamma_a * cfg.sample_rate / 2) / m_a

    times = [t for t, _ in gain_schedule] + [t for t, _ in gamma_schedule]
    for i0, i1 in _segments(n, times, t_start, dt):
        t_seg = t_start + i0 * dt
        g_v = _value_at(gain_schedule, t_seg, 0.0) if cfg.feedback_mode == "velocity" else 0.0
        gamma_sym = _value_at(gamma_schedule, t_seg, 0.0)
        fb_rate = p.gamma_m * g_v
        damping = p.gamma_m + gamma_sym
        for j0 in range(i0, i1, _CHUNK):
            j1 = min(j0 + _CHUNK, i1)
            m = j1 - j0
            xi_f = rng_f.standard_normal(m)
            xi_n = rng_n.standard_normal(m)
            if atoms is None:
                bad = _membrane_kernel(state, ybuf, xi_f, xi_n, x_out[j0:j1], v_out[j0:j1],
                                       y_out[j0:j1], dt, omega2, damping, fb_rate, c_d,
                                       c_p * p.omega_m, c_a, alpha, kick_scale, noise_scale, heun,
                                       x_limit)
            else:
                xi_a = rng_a.standard_normal(m) if kick_scale_a > 0 else np.zeros(m)
                bad = _coupled_kernel(state, ybuf, xi_f, xi_n, xi_a, x_out[j0:j1], v_out[j0:j1],
                                      y_out[j0:j1], xa_out[j0:j1], va_out[j0:j1], dt,
                                      omega2, damping, fb_rate, c_d, c_p * p.omega_m, c_a,
                                      alpha, kick_scale, noise_scale,
                                      discrete_stiffness(atoms.omega_a, dt),
                                      atoms.gamma_a, kick_scale_a, kap_m, kap_a, heun, x_limit)
            if bad >= 0:
                raise SimulationDiverged(j0 + bad)
    extra = {}
    if atoms is not None:
        extra = dict(x_a=xa_out, v_a=va_out)
    meta = dict(scheme=cfg.scheme, seed=cfg.seed, sample_rate=cfg.sample_rate,
                filter=dict(alpha=alpha, c_d=c_d, c_p=c_p, c_a=c_a))
    return Trajectory(dt, x_out, v_out, y_out, t0=t_start, metadata=meta, **extra)


def simulate_membrane(p: MembraneParams, d: DetectionParams, fb: FeedbackParams,
                      gamma_sym, cfg: SimConfig) -> Trajectory:
    """Integrate the membrane with thermal drive, noisy velocity feedback and viscous
    sympathetic damping ``gamma_sym`` (rad/s).

    Raises
    ------
    SimulationDiverged
        If the state leaves the sensible range; carries the step index.
    """
    if gamma_sym < 0:
        raise ValueError("gamma_sym must be >= 0")
    if cfg.coupling_mode == "two-oscillator":
        raise ValueError("use simulate_coupled for the two-oscillator model")
    if cfg.coupling_mode == "off" and gamma_sym > 0:
        raise ValueError("gamma_sym > 0 requires coupling_mode='effective-damping'")
    traj = _run(p, d, cfg, [(0.0, fb.gain_v)], [(0.0, gamma_sym)])
    traj.metadata.update(gain_v=fb.gain_v, gamma_sym=gamma_sym)
    return traj


def simulate_coupled(p: MembraneParams, a: AtomCouplingParams, cfg: SimConfig,
                     d: DetectionParams | None = None,
                     fb: FeedbackParams | None = None) -> Trajectory:
    """Membrane and atomic mode as two oscillators with beam-splitter coupling g_N.

    The atomic ensemble is a single oscillator of mass N m_a, frequency omega_a and
    energy damping gamma_a (laser cooling).  The position coupling
    kappa = 2 g_N sqrt(m omega_m N m_a omega_a) gives, in the rotating-wave limit,
    an amplitude exchange at rate g_N, so eliminating a strongly damped atom mode
    adds the sympathetic damping g_N^2 gamma_a / (detuning^2 + gamma_a^2 / 4).
    The atom mode is undriven unless ``cfg.atom_temperature > 0``.
    """
    if cfg.coupling_mode != "two-oscillator":
        raise ValueError("simulate_coupled requires coupling_mode='two-oscillator'")
    d = d or DetectionParams(0.0)
    fb = fb or FeedbackParams(0.0)
    traj = _run(p, d, cfg, [(0.0, fb.gain_v)], [], atoms=a)
    traj.metadata.update(gain_v=fb.gain_v, g_n=coupling_rate_gN(a, p))
    return traj


def cooldown_experiment(p: MembraneParams, d: DetectionParams, fb: FeedbackParams,
                        gamma_sym_schedule: Sequence[tuple[float, float]], cfg: SimConfig,
                        gain_schedule: Sequence[tuple[float, float]] | None = None,
                        t_start: float = 0.0) -> Trajectory:
    """Staged run with piecewise-constant sympathetic damping and feedback gain.

    Parameters
    ----------
    gamma_sym_schedule : sequence of (t, gamma_sym)
        Breakpoints; the rate holds from each ``t`` until the next breakpoint.
        Before the first breakpoint the rate is zero.
    gain_schedule : sequence of (t, g_v), optional
        Same for the feedback gain; defaults to ``fb.gain_v`` from ``t_start``.
    t_start : float
        Time of the first sample; the run covers ``[t_start, t_start + duration)``.

    The stage table is stored in ``metadata['stages']``.
    """
    gamma_sched = sorted((float(t), float(g)) for t, g in gamma_sym_schedule)
    gain_sched = (sorted((float(t), float(g)) for t, g in gain_schedule)
                  if gain_schedule is not None else [(t_start, fb.gain_v)])
    if any(g < 0 for _, g in gamma_sched + gain_sched):
        raise ValueError("schedule values must be >= 0")
    if any(g > 0 for _, g in gamma_sched) and cfg.coupling_mode != "effective-damping":
        raise ValueError("sympathetic stages require coupling_mode='effective-damping'")
    traj = _run(p, d, cfg, gain_sched, gamma_sched, t_start=t_start)
    t_end = t_start + cfg.n_samples * cfg.dt
    breaks = sorted({t_start, *[t for t, _ in gamma_sched + gain_sched if t_start < t < t_end]})
    stages = []
    for k, t0 in enumerate(breaks):
        t1 = breaks[k + 1] if k + 1 < len(breaks) else t_end
        g_v = _value_at(gain_sched, t0, 0.0) if cfg.feedback_mode == "velocity" else 0.0
        stages.append(dict(t_start=t0, t_end=t1, gain_v=g_v,
                           gamma_sym=_value_at(gamma_sched, t0, 0.0)))
    traj.metadata["stages"] = stages
    return traj


def steady_state_temperature(traj: Trajectory, p: MembraneParams, t_settle=0.0):
    """Mode temperature m omega_m^2 <x^2> / k_B of the samples after ``t_settle``."""
    x = traj.x[traj.t >= t_settle]
    return p.k_m * float(np.mean((x - x.mean()) ** 2)) / K_B
