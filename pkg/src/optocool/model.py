"""Closed-form model of a feedback- and sympathetically-cooled membrane mode.

All rates and frequencies are angular (rad/s).  Power spectral densities are
one-sided, in m^2/Hz (or N^2/Hz for forces), and are evaluated at angular
frequency ``omega``.  Integrating a PSD therefore means integrating over
``f = omega / 2 pi``.

A quoted "Gamma_sym = 23.3 Hz" is read as 23.3 s^-1 (angular),
which is the only reading consistent with a cooperativity of ~150 for a
linewidth of 2 pi x 24.5 mHz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import constants

HBAR = constants.hbar
K_B = constants.k
#: mass of a 87Rb atom (kg)
M_RB87 = 86.909180527 * constants.atomic_mass


class UnboundedGainError(ValueError):
    """Raised when the feedback temperature has no finite optimum (noise-free detection)."""


@dataclass(frozen=True)
class MembraneParams:
    """Mechanical mode of the membrane.

    Parameters
    ----------
    mass : float
        Effective mass (kg).
    omega_m : float
        Resonance frequency (rad/s).
    gamma_m : float
        Energy damping rate / linewidth (rad/s).
    t_bath : float
        Bath temperature (K).
    """

    mass: float
    omega_m: float
    gamma_m: float
    t_bath: float

    def __post_init__(self):
        for name in ("mass", "omega_m", "gamma_m", "t_bath"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"MembraneParams.{name} must be positive, got {value!r}")
        if self.omega_m <= self.gamma_m:
            raise ValueError("quality factor omega_m / gamma_m must exceed 1")

    @classmethod
    def from_hz(cls, mass, f_m, linewidth_hz, t_bath):
        return cls(mass, 2 * np.pi * f_m, 2 * np.pi * linewidth_hz, t_bath)

    @property
    def q_m(self):
        return self.omega_m / self.gamma_m

    @property
    def k_m(self):
        """Spring constant m omega_m^2 (N/m)."""
        return self.mass * self.omega_m**2

    @property
    def f_m(self):
        return self.omega_m / (2 * np.pi)

    @property
    def x_zp(self):
        return zero_point_motion(self)

    @property
    def n_th(self):
        return thermal_occupation(self.t_bath, self.omega_m)

    def scaled(self, *, q_factor=1.0, mass_factor=1.0):
        """Copy with the quality factor and mass multiplied (omega_m fixed)."""
        return replace(self, mass=self.mass * mass_factor, gamma_m=self.gamma_m / q_factor)


@dataclass(frozen=True)
class DetectionParams:
    """Detection noise floor as a displacement-equivalent one-sided PSD (m^2/Hz)."""

    s_xn: float

    def __post_init__(self):
        if not (np.isfinite(self.s_xn) and self.s_xn >= 0):
            raise ValueError(f"s_xn must be >= 0, got {self.s_xn!r}")


@dataclass(frozen=True)
class FeedbackParams:
    """Velocity feedback.  Only ``phase_eff = pi/2`` (pure velocity feedback) is modeled."""

    gain_v: float
    phase_eff: float = np.pi / 2

    def __post_init__(self):
        if not (np.isfinite(self.gain_v) and self.gain_v >= 0):
            raise ValueError(f"gain_v must be >= 0, got {self.gain_v!r}")
        if not math.isclose(self.phase_eff, np.pi / 2, rel_tol=1e-6):
            raise ValueError("only velocity feedback (phase_eff = pi/2) is supported")

    def cooldown_time(self, p: MembraneParams):
        """t_cool = 1 / (gamma_m g_v); infinite without feedback."""
        if self.gain_v == 0:
            return math.inf
        return 1.0 / (p.gamma_m * self.gain_v)


@dataclass(frozen=True)
class AtomCouplingParams:
    """Atomic ensemble in the coupling lattice.

    ``omega_a`` and ``gamma_a`` are angular; ``reflectivity`` is the amplitude
    reflectivity |r_m| of the membrane; ``finesse`` is the cavity finesse.
    """

    n_atoms: float
    omega_a: float
    gamma_a: float
    reflectivity: float
    finesse: float
    mass_atom: float = M_RB87

    def __post_init__(self):
        if not (np.isfinite(self.n_atoms) and self.n_atoms >= 0):
            raise ValueError(f"n_atoms must be >= 0, got {self.n_atoms!r}")
        if not 0 <= self.reflectivity <= 1:
            raise ValueError(f"reflectivity must lie in [0, 1], got {self.reflectivity!r}")
        for name in ("omega_a", "gamma_a", "finesse", "mass_atom"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"AtomCouplingParams.{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class AtomDecayModel:
    """Exponential loss of atoms from the lattice volume, N(t) = n0 exp(-t / tau)."""

    n0: float
    tau: float

    def __post_init__(self):
        if not (self.n0 >= 0):
            raise ValueError(f"n0 must be >= 0, got {self.n0!r}")
        if not (self.tau > 0):
            raise ValueError(f"tau must be > 0, got {self.tau!r}")

    def n_atoms(self, t):
        return self.n0 * np.exp(-np.asarray(t, dtype=float) / self.tau)


@dataclass(frozen=True)
class CoolingGains:
    """Feedback gain g_v and sympathetic gain g_s = Gamma_sym / Gamma_m.

    Either gain may be an array, which vectorises the temperature formulas.
    """

    g_v: float = 0.0
    g_s: float = 0.0

    def __post_init__(self):
        if not (np.all(np.asarray(self.g_v) >= 0) and np.all(np.asarray(self.g_s) >= 0)):
            raise ValueError(f"gains must be >= 0, got g_v={self.g_v!r}, g_s={self.g_s!r}")

    @property
    def total(self):
        return 1.0 + self.g_v + self.g_s


# --------------------------------------------------------------------------
# occupations and temperatures
# --------------------------------------------------------------------------

def _scalar_or_array(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def zero_point_motion(p: MembraneParams):
    """Zero-point fluctuation amplitude sqrt(hbar / (2 m omega_m)) in metres."""
    return math.sqrt(HBAR / (2 * p.mass * p.omega_m))


def thermal_occupation(t, omega):
    """Classical phonon occupation k_B T / (hbar omega)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.asarray(omega) <= 0):
        raise ValueError("need t >= 0 and omega > 0")
    return _scalar_or_array(K_B * t / (HBAR * omega))


def temperature_from_occupation(n, omega):
    return HBAR * omega * n / K_B


def temperature_from_variance(variance, p: MembraneParams):
    """Mode temperature from the position variance, T = m omega_m^2 <x^2> / k_B."""
    return p.k_m * variance / K_B


def variance_from_temperature(t, p: MembraneParams):
    return K_B * t / p.k_m


def cooldown_trace(p: MembraneParams, g, t):
    """Mode temperature after switching on cooling of gain ``g`` at t = 0.

    ``T(t) = T_bath / (1 + g) * (1 + g exp(-Gamma_m (1 + g) t))``
    """
    t = np.asarray(t, dtype=float)
    if g < 0:
        raise ValueError("gain must be >= 0")
    if np.any(t < 0):
        raise ValueError("times must be >= 0")
    return _scalar_or_array(p.t_bath / (1 + g) * (1 + g * np.exp(-p.gamma_m * (1 + g) * t)))


def _noise_heating_coefficient(p: MembraneParams):
    # m omega_m^3 / (4 k_B Q_m), identical to k_m omega_m / (4 k_B Q)
    return p.mass * p.omega_m**3 / (4 * K_B * p.q_m)


def final_temperature_feedback(p: MembraneParams, d: DetectionParams, g_v):
    """Steady-state temperature under velocity feedback with detection noise."""
    g_v = np.asarray(g_v, dtype=float)
    if np.any(g_v < 0):
        raise ValueError("g_v must be >= 0")
    return _scalar_or_array(
        p.t_bath / (1 + g_v) + _noise_heating_coefficient(p) * g_v**2 / (1 + g_v) * d.s_xn)


def final_temperature_combined(p: MembraneParams, d: DetectionParams, gains: CoolingGains):
    """Steady-state temperature under simultaneous feedback and sympathetic cooling."""
    total = 1 + gains.g_v + gains.g_s
    return p.t_bath / total + _noise_heating_coefficient(p) * gains.g_v**2 / total * d.s_xn


def optimal_feedback_gain(p: MembraneParams, d: DetectionParams, g_s=0.0):
    """Gain minimising the steady-state temperature, and that temperature.

    Returns
    -------
    g_opt, t_min : float
        For ``g_s = 0`` this is ``sqrt(1 + T_bath 4 k_B Q / (m omega^3 S_xn)) - 1``.

    Raises
    ------
    UnboundedGainError
        If ``s_xn == 0``: the temperature then decreases without bound in g_v.
    """
    if d.s_xn == 0:
        raise UnboundedGainError("unbounded gain: no finite optimum without detection noise")
    b = _noise_heating_coefficient(p) * d.s_xn
    s1 = 1.0 + g_s
    g_opt = math.sqrt(s1**2 + p.t_bath / b) - s1
    t_min = final_temperature_combined(p, d, CoolingGains(g_opt, g_s))
    return g_opt, t_min


def min_temp_sympathetic(t_bath, gamma_sym, gamma_m):
    """Steady-state temperature with sympathetic damping only."""
    gamma_sym = np.asarray(gamma_sym, dtype=float)
    if np.any(gamma_sym < 0) or gamma_m <= 0:
        raise ValueError("rates must be non-negative (gamma_m > 0)")
    return _scalar_or_array(t_bath / (1 + gamma_sym / gamma_m))


def gamma_sym_from_temperature(t_min, t_bath, gamma_m):
    """Inverse of :func:`min_temp_sympathetic`."""
    return gamma_m * (t_bath / np.asarray(t_min, dtype=float) - 1)


# --------------------------------------------------------------------------
# hybrid coupling
# --------------------------------------------------------------------------

def coupling_rate_gN(a: AtomCouplingParams, p: MembraneParams):
    """Collective atom-membrane coupling rate g_N (rad/s)."""
    return (a.reflectivity**2 * a.omega_a
            * math.sqrt(a.n_atoms * a.mass_atom * a.omega_a / (p.mass * p.omega_m))
            * 2 * a.finesse / math.pi)


def sympathetic_rate(g_n, gamma_a, omega_a, omega_m):
    """Sympathetic damping rate, a Lorentzian in the detuning omega_a - omega_m."""
    if np.any(np.asarray(gamma_a) <= 0):
        raise ValueError("gamma_a must be > 0")
    detuning = np.asarray(omega_a, dtype=float) - omega_m
    return _scalar_or_array(
        np.asarray(g_n, dtype=float) ** 2 * gamma_a / (detuning**2 + (gamma_a / 2) ** 2))


def hybrid_cooperativity(g_n, gamma_a, gamma_m):
    if gamma_a <= 0 or gamma_m <= 0:
        raise ValueError("rates must be > 0")
    return 4 * g_n**2 / (gamma_a * gamma_m)


def sympathetic_rate_from_params(a: AtomCouplingParams, p: MembraneParams):
    return sympathetic_rate(coupling_rate_gN(a, p), a.gamma_a, a.omega_a, p.omega_m)


def atom_decay_temperature_trace(p: MembraneParams, a: AtomCouplingParams,
                                 decay: AtomDecayModel, t):
    """Minimum temperature while atoms leak out of the lattice.

    Gamma_sym is proportional to N, so Gamma_sym(t) = Gamma_sym(n0) exp(-t/tau).
    ``a.n_atoms`` is ignored; the atom number comes from ``decay``.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("times must be >= 0")
    gamma0 = sympathetic_rate_from_params(replace(a, n_atoms=decay.n0), p)
    return min_temp_sympathetic(p.t_bath, gamma0 * np.exp(-t / decay.tau), p.gamma_m)


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

def thermal_force_psd(p: MembraneParams):
    """One-sided white thermal force PSD 4 k_B T m Gamma_m (N^2/Hz)."""
    return 4 * K_B * p.t_bath * p.mass * p.gamma_m


def susceptibility_mech(omega, p: MembraneParams, gamma_override=None):
    """Velocity-damped oscillator susceptibility 1 / [m (omega_m^2 - omega^2 - i omega Gamma)].

    ``gamma_override`` replaces Gamma_m, which is how the effective
    susceptibilities under sympathetic and/or feedback cooling are obtained.
    """
    gamma = p.gamma_m if gamma_override is None else gamma_override
    omega = np.asarray(omega, dtype=float)
    return 1.0 / (p.mass * (p.omega_m**2 - omega**2 - 1j * omega * gamma))


def inverse_feedback_susceptibility(omega, p: MembraneParams, g_v):
    """chi_fb^-1 = -i m omega Gamma_m g_v."""
    return -1j * p.mass * np.asarray(omega, dtype=float) * p.gamma_m * g_v


def psd_out_of_loop(omega, p: MembraneParams, d: DetectionParams, gains: CoolingGains):
    """Real displacement PSD S_x under combined cooling (m^2/Hz, one-sided)."""
    chi_sf = susceptibility_mech(omega, p, p.gamma_m * gains.total)
    fb = np.abs(inverse_feedback_susceptibility(omega, p, gains.g_v)) ** 2
    return np.abs(chi_sf) ** 2 * (thermal_force_psd(p) + fb * d.s_xn)


def psd_in_loop(omega, p: MembraneParams, d: DetectionParams, gains: CoolingGains):
    """Measured in-loop PSD S_y of y = x + x_n under combined cooling."""
    chi_sf = susceptibility_mech(omega, p, p.gamma_m * gains.total)
    chi_s = susceptibility_mech(omega, p, p.gamma_m * (1 + gains.g_s))
    return np.abs(chi_sf) ** 2 * (thermal_force_psd(p) + d.s_xn / np.abs(chi_s) ** 2)


def noise_heating_floor(omega, p: MembraneParams, d: DetectionParams, gains: CoolingGains):
    """Part of S_x driven by fed-back detection noise; S_x never drops below it."""
    chi_sf = susceptibility_mech(omega, p, p.gamma_m * gains.total)
    fb = np.abs(inverse_feedback_susceptibility(omega, p, gains.g_v)) ** 2
    return np.abs(chi_sf) ** 2 * fb * d.s_xn


def squashing_gain(p: MembraneParams, d: DetectionParams, g_s=0.0):
    """Feedback gain above which S_y(omega_m) falls below S_xn.

    From S_y(omega_m) = [S_F |chi_m(omega_m)|^2 + S_xn (1+g_s)^2] / (1+g_v+g_s)^2.
    At g_s = 0 it coincides with the optimal gain of :func:`optimal_feedback_gain`.
    """
    if d.s_xn == 0:
        return 0.0
    peak = thermal_force_psd(p) * abs(susceptibility_mech(p.omega_m, p)) ** 2
    return max(math.sqrt(peak / d.s_xn + (1 + g_s) ** 2) - 1 - g_s, 0.0)


def ground_state_feasible(p: MembraneParams, d: DetectionParams):
    """Check S_xn < 4 x_zp^2 / (n_th Gamma_m).

    Returns
    -------
    feasible : bool
    margin : float
        bound / S_xn; ``inf`` for noise-free detection.
    """
    bound = ground_state_noise_bound(p)
    if d.s_xn == 0:
        return True, math.inf
    margin = bound / d.s_xn
    return margin > 1, margin


def ground_state_noise_bound(p: MembraneParams):
    return 4 * zero_point_motion(p) ** 2 / (p.n_th * p.gamma_m)
