"""Sympathetic cooling through an atomic ensemble and the hybrid cooperativity.

Run with ``python3 demos/sympathetic_cooling.py``. Takes about 15 s.
"""
import math

from optocool.fitting import estimate_linewidth
from optocool.model import (AtomCouplingParams, MembraneParams, coupling_rate_gN,
                            hybrid_cooperativity, min_temp_sympathetic,
                            sympathetic_rate_from_params)
from optocool.scenario import load_bundled
from optocool.sim import SimConfig, simulate_coupled
from optocool.spectral import zoom_psd

sc = load_bundled("measured")
p, a = sc.membrane, sc.atoms
g_n = coupling_rate_gN(a, p)
rate = sympathetic_rate_from_params(a, p)
print(f"measured-device scenario: g_N = {g_n:.4g} rad/s, Gamma_sym = {rate:.3g} 1/s, "
      f"C_hybrid = {hybrid_cooperativity(g_n, a.gamma_a, p.gamma_m):.1f}, "
      f"T_min = {min_temp_sympathetic(p.t_bath, rate, p.gamma_m) * 1e3:.2f} mK")

# Two coupled oscillators at 1 kHz: the membrane linewidth grows by 4 g_N^2 / Gamma_a.
q = MembraneParams.from_hz(1e-12, 1e3, 0.1, 0.5)
gamma_a = 0.1 * q.omega_m
unit = AtomCouplingParams(1.0, q.omega_m, gamma_a, 0.42, 160.0)
atoms = AtomCouplingParams((gamma_a / 20 / coupling_rate_gN(unit, q)) ** 2, q.omega_m,
                           gamma_a, 0.42, 160.0)
expected = q.gamma_m + 4 * coupling_rate_gN(atoms, q) ** 2 / gamma_a
tr = simulate_coupled(q, atoms, SimConfig(50e3, 100.0, seed=3,
                                          coupling_mode="two-oscillator")).window(5.0)
lw = expected / (2 * math.pi)
fit = estimate_linewidth(zoom_psd(tr.x, 50e3, q.f_m, 20 * lw, 0.2 * lw))
print(f"two-oscillator simulation: fitted linewidth {fit['fwhm']:.3f} Hz, "
      f"predicted {lw:.3f} Hz, bare {q.gamma_m / (2 * math.pi):.3f} Hz")
