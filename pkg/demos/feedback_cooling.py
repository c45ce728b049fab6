"""Feedback cooling of a membrane mode, from formula to simulated spectrum.

Run with ``python3 demos/feedback_cooling.py``. Takes about 20 s.
"""
import math

from optocool.figures import steady_measurement
from optocool.fitting import extract_final_temperature, fit_inloop_spectrum
from optocool.model import (DetectionParams, MembraneParams, final_temperature_feedback,
                            optimal_feedback_gain, thermal_occupation)

# The measured membrane: 76 ng, 264 kHz, 24.5 mHz linewidth, 0.5 K bath.
device = MembraneParams.from_hz(76e-12, 264e3, 24.5e-3, 0.5)
noise = DetectionParams(7.4e-33)
g_opt, t_min = optimal_feedback_gain(device, noise)
print(f"optimal gain {g_opt:.4g}, lowest temperature {t_min * 1e6:.1f} uK, "
      f"occupation {thermal_occupation(t_min, device.omega_m):.1f}")
for g in (1e2, 1e3, g_opt, 1e5):
    print(f"  g_v = {g:8.3g}: T_final = {final_temperature_feedback(device, noise, g) * 1e6:9.1f} uK")

# A 1 kHz stand-in that simulates quickly, cooled with g_v = 100.
p = MembraneParams.from_hz(1e-12, 1e3, 1.0, 0.5)
d = DetectionParams(1e-24)
m = steady_measurement(p, d, 100.0, 0.0, 50e3, seed=1, n_segments=101)
fit = fit_inloop_spectrum(m["s_y"], p, d)
print(f"\nsimulated 1 kHz mode at g_v = 100 ({m['runs']} runs, {m['record']:.1f} s of data)")
print(f"  fitted g_v = {fit['g_v']:.1f} +- {fit.stderr['g_v']:.1f}")
print(f"  temperature from the fit  {extract_final_temperature(fit, p, d) * 1e3:.3f} mK")
print(f"  temperature from <x^2>    {m['t_mode'] * 1e3:.3f} mK")
print(f"  closed form               {final_temperature_feedback(p, d, 100.0) * 1e3:.3f} mK")
print(f"  cooldown time 1/(Gamma_m (1+g)) = {1e3 / (p.gamma_m * 101):.2f} ms"
      f" (Q = {p.q_m:.0f}, linewidth {p.gamma_m / (2 * math.pi):.1f} Hz)")
