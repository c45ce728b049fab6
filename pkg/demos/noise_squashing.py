"""In-loop noise squashing: the measured spectrum dips below the noise floor
while the true motion is heated by the fed-back noise.

Run with ``python3 demos/noise_squashing.py``. Takes a few seconds.
"""
import numpy as np

from optocool.figures import steady_measurement
from optocool.model import (CoolingGains, DetectionParams, MembraneParams, noise_heating_floor,
                            psd_in_loop, psd_out_of_loop, squashing_gain)

p = MembraneParams.from_hz(1e-12, 1e3, 0.01, 0.5)
d = DetectionParams(1e-22)
print(f"squashing sets in above g_v = {squashing_gain(p, d):.0f}")
w = np.array([p.omega_m])
# simulated values are Welch bin averages, so they smear the point value at f_m
for g in (1e2, 1e3, 1e4):
    gains = CoolingGains(g, 0.0)
    m = steady_measurement(p, d, g, 0.0, 50e3, seed=int(g), n_segments=64)
    lw = p.gamma_m * (1 + g) / (2 * np.pi)
    near = np.abs(m["s_y"].freq - p.f_m) < 0.1 * lw
    print(f"g_v = {g:6.0f}: S_y/S_xn model {psd_in_loop(w, p, d, gains)[0] / d.s_xn:7.3f}"
          f" simulated {np.mean(m['s_y'].psd[near]) / d.s_xn:7.3f};"
          f" S_x/floor model {(psd_out_of_loop(w, p, d, gains) / noise_heating_floor(w, p, d, gains))[0]:.3f}")
