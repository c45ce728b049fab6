import math

import numpy as np
import pytest

from optocool.fitting import fit_inloop_spectrum
from optocool.pipeline import (decay_gamma_schedule, final_gains, run_and_analyze, run_seed,
                               settle_delay, sweep_point)
from optocool.scenario import load_bundled, scenario_from_dict


def steady(g_v, duration):
    return scenario_from_dict(dict(
        membrane=dict(mass=1e-12, omega_m=1000.0, gamma_m=0.1, t_bath=0.5),
        detection=dict(s_xn=1e-25),
        feedback=dict(gain_v=g_v),
        sim=dict(sample_rate=50e3, duration=duration, seed=31)))


@pytest.mark.parametrize("g_v,duration", [(10.0, 120.0), (100.0, 30.0), (1000.0, 10.0)])
def test_chain_consistency(g_v, duration):
    """Fit-derived T_final agrees with the out-of-loop band temperature."""
    _, res = run_and_analyze(steady(g_v, duration))
    s = res.summary
    assert s["fit_converged"]
    assert s["t_final"] == pytest.approx(s["t_band"], rel=0.15)


def test_fit_is_deterministic():
    sc = steady(100.0, 5.0)
    _, res = run_and_analyze(sc)
    a = fit_inloop_spectrum(res.spectrum, sc.membrane, sc.detection)
    b = fit_inloop_spectrum(res.spectrum, sc.membrane, sc.detection)
    assert a.to_dict() == b.to_dict()


def test_run_seed():
    assert run_seed(5, 0) == 5
    assert run_seed(5, 1) == run_seed(5, 1) != run_seed(5, 2)


def test_decay_schedule_midpoints():
    sched = decay_gamma_schedule(10.0, 2.0, 0.0, 1.0, step=0.5)
    assert [t for t, _ in sched] == [0.0, 0.5]
    assert sched[1][1] == pytest.approx(10.0 * math.exp(-0.75 / 2.0))


def test_settle_delay():
    assert settle_delay(1.0, 2.0) == pytest.approx(2.5)
    assert settle_delay(math.e, 1.0) == pytest.approx(6.0)


def test_final_gains_of_bundled():
    assert final_gains(load_bundled("feedback_step")) == (50.0, 0.0)
    g_v, g_s = final_gains(load_bundled("sympathetic"))
    assert g_v == 0.0 and g_s == pytest.approx(20.0, rel=1e-6)


def test_sympathetic_scenario_temperature():
    _, res = run_and_analyze(load_bundled("sympathetic"))
    s = res.summary
    assert s["t_mode"] == pytest.approx(0.5 / 21, rel=0.15)
    assert s["gamma_sym_from_t"] / (2 * math.pi) == pytest.approx(20.0, rel=0.2)


def test_sweep_point_row():
    row = sweep_point(steady(10.0, 5.0), "feedback.gain_v", 100.0, 3)
    assert row[0] == 100.0 and all(np.isfinite(row[1:6]))
