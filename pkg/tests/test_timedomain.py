import math

import numpy as np
import pytest

from gfmlab import analysis as an
from gfmlab import assembly as asm
from gfmlab import gfc_controls as gc
from gfmlab import timedomain as td


@pytest.fixture(scope="module")
def eq_no_inner():
    return asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()))


@pytest.mark.parametrize("design", [gc.no_inner_design(), gc.current_only_design(),
                                    gc.cascaded_design(1)], ids=lambda d: d.name)
def test_equilibrium_does_not_drift(design):
    eq = asm.find_equilibrium(asm.SystemModel(design))
    ts = td.integrate(eq, td.Scenario(10.0, record_every=1000))
    assert np.max(np.abs(ts.meta["x_final"] - eq.x)) < 1e-8


def test_step_halving_convergence(eq_no_inner):
    ev = (td.LoadStep(0.1, 0.05),)
    a = td.integrate(eq_no_inner, td.Scenario(0.5, 50e-6, ev, record_every=2))
    b = td.integrate(eq_no_inner, td.Scenario(0.5, 25e-6, ev, record_every=4))
    assert np.allclose(a.t, b.t)
    assert np.max(np.abs(a.data - b.data)) < 1e-6


def test_runs_are_bit_identical(eq_no_inner):
    scen = td.Scenario(1.0, events=(td.PowerRefStep(0.2, 0.05),))
    a = td.integrate(eq_no_inner, scen)
    b = td.integrate(eq_no_inner, scen)
    assert np.array_equal(a.data, b.data)


def test_zero_magnitude_events_change_nothing(eq_no_inner):
    base = td.integrate(eq_no_inner, td.Scenario(0.5))
    evs = (td.LoadStep(0.1, 0.0), td.PowerRefStep(0.2, 0.0))
    ts = td.integrate(eq_no_inner, td.Scenario(0.5, events=evs))
    assert np.array_equal(base.data, ts.data)


def test_infinite_bus_null_events():
    eq = asm.find_equilibrium(asm.infinite_bus_model(gc.no_inner_design()))
    base = td.integrate(eq, td.Scenario(0.3))
    ts = td.integrate(eq, td.Scenario(0.3, events=(td.VoltageDip(0.1, 1.0),
                                                   td.AngleJump(0.1, 0.0))))
    assert np.max(np.abs(base.data - ts.data)) < 1e-12


def test_scenario_validation():
    with pytest.raises(td.ScenarioError):
        td.Scenario(1.0, events=(td.LoadStep(0.5, 0.1), td.LoadStep(0.2, 0.1)))
    with pytest.raises(td.ScenarioError):
        td.Scenario(1.0, events=(td.LoadStep(1.5, 0.1),))
    with pytest.raises(td.ScenarioError):
        td.Scenario(1.0, events=(td.Fault3LG(0.9, duration=0.15),))
    with pytest.raises(td.ScenarioError):
        td.Scenario(0.0)
    with pytest.raises(td.ScenarioError):
        td.VoltageDip(0.1, 1.5)
    with pytest.raises(td.ScenarioError):
        td.Fault3LG(0.1, bus="sg")
    with pytest.raises(td.ScenarioError):
        td.Scenario(1.0, 50e-6, (td.LoadStep(0.10001, 0.1),)).step_of(0.10001)


def test_default_dt():
    assert td.default_dt(gc.no_inner_design()) == pytest.approx(50e-6)
    assert td.default_dt(gc.cascaded_design(2)) == pytest.approx(20e-6)


def test_small_steps_match_linear_model(eq_no_inner):
    rep = asm.verify_model(eq_no_inner, load_step=0.01, pref_step=0.01)
    assert max(rep.nrms.values()) < 0.01


def test_log_decrement_of_damped_sine():
    t = np.arange(0.0, 10.0, 1e-3)
    f, sigma = 1.5, 0.4
    y = 1e-3 * np.exp(-sigma * t) * np.sin(2 * math.pi * f * t)
    delta, freq = td.log_decrement(t, y)
    assert freq == pytest.approx(f, rel=0.01)
    assert delta == pytest.approx(sigma / f, rel=0.03)
    grow = 1e-5 * np.exp(0.2 * t) * np.sin(2 * math.pi * f * t)
    assert td.log_decrement(t, grow)[0] < 0


def test_first_peak_and_settled_value():
    t = np.arange(0.0, 2.0, 1e-3)
    y = np.where(t >= 1.0, 0.2 * np.exp(-(t - 1.0) / 0.05), 0.0)
    ts = td.TimeSeries(t, ("P_vsc",), y[:, None])
    pk, tpk = td.first_peak(ts, "P_vsc", 1.0)
    assert pk == pytest.approx(0.2, rel=0.03) and tpk < 2e-3
    assert td.settled_value(ts, "P_vsc", 0.2) == pytest.approx(0.0, abs=1e-4)


def _pencil_poles(t, y, order):
    # matrix-pencil estimate of the continuous-time poles in a uniformly sampled ringdown
    L = len(y) // 2
    H = np.array([y[k:k + L + 1] for k in range(len(y) - L)])
    V = np.linalg.svd(H, full_matrices=False)[2][:order].T
    z = np.linalg.eigvals(np.linalg.pinv(V[:-1]) @ V[1:])
    return np.log(z.astype(complex)) / (t[1] - t[0])


def test_swing_mode_matches_small_signal(eq_no_inner):
    ts = td.integrate(eq_no_inner, td.Scenario(8.0, events=(td.LoadStep(1.0, 0.01),),
                                               record_every=20))
    sel = ts.t >= 1.05
    t, y = ts.t[sel][::10], ts.channel("w_sg")[sel][::10]
    lam = _pencil_poles(t, y - y[-1], 8)
    band = lam[(lam.imag > 2 * math.pi * 0.5) & (lam.imag < 2 * math.pi * 5)]
    assert len(band) == 1
    mode = an.swing_mode(eq_no_inner)
    assert band[0].imag / (2 * math.pi) == pytest.approx(mode.freq_hz, rel=0.05)
    assert band[0].real == pytest.approx(mode.value.real, rel=0.1)


def test_fault_clears_and_recovers():
    ts, met = td.run_case("fault_3lg", gc.no_inner_design())
    # the governor swing is still ringing at 4 s; require a bounded return toward the pre-fault point
    assert np.all(np.isfinite(ts.data))
    assert met["P_vsc_settled"] == pytest.approx(met["P_vsc_pre"], abs=0.05)
    assert np.max(np.abs(ts.window(3.0, 4.0).channel("w_sg") - 1.0)) < 2e-3


def test_unknown_case():
    with pytest.raises(td.ScenarioError):
        td.run_case("brownout", gc.no_inner_design())
