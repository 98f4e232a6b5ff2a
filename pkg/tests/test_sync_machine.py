import numpy as np
import pytest
from scipy.optimize import fsolve

from gfmlab import assembly as asm
from gfmlab import gfc_controls as gc
from gfmlab import lti_core as lti
from gfmlab import sync_machine as sm


def test_avr_pi_high_frequency_gain():
    p = sm.AvrParams()
    blk = sm.avr_block(p)
    s = 1j * 1e4
    # remove the measurement lag to expose the PI part
    g = lti.evaluate(blk, s)[0, 0] * (1 + s * p.T)
    assert g == pytest.approx(p.Kp, rel=1e-3)


def test_governor_droop_gain():
    blk = sm.gov_block(sm.GovParams())
    assert lti.dcgain(blk)[0, 0] == pytest.approx(20.0)
    assert (lti.dcgain(blk) @ [0.01])[0] == pytest.approx(0.2)


def test_param_validation():
    with pytest.raises(sm.SgError):
        sm.SgParams(Xd_p=1.5)
    with pytest.raises(sm.SgError):
        sm.GovParams(R=0.0)
    with pytest.raises(sm.SgError):
        sm.AvrParams(T=0.0)


def test_open_circuit_terminal_voltage():
    comp = sm.build_sg(P0=0.0, V_ref=1.0)
    # no current: unknowns are the flux and control states plus the bus voltage
    idx = [0, 1, 2, 3, 6, 7, 8, 9]
    x0 = np.zeros(10)

    def F(z):
        x = x0.copy()
        x[idx] = z[:8]
        u = np.array([z[8], z[9], 0.0, 0.0])
        return comp.derivative(x, u)

    z = fsolve(F, [1, 1, 0, 0, 1, 0.1, 1, 0, 0, 1], xtol=1e-13)
    x = x0.copy()
    x[idx] = z[:8]
    u = np.array([z[8], z[9], 0.0, 0.0])
    assert np.max(np.abs(comp.derivative(x, u))) < 1e-10
    y = comp.outputs(x, u)
    assert abs(y[4] - 1.0) < 1e-8
    assert y[0] == 0.0 and y[1] == 0.0
    assert abs(y[3]) < 1e-12


def _isolated(G=0.5, P0=0.5):
    comp = sm.build_sg(P0=P0, V_ref=1.0)

    def u_of(x):
        y = comp.outputs(x, np.zeros(4))
        return np.array([y[0] / G, y[1] / G, 0.0, 0.0])

    def F(x):
        return comp.derivative(x, u_of(x))

    x = fsolve(F, [1, 1, 0, 0, 0.5, 0.0, 1, 1, 1.5, 0], xtol=1e-13)
    return comp, x, u_of(x)


def test_isolated_machine_on_load_is_stable():
    G = 0.5
    comp, x, u = _isolated(G)
    assert np.max(np.abs(comp.derivative(x, u))) < 1e-10
    S = comp.linearize(x, u)
    load = lti.gain(np.eye(2) / G, ["i_src_D", "i_src_Q"], ["v_n_D", "v_n_Q"])
    closed = lti.interconnect([S, load], [("i_src_D", "i_src_D"), ("i_src_Q", "i_src_Q"),
                                          ("v_n_D", "v_n_D"), ("v_n_Q", "v_n_Q")],
                              ["sg_p_ref", "sg_v_ref"], ["w_sg"])
    assert np.max(lti.eigen(closed).values.real) < 0


def test_energy_balance_at_steady_state():
    comp, x, u = _isolated()
    y = comp.outputs(x, u)
    pm = comp.P0 + x[9]
    i2 = x[4] ** 2 + x[5] ** 2
    assert abs(pm - (y[3] + comp.sg.Ra * i2)) < 1e-8


def test_symbolic_linearization_matches_numeric():
    eq = asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()))
    m = eq.model
    j = m.gfc_comp.nstates + m.net_comp.nstates
    xs = eq.x[j:j + 10]
    Y = eq.outputs()
    us = np.array([Y["v_load_D"], Y["v_load_Q"], 0.0, 0.0])
    comp = m.sg_comp
    S = comp.linearize(xs, us)

    def F(z):
        return np.concatenate([comp.derivative(z[:10], z[10:]), comp.outputs(z[:10], z[10:])])

    z0 = np.concatenate([xs, us])
    h = 1e-6
    J = np.column_stack([(F(z0 + h * e) - F(z0 - h * e)) / (2 * h) for e in np.eye(14)])
    for M, ref in ((S.A, J[:10, :10]), (S.B, J[:10, 10:]), (S.C, J[10:, :10]),
                   (S.D, J[10:, 10:])):
        assert np.max(np.abs(M - ref) / np.maximum(1.0, np.abs(ref))) < 1e-6
