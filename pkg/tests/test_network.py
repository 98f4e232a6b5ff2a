import numpy as np
import pytest

from gfmlab import assembly as asm
from gfmlab import gfc_controls as gc
from gfmlab import lti_core as lti
from gfmlab import network as nw


def test_base_state_count():
    # L1 and Z1 branches (2 states each) plus the filter capacitor; Z2 sits in the SG stator
    net = nw.NetworkParams()
    comp = nw.build_network_component(net)
    assert comp.nstates == 2 * 2 + 2 * 1
    assert nw.build_network(net).nstates == 6
    dev = nw.build_network_component(net, template="device")
    assert dev.nstates == 4


def test_rl_branch_dc_and_ac_current():
    R, X = 0.02, 0.2
    blk = nw.rl_branch_block(R, X, "i", w0=0.0, w_input=None)
    assert np.allclose(lti.dcgain(blk) @ [1, 0, 0, 0], (1 / R, 0.0))
    blk = nw.rl_branch_block(R, X, "i", w0=1.0, w_input=None)
    i = lti.dcgain(blk) @ [1, 0, 0, 0]
    ref = 1 / complex(R, X)
    assert np.allclose(i, (ref.real, ref.imag))


def test_branch_impedance_dq():
    z = complex(0.01, 0.1)
    Z = nw.branch_impedance_dq(z)
    assert np.allclose(Z, [[0.01, -0.1], [0.1, 0.01]])


def test_parallel_and_table_defaults():
    assert nw.parallel([0.2j, 0.2j]) == pytest.approx(0.1j)
    net = nw.NetworkParams()
    assert net.z1 == (complex(0.01, 0.2),)
    assert net.z2 == (complex(0.02, 0.2),)
    assert net.G_load == 1.0


def test_fig21_corridors():
    net = nw.fig21_params()
    sw = nw.SwitchState(z1=(False, False, True), z2=(True, False))
    z1 = nw.parallel([z for z, f in zip(net.z1, sw.z1) if f])
    assert abs(z1) == pytest.approx(abs(complex(0.02, 0.2)))
    # closing the 0.3 and 0.6 branches lowers Z1 to 0.1 pu
    s2, _ = nw.apply_switch(net, sw, "sg", "z1", 0, True)
    s2, _ = nw.apply_switch(net, s2, "sg", "z1", 1, True)
    z1 = nw.parallel([z for z, f in zip(net.z1, s2.z1) if f])
    assert z1.imag == pytest.approx(0.1)
    # swapping to the 0.6 branch alone raises Z1 to 0.6 pu and drops the old current
    s3, rule = nw.apply_switch(net, sw, "sg", "z1", 1, True)
    s3, rule = nw.apply_switch(net, s3, "sg", "z1", 2, False)
    assert s3.z1 == (False, True, False)
    assert rule["zero_z1"] == [2]


def test_z2_opening_current_scale():
    net = nw.fig21_params()
    sw = nw.SwitchState(z1=(False, False, True), z2=(True, True))
    _, rule = nw.apply_switch(net, sw, "sg", "z2", 1, False)
    assert rule["z2_current_scale"] == pytest.approx(0.5)
    assert nw.z2_equivalent(net, sw) == pytest.approx(net.z2[0] / 2)


def test_disconnection_rejected():
    net = nw.NetworkParams()
    with pytest.raises(nw.NetworkError):
        nw.apply_switch(net, nw.SwitchState(), "sg", "z1", 0, False)
    with pytest.raises(nw.NetworkError):
        nw.NetworkParams(Z_TL1=complex(0.01, -0.1))
    with pytest.raises(nw.NetworkError):
        nw.NetworkParams(Z_Load=0.0)


def test_power_balance_at_steady_state():
    eq = asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()))
    m, Y = eq.model, eq.outputs()
    net = m.net
    ivsc = complex(Y["i_vsc_D"], Y["i_vsc_Q"])
    ig = complex(Y["i_g_D"], Y["i_g_Q"])
    vl = complex(Y["v_load_D"], Y["v_load_Q"])
    j = m.gfc_comp.nstates + m.net_comp.nstates
    isg = complex(eq.x[j + 4], eq.x[j + 5])
    losses = (net.Rf * abs(ivsc - ig) ** 2 + net.z1[0].real * abs(ig) ** 2
              + net.z2[0].real * abs(isg) ** 2)
    load = m.load_conductance * abs(vl) ** 2
    assert abs(Y["P_vsc"] + Y["P_sg"] - load - losses) < 1e-8


def test_linear_network_matches_kernel():
    # the linear block and the compiled kernel agree on a small perturbation
    eq = asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()))
    lin = asm.linearize(eq, method="both")
    assert lin.nstates == len(eq.model.active_labels)
