import numpy as np
import pytest

from gfmlab import assembly as asm
from gfmlab import gfc_controls as gc
from gfmlab import lti_core as lti
from gfmlab import network as nw

DESIGNS = {
    "no_inner": gc.no_inner_design(),
    "current_only": gc.current_only_design(),
    "cascaded_d1": gc.cascaded_design(1),
    "cascaded_d2": gc.cascaded_design(2),
    "cascaded_d3": gc.cascaded_design(3),
}


@pytest.fixture(scope="module")
def base_eqs():
    return {k: asm.find_equilibrium(asm.SystemModel(d)) for k, d in DESIGNS.items()}


@pytest.mark.parametrize("name", list(DESIGNS))
def test_equilibrium_residual(base_eqs, name):
    eq = base_eqs[name]
    assert eq.residual < 1e-10
    assert eq.summary["voltages_ok"]
    assert eq.summary["P_vsc"] == pytest.approx(0.5, abs=1e-10)


def test_base_case_sharing(base_eqs):
    s = base_eqs["no_inner"].summary
    # 1 pu load at about 1 pu voltage, the converter dispatched at 0.5 pu
    assert s["P_sg"] == pytest.approx(0.5, abs=0.05)
    assert s["v_sg"] == pytest.approx(1.0, abs=1e-10)


def test_light_load_flat_solution():
    # near-zero load: only the filter capacitor's circulating current remains
    eq = asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()),
                              asm.Dispatch(p_gfc=0.0, load_G=1e-4))
    s = eq.summary
    assert abs(s["P_vsc"]) < 1e-10 and abs(s["P_sg"]) < 2e-3
    assert s["v_pcc"] == pytest.approx(1.0, abs=0.01)
    assert s["v_load"] == pytest.approx(1.0, abs=0.01)


def test_infeasible_dispatch():
    with pytest.raises(asm.InfeasibleDispatch):
        asm.find_equilibrium(asm.SystemModel(gc.no_inner_design()), asm.Dispatch(p_gfc=5.0))


@pytest.mark.parametrize("name", list(DESIGNS))
def test_analytic_matches_numeric(base_eqs, name):
    eq = base_eqs[name]
    a = asm.linearize(eq, method="analytic")
    n = asm.linearize(eq, method="numeric")
    assert asm.compare_linearizations(a, n, 1e-6) < 1e-6


@pytest.mark.parametrize("name", ["no_inner", "current_only", "cascaded_d2"])
def test_infinite_bus_linearization(name):
    eq = asm.find_equilibrium(asm.infinite_bus_model(DESIGNS[name]))
    assert eq.residual < 1e-10
    a = asm.linearize(eq, method="both")
    assert a.nstates == len(eq.model.active_labels)


def test_switched_topology_linearization():
    net = nw.fig21_params()
    m = asm.SystemModel(gc.no_inner_design(), net,
                        switches=nw.SwitchState(z1=(True, False, True), z2=(True, True)))
    eq = asm.find_equilibrium(m)
    asm.linearize(eq, method="both")


def test_frame_rotation_invariance(base_eqs):
    eq0 = base_eqs["no_inner"]
    eq1 = asm.find_equilibrium(eq0.model, asm.Dispatch(angle_ref=0.4))
    for k in ("P_vsc", "Q_vsc", "P_sg", "Q_sg"):
        assert eq1.summary[k] == pytest.approx(eq0.summary[k], abs=1e-9)
    l0 = np.sort_complex(lti.eigen(asm.linearize(eq0)).values)
    l1 = np.sort_complex(lti.eigen(asm.linearize(eq1)).values)
    assert np.max(np.abs(l0 - l1)) < 1e-8


@pytest.mark.parametrize("name", list(DESIGNS))
def test_base_case_stable(base_eqs, name):
    assert np.max(lti.eigen(asm.linearize(base_eqs[name])).values.real) < 0


def test_linearize_requires_settled_point(base_eqs):
    eq = base_eqs["no_inner"]
    bad = asm.Equilibrium(eq.model, eq.x + 0.01, eq.u, 0.1, eq.summary)
    with pytest.raises(asm.AssemblyError):
        asm.linearize(bad)


def test_unstable_case_refuses_verification():
    net = nw.NetworkParams(z1_branches=(complex(0.01, 0.1),), z2_branches=(complex(0.01, 0.1),))
    eq = asm.find_equilibrium(asm.SystemModel(gc.cascaded_design(1), net))
    assert np.max(lti.eigen(asm.linearize(eq)).values.real) > 0
    with pytest.raises(asm.AssemblyError):
        asm.verify_model(eq)
