import math

import numpy as np
import pytest

from gfmlab import analysis as an
from gfmlab import assembly as asm
from gfmlab import gfc_controls as gc
from gfmlab import lti_core as lti


def _eq(design):
    return asm.find_equilibrium(asm.SystemModel(design))


@pytest.fixture(scope="module")
def eq_no_inner():
    return _eq(gc.no_inner_design())


def test_rl_impedance_dq_and_sequence():
    scan = an.to_sequence(an.ImpedanceScan([0.0], an.rl_impedance(complex(0.01, 0.1), [0.0])))
    assert np.allclose(scan.Z_DQ[0], [[0.01, -0.1], [0.1, 0.01]])
    # a symmetric RL branch has no coupling between the sequences
    Zpn = scan.Z_pn[0]
    assert abs(Zpn[0, 1]) < 1e-15 and abs(Zpn[1, 0]) < 1e-15
    assert Zpn[0, 0] == pytest.approx(complex(0.01, 0.1))
    assert Zpn[1, 1] == pytest.approx(complex(0.01, -0.1))


def test_sequence_transform_unitary():
    assert np.max(np.abs(an.A_Z @ an.A_Z.conj().T - np.eye(2))) < 1e-15
    assert np.max(np.abs(an.A_Z @ an.A_Z_INV - np.eye(2))) < 1e-15


def test_sequence_residual(eq_no_inner):
    scan = an.to_sequence(an.dq_impedance(eq_no_inner, an.default_grid(200)))
    assert scan.sequence_residual() < 1e-12


def test_entry_lookup():
    scan = an.ideal_source_scan(0.15, [1.0, 10.0])
    assert np.allclose(scan.entry("QD"), 0.15)
    assert np.allclose(scan.entry("pp").real, 0.0)
    with pytest.raises(an.AnalysisError):
        an.ImpedanceScan([1.0], np.zeros((1, 2, 2))).entry("pp")


def test_passivity_scale_invariance():
    # a positive scale factor never changes the verdict
    scan = an.passive_network_scan(freq=an.default_grid(200))
    Z = np.array(scan.Z_DQ)
    rng = np.random.default_rng(0)
    Z = Z + 0.05 * rng.normal(size=Z.shape)
    r1 = an.passivity_check(an.ImpedanceScan(scan.freq, Z), refine=False, tol=0.0)
    r2 = an.passivity_check(an.ImpedanceScan(scan.freq, 7.5 * Z), refine=False, tol=0.0)
    assert np.array_equal(r1.passive, r2.passive)


def test_passive_network_is_passive():
    rep = an.passivity_check(an.passive_network_scan())
    assert rep.passive.all() and rep.is_passive and not rep.re_zpp_bands


def test_non_passive_band_found_and_refined():
    # negative resistance between 20 and 40 Hz
    def Z_at(f):
        r = -0.01 if 20.0 <= f <= 40.0 else 0.01
        return an.rl_impedance(complex(r, 0.1), [f])[0]

    f = an.default_grid(300)
    scan = an.ImpedanceScan(f, np.array([Z_at(x) for x in f]), evaluator=Z_at)
    rep = an.passivity_check(scan, resolution=0.1)
    assert len(rep.bands) == 1 and len(rep.re_zpp_bands) == 1
    lo, hi = rep.bands[0]
    assert lo == pytest.approx(20.0, abs=0.2) and hi == pytest.approx(40.0, abs=0.2)
    assert rep.bands_intersecting(30.0, 35.0) and not rep.bands_intersecting(100.0, 200.0)


@pytest.mark.parametrize("design,lo,hi", [
    (gc.current_only_design(2000), 10.0, 15.0),
    (gc.cascaded_design(1), 300.0, 600.0),
])
def test_violation_bands_at_2khz(design, lo, hi):
    rep = an.passivity_check(an.dq_impedance(_eq(design)))
    assert any(b[0] <= hi and b[1] >= lo for b in rep.re_zpp_bands)


@pytest.mark.parametrize("design", [gc.no_inner_design(), gc.current_only_design(10000)],
                         ids=lambda d: d.name)
def test_no_re_zpp_violation(design):
    rep = an.passivity_check(an.dq_impedance(_eq(design)))
    assert rep.re_zpp_bands == []


def test_two_mass_swing_pair_identified():
    # relative angle between two inertias: lambda^2 + d lambda + 2k = 0, plus a fast decoy pair
    d, f0 = 0.6, 1.2
    k = ((2 * math.pi * f0) ** 2 + d * d / 4) / 2
    A = np.zeros((5, 5))
    A[:3, :3] = [[0, 1, -1], [-k, -d, 0], [k, 0, -d]]
    A[3:, 3:] = [[-5, 2 * math.pi * 3], [-2 * math.pi * 3, -5]]
    labels = ["gfc.theta", "gfc.plc", "sg.w", "x1", "x2"]
    sol = lti.eigen(A)
    sm = an.identify_swing_mode(sol, lti.participation(A, sol), labels)
    assert sm.found
    assert sm.value.real == pytest.approx(-d / 2)
    assert sm.freq_hz == pytest.approx(f0)
    assert {n for n, _ in sm.top_participants[:3]} == {"gfc.theta", "gfc.plc", "sg.w"}


def test_stiff_source_has_no_swing_mode():
    eq = asm.find_equilibrium(asm.infinite_bus_model(gc.no_inner_design()))
    sm = an.swing_mode(eq)
    assert not sm.found and sm.reason


def test_base_swing_mode(eq_no_inner):
    sm = an.swing_mode(eq_no_inner)
    assert 0.7 <= sm.freq_hz <= 2.0
    top = {n for n, _ in sm.top_participants[:3]}
    assert "sg.w" in top and top & set(an.POWER_LOOP_STATES)


def test_eig_sweep_tracking():
    model = asm.SystemModel(gc.no_inner_design())
    sw = an.eig_sweep(model, np.linspace(0.01, 0.5, 25))
    assert len(sw.swing) == 25 and not sw.truncated
    assert np.all(sw.swing.imag > 0)
    assert np.max(sw.continuity_ratio()) < 0.5
    # the first step reproduces the direct identification
    eq = asm.find_equilibrium(an.line_impedance_path(model, 0.01))
    assert sw.swing[0] == pytest.approx(an.swing_mode(eq).value, abs=1e-9)


def test_line_impedance_path():
    m = an.line_impedance_path(asm.SystemModel(gc.no_inner_design()), 0.3)
    assert m.net.Z_TL1 == pytest.approx(complex(0.03, 0.3))
    assert m.net.Z_TL2 == m.net.Z_TL1


def test_shape_helpers():
    assert an.monotone([1, 2, 3]) and not an.monotone([1, 3, 2])
    assert an.monotone([1, 3, 2, 4], allow=1)
    assert an.turning_shape([3, 2, 1, 2]) == "down-up"
    assert an.turning_shape([1, 2, 1]) == "up-down"
    assert an.turning_shape([1, 2, 3]) == "increasing"
    assert an.turning_shape([1, 3, 1, 3]) == "other"


def test_worker_count_positive():
    assert an.worker_count() >= 1

