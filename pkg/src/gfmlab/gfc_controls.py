"""Grid-forming converter control blocks for the three inner-loop topologies.

Two independent realizations live here:

* compiled nonlinear kernels (:func:`gfc_eval`) used for time-domain runs and
  numerical Jacobians, and
* LTI block diagrams assembled with :func:`gfmlab.lti_core.interconnect`
  (:func:`build_gfc_linear`), one per topology.

Frame convention: the controller works in a dq frame rotating with the power
loop; ``x_dq = R(theta) x_DQ`` with ``dtheta/dt = w_sg - w_vsc`` (rad/s), and
the q-axis leads the d-axis. The internal voltage reference sits on the d-axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numba
import numpy as np

from . import lti_core as lti
from .lti_core import StateSpaceBlock

OMEGA_B = 100.0 * math.pi


class Topology(str, Enum):
    NO_INNER = "no_inner"
    CURRENT_ONLY = "current_only"
    CASCADED = "cascaded"


class DesignError(ValueError):
    pass


# ------------------------------------------------------------------ params

@dataclass(frozen=True)
class OuterLoopParams:
    Kslope: float = 0.05
    T_QLC: float = 0.5
    R: float = 0.05
    T_inert: float = 0.3
    omega_b: float = OMEGA_B
    v_nom: float = 1.0
    p_ref: float = 0.5
    q_ref: float = 0.0

    def __post_init__(self):
        if self.Kslope < 0:
            raise DesignError("Kslope must be non-negative")
        if not self.R > 0:
            raise DesignError("f-p droop R must be positive")
        if self.T_inert < 0 or self.T_QLC < 0:
            raise DesignError("outer-loop time constants must be non-negative")

    @property
    def H(self) -> float:
        """Emulated inertia constant (s)."""
        return self.T_inert / self.R

    @classmethod
    def from_inertia(cls, H: float, R: float = 0.05, **kw) -> "OuterLoopParams":
        return cls(R=R, T_inert=H * R, **kw)


@dataclass(frozen=True)
class VirtualImpedance:
    R_virt: float = 0.0
    L_virt: float = 0.0  # pu reactance at nominal frequency
    R_virt_trans: float = 0.2
    tau_hp: float = 1.0 / (2 * math.pi * 5.0)

    def __post_init__(self):
        if self.R_virt_trans != 0 and not self.tau_hp > 0:
            raise DesignError("tau_hp must be positive when R_virt_trans is non-zero")


@dataclass(frozen=True)
class VirtualAdmittance:
    R_virt: float = 0.0
    L_virt: float = 0.15

    def __post_init__(self):
        if self.R_virt == 0 and self.L_virt == 0:
            raise DesignError("virtual admittance needs R_virt or L_virt")


@dataclass(frozen=True)
class InnerLoopParams:
    cc_kp: float
    cc_ki: float
    T_m_cc: float  # 0 disables the filter (direct feedforward)
    omega_l: float
    vc_kp: float = 0.0
    vc_ki: float = 0.0
    T_m_vc: float = 0.0
    omega_c: float = 0.0
    tau_cc: float = float("nan")  # design targets, informational
    tau_vc: float = float("nan")

    def check_filter(self, L1: float, Cf: float, omega_ref: float = 1.0, tol: float = 1e-12):
        if abs(self.omega_l - omega_ref * L1) > tol:
            raise DesignError(f"omega_l={self.omega_l} differs from w_ref*L1={omega_ref * L1}")
        if self.vc_kp and abs(self.omega_c - omega_ref * Cf) > tol:
            raise DesignError(f"omega_c={self.omega_c} differs from w_ref*Cf={omega_ref * Cf}")


@dataclass(frozen=True)
class GfcDesign:
    topology: Topology
    outer: OuterLoopParams = field(default_factory=OuterLoopParams)
    zvirt: VirtualImpedance | None = None
    yvirt: VirtualAdmittance | None = None
    inner: InnerLoopParams | None = None
    Td: float = 0.5e-3
    f_sw: float = 2000.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "topology", Topology(self.topology))
        t = self.topology
        if self.zvirt is None:
            raise DesignError(f"{t.value} needs a virtual impedance (transient part at least)")
        if t is Topology.CURRENT_ONLY:
            if self.yvirt is None:
                raise DesignError("current_only needs a virtual admittance")
            if self.zvirt.R_virt or self.zvirt.L_virt:
                raise DesignError("current_only uses only the transient virtual impedance")
        elif self.yvirt is not None:
            raise DesignError(f"{t.value} takes no virtual admittance")
        if t is Topology.NO_INNER:
            if self.inner is not None:
                raise DesignError("no_inner takes no inner-loop parameters")
        else:
            if self.inner is None:
                raise DesignError(f"{t.value} needs inner-loop parameters")
            if t is Topology.CASCADED and not self.inner.vc_kp:
                raise DesignError("cascaded needs voltage-controller gains")
        if self.Td < 0:
            raise DesignError("Td must be non-negative")
        if self.f_sw > 0 and self.Td > 0 and abs(self.Td * self.f_sw - 1.0) > 1e-9:
            raise DesignError(f"single-update PWM requires Td = 1/f_sw "
                              f"(Td={self.Td}, f_sw={self.f_sw})")


# ----------------------------------------------------------------- tuning

def imc_current_gains(L1: float, R1: float, tau: float, omega_b: float = OMEGA_B):
    """PI gains placing the current loop pole at -1/tau on 1/(R1 + s L1/w_b)."""
    return L1 / (omega_b * tau), R1 / tau


# Voltage PI shared by all cascaded designs. Tuned on the loaded cascade
# (tau_cc = 5 ms, T_m_vc = 5 ms, base load behind Z_T1 + Z_TL1) for a 20 ms
# step time constant; the slow integral only trims the static offset left by the
# filtered load-current feedforward. Capacitance-based IMC gains (kp = Cf/(wb tau))
# are far too weak once the grid current is fed forward and are not used.
VC_KP = 0.45
VC_KI = 0.25


# Transient virtual resistance of the current-controlled GFC. Its admittance
# already sets the steady impedance, so only a light high-frequency term is kept;
# 0.2 pu (the no-inner/cascaded value) masks the feedforward-filter resonance
# near 10-15 Hz at 2 kHz.
CO_R_VIRT_TRANS = 0.05


def current_only_design(f_sw: float = 2000.0, tau_cc: float | None = None,
                        outer: OuterLoopParams | None = None, L1: float = 0.2,
                        R1: float = 0.02, T_m_cc: float = 5e-3,
                        R_virt_trans: float = CO_R_VIRT_TRANS, tau_hp: float = 1 / (2 * math.pi * 5),
                        yvirt: VirtualAdmittance | None = None) -> GfcDesign:
    tau_cc = tau_cc if tau_cc is not None else (5e-3 if f_sw <= 2000 else 1e-3)
    outer = outer or OuterLoopParams()
    kp, ki = imc_current_gains(L1, R1, tau_cc, outer.omega_b)
    return GfcDesign(
        Topology.CURRENT_ONLY, outer,
        zvirt=VirtualImpedance(0.0, 0.0, R_virt_trans, tau_hp),
        yvirt=yvirt or VirtualAdmittance(0.0, 0.15),
        inner=InnerLoopParams(kp, ki, T_m_cc, L1, tau_cc=tau_cc),
        Td=1.0 / f_sw, f_sw=f_sw, name=f"current_only_{int(f_sw)}Hz",
    )


def no_inner_design(f_sw: float = 2000.0, outer: OuterLoopParams | None = None,
                    X_virt: float = -0.05, R_virt: float = 0.0, R_virt_trans: float = 0.2,
                    tau_hp: float = 1 / (2 * math.pi * 5)) -> GfcDesign:
    return GfcDesign(
        Topology.NO_INNER, outer or OuterLoopParams(),
        zvirt=VirtualImpedance(R_virt, X_virt, R_virt_trans, tau_hp),
        Td=1.0 / f_sw, f_sw=f_sw, name=f"no_inner_{int(f_sw)}Hz",
    )


# Cascaded control designs: (Td, tau_cc, tau_vc, T_m_cc); T_m_cc=0 -> unfiltered
CASCADED_TABLE = {
    1: (0.5e-3, 5e-3, 20e-3, 5e-3),
    2: (0.1e-3, 1e-3, 20e-3, 5e-3),
    3: (0.1e-3, 1e-3, 20e-3, 0.0),
}


def cascaded_design(design: int = 1, outer: OuterLoopParams | None = None,
                    L1: float = 0.2, R1: float = 0.02, Cf: float = 0.05,
                    X_virt: float = 0.15, R_virt: float = 0.0, R_virt_trans: float = 0.2,
                    tau_hp: float = 1 / (2 * math.pi * 5), T_m_vc: float = 5e-3,
                    T_m_cc: float | None = None, vc_kp: float = VC_KP,
                    vc_ki: float = VC_KI) -> GfcDesign:
    try:
        Td, tau_cc, tau_vc, tm = CASCADED_TABLE[design]
    except KeyError:
        raise DesignError(f"cascaded design must be one of {sorted(CASCADED_TABLE)}") from None
    outer = outer or OuterLoopParams()
    kp, ki = imc_current_gains(L1, R1, tau_cc, outer.omega_b)
    return GfcDesign(
        Topology.CASCADED, outer,
        zvirt=VirtualImpedance(R_virt, X_virt, R_virt_trans, tau_hp),
        inner=InnerLoopParams(kp, ki, tm if T_m_cc is None else T_m_cc, L1, vc_kp, vc_ki,
                              T_m_vc, Cf, tau_cc=tau_cc, tau_vc=tau_vc),
        Td=Td, f_sw=1.0 / Td, name=f"cascaded_d{design}",
    )


def base_design(topology: Topology | str, f_sw: float = 2000.0, design: int | None = None,
                **kw) -> GfcDesign:
    topology = Topology(topology)
    if topology is Topology.NO_INNER:
        return no_inner_design(f_sw, **kw)
    if topology is Topology.CURRENT_ONLY:
        return current_only_design(f_sw, **kw)
    if design is None:
        design = 1 if f_sw <= 2000 else 2
    return cascaded_design(design, **kw)


# ----------------------------------------------------------- static forms

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])  # multiplication by j on (d, q)


def frame_to_dq(x_DQ, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]]) @ np.asarray(x_DQ, float)


def frame_to_DQ(x_dq, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]]) @ np.asarray(x_dq, float)


def t_vsc(x_DQ0, theta0: float) -> np.ndarray:
    """2x3 Jacobian of frame_to_dq w.r.t. (x_D, x_Q, theta)."""
    xD, xQ = x_DQ0
    c, s = math.cos(theta0), math.sin(theta0)
    return np.array([[c, -s, -xD * s - xQ * c],
                     [s, c, xD * c - xQ * s]])


def t_vsc_inv(x_dq0, theta0: float) -> np.ndarray:
    """2x3 Jacobian of frame_to_DQ w.r.t. (x_d, x_q, theta)."""
    xd, xq = x_dq0
    c, s = math.cos(theta0), math.sin(theta0)
    return np.array([[c, s, -xd * s + xq * c],
                     [-s, c, -xd * c - xq * s]])


def power_meas(v_dq, i_dq) -> tuple[float, float]:
    v, i = np.asarray(v_dq, float), np.asarray(i_dq, float)
    return float(v[0] * i[0] + v[1] * i[1]), float(v[1] * i[0] - v[0] * i[1])


def virtual_impedance_drop(zvirt: VirtualImpedance, i_dq) -> np.ndarray:
    """Steady-state drop (R + jX) i; the transient term vanishes at DC."""
    i = np.asarray(i_dq, float)
    return zvirt.R_virt * i + zvirt.L_virt * (J2 @ i)


# ------------------------------------------------------------- LTI blocks

def qlc_block(outer: OuterLoopParams, inp: str = "e_q", out: str = "dv") -> StateSpaceBlock:
    """Kslope / (1 + s T_QLC)."""
    if outer.Kslope == 0:
        return lti.gain([[0.0]], [inp], [out])
    if outer.T_QLC == 0:
        return lti.gain([[outer.Kslope]], [inp], [out])
    return lti.lowpass(outer.T_QLC, inp, out, "qlc", k=outer.Kslope)


def plc_block(outer: OuterLoopParams, inp: str = "e_p", out: str = "dw") -> StateSpaceBlock:
    """R w_b / (1 + s T_inert); output in rad/s."""
    k = outer.R * outer.omega_b
    if outer.T_inert == 0:
        return lti.gain([[k]], [inp], [out])
    return lti.lowpass(outer.T_inert, inp, out, "plc", k=k)


def power_meas_linear(v0_dq, i0_dq, v=("v_d", "v_q"), i=("i_d", "i_q"),
                      out=("P", "Q")) -> StateSpaceBlock:
    vd, vq = v0_dq
    id_, iq = i0_dq
    D = np.array([[id_, iq, vd, vq],
                  [-iq, id_, vq, -vd]])
    return lti.gain(D, [*v, *i], list(out))


def transform_block(M23: np.ndarray, inputs, outputs) -> StateSpaceBlock:
    return lti.gain(M23, list(inputs), list(outputs))


def highpass_pair(tau: float, gain_: float, inp=("i_d", "i_q"), out=("hp_d", "hp_q"),
                  prefix: str = "hp") -> StateSpaceBlock:
    """Diagonal gain * s tau/(1 + s tau) on both axes."""
    a = -1.0 / tau
    return StateSpaceBlock(np.diag([a, a]), np.eye(2) / tau, -gain_ * np.eye(2),
                           gain_ * np.eye(2), [f"{prefix}_d", f"{prefix}_q"], list(inp), list(out))


def virtual_impedance_block(zvirt: VirtualImpedance, inp=("i_d", "i_q"),
                            out=("dvz_d", "dvz_q"), prefix: str = "hp") -> StateSpaceBlock:
    """Delta v = (R + jX) i + R_trans H_hp(s) i as a 2-in/2-out block."""
    static = lti.gain(zvirt.R_virt * np.eye(2) + zvirt.L_virt * J2, list(inp), ["_zs_d", "_zs_q"])
    parts = [static]
    sums_in_d, sums_in_q = ["_zs_d"], ["_zs_q"]
    if zvirt.R_virt_trans != 0:
        parts.append(highpass_pair(zvirt.tau_hp, zvirt.R_virt_trans, inp, ("_zt_d", "_zt_q"), prefix))
        sums_in_d.append("_zt_d")
        sums_in_q.append("_zt_q")
    parts += [lti.summing_junction(sums_in_d, out[0]), lti.summing_junction(sums_in_q, out[1])]
    wiring = [(s, s) for s in sums_in_d + sums_in_q]
    return _wire(parts, wiring, list(inp), list(out))


def _wire(blocks, wiring, ext_in, ext_out) -> StateSpaceBlock:
    return lti.interconnect(blocks, wiring, ext_in, ext_out)


def virtual_admittance_block(yvirt: VirtualAdmittance, omega_b: float = OMEGA_B,
                             inp=("ve_d", "ve_q"), out=("iref_d", "iref_q"),
                             prefix: str = "adm") -> StateSpaceBlock:
    """i* = dv / (R + s L/w_b + j L) with the coupling at nominal frequency."""
    R, X = yvirt.R_virt, yvirt.L_virt
    if X == 0:
        return lti.gain(np.eye(2) / R, list(inp), list(out))
    A = (omega_b / X) * (-R * np.eye(2) - X * J2)
    B = (omega_b / X) * np.eye(2)
    return StateSpaceBlock(A, B, np.eye(2), np.zeros((2, 2)),
                           [f"{prefix}_d", f"{prefix}_q"], list(inp), list(out))


def _ff_pair(T: float, inp, out, prefix: str) -> StateSpaceBlock:
    if T == 0:
        return lti.gain(np.eye(2), list(inp), list(out))
    a = -1.0 / T
    return StateSpaceBlock(np.diag([a, a]), np.eye(2) / T, np.eye(2), np.zeros((2, 2)),
                           [f"{prefix}_d", f"{prefix}_q"], list(inp), list(out))


def current_controller(inner: InnerLoopParams, iref=("iref_d", "iref_q"), i=("i_d", "i_q"),
                       v=("v_d", "v_q"), out=("vcmd_d", "vcmd_q")) -> StateSpaceBlock:
    """PI on (i* - i), +w_l J i decoupling, v_pcc feedforward through 1/(1+s T_m_cc)."""
    # PI integrator on both axes: states integrate the error
    pi = StateSpaceBlock(np.zeros((2, 2)), np.hstack([np.eye(2), -np.eye(2)]),
                         inner.cc_ki * np.eye(2), inner.cc_kp * np.hstack([np.eye(2), -np.eye(2)]),
                         ["cci_d", "cci_q"], [*iref, *i], ["_pi_d", "_pi_q"])
    ff = _ff_pair(inner.T_m_cc, v, ("_ff_d", "_ff_q"), "ffc")
    dec = lti.gain(inner.omega_l * J2, list(i), ["_dc_d", "_dc_q"])
    sd = lti.summing_junction(["_pi_d", "_ff_d", "_dc_d"], out[0])
    sq = lti.summing_junction(["_pi_q", "_ff_q", "_dc_q"], out[1])
    nets = ["_pi_d", "_ff_d", "_dc_d", "_pi_q", "_ff_q", "_dc_q"]
    return _wire([pi, ff, dec, sd, sq], [(s, s) for s in nets], [*iref, *i, *v], list(out))


def voltage_controller(inner: InnerLoopParams, vref=("vr_d", "vr_q"), v=("v_d", "v_q"),
                       iload=("ig_d", "ig_q"), out=("iref_d", "iref_q")) -> StateSpaceBlock:
    """PI on (v* - v_pcc), +w_c J v decoupling, load-current feedforward through 1/(1+s T_m_vc)."""
    pi = StateSpaceBlock(np.zeros((2, 2)), np.hstack([np.eye(2), -np.eye(2)]),
                         inner.vc_ki * np.eye(2), inner.vc_kp * np.hstack([np.eye(2), -np.eye(2)]),
                         ["vci_d", "vci_q"], [*vref, *v], ["_vpi_d", "_vpi_q"])
    ff = _ff_pair(inner.T_m_vc, iload, ("_vff_d", "_vff_q"), "ffv")
    dec = lti.gain(inner.omega_c * J2, list(v), ["_vdc_d", "_vdc_q"])
    sd = lti.summing_junction(["_vpi_d", "_vff_d", "_vdc_d"], out[0])
    sq = lti.summing_junction(["_vpi_q", "_vff_q", "_vdc_q"], out[1])
    nets = ["_vpi_d", "_vff_d", "_vdc_d", "_vpi_q", "_vff_q", "_vdc_q"]
    return _wire([pi, ff, dec, sd, sq], [(s, s) for s in nets], [*vref, *v, *iload], list(out))


# ------------------------------------------------------ compiled kernel

# parameter vector layout
P_TOPO, P_KSLOPE, P_TQLC, P_R, P_TINERT, P_WB, P_VNOM, P_PREF, P_QREF = range(9)
P_RV, P_XV, P_RT, P_TAUHP, P_RY, P_XY = range(9, 15)
P_CCKP, P_CCKI, P_TMCC, P_WL, P_VCKP, P_VCKI, P_TMVC, P_WC = range(15, 23)
P_PADE = 23  # A (9, row-major), B (3), C (3), D (1)
N_PARAMS = P_PADE + 16

# state-offset vector layout (-1 = absent)
O_TH, O_QLC, O_PLC, O_HP, O_ADM, O_VCI, O_FFV, O_CCI, O_FFC, O_PADE = range(10)

GFC_INPUTS = ("i_vsc_D", "i_vsc_Q", "v_pcc_D", "v_pcc_Q", "i_g_D", "i_g_Q", "w_sg",
              "p_ref", "q_ref")
GFC_OUTPUTS = ("v_conv_D", "v_conv_Q", "w_vsc", "theta", "P", "Q")
TOPO_CODE = {Topology.NO_INNER: 0, Topology.CURRENT_ONLY: 1, Topology.CASCADED: 2}


@numba.njit(cache=True)
def gfc_eval(x, u, p, off, dx, y):
    """State derivative and outputs of one GFC (in place)."""
    topo = int(p[P_TOPO])
    wb = p[P_WB]
    th = x[off[O_TH]]
    c = math.cos(th)
    s = math.sin(th)
    iD, iQ, vD, vQ, gD, gQ, wsg = u[0], u[1], u[2], u[3], u[4], u[5], u[6]
    i_d = c * iD - s * iQ
    i_q = s * iD + c * iQ
    v_d = c * vD - s * vQ
    v_q = s * vD + c * vQ
    g_d = c * gD - s * gQ
    g_q = s * gD + c * gQ

    P = v_d * i_d + v_q * i_q
    Q = v_q * i_d - v_d * i_q

    # reactive power loop
    eq = p[P_QREF] + u[8] - Q
    k = off[O_QLC]
    if k >= 0:
        dv = x[k]
        dx[k] = (p[P_KSLOPE] * eq - dv) / p[P_TQLC]
    else:
        dv = p[P_KSLOPE] * eq
    # active power loop
    ep = p[P_PREF] + u[7] - P
    k = off[O_PLC]
    if k >= 0:
        dw = x[k]
        dx[k] = (p[P_R] * wb * ep - dw) / p[P_TINERT]
    else:
        dw = p[P_R] * wb * ep
    dx[off[O_TH]] = wb * wsg - (wb + dw)

    vr_d = p[P_VNOM] + dv
    vr_q = 0.0

    # current seen by the virtual impedance
    if topo == 2:
        z_d = g_d
        z_q = g_q
    else:
        z_d = i_d
        z_q = i_q
    hp_d = 0.0
    hp_q = 0.0
    k = off[O_HP]
    if k >= 0:
        hp_d = z_d - x[k]
        hp_q = z_q - x[k + 1]
        dx[k] = hp_d / p[P_TAUHP]
        dx[k + 1] = hp_q / p[P_TAUHP]
    rt = p[P_RT]

    if topo == 0:
        vc_d = vr_d - (p[P_RV] * z_d - p[P_XV] * z_q) - rt * hp_d
        vc_q = vr_q - (p[P_RV] * z_q + p[P_XV] * z_d) - rt * hp_q
    else:
        if topo == 1:
            ve_d = vr_d - rt * hp_d - v_d
            ve_q = vr_q - rt * hp_q - v_q
            k = off[O_ADM]
            ry = p[P_RY]
            xy = p[P_XY]
            if k >= 0:
                ir_d = x[k]
                ir_q = x[k + 1]
                dx[k] = wb / xy * (ve_d - ry * ir_d + xy * ir_q)
                dx[k + 1] = wb / xy * (ve_q - ry * ir_q - xy * ir_d)
            else:
                ir_d = ve_d / ry
                ir_q = ve_q / ry
        else:
            vr2_d = vr_d - (p[P_RV] * z_d - p[P_XV] * z_q) - rt * hp_d
            vr2_q = vr_q - (p[P_RV] * z_q + p[P_XV] * z_d) - rt * hp_q
            ev_d = vr2_d - v_d
            ev_q = vr2_q - v_q
            k = off[O_VCI]
            dx[k] = ev_d
            dx[k + 1] = ev_q
            k2 = off[O_FFV]
            if k2 >= 0:
                fi_d = x[k2]
                fi_q = x[k2 + 1]
                dx[k2] = (g_d - fi_d) / p[P_TMVC]
                dx[k2 + 1] = (g_q - fi_q) / p[P_TMVC]
            else:
                fi_d = g_d
                fi_q = g_q
            wc = p[P_WC]
            ir_d = p[P_VCKP] * ev_d + p[P_VCKI] * x[k] + fi_d - wc * v_q
            ir_q = p[P_VCKP] * ev_q + p[P_VCKI] * x[k + 1] + fi_q + wc * v_d
        # current controller
        e_d = ir_d - i_d
        e_q = ir_q - i_q
        k = off[O_CCI]
        dx[k] = e_d
        dx[k + 1] = e_q
        k2 = off[O_FFC]
        if k2 >= 0:
            fv_d = x[k2]
            fv_q = x[k2 + 1]
            dx[k2] = (v_d - fv_d) / p[P_TMCC]
            dx[k2 + 1] = (v_q - fv_q) / p[P_TMCC]
        else:
            fv_d = v_d
            fv_q = v_q
        wl = p[P_WL]
        vc_d = p[P_CCKP] * e_d + p[P_CCKI] * x[k] + fv_d - wl * i_q
        vc_q = p[P_CCKP] * e_q + p[P_CCKI] * x[k + 1] + fv_q + wl * i_d

    # modulation delay on each axis
    k = off[O_PADE]
    if k >= 0:
        a = P_PADE
        dd = p[a + 15]
        o_d = dd * vc_d
        o_q = dd * vc_q
        for r in range(3):
            acc_d = p[a + 9 + r] * vc_d
            acc_q = p[a + 9 + r] * vc_q
            for cidx in range(3):
                acc_d += p[a + 3 * r + cidx] * x[k + cidx]
                acc_q += p[a + 3 * r + cidx] * x[k + 3 + cidx]
            dx[k + r] = acc_d
            dx[k + 3 + r] = acc_q
            o_d += p[a + 12 + r] * x[k + r]
            o_q += p[a + 12 + r] * x[k + 3 + r]
    else:
        o_d = vc_d
        o_q = vc_q

    y[0] = c * o_d + s * o_q
    y[1] = -s * o_d + c * o_q
    y[2] = (wb + dw) / wb
    y[3] = th
    y[4] = P
    y[5] = Q


def _layout(design: GfcDesign) -> tuple[np.ndarray, list[str]]:
    t = design.topology
    o = design.outer
    off = -np.ones(10, dtype=np.int64)
    labels: list[str] = []

    def take(slot, names):
        off[slot] = len(labels)
        labels.extend(names)

    take(O_TH, ["theta"])
    if o.Kslope > 0 and o.T_QLC > 0:
        take(O_QLC, ["qlc"])
    if o.T_inert > 0:
        take(O_PLC, ["plc"])
    if design.zvirt.R_virt_trans != 0:
        take(O_HP, ["hp_d", "hp_q"])
    if t is Topology.CURRENT_ONLY and design.yvirt.L_virt != 0:
        take(O_ADM, ["adm_d", "adm_q"])
    if t is Topology.CASCADED:
        take(O_VCI, ["vci_d", "vci_q"])
        if design.inner.T_m_vc > 0:
            take(O_FFV, ["ffv_d", "ffv_q"])
    if t is not Topology.NO_INNER:
        take(O_CCI, ["cci_d", "cci_q"])
        if design.inner.T_m_cc > 0:
            take(O_FFC, ["ffc_d", "ffc_q"])
    if design.Td > 0:
        take(O_PADE, ["pade_d1", "pade_d2", "pade_d3", "pade_q1", "pade_q2", "pade_q3"])
    return off, labels


def pack_params(design: GfcDesign) -> np.ndarray:
    o, z = design.outer, design.zvirt
    p = np.zeros(N_PARAMS)
    p[P_TOPO] = TOPO_CODE[design.topology]
    p[P_KSLOPE], p[P_TQLC], p[P_R], p[P_TINERT] = o.Kslope, o.T_QLC, o.R, o.T_inert
    p[P_WB], p[P_VNOM], p[P_PREF], p[P_QREF] = o.omega_b, o.v_nom, o.p_ref, o.q_ref
    p[P_RV], p[P_XV], p[P_RT], p[P_TAUHP] = z.R_virt, z.L_virt, z.R_virt_trans, z.tau_hp
    if design.yvirt is not None:
        p[P_RY], p[P_XY] = design.yvirt.R_virt, design.yvirt.L_virt
    if design.inner is not None:
        n = design.inner
        p[P_CCKP], p[P_CCKI], p[P_TMCC], p[P_WL] = n.cc_kp, n.cc_ki, n.T_m_cc, n.omega_l
        p[P_VCKP], p[P_VCKI], p[P_TMVC], p[P_WC] = n.vc_kp, n.vc_ki, n.T_m_vc, n.omega_c
    A, B, C, D = lti.pade3_coefficients(design.Td)
    p[P_PADE:P_PADE + 9] = A.ravel()
    p[P_PADE + 9:P_PADE + 12] = B
    p[P_PADE + 12:P_PADE + 15] = C
    p[P_PADE + 15] = D
    return p


@dataclass(frozen=True)
class GfcComponent:
    """Nonlinear GFC: pure (state, inputs, t) -> derivative."""

    design: GfcDesign
    params: np.ndarray
    offsets: np.ndarray
    state_labels: tuple[str, ...]
    input_labels: tuple[str, ...] = GFC_INPUTS
    output_labels: tuple[str, ...] = GFC_OUTPUTS

    @property
    def nstates(self) -> int:
        return len(self.state_labels)

    def derivative(self, x, u, t: float = 0.0) -> np.ndarray:
        dx = np.zeros(self.nstates)
        y = np.zeros(len(GFC_OUTPUTS))
        gfc_eval(np.asarray(x, float), np.asarray(u, float), self.params, self.offsets, dx, y)
        return dx

    def outputs(self, x, u) -> np.ndarray:
        dx = np.zeros(self.nstates)
        y = np.zeros(len(GFC_OUTPUTS))
        gfc_eval(np.asarray(x, float), np.asarray(u, float), self.params, self.offsets, dx, y)
        return y


def build_gfc(design: GfcDesign) -> GfcComponent:
    off, labels = _layout(design)
    return GfcComponent(design, pack_params(design), off, tuple(labels))


def with_params(comp: GfcComponent, **outer_changes) -> GfcComponent:
    return build_gfc(replace(comp.design, outer=replace(comp.design.outer, **outer_changes)))


# ------------------------------------------------------- linear assembly

@dataclass(frozen=True)
class GfcOperatingPoint:
    """Steady values the GFC is linearized around (network DQ frame)."""

    theta: float
    i_vsc: tuple[float, float]
    v_pcc: tuple[float, float]
    v_conv: tuple[float, float]
    i_g: tuple[float, float] = (0.0, 0.0)


def build_gfc_linear(design: GfcDesign, op: GfcOperatingPoint,
                     freeze_outer: bool = False) -> StateSpaceBlock:
    """Small-signal GFC assembled block by block for the given topology.

    ``freeze_outer`` cuts the measured powers from the outer loops, leaving
    the converter as a voltage source behind its inner dynamics.
    """
    t = design.topology
    o = design.outer
    th0 = op.theta
    i0 = frame_to_dq(op.i_vsc, th0)
    v0 = frame_to_dq(op.v_pcc, th0)
    g0 = frame_to_dq(op.i_g, th0)
    # the delay has unit DC gain, so its steady output equals the command
    vc0 = frame_to_dq(op.v_conv, th0)

    blocks = [
        transform_block(t_vsc(op.i_vsc, th0), ["i_vsc_D", "i_vsc_Q", "theta"], ["i_d", "i_q"]),
        transform_block(t_vsc(op.v_pcc, th0), ["v_pcc_D", "v_pcc_Q", "theta"], ["v_d", "v_q"]),
        power_meas_linear(v0, i0),
        lti.summing_junction(["p_ref", "P_fb"], "e_p", [1.0, -1.0]),
        lti.summing_junction(["q_ref", "Q_fb"], "e_q", [1.0, -1.0]),
        lti.gain(np.zeros((2, 2)) if freeze_outer else np.eye(2), ["P", "Q"], ["P_fb", "Q_fb"]),
        plc_block(o),
        qlc_block(o),
        # dtheta/dt = w_b w_sg - dw
        StateSpaceBlock([[0.0]], [[o.omega_b, -1.0]], [[1.0]], [[0.0, 0.0]],
                        ["theta"], ["w_sg", "dw"], ["theta"]),
        lti.gain([[1.0 / o.omega_b]], ["dw"], ["w_vsc"]),
    ]
    wiring = [("i_d", "i_d"), ("i_q", "i_q"), ("v_d", "v_d"), ("v_q", "v_q"),
              ("P", "P"), ("Q", "Q"), ("P_fb", "P_fb"), ("Q_fb", "Q_fb"), ("e_p", "e_p"), ("e_q", "e_q"), ("dw", "dw"),
              ("theta", "theta")]
    zv = design.zvirt

    if t is Topology.NO_INNER:
        blocks.append(virtual_impedance_block(zv, ("i_d", "i_q"), ("dvz_d", "dvz_q")))
        blocks.append(lti.summing_junction(["dv", "dvz_d"], "vcmd_d", [1.0, -1.0]))
        blocks.append(lti.gain([[-1.0]], ["dvz_q"], ["vcmd_q"]))
        wiring += [("dv", "dv"), ("dvz_d", "dvz_d"), ("dvz_q", "dvz_q")]
    elif t is Topology.CURRENT_ONLY:
        if zv.R_virt_trans != 0:
            blocks.append(highpass_pair(zv.tau_hp, zv.R_virt_trans, ("i_d", "i_q"), ("dvz_d", "dvz_q")))
        else:
            blocks.append(lti.gain(np.zeros((2, 2)), ["i_d", "i_q"], ["dvz_d", "dvz_q"]))
        blocks.append(lti.summing_junction(["dv", "dvz_d", "v_d"], "ve_d", [1.0, -1.0, -1.0]))
        blocks.append(lti.summing_junction(["dvz_q", "v_q"], "ve_q", [-1.0, -1.0]))
        blocks.append(virtual_admittance_block(design.yvirt, o.omega_b))
        blocks.append(current_controller(design.inner))
        wiring += [("dv", "dv"), ("dvz_d", "dvz_d"), ("dvz_q", "dvz_q"), ("ve_d", "ve_d"),
                   ("ve_q", "ve_q"), ("iref_d", "iref_d"), ("iref_q", "iref_q")]
    else:
        blocks.append(transform_block(t_vsc(op.i_g, th0), ["i_g_D", "i_g_Q", "theta"],
                                      ["ig_d", "ig_q"]))
        blocks.append(virtual_impedance_block(zv, ("ig_d", "ig_q"), ("dvz_d", "dvz_q")))
        blocks.append(lti.summing_junction(["dv", "dvz_d"], "vr_d", [1.0, -1.0]))
        blocks.append(lti.gain([[-1.0]], ["dvz_q"], ["vr_q"]))
        blocks.append(voltage_controller(design.inner))
        blocks.append(current_controller(design.inner))
        wiring += [("ig_d", "ig_d"), ("ig_q", "ig_q"), ("dv", "dv"), ("dvz_d", "dvz_d"),
                   ("dvz_q", "dvz_q"), ("vr_d", "vr_d"), ("vr_q", "vr_q"),
                   ("iref_d", "iref_d"), ("iref_q", "iref_q")]

    blocks.append(lti.pade3(design.Td, "vcmd_d", "vo_d", "pade_d"))
    blocks.append(lti.pade3(design.Td, "vcmd_q", "vo_q", "pade_q"))
    blocks.append(transform_block(t_vsc_inv(vc0, th0), ["vo_d", "vo_q", "theta"],
                                  ["v_conv_D", "v_conv_Q"]))
    wiring += [("vcmd_d", "vcmd_d"), ("vcmd_q", "vcmd_q"), ("vo_d", "vo_d"), ("vo_q", "vo_q")]

    used_inputs = {lab for b in blocks for lab in b.input_labels}
    ext_in = [s for s in GFC_INPUTS if s in used_inputs]
    blk = _wire(blocks, wiring, ext_in, list(GFC_OUTPUTS))
    blk = expand_inputs(blk, GFC_INPUTS)
    _, order = _layout(design)
    return blk.reorder_states(order)


def expand_inputs(block: StateSpaceBlock, labels) -> StateSpaceBlock:
    """Reindex inputs to ``labels``; missing ones get zero columns."""
    m = len(labels)
    B = np.zeros((block.nstates, m))
    D = np.zeros((len(block.output_labels), m))
    for j, lab in enumerate(labels):
        if lab in block.input_labels:
            k = block.input_index(lab)
            B[:, j] = block.B[:, k]
            D[:, j] = block.D[:, k]
    return StateSpaceBlock(block.A, B, block.C, D, block.state_labels, labels, block.output_labels)
