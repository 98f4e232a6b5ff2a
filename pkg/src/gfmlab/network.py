"""DQ-frame model of the passive network around the converter.

Layout (template ``sg``)::

    v_conv --L1,R1--+-- PCC --[Z1 bundle]-- load bus --(Z2 merged into SG)-- SG
                    |                          |
                   Rf,Cf                     G_load

Every quantity is per unit with time in seconds; the DQ frame rotates at the
speed ``w`` (pu), supplied as an input (the SG speed, or 1 for a stiff grid).
RL branches obey ``(X/w_b) di/dt = v_a - v_b - R i - w X J i`` and the filter
capacitor ``(C/w_b) dv/dt = i - w C J v``.

The Z1 bundle holds parallel branches that can be switched independently.
An open branch carries no current and its states are frozen at zero. The
load bus is algebraic, ``v_load = (sum i_Z1 + i_src) / G_load``. A test
current ``i_inj`` can be injected into the PCC node; the grid-side current
seen by the converter is ``i_g = sum i_Z1 - i_inj``.
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
J2 = np.array([[0.0, -1.0], [1.0, 0.0]])
MAX_BRANCHES = 6
G_FAULT_DEFAULT = 1.0 / 0.001


class NetworkError(ValueError):
    pass


class Template(str, Enum):
    SG = "sg"
    INFINITE_BUS = "infinite_bus"
    DEVICE = "device"


def parallel(zs) -> complex:
    zs = list(zs)
    if not zs:
        raise NetworkError("no closed branch")
    return 1.0 / sum(1.0 / complex(z) for z in zs)


@dataclass(frozen=True)
class NetworkParams:
    L1: float = 0.2
    R1: float = 0.02
    Rf: float = 0.3
    Cf: float = 0.05
    Z_TL1: complex = 0.01 + 0.1j
    Z_TL2: complex = 0.02 + 0.2j
    Z_T1: complex = 0.1j
    Z_Load: float = 1.0
    omega_b: float = OMEGA_B
    z1_branches: tuple[complex, ...] | None = None  # None -> (Z_T1 + Z_TL1,)
    z2_branches: tuple[complex, ...] | None = None  # None -> (Z_TL2,)

    def __post_init__(self):
        if not (self.L1 > 0 and self.Cf > 0):
            raise NetworkError("L1 and Cf must be positive")
        if self.R1 < 0 or self.Rf < 0:
            raise NetworkError("filter resistances must be non-negative")
        if not self.Z_Load > 0:
            raise NetworkError("load resistance must be positive")
        for z in self.z1 + self.z2:
            if not (complex(z).imag > 0 and complex(z).real >= 0):
                raise NetworkError(f"branch impedance {z} must be inductive with R >= 0")
        if len(self.z1) > MAX_BRANCHES:
            raise NetworkError(f"at most {MAX_BRANCHES} Z1 branches")

    @property
    def z1(self) -> tuple[complex, ...]:
        if self.z1_branches is None:
            return (complex(self.Z_T1) + complex(self.Z_TL1),)
        return tuple(complex(z) for z in self.z1_branches)

    @property
    def z2(self) -> tuple[complex, ...]:
        if self.z2_branches is None:
            return (complex(self.Z_TL2),)
        return tuple(complex(z) for z in self.z2_branches)

    @property
    def G_load(self) -> float:
        return 1.0 / self.Z_Load


def fig21_params(base: NetworkParams | None = None, x_over_r: float = 10.0) -> NetworkParams:
    """Switchable corridors: Z1 = 0.3 || 0.6 || 0.2 and Z2 = 0.2 || 0.2 (pu)."""
    base = base or NetworkParams()

    def z(x):
        return complex(x / x_over_r, x)

    return replace(base, z1_branches=(z(0.3), z(0.6), z(0.2)), z2_branches=(z(0.2), z(0.2)))


@dataclass(frozen=True)
class SwitchState:
    """Branch flags; ``None`` means "first branch closed, others open"."""

    z1: tuple[bool, ...] | None = None
    z2: tuple[bool, ...] | None = None
    extra_load_G: float = 0.0  # switched-load branch
    fault_bus: str | None = None  # "load" or "pcc"
    fault_G: float = G_FAULT_DEFAULT

    def resolved(self, net: NetworkParams) -> "SwitchState":
        z1 = self.z1 if self.z1 is not None else (True,) + (False,) * (len(net.z1) - 1)
        z2 = self.z2 if self.z2 is not None else (True,) + (False,) * (len(net.z2) - 1)
        if len(z1) != len(net.z1) or len(z2) != len(net.z2):
            raise NetworkError("switch flags must match the branch lists")
        if self.fault_bus not in (None, "load", "pcc"):
            raise NetworkError(f"unknown fault bus {self.fault_bus!r}")
        return replace(self, z1=tuple(bool(b) for b in z1), z2=tuple(bool(b) for b in z2))


def check_connected(net: NetworkParams, sw: SwitchState, template: Template) -> None:
    sw = sw.resolved(net)
    if template is not Template.DEVICE and not any(sw.z1):
        raise NetworkError("opening every Z1 branch disconnects the converter from the grid")
    if template is Template.SG and not any(sw.z2):
        raise NetworkError("opening every Z2 branch disconnects the generator")


def apply_switch(net: NetworkParams, sw: SwitchState, template: Template | str,
                 corridor: str, branch: int, close: bool) -> tuple[SwitchState, dict]:
    """New switch state plus the rule for carrying states across the event.

    Returned mapping: ``{"zero_z1": [branch indices forced to zero],
    "z2_current_scale": factor on the SG stator current}``. Closing keeps every
    current continuous; opening a Z1 branch drops that branch's current
    (instantaneous interruption). Opening a Z2 branch keeps the share of the
    remaining branches, assuming the pre-event split is in steady state.
    """
    template = Template(template)
    sw = sw.resolved(net)
    flags = list(sw.z1 if corridor == "z1" else sw.z2)
    zs = net.z1 if corridor == "z1" else net.z2
    if corridor not in ("z1", "z2") or not 0 <= branch < len(flags):
        raise NetworkError(f"no branch {corridor}[{branch}]")
    old = list(flags)
    flags[branch] = bool(close)
    new = replace(sw, **{corridor: tuple(flags)})
    check_connected(net, new, template)
    rule = {"zero_z1": [], "z2_current_scale": 1.0}
    if not close and old[branch]:
        if corridor == "z1":
            rule["zero_z1"] = [branch]
        else:
            y_old = sum(1 / z for z, f in zip(zs, old) if f)
            y_new = sum(1 / z for z, f in zip(zs, flags) if f)
            rule["z2_current_scale"] = abs(y_new / y_old)
    return new, rule


def z2_equivalent(net: NetworkParams, sw: SwitchState) -> complex:
    sw = sw.resolved(net)
    return parallel([z for z, f in zip(net.z2, sw.z2) if f])


# ----------------------------------------------------------- compiled kernel

# parameter layout
NP_WB, NP_R1, NP_X1, NP_RF, NP_CF, NP_TEMPLATE, NP_NB = range(7)
NP_BR = 7  # then (R, X, on) per branch
N_NET_PARAMS = NP_BR + 3 * MAX_BRANCHES
TEMPLATE_CODE = {Template.SG: 0, Template.INFINITE_BUS: 1, Template.DEVICE: 2}

# algebraic outputs
NY_IVSC, NY_VPCC, NY_IG, NY_VLOAD = 0, 2, 4, 6
N_NET_Y = 8


@numba.njit(cache=True)
def net_alg(x, i_src_D, i_src_Q, e_D, e_Q, i_inj_D, i_inj_Q, G_load, G_pcc, p, y):
    """Node voltages and branch currents that do not need the converter voltage."""
    nb = int(p[NP_NB])
    tmpl = int(p[NP_TEMPLATE])
    sD = 0.0
    sQ = 0.0
    for k in range(nb):
        sD += x[4 + 2 * k]
        sQ += x[5 + 2 * k]
    # grid-side current leaving the PCC, the injection counted on the grid side
    gD = sD - i_inj_D
    gQ = sQ - i_inj_Q
    den = 1.0 + p[NP_RF] * G_pcc
    y[NY_VPCC] = (x[2] + p[NP_RF] * (x[0] - gD)) / den
    y[NY_VPCC + 1] = (x[3] + p[NP_RF] * (x[1] - gQ)) / den
    y[NY_IVSC] = x[0]
    y[NY_IVSC + 1] = x[1]
    y[NY_IG] = gD
    y[NY_IG + 1] = gQ
    if tmpl == 0:
        y[NY_VLOAD] = (sD + i_src_D) / G_load
        y[NY_VLOAD + 1] = (sQ + i_src_Q) / G_load
    elif tmpl == 1:
        y[NY_VLOAD] = e_D
        y[NY_VLOAD + 1] = e_Q
    else:
        y[NY_VLOAD] = 0.0
        y[NY_VLOAD + 1] = 0.0


@numba.njit(cache=True)
def net_deriv(x, y, v_conv_D, v_conv_Q, w, G_pcc, p, dx):
    wb = p[NP_WB]
    nb = int(p[NP_NB])
    x1 = p[NP_X1]
    r1 = p[NP_R1]
    cf = p[NP_CF]
    vpD = y[NY_VPCC]
    vpQ = y[NY_VPCC + 1]
    dx[0] = wb / x1 * (v_conv_D - vpD - r1 * x[0] + w * x1 * x[1])
    dx[1] = wb / x1 * (v_conv_Q - vpQ - r1 * x[1] - w * x1 * x[0])
    icD = x[0] - y[NY_IG] - G_pcc * vpD
    icQ = x[1] - y[NY_IG + 1] - G_pcc * vpQ
    dx[2] = wb / cf * (icD + w * cf * x[3])
    dx[3] = wb / cf * (icQ - w * cf * x[2])
    vlD = y[NY_VLOAD]
    vlQ = y[NY_VLOAD + 1]
    for k in range(nb):
        b = NP_BR + 3 * k
        j = 4 + 2 * k
        if p[b + 2] > 0.5:
            r = p[b]
            xx = p[b + 1]
            dx[j] = wb / xx * (vpD - vlD - r * x[j] + w * xx * x[j + 1])
            dx[j + 1] = wb / xx * (vpQ - vlQ - r * x[j + 1] - w * xx * x[j])
        else:
            dx[j] = 0.0
            dx[j + 1] = 0.0


@dataclass(frozen=True)
class NetworkComponent:
    params: NetworkParams
    switches: SwitchState
    template: Template
    kernel_params: np.ndarray
    state_labels: tuple[str, ...]

    @property
    def nstates(self) -> int:
        return len(self.state_labels)

    def active_states(self) -> list[str]:
        """Labels of states that are dynamic in the current topology."""
        sw = self.switches
        out = list(self.state_labels[:4])
        if self.template is not Template.DEVICE:
            for k, on in enumerate(sw.z1):
                if on:
                    out += [f"iT{k}_D", f"iT{k}_Q"]
        return out

    def with_switches(self, sw: SwitchState) -> "NetworkComponent":
        return build_network_component(self.params, sw, self.template)


def build_network_component(params: NetworkParams, switches: SwitchState | None = None,
                            template: Template | str = Template.SG) -> NetworkComponent:
    template = Template(template)
    sw = (switches or SwitchState()).resolved(params)
    check_connected(params, sw, template)
    p = np.zeros(N_NET_PARAMS)
    p[NP_WB], p[NP_R1], p[NP_X1] = params.omega_b, params.R1, params.L1
    p[NP_RF], p[NP_CF], p[NP_TEMPLATE] = params.Rf, params.Cf, TEMPLATE_CODE[template]
    labels = ["i1_D", "i1_Q", "vc_D", "vc_Q"]
    if template is not Template.DEVICE:
        p[NP_NB] = len(params.z1)
        for k, (z, on) in enumerate(zip(params.z1, sw.z1)):
            p[NP_BR + 3 * k: NP_BR + 3 * k + 3] = z.real, z.imag, float(on)
            labels += [f"iT{k}_D", f"iT{k}_Q"]
    return NetworkComponent(params, sw, template, p, tuple(labels))


# ----------------------------------------------------------- linear blocks

@dataclass(frozen=True)
class NetworkOperatingPoint:
    """Steady values entering the speed coupling and the load division."""

    w: float = 1.0
    i1: tuple[float, float] = (0.0, 0.0)
    vc: tuple[float, float] = (0.0, 0.0)
    iT: tuple[tuple[float, float], ...] = ()
    v_load: tuple[float, float] = (0.0, 0.0)
    G_load: float = 1.0


def rl_branch_block(R: float, X: float, name: str, va=("va_D", "va_Q"), vb=("vb_D", "vb_Q"),
                    w0: float = 1.0, i0=(0.0, 0.0), omega_b: float = OMEGA_B,
                    w_input: str | None = "w") -> StateSpaceBlock:
    """Linearized RL branch; outputs the branch current."""
    k = omega_b / X
    A = k * (-R * np.eye(2) - w0 * X * J2)
    B = k * np.hstack([np.eye(2), -np.eye(2)])
    inputs = [*va, *vb]
    if w_input:
        B = np.hstack([B, (k * (-X) * (J2 @ np.asarray(i0, float)))[:, None]])
        inputs.append(w_input)
    return StateSpaceBlock(A, B, np.eye(2), np.zeros((2, B.shape[1])),
                           [f"{name}_D", f"{name}_Q"], inputs, [f"{name}_D", f"{name}_Q"])


def capacitor_block(C: float, name: str, inp=("ic_D", "ic_Q"), w0: float = 1.0,
                    v0=(0.0, 0.0), omega_b: float = OMEGA_B,
                    w_input: str | None = "w") -> StateSpaceBlock:
    k = omega_b / C
    A = k * (-w0 * C * J2)
    B = k * np.eye(2)
    inputs = list(inp)
    if w_input:
        B = np.hstack([B, (k * (-C) * (J2 @ np.asarray(v0, float)))[:, None]])
        inputs.append(w_input)
    return StateSpaceBlock(A, B, np.eye(2), np.zeros((2, B.shape[1])),
                           [f"{name}_D", f"{name}_Q"], inputs, [f"{name}_D", f"{name}_Q"])


NET_OUTPUTS = ("i_vsc_D", "i_vsc_Q", "v_pcc_D", "v_pcc_Q", "i_g_D", "i_g_Q",
               "v_load_D", "v_load_Q")


def build_network(params: NetworkParams, switches: SwitchState | None = None,
                  template: Template | str = Template.SG,
                  op: NetworkOperatingPoint | None = None) -> StateSpaceBlock:
    """Small-signal network block assembled branch by branch.

    Inputs: converter voltage, source current injection (``sg``) or source
    voltage (``infinite_bus``), a current injected into the PCC node, the load
    conductance (``sg``) and the frame speed ``w``. Open branches are dropped.
    """
    template = Template(template)
    sw = (switches or SwitchState()).resolved(params)
    check_connected(params, sw, template)
    op = op or NetworkOperatingPoint(G_load=params.G_load)
    wb = params.omega_b
    blocks = [
        rl_branch_block(params.R1, params.L1, "i1", ("v_conv_D", "v_conv_Q"),
                        ("v_pcc_D", "v_pcc_Q"), op.w, op.i1, wb),
        capacitor_block(params.Cf, "vc", ("ic_D", "ic_Q"), op.w, op.vc, wb),
        lti.gain(np.eye(2), ["i1_D", "i1_Q"], ["i_vsc_D", "i_vsc_Q"]),
    ]
    wiring = [("i1_D", "i1_D"), ("i1_Q", "i1_Q"), ("vc_D", "vc_D"), ("vc_Q", "vc_Q"),
              ("v_pcc_D", "v_pcc_D"), ("v_pcc_Q", "v_pcc_Q"), ("ic_D", "ic_D"),
              ("ic_Q", "ic_Q")]
    closed = [k for k, on in enumerate(sw.z1) if on] if template is not Template.DEVICE else []
    iT_D = [f"iT{k}_D" for k in closed]
    iT_Q = [f"iT{k}_Q" for k in closed]
    blocks += [lti.summing_junction(iT_D + ["i_inj_D"], "i_g_D", [1.0] * len(closed) + [-1.0]),
               lti.summing_junction(iT_Q + ["i_inj_Q"], "i_g_Q", [1.0] * len(closed) + [-1.0])]
    for n, k in enumerate(closed):
        z = params.z1[k]
        i0 = op.iT[n] if n < len(op.iT) else (0.0, 0.0)
        blocks.append(rl_branch_block(z.real, z.imag, f"iT{k}", ("v_pcc_D", "v_pcc_Q"),
                                      ("v_load_D", "v_load_Q"), op.w, i0, wb))
        wiring += [(iT_D[n], iT_D[n]), (iT_Q[n], iT_Q[n])]
    wiring += [("i_g_D", "i_g_D"), ("i_g_Q", "i_g_Q")]
    # capacitor current and PCC voltage: i_c = i1 - i_g, v_pcc = v_c + Rf i_c
    blocks += [
        lti.summing_junction(["i1_D", "i_g_D"], "ic_D", [1, -1]),
        lti.summing_junction(["i1_Q", "i_g_Q"], "ic_Q", [1, -1]),
        lti.summing_junction(["vc_D", "ic_D"], "v_pcc_D", [1, params.Rf]),
        lti.summing_junction(["vc_Q", "ic_Q"], "v_pcc_Q", [1, params.Rf]),
    ]
    ext = ["v_conv_D", "v_conv_Q", "i_inj_D", "i_inj_Q", "w"]
    if template is Template.SG:
        G0 = op.G_load
        vl = np.asarray(op.v_load, float)
        n = len(closed)
        D = np.zeros((2, 2 * n + 3))
        D[0, :n] = D[1, n:2 * n] = 1 / G0
        D[0, 2 * n] = D[1, 2 * n + 1] = 1 / G0
        D[:, 2 * n + 2] = -vl / G0
        blocks.append(lti.gain(D, iT_D + iT_Q + ["i_src_D", "i_src_Q", "load_G"],
                               ["v_load_D", "v_load_Q"]))
        wiring += [("v_load_D", "v_load_D"), ("v_load_Q", "v_load_Q")]
        ext += ["i_src_D", "i_src_Q", "load_G"]
    elif template is Template.INFINITE_BUS:
        blocks.append(lti.gain(np.eye(2), ["e_D", "e_Q"], ["v_load_D", "v_load_Q"]))
        wiring += [("v_load_D", "v_load_D"), ("v_load_Q", "v_load_Q")]
        ext += ["e_D", "e_Q"]
    else:
        blocks.append(lti.gain(np.zeros((2, 1)), ["w"], ["v_load_D", "v_load_Q"]))
    return lti.interconnect(blocks, wiring, ext, list(NET_OUTPUTS))


def branch_impedance_dq(z: complex, w0: float = 1.0, s: complex = 0.0,
                        omega_b: float = OMEGA_B) -> np.ndarray:
    """2x2 DQ impedance of an RL branch at Laplace variable ``s``."""
    return (z.real + s * z.imag / omega_b) * np.eye(2) + w0 * z.imag * J2
