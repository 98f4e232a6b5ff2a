"""Synchronous generator: subtransient rotor model with stator transients, AVR and governor.

Rotor windings: field (E'q), one d-axis damper (psi1d) and two q-axis
dampers (E'd, psi2q). The stator equations keep flux dynamics and absorb the
series line impedance Z2 = R2 + jX2 between the machine terminal and the
network node, so the stator current is also the line current.

The network DQ frame rotates with the rotor speed, hence the rotor angle with
respect to that frame is the constant ``delta0``:
``x_rotor = exp(-j delta0) x_network``.

State order: E'q, psi1d, E'd, psi2q, i_d, i_q, w, AVR integrator, Efd, governor.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
import sympy as sp

from . import lti_core as lti
from .lti_core import StateSpaceBlock

OMEGA_B = 100.0 * math.pi


class SgError(ValueError):
    pass


@dataclass(frozen=True)
class SgParams:
    Xd: float = 1.305
    Xq: float = 0.474
    Xd_p: float = 0.296
    Xd_pp: float = 0.252
    Xq_pp: float = 0.243
    Xl: float = 0.18
    Ra: float = 0.003
    Td0_p: float = 1.01
    Td0_pp: float = 0.053
    Tq0_pp: float = 0.1
    H: float = 3.7
    D: float = 0.0
    # second q-axis damper; Xq_p = Xq leaves it unexcited
    Xq_p: float | None = None
    Tq0_p: float = 0.1

    def __post_init__(self):
        if not (self.Xd > self.Xd_p > self.Xd_pp > self.Xl):
            raise SgError("need Xd > Xd' > Xd'' > Xl")
        if not (self.xq_p >= self.Xq_pp > self.Xl) or self.xq_p > self.Xq:
            raise SgError("need Xq >= Xq' >= Xq'' > Xl")
        if min(self.Td0_p, self.Td0_pp, self.Tq0_pp, self.Tq0_p, self.H) <= 0:
            raise SgError("time constants and inertia must be positive")

    @property
    def xq_p(self) -> float:
        return self.Xq if self.Xq_p is None else self.Xq_p


@dataclass(frozen=True)
class AvrParams:
    Kp: float = 1.0
    Ki: float = 10.0
    T: float = 0.02

    def __post_init__(self):
        if not self.T > 0:
            raise SgError("T_AVR must be positive")


@dataclass(frozen=True)
class GovParams:
    R: float = 0.05
    T: float = 0.5

    def __post_init__(self):
        if not self.R > 0:
            raise SgError("governor droop must be positive")
        if not self.T > 0:
            raise SgError("T_gov must be positive")


def avr_block(p: AvrParams, inp: str = "v_err", out: str = "Efd") -> StateSpaceBlock:
    """(Kp s + Ki)/s * 1/(1 + s T)."""
    pi = lti.pi_block(p.Kp, p.Ki, inp, "_avr_pi", "avr_x")
    lag = lti.lowpass(p.T, "_avr_pi", out, "Efd")
    return lti.interconnect([pi, lag], [("_avr_pi", "_avr_pi")], [inp], [out])


def gov_block(p: GovParams, inp: str = "dw", out: str = "dp_mech") -> StateSpaceBlock:
    """(1/R)/(1 + s T_gov) acting on the speed drop."""
    return lti.lowpass(p.T, inp, out, "gov", k=1.0 / p.R)


SG_STATES = ("Eq_p", "psi1d", "Ed_p", "psi2q", "i_d", "i_q", "w", "avr_x", "Efd", "gov")
SG_INPUTS = ("v_n_D", "v_n_Q", "sg_p_ref", "sg_v_ref")
SG_OUTPUTS = ("i_src_D", "i_src_Q", "w_sg", "Pe", "vt", "vt_D", "vt_Q")

# parameter layout
(S_XD, S_XQ, S_XDP, S_XQP, S_XDPP, S_XQPP, S_XL, S_RA, S_TD0P, S_TQ0P, S_TD0PP, S_TQ0PP,
 S_H, S_D, S_R2, S_X2, S_WB, S_AKP, S_AKI, S_AT, S_GR, S_GT, S_DELTA, S_P0, S_VREF) = range(25)
N_SG_PARAMS = 25


@numba.njit(cache=True)
def sg_eval(x, u, p, dx, y):
    Xd, Xq, Xdp, Xqp = p[S_XD], p[S_XQ], p[S_XDP], p[S_XQP]
    Xdpp, Xqpp, Xl, Ra = p[S_XDPP], p[S_XQPP], p[S_XL], p[S_RA]
    R2, X2, wb = p[S_R2], p[S_X2], p[S_WB]
    Eqp, psi1d, Edp, psi2q, Id, Iq, w, xa, Efd, pg = (x[0], x[1], x[2], x[3], x[4], x[5],
                                                       x[6], x[7], x[8], x[9])
    c = math.cos(p[S_DELTA])
    s = math.sin(p[S_DELTA])
    vnd = c * u[0] + s * u[1]
    vnq = -s * u[0] + c * u[1]

    k1 = (Xdpp - Xl) / (Xdp - Xl)
    k2 = (Xdp - Xdpp) / (Xdp - Xl)
    k3 = (Xqpp - Xl) / (Xqp - Xl)
    k4 = (Xqp - Xqpp) / (Xqp - Xl)
    psid = -Xdpp * Id + k1 * Eqp + k2 * psi1d
    psiq = -Xqpp * Iq - k3 * Edp + k4 * psi2q

    dEqp = (-Eqp - (Xd - Xdp) * (Id - (Xdp - Xdpp) / (Xdp - Xl) ** 2
                                  * (psi1d + (Xdp - Xl) * Id - Eqp)) + Efd) / p[S_TD0P]
    dpsi1d = (-psi1d + Eqp - (Xdp - Xl) * Id) / p[S_TD0PP]
    dEdp = (-Edp + (Xq - Xqp) * (Iq - (Xqp - Xqpp) / (Xqp - Xl) ** 2
                                 * (psi2q + (Xqp - Xl) * Iq + Edp))) / p[S_TQ0P]
    dpsi2q = (-psi2q - Edp - (Xqp - Xl) * Iq) / p[S_TQ0PP]

    dId = -wb / (Xdpp + X2) * ((Ra + R2) * Id + w * psiq - w * X2 * Iq + vnd
                               - (k1 * dEqp + k2 * dpsi1d) / wb)
    dIq = -wb / (Xqpp + X2) * ((Ra + R2) * Iq - w * psid + w * X2 * Id + vnq
                               - (-k3 * dEdp + k4 * dpsi2q) / wb)

    te = psid * Iq - psiq * Id
    pm = p[S_P0] + u[2] + pg
    dw = (pm / w - te - p[S_D] * (w - 1.0)) / (2.0 * p[S_H])

    vtd = vnd + R2 * Id + X2 / wb * dId - w * X2 * Iq
    vtq = vnq + R2 * Iq + X2 / wb * dIq + w * X2 * Id
    vt = math.sqrt(vtd * vtd + vtq * vtq)
    err = p[S_VREF] + u[3] - vt

    dx[0] = dEqp
    dx[1] = dpsi1d
    dx[2] = dEdp
    dx[3] = dpsi2q
    dx[4] = dId
    dx[5] = dIq
    dx[6] = dw
    dx[7] = err
    dx[8] = (p[S_AKP] * err + p[S_AKI] * xa - Efd) / p[S_AT]
    dx[9] = ((1.0 - w) / p[S_GR] - pg) / p[S_GT]

    y[0] = c * Id - s * Iq
    y[1] = s * Id + c * Iq
    y[2] = w
    y[3] = vtd * Id + vtq * Iq
    y[4] = vt
    y[5] = c * vtd - s * vtq
    y[6] = s * vtd + c * vtq


@dataclass(frozen=True)
class SgComponent:
    sg: SgParams
    avr: AvrParams
    gov: GovParams
    R2: float
    X2: float
    delta0: float
    P0: float
    V_ref: float
    omega_b: float = OMEGA_B
    params: np.ndarray = field(init=False, repr=False)
    state_labels: tuple[str, ...] = SG_STATES
    input_labels: tuple[str, ...] = SG_INPUTS
    output_labels: tuple[str, ...] = SG_OUTPUTS

    def __post_init__(self):
        object.__setattr__(self, "params", self._pack())

    def _pack(self) -> np.ndarray:
        s, a, g = self.sg, self.avr, self.gov
        p = np.zeros(N_SG_PARAMS)
        p[[S_XD, S_XQ, S_XDP, S_XQP, S_XDPP, S_XQPP, S_XL, S_RA]] = (
            s.Xd, s.Xq, s.Xd_p, s.xq_p, s.Xd_pp, s.Xq_pp, s.Xl, s.Ra)
        p[[S_TD0P, S_TQ0P, S_TD0PP, S_TQ0PP, S_H, S_D]] = (
            s.Td0_p, s.Tq0_p, s.Td0_pp, s.Tq0_pp, s.H, s.D)
        p[[S_R2, S_X2, S_WB]] = self.R2, self.X2, self.omega_b
        p[[S_AKP, S_AKI, S_AT, S_GR, S_GT]] = a.Kp, a.Ki, a.T, g.R, g.T
        p[[S_DELTA, S_P0, S_VREF]] = self.delta0, self.P0, self.V_ref
        return p

    @property
    def nstates(self) -> int:
        return len(SG_STATES)

    def with_setpoints(self, **kw) -> "SgComponent":
        return replace(self, **kw)

    def derivative(self, x, u, t: float = 0.0) -> np.ndarray:
        dx, y = np.zeros(10), np.zeros(7)
        sg_eval(np.asarray(x, float), np.asarray(u, float), self.params, dx, y)
        return dx

    def outputs(self, x, u) -> np.ndarray:
        dx, y = np.zeros(10), np.zeros(7)
        sg_eval(np.asarray(x, float), np.asarray(u, float), self.params, dx, y)
        return y

    def linearize(self, x0, u0) -> StateSpaceBlock:
        """Analytic small-signal model from the symbolic equations."""
        A, B, C, D = _symbolic_jacobians()(np.asarray(x0, float), np.asarray(u0, float),
                                           self.params)
        return StateSpaceBlock(np.asarray(A, float), np.asarray(B, float), np.asarray(C, float),
                               np.asarray(D, float), SG_STATES, SG_INPUTS, SG_OUTPUTS)


def build_sg(sg: SgParams | None = None, avr: AvrParams | None = None,
             gov: GovParams | None = None, Z2: complex = 0.02 + 0.2j, delta0: float = 0.0,
             P0: float = 0.0, V_ref: float = 1.0, omega_b: float = OMEGA_B) -> SgComponent:
    return SgComponent(sg or SgParams(), avr or AvrParams(), gov or GovParams(),
                       complex(Z2).real, complex(Z2).imag, delta0, P0, V_ref, omega_b)


# ------------------------------------------------------------- symbolic

@functools.lru_cache(maxsize=1)
def _symbolic_jacobians():
    """Lambdified (A, B, C, D) of the machine written with complex phasors."""
    x = sp.symbols("Eqp psi1d Edp psi2q Id Iq w xa Efd pg", real=True)
    u = sp.symbols("vnD vnQ dP dV", real=True)
    p = sp.symbols(f"p0:{N_SG_PARAMS}", real=True)
    Eqp, psi1d, Edp, psi2q, Id, Iq, w, xa, Efd, pg = x
    Xd, Xq, Xdp, Xqp, Xdpp, Xqpp, Xl, Ra = (p[S_XD], p[S_XQ], p[S_XDP], p[S_XQP],
                                            p[S_XDPP], p[S_XQPP], p[S_XL], p[S_RA])
    R2, X2, wb, H = p[S_R2], p[S_X2], p[S_WB], p[S_H]

    rot = sp.exp(-sp.I * p[S_DELTA])
    vn = sp.expand_complex(rot * (u[0] + sp.I * u[1]))
    vnd, vnq = sp.re(vn), sp.im(vn)

    # d-axis: transient and subtransient flux linkages
    Td = Xdp - Xl
    Tq = Xqp - Xl
    psid = -Xdpp * Id + ((Xdpp - Xl) * Eqp + (Xdp - Xdpp) * psi1d) / Td
    psiq = -Xqpp * Iq + (-(Xqpp - Xl) * Edp + (Xqp - Xqpp) * psi2q) / Tq
    f_Eqp = (Efd - Eqp - (Xd - Xdp) * Id
             + (Xd - Xdp) * (Xdp - Xdpp) / Td**2 * (psi1d + Td * Id - Eqp)) / p[S_TD0P]
    f_psi1d = (Eqp - psi1d - Td * Id) / p[S_TD0PP]
    f_Edp = (-Edp + (Xq - Xqp) * Iq
             - (Xq - Xqp) * (Xqp - Xqpp) / Tq**2 * (psi2q + Tq * Iq + Edp)) / p[S_TQ0P]
    f_psi2q = (-psi2q - Edp - Tq * Iq) / p[S_TQ0PP]

    # stator flux dynamics with the series line folded in
    emf_rate_d = sp.diff(psid, Eqp) * f_Eqp + sp.diff(psid, psi1d) * f_psi1d
    emf_rate_q = sp.diff(psiq, Edp) * f_Edp + sp.diff(psiq, psi2q) * f_psi2q
    f_Id = (emf_rate_d - wb * ((Ra + R2) * Id + w * psiq - w * X2 * Iq + vnd)) / (Xdpp + X2)
    f_Iq = (emf_rate_q - wb * ((Ra + R2) * Iq - w * psid + w * X2 * Id + vnq)) / (Xqpp + X2)

    Te = psid * Iq - psiq * Id
    f_w = ((p[S_P0] + u[2] + pg) / w - Te - p[S_D] * (w - 1)) / (2 * H)
    It = Id + sp.I * Iq
    dI = f_Id + sp.I * f_Iq
    vt_c = vnd + sp.I * vnq + (R2 + sp.I * w * X2) * It + X2 / wb * dI
    vtd, vtq = sp.re(sp.expand_complex(vt_c)), sp.im(sp.expand_complex(vt_c))
    vt = sp.sqrt(vtd**2 + vtq**2)
    err = p[S_VREF] + u[3] - vt
    f = sp.Matrix([f_Eqp, f_psi1d, f_Edp, f_psi2q, f_Id, f_Iq, f_w, err,
                   (p[S_AKP] * err + p[S_AKI] * xa - Efd) / p[S_AT],
                   ((1 - w) / p[S_GR] - pg) / p[S_GT]])
    back = sp.exp(sp.I * p[S_DELTA])
    i_net = sp.expand_complex(back * It)
    vt_net = sp.expand_complex(back * (vtd + sp.I * vtq))
    g = sp.Matrix([sp.re(i_net), sp.im(i_net), w, vtd * Id + vtq * Iq, vt,
                   sp.re(vt_net), sp.im(vt_net)])
    X, U = sp.Matrix(x), sp.Matrix(u)
    mats = [f.jacobian(X), f.jacobian(U), g.jacobian(X), g.jacobian(U)]
    fn = sp.lambdify((x, u, p), mats, modules="numpy")

    def jac(x0, u0, p0):
        return [np.array(m, dtype=float) for m in fn(tuple(x0), tuple(u0), tuple(p0))]

    return jac
