"""Full-system composition: GFC + network + synchronous generator.

The network DQ frame rotates with the generator speed (or at 1 pu for the
infinite-bus and device templates). A single compiled kernel evaluates the
whole nonlinear system; :func:`linearize` offers two independent routes to
the small-signal model, a block-diagram assembly and a numerical Jacobian.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numba
import numpy as np
from scipy import optimize

from . import gfc_controls as gc
from . import lti_core as lti
from . import network as nw
from . import sync_machine as sm
from .lti_core import StateSpaceBlock
from .network import Template

# system input vector
U_GLOAD, U_GPCC, U_DP, U_DQ, U_SGP, U_SGV, U_INJD, U_INJQ, U_ED, U_EQ = range(10)
N_SYS_U = 10
INPUT_INDEX = {"load_G": U_GLOAD, "p_ref": U_DP, "q_ref": U_DQ, "sg_p_ref": U_SGP,
               "sg_v_ref": U_SGV, "i_inj_D": U_INJD, "i_inj_Q": U_INJQ, "e_D": U_ED,
               "e_Q": U_EQ}

SYS_OUTPUTS = ("P_vsc", "Q_vsc", "w_vsc", "w_sg", "P_sg", "Q_sg", "v_pcc", "i_vsc", "v_sg",
               "theta", "v_pcc_D", "v_pcc_Q", "i_vsc_D", "i_vsc_Q", "v_load_D", "v_load_Q",
               "i_g_D", "i_g_Q")
N_SYS_Y = len(SYS_OUTPUTS)


class AssemblyError(RuntimeError):
    pass


class EquilibriumError(AssemblyError):
    def __init__(self, msg: str, residual: float = math.nan):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class InfeasibleDispatch(AssemblyError):
    pass


class LinearizationMismatch(AssemblyError):
    pass


@numba.njit(cache=True)
def sys_eval(x, u, pg, offg, ng, pn, nn, ps, has_sg, dx, y):
    """Whole-system derivative and monitored outputs (in place)."""
    xg = x[:ng]
    xn = x[ng:ng + nn]
    dxg = dx[:ng]
    dxn = dx[ng:ng + nn]
    if has_sg:
        xs = x[ng + nn:]
        c = math.cos(ps[sm.S_DELTA])
        s = math.sin(ps[sm.S_DELTA])
        isD = c * xs[4] - s * xs[5]
        isQ = s * xs[4] + c * xs[5]
        w = xs[6]
    else:
        isD = 0.0
        isQ = 0.0
        w = 1.0
    yn = np.empty(nw.N_NET_Y)
    nw.net_alg(xn, isD, isQ, u[U_ED], u[U_EQ], u[U_INJD], u[U_INJQ], u[U_GLOAD], u[U_GPCC],
               pn, yn)
    ug = np.empty(9)
    for k in range(6):
        ug[k] = yn[k]
    ug[6] = w
    ug[7] = u[U_DP]
    ug[8] = u[U_DQ]
    yg = np.empty(6)
    gc.gfc_eval(xg, ug, pg, offg, dxg, yg)
    nw.net_deriv(xn, yn, yg[0], yg[1], w, u[U_GPCC], pn, dxn)
    ys = np.zeros(7)
    if has_sg:
        us = np.empty(4)
        us[0] = yn[nw.NY_VLOAD]
        us[1] = yn[nw.NY_VLOAD + 1]
        us[2] = u[U_SGP]
        us[3] = u[U_SGV]
        sg_dx = dx[ng + nn:]
        sm.sg_eval(x[ng + nn:], us, ps, sg_dx, ys)
    vpD = yn[nw.NY_VPCC]
    vpQ = yn[nw.NY_VPCC + 1]
    y[0] = yg[4]
    y[1] = yg[5]
    y[2] = yg[2]
    y[3] = w
    y[4] = ys[3]
    y[5] = ys[6] * ys[0] - ys[5] * ys[1]
    y[6] = math.sqrt(vpD * vpD + vpQ * vpQ)
    y[7] = math.sqrt(xn[0] * xn[0] + xn[1] * xn[1])
    y[8] = ys[4]
    y[9] = yg[3]
    y[10] = vpD
    y[11] = vpQ
    y[12] = xn[0]
    y[13] = xn[1]
    y[14] = yn[nw.NY_VLOAD]
    y[15] = yn[nw.NY_VLOAD + 1]
    y[16] = yn[nw.NY_IG]
    y[17] = yn[nw.NY_IG + 1]


# ------------------------------------------------------------------ model

@dataclass(frozen=True)
class SystemModel:
    gfc: gc.GfcDesign
    net: nw.NetworkParams = field(default_factory=nw.NetworkParams)
    template: Template = Template.SG
    switches: nw.SwitchState = field(default_factory=nw.SwitchState)
    sg: sm.SgParams | None = field(default_factory=sm.SgParams)
    avr: sm.AvrParams = field(default_factory=sm.AvrParams)
    gov: sm.GovParams = field(default_factory=sm.GovParams)
    delta0: float = 0.0
    P0: float = 0.5
    V_ref: float = 1.0
    G_load: float | None = None  # None -> 1 / Z_Load
    e_inf: complex = 1.0 + 0.0j

    def __post_init__(self):
        object.__setattr__(self, "template", Template(self.template))
        object.__setattr__(self, "switches", self.switches.resolved(self.net))
        nw.check_connected(self.net, self.switches, self.template)
        if self.template is Template.SG and self.sg is None:
            raise AssemblyError("the sg template needs generator parameters")

    # components -----------------------------------------------------
    @cached_property
    def gfc_comp(self) -> gc.GfcComponent:
        return gc.build_gfc(self.gfc)

    @cached_property
    def net_comp(self) -> nw.NetworkComponent:
        return nw.build_network_component(self.net, self.switches, self.template)

    @cached_property
    def sg_comp(self) -> sm.SgComponent | None:
        if self.template is not Template.SG:
            return None
        return sm.build_sg(self.sg, self.avr, self.gov, nw.z2_equivalent(self.net, self.switches),
                           self.delta0, self.P0, self.V_ref, self.net.omega_b)

    @property
    def has_sg(self) -> bool:
        return self.template is Template.SG

    @cached_property
    def state_labels(self) -> tuple[str, ...]:
        labs = [f"gfc.{s}" for s in self.gfc_comp.state_labels]
        labs += [f"net.{s}" for s in self.net_comp.state_labels]
        if self.has_sg:
            labs += [f"sg.{s}" for s in sm.SG_STATES]
        return tuple(labs)

    @cached_property
    def active_labels(self) -> tuple[str, ...]:
        act = set(f"net.{s}" for s in self.net_comp.active_states())
        return tuple(s for s in self.state_labels if not s.startswith("net.") or s in act)

    @cached_property
    def active_index(self) -> np.ndarray:
        pos = {s: k for k, s in enumerate(self.state_labels)}
        return np.array([pos[s] for s in self.active_labels], dtype=np.int64)

    @property
    def nstates(self) -> int:
        return len(self.state_labels)

    def index(self, label: str) -> int:
        return self.state_labels.index(label)

    @property
    def load_conductance(self) -> float:
        return self.net.G_load if self.G_load is None else self.G_load

    def kernel_args(self):
        g, n = self.gfc_comp, self.net_comp
        ps = self.sg_comp.params if self.has_sg else np.zeros(sm.N_SG_PARAMS)
        return (g.params, g.offsets, g.nstates, n.kernel_params, n.nstates, ps, self.has_sg)

    def default_u(self) -> np.ndarray:
        sw = self.switches
        u = np.zeros(N_SYS_U)
        u[U_GLOAD] = self.load_conductance + sw.extra_load_G
        if sw.fault_bus == "load":
            u[U_GLOAD] += sw.fault_G
        if sw.fault_bus == "pcc":
            u[U_GPCC] = sw.fault_G
        u[U_ED], u[U_EQ] = self.e_inf.real, self.e_inf.imag
        return u

    def derivative(self, x, u=None) -> np.ndarray:
        dx, _ = self.evaluate(x, u)
        return dx

    def outputs(self, x, u=None) -> np.ndarray:
        return self.evaluate(x, u)[1]

    def evaluate(self, x, u=None):
        u = self.default_u() if u is None else np.asarray(u, float)
        dx = np.zeros(self.nstates)
        y = np.zeros(N_SYS_Y)
        sys_eval(np.asarray(x, float), u, *self.kernel_args(), dx, y)
        return dx, y

    def with_setpoints(self, p_ref=None, q_ref=None, P0=None, delta0=None,
                       V_ref=None) -> "SystemModel":
        outer = self.gfc.outer
        if p_ref is not None or q_ref is not None:
            outer = replace(outer, p_ref=outer.p_ref if p_ref is None else float(p_ref),
                            q_ref=outer.q_ref if q_ref is None else float(q_ref))
        return replace(self, gfc=replace(self.gfc, outer=outer),
                       P0=self.P0 if P0 is None else float(P0),
                       delta0=self.delta0 if delta0 is None else float(delta0),
                       V_ref=self.V_ref if V_ref is None else float(V_ref))


def infinite_bus_model(gfc: gc.GfcDesign, net: nw.NetworkParams | None = None,
                       x_total: float = 0.2, x_over_r: float = 20.0,
                       e_inf: complex = 1.0) -> SystemModel:
    """Converter behind ``x_total`` (transformer plus line) to a stiff source."""
    net = net or nw.NetworkParams()
    net = replace(net, z1_branches=(complex(x_total / x_over_r, x_total),))
    return SystemModel(gfc, net, Template.INFINITE_BUS, sg=None, e_inf=e_inf)


# ------------------------------------------------------------ equilibrium

@dataclass(frozen=True)
class Dispatch:
    p_gfc: float = 0.5  # active power delivered by the converter at the PCC
    v_sg: float = 1.0  # generator terminal voltage setpoint
    load_G: float | None = None
    angle_ref: float = 0.0  # angle of the generator terminal voltage in the DQ frame
    rating_gfc: float = 1.0
    rating_sg: float = 1.0


@dataclass(frozen=True)
class Equilibrium:
    model: SystemModel
    x: np.ndarray
    u: np.ndarray
    residual: float
    summary: dict

    def outputs(self) -> dict:
        y = self.model.outputs(self.x, self.u)
        return dict(zip(SYS_OUTPUTS, y))


def _thevenin(model: SystemModel):
    """Steady-state source picture of the converter (used for warm starts)."""
    d, n = model.gfc, model.net
    zl1 = complex(n.R1, n.L1)
    if d.topology is gc.Topology.NO_INNER:
        return "pcc_via_filter", complex(d.zvirt.R_virt, d.zvirt.L_virt) + zl1
    if d.topology is gc.Topology.CURRENT_ONLY:
        return "pcc_via_filter", complex(d.yvirt.R_virt, d.yvirt.L_virt)
    return "pcc_grid_side", complex(d.zvirt.R_virt, d.zvirt.L_virt)


def _phasor_solution(model: SystemModel, disp: Dispatch):
    n = model.net
    kind, zs = _thevenin(model)
    ycap = 1.0 / (n.Rf + 1.0 / (1j * n.Cf))
    closed = [z for z, f in zip(n.z1, model.switches.z1) if f]
    z1 = nw.parallel(closed)
    G = model.default_u()[U_GLOAD]
    vnom = model.gfc.outer.v_nom
    if model.has_sg:
        z2 = nw.z2_equivalent(n, model.switches)
        vt = disp.v_sg * cmath.exp(1j * disp.angle_ref)

    def currents(th, vp, vl):
        E = vnom * cmath.exp(-1j * th)
        if model.template is Template.INFINITE_BUS:
            vl = model.e_inf
        ig = (vp - vl) / z1
        if kind == "pcc_grid_side":
            i1 = ig + ycap * vp
            r_pcc = vp - (E - zs * ig)
        else:
            i1 = (E - vp) / zs
            r_pcc = i1 - ycap * vp - ig
        return ig, i1, r_pcc

    def res(z):
        th, vp = z[0], complex(z[1], z[2])
        vl = complex(z[3], z[4]) if model.has_sg else 0j
        ig, i1, r_pcc = currents(th, vp, vl)
        out = [r_pcc.real, r_pcc.imag, (vp * i1.conjugate()).real - disp.p_gfc]
        if model.has_sg:
            isg = (vt - vl) / z2
            r_l = G * vl - ig - isg
            out += [r_l.real, r_l.imag]
        return out

    z0 = [0.0, 1.0, 0.0] + ([1.0, 0.0] if model.has_sg else [])
    if model.has_sg:
        z0[1:3] = [vt.real, vt.imag]
        z0[3:5] = [vt.real, vt.imag]
    sol, info, ok, msg = optimize.fsolve(res, z0, full_output=True, xtol=1e-12)
    if ok != 1:
        raise EquilibriumError(f"phasor warm start failed: {msg}", float(np.max(np.abs(info["fvec"]))))
    th, vp = sol[0], complex(sol[1], sol[2])
    vl = complex(sol[3], sol[4]) if model.has_sg else model.e_inf
    ig, i1, _ = currents(th, vp, vl)
    out = {"theta": th, "v_pcc": vp, "v_load": vl, "i_g": ig, "i1": i1, "z1_closed": closed,
           "i_cap": ycap * vp}
    if model.has_sg:
        out["i_sg"] = (vt - vl) / z2
        out["vt"] = vt
    return out


def _sg_initial(sgp: sm.SgParams, avr: sm.AvrParams, vt: complex, I: complex):
    """Steady rotor states from terminal voltage and current (network frame)."""
    EQ = vt + complex(sgp.Ra, sgp.Xq) * I
    delta0 = cmath.phase(EQ) - math.pi / 2
    rot = cmath.exp(-1j * delta0)
    Ir, Vr = I * rot, vt * rot
    Id, Iq, Vd, Vq = Ir.real, Ir.imag, Vr.real, Vr.imag
    psid = Vq + sgp.Ra * Iq
    psiq = -(Vd + sgp.Ra * Id)
    Eqp = psid + sgp.Xd_p * Id
    psi1d = Eqp - (sgp.Xd_p - sgp.Xl) * Id
    Efd = Eqp + (sgp.Xd - sgp.Xd_p) * Id
    Edp = (sgp.Xq - sgp.xq_p) * Iq
    psi2q = -Edp - (sgp.xq_p - sgp.Xl) * Iq
    te = psid * Iq - psiq * Id
    x = np.array([Eqp, psi1d, Edp, psi2q, Id, Iq, 1.0, Efd / avr.Ki, Efd, 0.0])
    return x, delta0, te


def warm_start(model: SystemModel, disp: Dispatch) -> tuple[np.ndarray, SystemModel]:
    ph = _phasor_solution(model, disp)
    x = np.zeros(model.nstates)
    x[model.index("gfc.theta")] = ph["theta"]
    n = model.net
    i1, vp = ph["i1"], ph["v_pcc"]
    vc = vp - n.Rf * ph["i_cap"]
    for lab, val in (("net.i1_D", i1.real), ("net.i1_Q", i1.imag),
                     ("net.vc_D", vc.real), ("net.vc_Q", vc.imag)):
        x[model.index(lab)] = val
    if model.template is not Template.DEVICE:
        ytot = sum(1 / z for z in ph["z1_closed"])
        for k, (z, f) in enumerate(zip(n.z1, model.switches.z1)):
            if f:
                ik = ph["i_g"] * (1 / z) / ytot
                x[model.index(f"net.iT{k}_D")] = ik.real
                x[model.index(f"net.iT{k}_Q")] = ik.imag
    if model.has_sg:
        xs, delta0, te = _sg_initial(model.sg, model.avr, ph["vt"], ph["i_sg"])
        j = model.index("gfc.theta") + model.gfc_comp.nstates + model.net_comp.nstates
        x[j:j + 10] = xs
        model = model.with_setpoints(P0=te, delta0=delta0, V_ref=disp.v_sg)
    model = model.with_setpoints(p_ref=disp.p_gfc, q_ref=0.0)
    return x, model


def _trim_names(model: SystemModel) -> list[str]:
    names = ["p_ref"]
    if model.gfc.outer.Kslope > 0:
        names.append("q_ref")
    if model.has_sg:
        names += ["P0", "delta0"]
    return names


def _apply_trims(model: SystemModel, names, vals):
    pg = model.gfc_comp.params.copy()
    ps = model.sg_comp.params.copy() if model.has_sg else np.zeros(sm.N_SG_PARAMS)
    where = {"p_ref": (pg, gc.P_PREF), "q_ref": (pg, gc.P_QREF),
             "P0": (ps, sm.S_P0), "delta0": (ps, sm.S_DELTA)}
    for nm, v in zip(names, vals):
        arr, k = where[nm]
        arr[k] = v
    return pg, ps


def _residual_fn(model: SystemModel, disp: Dispatch, u: np.ndarray):
    names = _trim_names(model)
    act = model.active_index
    g, n = model.gfc_comp, model.net_comp
    N = model.nstates
    ca, sa = math.cos(disp.angle_ref), math.sin(disp.angle_ref)

    def F(z):
        x = np.zeros(N)
        x[act] = z[:len(act)]
        pg, ps = _apply_trims(model, names, z[len(act):])
        dx = np.zeros(N)
        y = np.zeros(N_SYS_Y)
        sys_eval(x, u, pg, g.offsets, g.nstates, n.kernel_params, n.nstates, ps,
                 model.has_sg, dx, y)
        extra = [y[0] - disp.p_gfc]
        if "q_ref" in names:
            extra.append(pg[gc.P_QREF] + u[U_DQ] - y[1])
        if model.has_sg:
            # terminal voltage reference in the DQ frame, via the kernel outputs
            dxs = np.zeros(10)
            ys = np.zeros(7)
            us = np.array([y[14], y[15], u[U_SGP], u[U_SGV]])
            sm.sg_eval(x[-10:], us, ps, dxs, ys)
            extra += [y[3] - 1.0, ys[6] * ca - ys[5] * sa]
        return np.concatenate([dx[act], extra])

    return F, names


def fd_jacobian(F, z, h_rel: float = 1e-5) -> np.ndarray:
    """Fourth-order central-difference Jacobian."""
    f0 = F(z)
    J = np.zeros((len(f0), len(z)))
    for k in range(len(z)):
        h = h_rel * max(1.0, abs(z[k]))
        e = np.zeros(len(z))
        e[k] = h
        J[:, k] = (8 * (F(z + e) - F(z - e)) - (F(z + 2 * e) - F(z - 2 * e))) / (12 * h)
    return J


def newton(F, z0, tol: float = 1e-10, max_iter: int = 50, max_halvings: int = 30):
    z = np.array(z0, float)
    f = F(z)
    r = np.max(np.abs(f))
    for _ in range(max_iter):
        if r < tol:
            return z, r
        J = fd_jacobian(F, z)
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
        a = 1.0
        for _ in range(max_halvings):
            zn = z + a * step
            fn = F(zn)
            rn = np.max(np.abs(fn))
            if np.isfinite(rn) and rn < r:
                break
            a *= 0.5
        else:
            return z, r
        z, f, r = zn, fn, rn
    return z, r


def find_equilibrium(model: SystemModel, dispatch: Dispatch | None = None,
                     tol: float = 1e-10, max_iter: int = 50,
                     x0: np.ndarray | None = None) -> Equilibrium:
    """Steady state with setpoint trims (GFC p_ref/q_ref, SG P0 and rotor angle)."""
    disp = dispatch or Dispatch()
    if model.template is Template.DEVICE:
        raise AssemblyError("use device_equilibrium() for the device template")
    if disp.load_G is not None:
        model = replace(model, G_load=disp.load_G)
    if abs(disp.p_gfc) > disp.rating_gfc:
        raise InfeasibleDispatch(f"converter dispatch {disp.p_gfc} pu exceeds its rating "
                                 f"{disp.rating_gfc} pu")
    if model.has_sg:
        p_sg = model.load_conductance * disp.v_sg**2 - disp.p_gfc
        if p_sg > disp.rating_sg:
            raise InfeasibleDispatch(f"generator share {p_sg:.3f} pu exceeds its rating "
                                     f"{disp.rating_sg} pu")
    xw, model = warm_start(model, disp)
    if x0 is not None:
        xw = np.asarray(x0, float)
    u = model.default_u()
    F, names = _residual_fn(model, disp, u)
    trims = {"p_ref": model.gfc.outer.p_ref, "q_ref": model.gfc.outer.q_ref,
             "P0": model.P0, "delta0": model.delta0}
    z0 = np.concatenate([xw[model.active_index], [trims[k] for k in names]])
    z, r = newton(F, z0, tol, max_iter)
    if not r < tol:
        raise EquilibriumError("Newton iteration did not converge", r)
    nact = len(model.active_index)
    vals = dict(zip(names, z[nact:]))
    model = model.with_setpoints(**vals)
    x = np.zeros(model.nstates)
    x[model.active_index] = z[:nact]
    dx, y = model.evaluate(x, u)
    res = float(np.max(np.abs(dx)))
    out = dict(zip(SYS_OUTPUTS, y))
    vmag = [out["v_pcc"], math.hypot(out["v_load_D"], out["v_load_Q"])]
    if model.has_sg:
        vmag.append(out["v_sg"])
    summary = {"P_vsc": out["P_vsc"], "Q_vsc": out["Q_vsc"], "P_sg": out["P_sg"],
               "Q_sg": out["Q_sg"], "v_pcc": out["v_pcc"], "v_load": vmag[1],
               "v_sg": out["v_sg"], "trims": vals, "voltages_ok": all(0.8 <= v <= 1.2 for v in vmag)}
    return Equilibrium(model, x, u, res, summary)


def device_equilibrium(eq: Equilibrium) -> Equilibrium:
    """Converter plus filter alone, the grid replaced by the PCC injection it drew."""
    m = eq.model
    dev = replace(m, template=Template.DEVICE)
    u = dev.default_u()
    y = m.outputs(eq.x, eq.u)
    # the device frame runs at nominal speed; the system is at 1 pu in steady state
    u[U_INJD], u[U_INJQ] = -y[16], -y[17]
    u[U_DP], u[U_DQ] = eq.u[U_DP], eq.u[U_DQ]
    x = np.zeros(dev.nstates)
    for k, lab in enumerate(dev.state_labels):
        x[k] = eq.x[m.index(lab)]
    dx, _ = dev.evaluate(x, u)
    return Equilibrium(dev, x, u, float(np.max(np.abs(dx))), dict(eq.summary))


# ---------------------------------------------------------- linearization

def default_inputs(model: SystemModel) -> tuple[str, ...]:
    if model.template is Template.SG:
        return ("load_G", "p_ref", "q_ref", "sg_p_ref", "sg_v_ref", "i_inj_D", "i_inj_Q")
    if model.template is Template.INFINITE_BUS:
        return ("p_ref", "q_ref", "i_inj_D", "i_inj_Q", "e_D", "e_Q")
    return ("p_ref", "q_ref", "i_inj_D", "i_inj_Q")


def linearize(model_or_eq, eq: Equilibrium | None = None, method: str = "analytic",
              inputs=None, outputs=SYS_OUTPUTS, freeze_outer: bool = False,
              tol: float = 1e-6) -> StateSpaceBlock:
    """Small-signal model at an equilibrium.

    ``method`` is ``"analytic"`` (block diagrams), ``"numeric"`` (Jacobian of the
    compiled kernel) or ``"both"`` (analytic, checked against numeric).
    """
    eq = model_or_eq if isinstance(model_or_eq, Equilibrium) else eq
    if eq is None:
        raise AssemblyError("an equilibrium is required")
    if eq.residual > 1e-8:
        raise AssemblyError(f"equilibrium residual {eq.residual:.2e} too large to linearize")
    inputs = tuple(inputs or default_inputs(eq.model))
    if method == "numeric":
        if freeze_outer:
            raise AssemblyError("freeze_outer is only available for the analytic route")
        return _linearize_numeric(eq, inputs, outputs)
    if method == "analytic":
        return _linearize_analytic(eq, inputs, outputs, freeze_outer)
    if method == "both":
        a = _linearize_analytic(eq, inputs, outputs, False)
        n = _linearize_numeric(eq, inputs, outputs)
        compare_linearizations(a, n, tol)
        return a
    raise AssemblyError(f"unknown method {method!r}")


def compare_linearizations(a: StateSpaceBlock, b: StateSpaceBlock, tol: float = 1e-6) -> float:
    """Max entrywise deviation relative to max(1, |entry|); raises above ``tol``."""
    worst = 0.0
    report = []
    for nm in "ABCD":
        Ma, Mb = getattr(a, nm), getattr(b, nm)
        dev = np.abs(Ma - Mb) / np.maximum(1.0, np.abs(Mb))
        if dev.size:
            k = np.unravel_index(np.argmax(dev), dev.shape)
            worst = max(worst, float(dev[k]))
            rows = a.state_labels if nm in "AB" else a.output_labels
            cols = a.state_labels if nm in "AC" else a.input_labels
            report.append(f"{nm}[{rows[k[0]]}, {cols[k[1]]}]: {Ma[k]:.9g} vs {Mb[k]:.9g}")
    if worst > tol:
        raise LinearizationMismatch(f"max deviation {worst:.3e}; worst entries: " + "; ".join(report))
    return worst


def _linearize_numeric(eq: Equilibrium, inputs, outputs) -> StateSpaceBlock:
    m = eq.model
    act = m.active_index
    uidx = [INPUT_INDEX[s] for s in inputs]
    oidx = [SYS_OUTPUTS.index(s) for s in outputs]
    nx = len(act)

    def F(z):
        x = eq.x.copy()
        x[act] = z[:nx]
        u = eq.u.copy()
        u[uidx] += z[nx:]
        dx, y = m.evaluate(x, u)
        return np.concatenate([dx[act], y[oidx]])

    z0 = np.concatenate([eq.x[act], np.zeros(len(uidx))])
    J = fd_jacobian(F, z0, 1e-4)
    return StateSpaceBlock(J[:nx, :nx], J[:nx, nx:], J[nx:, :nx], J[nx:, nx:],
                           m.active_labels, inputs, outputs)


def _linearize_analytic(eq: Equilibrium, inputs, outputs, freeze_outer: bool) -> StateSpaceBlock:
    m = eq.model
    x, u = eq.x, eq.u
    dx, y = m.evaluate(x, u)
    Y = dict(zip(SYS_OUTPUTS, y))
    th0 = x[m.index("gfc.theta")]
    iv0 = (Y["i_vsc_D"], Y["i_vsc_Q"])
    vp0 = (Y["v_pcc_D"], Y["v_pcc_Q"])
    ig0 = (Y["i_g_D"], Y["i_g_Q"])
    vconv0 = tuple(m.gfc_comp.outputs(x[:m.gfc_comp.nstates],
                                      [*iv0, *vp0, *ig0, Y["w_sg"], u[U_DP], u[U_DQ]])[:2])
    gop = gc.GfcOperatingPoint(th0, iv0, vp0, vconv0, ig0)
    G = gc.build_gfc_linear(m.gfc, gop, freeze_outer=freeze_outer)
    G = G.relabel("gfc.", inputs={"p_ref": "p_ref", "q_ref": "q_ref"})

    def xs(lab):
        return x[m.index(lab)]

    closed = [k for k, f in enumerate(m.switches.z1) if f] if m.template is not Template.DEVICE else []
    nop = nw.NetworkOperatingPoint(
        w=Y["w_sg"], i1=(xs("net.i1_D"), xs("net.i1_Q")), vc=(xs("net.vc_D"), xs("net.vc_Q")),
        iT=tuple((xs(f"net.iT{k}_D"), xs(f"net.iT{k}_Q")) for k in closed),
        v_load=(Y["v_load_D"], Y["v_load_Q"]), G_load=u[U_GLOAD])
    net_p = m.net
    N = nw.build_network(net_p, m.switches, m.template, nop)
    N = N.relabel("net.")
    blocks = [G, N]
    wiring = [("i_vsc_D", "i_vsc_D"), ("i_vsc_Q", "i_vsc_Q"), ("v_pcc_D", "v_pcc_D"),
              ("v_pcc_Q", "v_pcc_Q"), ("i_g_D", "i_g_D"), ("i_g_Q", "i_g_Q"),
              ("v_conv_D", "v_conv_D"), ("v_conv_Q", "v_conv_Q")]
    ext = []
    if m.has_sg:
        j = m.gfc_comp.nstates + m.net_comp.nstates
        us0 = np.array([Y["v_load_D"], Y["v_load_Q"], u[U_SGP], u[U_SGV]])
        S = m.sg_comp.linearize(x[j:j + 10], us0)
        S = S.relabel("sg.", inputs={"v_n_D": "v_load_D", "v_n_Q": "v_load_Q"},
                      outputs={"Pe": "P_sg", "vt": "v_sg"})
        blocks.append(S)
        wiring += [("i_src_D", "i_src_D"), ("i_src_Q", "i_src_Q"), ("v_load_D", "v_load_D"),
                   ("v_load_Q", "v_load_Q"), ("w_sg", "w_sg"), ("w_sg", "w")]
        ys = m.sg_comp.outputs(x[j:j + 10], us0)
        # Q_sg = vt_Q i_D - vt_D i_Q in the network frame
        blocks.append(lti.gain([[-ys[1], ys[0], ys[6], -ys[5]]],
                               ["vt_D", "vt_Q", "i_src_D", "i_src_Q"], ["Q_sg"]))
        wiring += [("vt_D", "vt_D"), ("vt_Q", "vt_Q")]
    else:
        # frame speed held at nominal
        blocks.append(lti.gain(np.zeros((4, 1)), ["_hold"], ["w_sg", "w", "P_sg", "Q_sg"]))
        blocks.append(lti.gain(np.zeros((1, 1)), ["_hold"], ["v_sg"]))
        wiring += [("w_sg", "w_sg"), ("w", "w")]
        ext.append("_hold")
    vpm, ivm = Y["v_pcc"], Y["i_vsc"]
    blocks += [
        lti.gain([[vp0[0] / vpm, vp0[1] / vpm]], ["v_pcc_D", "v_pcc_Q"], ["v_pcc"]),
        lti.gain([[iv0[0] / ivm, iv0[1] / ivm]] if ivm > 0 else [[0.0, 0.0]],
                 ["i_vsc_D", "i_vsc_Q"], ["i_vsc"]),
        lti.gain(np.eye(3), ["P", "Q", "theta"], ["P_vsc", "Q_vsc", "theta_o"]),
    ]
    wiring += [("P", "P"), ("Q", "Q"), ("theta", "theta")]
    # every block input that is not wired is either a requested input or held at zero
    ins = {lab for b in blocks for lab in b.input_labels}
    wired = {t for _, t in wiring}
    present = [s for s in inputs if s in ins]
    hold = sorted(ins - wired - set(ext) - set(present))
    outs = [("theta_o" if s == "theta" else s) for s in outputs]
    blk = lti.interconnect(blocks, wiring, present + ext + hold, outs)
    blk = blk.subsystem(inputs=present)
    blk = gc.expand_inputs(blk, inputs)
    blk = StateSpaceBlock(blk.A, blk.B, blk.C, blk.D, blk.state_labels, blk.input_labels,
                          list(outputs))
    return blk.reorder_states(m.active_labels)


# --------------------------------------------------------- verification

@dataclass(frozen=True)
class VerificationReport:
    channels: tuple[str, ...]
    windows: tuple[tuple[float, float], ...]
    nrms: dict  # (channel, window index) -> normalized RMS deviation
    t: np.ndarray
    nonlinear: np.ndarray
    linear: np.ndarray

    def worst(self, channel: str) -> float:
        return max(v for (c, _), v in self.nrms.items() if c == channel)


def verify_model(eq: Equilibrium, load_step: float = 0.05, pref_step: float = 0.05,
                 t_load: float = 7.0, t_pref: float = 10.0, t_end: float = 15.0,
                 window: float = 5.0, dt: float | None = None,
                 channels=("P_vsc", "Q_vsc", "w_vsc", "w_sg", "P_sg")) -> VerificationReport:
    """Nonlinear versus linear responses to a load step and a power-reference step."""
    from . import timedomain as td

    dt = td.default_dt(eq.model.gfc) if dt is None else dt
    A = linearize(eq, method="analytic", inputs=("load_G", "p_ref") if eq.model.has_sg
                  else ("p_ref",), outputs=channels)
    ev = lti.eigen(A)
    if np.max(ev.values.real) > 0:
        raise AssemblyError("base case is unstable; no comparison emitted")
    events = []
    if eq.model.has_sg:
        events.append(td.LoadStep(t_load, load_step))
    events.append(td.PowerRefStep(t_pref, pref_step))
    scen = td.Scenario(t_end=t_end, dt=dt, events=tuple(events))
    ts = td.integrate(eq, scen)
    dG = eq.u[U_GLOAD] * load_step
    t = ts.t
    u = np.zeros((len(t), len(A.input_labels)))
    for k, lab in enumerate(A.input_labels):
        if lab == "load_G":
            u[t >= t_load, k] = dG
        elif lab == "p_ref":
            u[t >= t_pref, k] = pref_step
    stride = max(1, int(round(1e-3 / dt)))
    ts_t = t[::stride]
    y_lin = lti.simulate_steps(A, ts_t, u[::stride])
    nl = np.column_stack([ts.channel(c)[::stride] - ts.channel(c)[0] for c in channels])
    wins = []
    if eq.model.has_sg:
        wins.append((t_load, t_load + window))
    wins.append((t_pref, t_pref + window))
    nrms = {}
    for c_i, c in enumerate(channels):
        for w_i, (a, b) in enumerate(wins):
            sel = (ts_t >= a) & (ts_t < b)
            seg_nl = nl[sel, c_i] - nl[np.argmax(sel) - 1, c_i]
            seg_li = y_lin[sel, c_i] - y_lin[np.argmax(sel) - 1, c_i]
            scale = np.max(np.abs(seg_nl))
            nrms[(c, w_i)] = 0.0 if scale == 0 else float(
                np.sqrt(np.mean((seg_nl - seg_li) ** 2)) / scale)
    return VerificationReport(tuple(channels), tuple(wins), nrms, ts_t, nl, y_lin)
