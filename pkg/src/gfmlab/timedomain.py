"""Fixed-step nonlinear simulation of an assembled system through discrete events.

Integration is classical 4th-order Runge-Kutta over the compiled system kernel.
Events change inputs (load, references, infinite-bus source) or the network
topology, and are applied exactly on step boundaries.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy import signal

from . import assembly as asm
from . import gfc_controls as gc
from . import network as nw
from .assembly import Equilibrium, SystemModel
from .network import Template


class SimulationError(RuntimeError):
    pass


class ScenarioError(ValueError):
    pass


class SimulationDiverged(SimulationError):
    def __init__(self, t_last: float, series: "TimeSeries"):
        super().__init__(f"state norm exceeded the divergence limit after t = {t_last:.6f} s")
        self.t_last = t_last
        self.series = series


# ------------------------------------------------------------------ events

@dataclass(frozen=True)
class LoadStep:
    """Load conductance scaled by (1 + fraction)."""

    t: float
    fraction: float


@dataclass(frozen=True)
class PowerRefStep:
    """Converter active-power reference raised by ``fraction`` pu."""

    t: float
    fraction: float


@dataclass(frozen=True)
class VoltageDip:
    """Infinite-bus voltage magnitude set to ``level`` times its pre-event value."""

    t: float
    level: float

    def __post_init__(self):
        if not 0.0 < self.level <= 1.0:
            raise ScenarioError("voltage dip level must lie in (0, 1]")


@dataclass(frozen=True)
class AngleJump:
    """Infinite-bus voltage rotated by ``degrees``."""

    t: float
    degrees: float


@dataclass(frozen=True)
class ImpedanceSwitch:
    """Open or close one branch of corridor ``"z1"`` or ``"z2"``."""

    t: float
    corridor: str
    branch: int
    close: bool


@dataclass(frozen=True)
class Fault3LG:
    """Three-phase fault through a small resistance at ``bus`` ("load" or "pcc")."""

    t: float
    bus: str = "load"
    duration: float = 0.15
    R: float = 0.001

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError("fault duration must be positive")
        if self.bus not in ("load", "pcc"):
            raise ScenarioError(f"unknown fault bus {self.bus!r}")
        if self.R <= 0:
            raise ScenarioError("fault resistance must be positive")


@dataclass(frozen=True)
class LoadSwitch:
    """Switch a resistive load of ``Z`` pu at the load bus on or off."""

    t: float
    Z: float
    on: bool = True

    def __post_init__(self):
        if self.Z <= 0:
            raise ScenarioError("switched load impedance must be positive")


@dataclass(frozen=True)
class _FaultClear:
    t: float
    bus: str
    R: float


EVENT_TYPES = (LoadStep, PowerRefStep, VoltageDip, AngleJump, ImpedanceSwitch, Fault3LG,
               LoadSwitch)


@dataclass(frozen=True)
class Scenario:
    t_end: float
    dt: float | None = None  # None -> default_dt() of the simulated design
    events: tuple = ()
    record_every: int = 1

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if not self.t_end > 0:
            raise ScenarioError("t_end must be positive")
        if self.record_every < 1:
            raise ScenarioError("record_every must be >= 1")
        ev = tuple(self.events)
        for e in ev:
            if not isinstance(e, EVENT_TYPES):
                raise ScenarioError(f"unknown event {e!r}")
            if not 0.0 <= e.t <= self.t_end:
                raise ScenarioError(f"event at t = {e.t} lies outside [0, {self.t_end}]")
            if isinstance(e, Fault3LG) and e.t + e.duration > self.t_end:
                raise ScenarioError("fault clearing lies outside the horizon")
        if any(b.t < a.t for a, b in zip(ev, ev[1:])):
            raise ScenarioError("events must be sorted by time")
        object.__setattr__(self, "events", ev)

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.dt))

    def step_of(self, t: float) -> int:
        k = t / self.dt
        if abs(k - round(k)) > 1e-6:
            raise ScenarioError(f"event time {t} is not on the dt grid")
        return int(round(k))


def default_dt(design: gc.GfcDesign) -> float:
    """50 us, reduced to Td/5 for short delays so RK4 stays inside its stability region."""
    if 0 < design.Td < 0.25e-3:
        return design.Td / 5.0
    return 50e-6


# ------------------------------------------------------------ time series

@dataclass(frozen=True)
class TimeSeries:
    t: np.ndarray
    labels: tuple[str, ...]
    data: np.ndarray  # shape (len(t), len(labels))
    meta: dict = field(default_factory=dict)

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.labels.index(name)]
        except ValueError:
            raise KeyError(f"no channel {name!r}; available: {self.labels}") from None

    def at(self, name: str, t: float) -> float:
        k = int(np.argmin(np.abs(self.t - t)))
        return float(self.channel(name)[k])

    def window(self, t0: float, t1: float) -> "TimeSeries":
        sel = (self.t >= t0) & (self.t <= t1)
        return TimeSeries(self.t[sel], self.labels, self.data[sel], dict(self.meta))


CHANNELS = asm.SYS_OUTPUTS


# ------------------------------------------------------------------ kernel

@numba.njit(cache=True)
def _rk4(x, u, pg, offg, ng, pn, nn, ps, has_sg, dt, nsteps, rec_every, out, limit):
    """Advance ``x`` in place; rows of ``out`` receive outputs at recorded steps.

    Returns the number of completed steps (less than ``nsteps`` on divergence).
    """
    n = x.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xt = np.empty(n)
    y = np.empty(out.shape[1])
    row = 0
    for step in range(nsteps):
        asm.sys_eval(x, u, pg, offg, ng, pn, nn, ps, has_sg, k1, y)
        if step % rec_every == 0:
            for j in range(y.shape[0]):
                out[row, j] = y[j]
            row += 1
        for i in range(n):
            xt[i] = x[i] + 0.5 * dt * k1[i]
        asm.sys_eval(xt, u, pg, offg, ng, pn, nn, ps, has_sg, k2, y)
        for i in range(n):
            xt[i] = x[i] + 0.5 * dt * k2[i]
        asm.sys_eval(xt, u, pg, offg, ng, pn, nn, ps, has_sg, k3, y)
        for i in range(n):
            xt[i] = x[i] + dt * k3[i]
        asm.sys_eval(xt, u, pg, offg, ng, pn, nn, ps, has_sg, k4, y)
        nrm = 0.0
        for i in range(n):
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            nrm += x[i] * x[i]
        if not nrm < limit * limit:
            return step
    return nsteps


# ------------------------------------------------------------ integration

def _apply_event(ev, model: SystemModel, x: np.ndarray, u: np.ndarray, u0: np.ndarray):
    """Return the (model, x, u) in force right after ``ev``."""
    U = asm
    if isinstance(ev, LoadStep):
        u[U.U_GLOAD] += u0[U.U_GLOAD] * ev.fraction
    elif isinstance(ev, PowerRefStep):
        u[U.U_DP] += ev.fraction
    elif isinstance(ev, (VoltageDip, AngleJump)):
        if model.template is not Template.INFINITE_BUS:
            raise ScenarioError(f"{type(ev).__name__} needs the infinite-bus template")
        e = complex(u[U.U_ED], u[U.U_EQ])
        e = e * ev.level if isinstance(ev, VoltageDip) else e * cmath.exp(1j * math.radians(ev.degrees))
        u[U.U_ED], u[U.U_EQ] = e.real, e.imag
    elif isinstance(ev, LoadSwitch):
        if model.template is not Template.SG:
            raise ScenarioError("load switching needs the generator template")
        u[U.U_GLOAD] += (1.0 if ev.on else -1.0) / ev.Z
    elif isinstance(ev, Fault3LG):
        if ev.bus == "load":
            if model.template is not Template.SG:
                raise ScenarioError("a load-bus fault needs the generator template")
            u[U.U_GLOAD] += 1.0 / ev.R
        else:
            u[U.U_GPCC] += 1.0 / ev.R
    elif isinstance(ev, _FaultClear):
        u[U.U_GLOAD if ev.bus == "load" else U.U_GPCC] -= 1.0 / ev.R
    elif isinstance(ev, ImpedanceSwitch):
        sw, rule = nw.apply_switch(model.net, model.switches, model.template, ev.corridor,
                                   ev.branch, ev.close)
        old = model
        model = replace(model, switches=sw)
        xn = np.zeros(model.nstates)
        xn[:] = x  # state layout does not depend on switch flags
        for k in rule["zero_z1"]:
            xn[old.index(f"net.iT{k}_D")] = 0.0
            xn[old.index(f"net.iT{k}_Q")] = 0.0
        if model.has_sg and rule["z2_current_scale"] != 1.0:
            for lab in ("sg.i_d", "sg.i_q"):
                xn[model.index(lab)] *= rule["z2_current_scale"]
        x = xn
    else:
        raise ScenarioError(f"unknown event {ev!r}")
    return model, x, u


def _expanded_events(scen: Scenario):
    evs = list(scen.events)
    for e in scen.events:
        if isinstance(e, Fault3LG):
            evs.append(_FaultClear(e.t + e.duration, e.bus, e.R))
    return sorted(evs, key=lambda e: e.t)


def integrate(eq: Equilibrium, scen: Scenario, limit: float = 1e6) -> TimeSeries:
    """Simulate from an equilibrium through the scenario's events."""
    model = eq.model
    if scen.dt is None:
        scen = replace(scen, dt=default_dt(model.gfc))
    x = eq.x.astype(float).copy()
    u0 = eq.u.astype(float).copy()
    u = u0.copy()
    N = scen.nsteps
    rec = scen.record_every
    nrec = (N + rec - 1) // rec + 1
    out = np.full((nrec, asm.N_SYS_Y), np.nan)
    events = _expanded_events(scen)
    marks = [scen.step_of(e.t) for e in events]
    step, row, ei = 0, 0, 0
    while True:
        while ei < len(events) and marks[ei] == step:
            model, x, u = _apply_event(events[ei], model, x, u, u0)
            ei += 1
        stop = marks[ei] if ei < len(events) else N
        n = stop - step
        if n > 0:
            if step % rec:
                raise ScenarioError("event times must align with the recording stride")
            seg = np.empty(((n + rec - 1) // rec, asm.N_SYS_Y))
            done = _rk4(x, u, *model.kernel_args(), scen.dt, n, rec, seg, limit)
            nseg = (done + rec - 1) // rec if done < n else len(seg)
            out[row:row + nseg] = seg[:nseg]
            row += nseg
            step += done
            if done < n:
                t = np.arange(row) * rec * scen.dt
                ts = TimeSeries(t, CHANNELS, out[:row], {"diverged": True, "dt": scen.dt})
                raise SimulationDiverged(step * scen.dt, ts)
        if step >= N:
            break
    out[row] = model.outputs(x, u)
    row += 1
    t = np.arange(row) * rec * scen.dt
    t[-1] = N * scen.dt
    return TimeSeries(t, CHANNELS, out[:row], {"x_final": x, "model": model, "dt": scen.dt})


# ---------------------------------------------------------------- metrics

def first_peak(ts: TimeSeries, channel: str, t_event: float, window: float = 0.1):
    """Largest |deviation| from the pre-event value within ``window`` after the event."""
    y = ts.channel(channel)
    k0 = int(np.searchsorted(ts.t, t_event)) - 1
    pre = y[max(k0, 0)]
    sel = (ts.t > t_event) & (ts.t <= t_event + window)
    dev = np.abs(y[sel] - pre)
    j = int(np.argmax(dev))
    return float(dev[j]), float(ts.t[sel][j] - t_event)


def settled_value(ts: TimeSeries, channel: str, span: float = 0.5) -> float:
    sel = ts.t >= ts.t[-1] - span
    return float(np.mean(ts.channel(channel)[sel]))


def log_decrement(t: np.ndarray, y: np.ndarray, band: tuple[float, float] = (0.5, 8.0),
                  skip: float = 0.3, cap: float = 0.05, floor: float = 1e-7):
    """Per-cycle log decrement of the dominant electromechanical oscillation in ``y``.

    ``y`` is band-passed to ``band`` (Hz) to strip slow governor dynamics and
    fast control modes; peak amplitudes are fitted while they stay below ``cap``
    (the small-signal regime). Returns ``(delta, freq_hz)`` where ``delta > 0``
    decays and ``delta <= 0`` does not; ``nan`` when there is no oscillation.
    """
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    fs = 1.0 / np.median(np.diff(t))
    sos = signal.butter(2, band, btype="bandpass", fs=fs, output="sos")
    r = signal.sosfiltfilt(sos, y - y[-1])
    sel = t >= t[0] + skip
    t, r = t[sel], r[sel]
    pk, _ = signal.find_peaks(r)
    if len(pk) < 3:
        return math.nan, math.nan
    amp = r[pk]
    if np.max(amp) < floor:
        return math.nan, math.nan
    # stop at the first peak that leaves the small-signal regime or sinks into noise
    n = len(amp)
    for k, a in enumerate(amp):
        if a > cap:
            n = max(k + 1, 3)
            break
        if a < 1e-3 * np.max(amp[:3]):
            n = k
            break
    tp, amp = t[pk][:n], amp[:n]
    if len(amp) < 2 or np.any(amp <= 0):
        return math.nan, math.nan
    freq = 1.0 / np.median(np.diff(tp))
    sigma = np.polyfit(tp, np.log(amp), 1)[0]
    return float(-sigma / freq), float(freq)


# ---------------------------------------------------------------- catalog

TOPOLOGIES = ("no_inner", "current_only", "cascaded")


def catalog_designs(f_sw: float = 2000.0) -> dict:
    return {t: gc.base_design(t, f_sw) for t in TOPOLOGIES}


CASES = ("voltage_dip", "angle_jump", "load_on", "load_off", "fault_3lg", "z1_to_0.6",
         "verification")


@dataclass(frozen=True)
class CaseResult:
    case: str
    series: dict  # topology -> TimeSeries
    metrics: dict  # topology -> {metric: value}
    t_event: float


def _case_setup(case: str, design: gc.GfcDesign):
    """Model, scenario and event time for a named case."""
    if case in ("voltage_dip", "angle_jump"):
        m = asm.infinite_bus_model(design)
        ev = VoltageDip(1.0, 0.5) if case == "voltage_dip" else AngleJump(1.0, 10.0)
        return m, asm.Dispatch(), Scenario(4.0, events=(ev,)), 1.0
    if case in ("load_on", "load_off"):
        # converter and load separated by 0.15 pu; the extra load is 0.5 pu
        net = nw.NetworkParams(z1_branches=(complex(0.015, 0.15),))
        if case == "load_on":
            m = SystemModel(design, net)
            ev = LoadSwitch(1.0, 2.0, on=True)
        else:
            m = SystemModel(design, net, switches=nw.SwitchState(extra_load_G=0.5))
            ev = LoadSwitch(1.0, 2.0, on=False)
        return m, asm.Dispatch(), Scenario(6.0, events=(ev,)), 1.0
    if case == "fault_3lg":
        m = SystemModel(design)
        return m, asm.Dispatch(), Scenario(4.0, events=(Fault3LG(1.0, "load"),)), 1.0
    if case == "z1_to_0.6":
        net = nw.fig21_params()
        m = SystemModel(design, net, switches=nw.SwitchState(z1=(False, False, True)))
        evs = (ImpedanceSwitch(1.0, "z1", 1, True), ImpedanceSwitch(1.0, "z1", 2, False))
        return m, asm.Dispatch(), Scenario(20.0, events=evs, record_every=20), 1.0
    if case == "verification":
        m = SystemModel(design)
        evs = (LoadStep(7.0, 0.05), PowerRefStep(10.0, 0.05))
        return m, asm.Dispatch(), Scenario(15.0, events=evs, record_every=20), 7.0
    raise ScenarioError(f"unknown case {case!r}; valid cases: {', '.join(CASES)}")


def run_case(case: str, design: gc.GfcDesign, dt: float | None = None) -> tuple[TimeSeries, dict]:
    m, disp, scen, te = _case_setup(case, design)
    if dt is not None:
        scen = replace(scen, dt=dt)
    eq = asm.find_equilibrium(m, disp)
    ts = integrate(eq, scen)
    met = {}
    for ch in ("P_vsc", "Q_vsc"):
        pk, tpk = first_peak(ts, ch, te)
        met[f"{ch}_pre"] = float(ts.channel(ch)[int(np.searchsorted(ts.t, te)) - 1])
        met[f"{ch}_first_peak"] = pk
        met[f"{ch}_first_peak_time"] = tpk
        met[f"{ch}_settled"] = settled_value(ts, ch)
    # mean power change over the first fundamental cycle after the event
    sel = (ts.t > te) & (ts.t <= te + 0.02)
    met["P_vsc_first_cycle"] = float(np.mean(ts.channel("P_vsc")[sel])) - met["P_vsc_pre"]
    return ts, met


def run_catalog(case: str, designs: dict | None = None, dt: float | None = None) -> CaseResult:
    """Run one named case for each design (default: the three base topologies)."""
    designs = designs or catalog_designs()
    series, metrics = {}, {}
    te = None
    for name, d in designs.items():
        ts, met = run_case(case, d, dt)
        series[name], metrics[name] = ts, met
        te = _case_setup(case, d)[3]
    return CaseResult(case, series, metrics, te)


# ------------------------------------------------------ swing stability

@dataclass(frozen=True)
class SwingCaseResult:
    design: str
    series: TimeSeries
    log_decrement: float
    freq_hz: float
    diverged: bool

    @property
    def damped(self) -> bool:
        return (not self.diverged) and self.log_decrement > 0


def swing_stability_case(design: gc.GfcDesign, t_event: float = 15.0, observe: float = 10.0,
                         dt: float | None = None, with_event: bool = True) -> SwingCaseResult:
    """Z1 and Z2 corridors reduced from 0.2 to 0.1 pu at ``t_event``."""
    net = nw.fig21_params()
    m = SystemModel(design, net, switches=nw.SwitchState(z1=(False, False, True),
                                                         z2=(True, False)))
    eq = asm.find_equilibrium(m)
    evs = ()
    if with_event:
        evs = (ImpedanceSwitch(t_event, "z1", 0, True), ImpedanceSwitch(t_event, "z1", 1, True),
               ImpedanceSwitch(t_event, "z2", 1, True))
    scen = Scenario(t_event + observe, dt, evs, record_every=20)
    diverged = False
    try:
        ts = integrate(eq, scen)
    except SimulationDiverged as exc:
        ts, diverged = exc.series, True
    sel = ts.t >= t_event
    delta, f = log_decrement(ts.t[sel], ts.channel("P_vsc")[sel])
    if diverged and not delta <= 0:
        delta = -math.inf
    return SwingCaseResult(design.name, ts, delta, f, diverged)
