"""Frequency-domain impedance, passivity verdicts and eigenvalue sweeps.

The converter impedance is taken at the PCC with the grid removed: the device
(converter controls plus LC filter) is linearized at the operating point of the
full system and a current is injected into the PCC node. ``Z_DQ(jw)`` maps the
injected current to the PCC voltage in the synchronous DQ frame.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import assembly as asm
from . import lti_core as lti
from . import network as nw
from .assembly import Equilibrium, SystemModel
from .lti_core import StateSpaceBlock

A_Z = np.array([[1.0, 1.0j], [1.0, -1.0j]]) / math.sqrt(2.0)
A_Z_INV = A_Z.conj().T

F_MIN, F_MAX, N_GRID = 5.0, 1000.0, 400


class AnalysisError(RuntimeError):
    pass


def worker_count() -> int:
    """Thread cap from GFMLAB_THREADS (default: all CPUs)."""
    env = os.environ.get("GFMLAB_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise AnalysisError(f"GFMLAB_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise AnalysisError("GFMLAB_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _pmap(fn, items):
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def default_grid(n: int = N_GRID, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return np.logspace(math.log10(f_min), math.log10(f_max), n)


# ------------------------------------------------------------ impedance

@dataclass
class ImpedanceScan:
    freq: np.ndarray  # Hz
    Z_DQ: np.ndarray  # (n, 2, 2) complex
    Z_pn: np.ndarray | None = None
    flagged: np.ndarray | None = None  # samples where the resolvent was singular
    meta: dict = field(default_factory=dict)
    evaluator: Callable[[float], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.freq = np.asarray(self.freq, float)
        self.Z_DQ = np.asarray(self.Z_DQ, complex)
        if self.Z_DQ.shape != (len(self.freq), 2, 2):
            raise AnalysisError("Z_DQ must have shape (n, 2, 2)")
        if self.flagged is None:
            self.flagged = ~np.all(np.isfinite(self.Z_DQ), axis=(1, 2))

    def entry(self, name: str) -> np.ndarray:
        """One element, e.g. ``"DD"``, ``"QD"``, ``"pp"`` or ``"np"``."""
        if name in ("DD", "DQ", "QD", "QQ"):
            i, j = "DQ".index(name[0]), "DQ".index(name[1])
            return self.Z_DQ[:, i, j]
        if self.Z_pn is None:
            raise AnalysisError("sequence impedance not computed; call to_sequence()")
        i, j = "pn".index(name[0]), "pn".index(name[1])
        return self.Z_pn[:, i, j]

    def sequence_residual(self) -> float:
        """Max deviation of stored Z_pn from A_Z Z_DQ A_Z^-1."""
        if self.Z_pn is None:
            raise AnalysisError("sequence impedance not computed")
        ok = ~self.flagged
        ref = A_Z @ self.Z_DQ[ok] @ A_Z_INV
        return float(np.max(np.abs(ref - self.Z_pn[ok]), initial=0.0))


def impedance_block(eq: Equilibrium, freeze_outer: bool = False) -> StateSpaceBlock:
    """Linear device model from PCC injection (D, Q) to PCC voltage (D, Q)."""
    dev = eq if eq.model.template is nw.Template.DEVICE else asm.device_equilibrium(eq)
    return asm.linearize(dev, inputs=("i_inj_D", "i_inj_Q"), outputs=("v_pcc_D", "v_pcc_Q"),
                         freeze_outer=freeze_outer)


def block_impedance(block: StateSpaceBlock, freq: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    samples = lti.freq_response(block, 2 * np.pi * np.asarray(freq, float))
    Z = np.array([s.G for s in samples], dtype=complex).reshape(len(samples), 2, 2)
    flagged = np.array([not s.ok for s in samples])
    return Z, flagged


def dq_impedance(eq: Equilibrium, freq: Sequence[float] | None = None,
                 freeze_outer: bool = False) -> ImpedanceScan:
    """Closed-loop DQ impedance of the converter at the PCC."""
    freq = default_grid() if freq is None else np.asarray(freq, float)
    blk = impedance_block(eq, freeze_outer)
    Z, flagged = block_impedance(blk, freq)
    g = eq.model.gfc
    meta = {"topology": g.topology.value, "design": g.name, "f_sw": g.f_sw,
            "freeze_outer": freeze_outer,
            "operating_point": {k: float(v) for k, v in eq.summary.items()
                                if isinstance(v, (int, float, np.floating))}}
    return ImpedanceScan(freq, Z, None, flagged, meta,
                         lambda f: block_impedance(blk, [f])[0][0])


def rl_impedance(z: complex, freq: Sequence[float], w0: float = 1.0,
                 omega_b: float = nw.OMEGA_B) -> np.ndarray:
    """DQ impedance of a series RL branch, shape (n, 2, 2)."""
    z = complex(z)
    out = np.empty((len(freq), 2, 2), complex)
    for k, f in enumerate(freq):
        s = 2j * np.pi * f
        d = z.real + z.imag * s / omega_b
        out[k] = [[d, -w0 * z.imag], [w0 * z.imag, d]]
    return out


def ideal_source_scan(X: float = 0.15, freq: Sequence[float] | None = None) -> ImpedanceScan:
    """Ideal voltage source behind reactance ``X``: the reference impedance."""
    freq = default_grid() if freq is None else np.asarray(freq, float)
    return to_sequence(ImpedanceScan(freq, rl_impedance(complex(0, X), freq),
                                     meta={"topology": "ideal", "X": X},
                                     evaluator=lambda f: rl_impedance(complex(0, X), [f])[0]))


def passive_network_scan(net: nw.NetworkParams | None = None,
                         freq: Sequence[float] | None = None) -> ImpedanceScan:
    """Grid seen from the PCC with sources removed: Rf-Cf shunt, Z1 to the load bus,
    the load in parallel with Z2 to a shorted generator."""
    net = net or nw.NetworkParams()
    freq = default_grid() if freq is None else np.asarray(freq, float)

    def at(f):
        s = 2j * np.pi * f
        wb = net.omega_b
        J = np.array([[0.0, -1.0], [1.0, 0.0]])
        I = np.eye(2)
        # capacitor: (Cf/wb) dv/dt = i - w Cf J v  ->  Y = (s Cf/wb) I + Cf J
        Yc = net.Cf * s / wb * I + net.Cf * J
        Zsh = net.Rf * I + np.linalg.inv(Yc)
        Zl = np.linalg.inv(net.G_load * I + np.linalg.inv(rl_impedance(net.z2[0], [f])[0]))
        Zg = rl_impedance(net.z1[0], [f])[0] + Zl
        return np.linalg.inv(np.linalg.inv(Zsh) + np.linalg.inv(Zg))

    Z = np.array([at(f) for f in freq])
    return to_sequence(ImpedanceScan(freq, Z, meta={"topology": "passive_network"},
                                     evaluator=at))


def to_sequence(scan: ImpedanceScan) -> ImpedanceScan:
    """Modified positive/negative-sequence impedance Z_pn = A_Z Z_DQ A_Z^-1."""
    scan.Z_pn = A_Z @ scan.Z_DQ @ A_Z_INV
    return scan


# ------------------------------------------------------------- passivity

@dataclass
class PassivityReport:
    freq: np.ndarray
    A: np.ndarray
    B: np.ndarray
    CC: np.ndarray
    A_pos: np.ndarray
    B_pos: np.ndarray
    det_pos: np.ndarray
    passive: np.ndarray  # per-frequency verdict (with tolerance)
    re_zpp: np.ndarray
    bands: list[tuple[float, float]]
    worst_re_zpp: float
    worst_re_zpp_freq: float
    tol: float
    meta: dict = field(default_factory=dict)
    re_zpp_bands: list[tuple[float, float]] = field(default_factory=list)

    @property
    def is_passive(self) -> bool:
        return not self.bands

    def bands_intersecting(self, lo: float, hi: float) -> list[tuple[float, float]]:
        return [b for b in self.bands if b[0] <= hi and b[1] >= lo]


def _hermitian_terms(Zpn):
    A = 2 * Zpn[..., 0, 0].real
    B = 2 * Zpn[..., 1, 1].real
    C = np.conj(Zpn[..., 0, 1]) + Zpn[..., 1, 0]
    CC = (C * np.conj(C)).real
    return A, B, CC


def _verdict(A, B, CC, tol):
    # smallest eigenvalue of Z + Z^H; >= 0 exactly when A > 0, B > 0, AB > CC*
    lam_min = 0.5 * ((A + B) - np.sqrt((A - B) ** 2 + 4 * CC))
    return lam_min >= -2 * tol


def _full_ok(Zpn, tol):
    A, B, CC = _hermitian_terms(Zpn)
    return _verdict(A, B, CC, tol)


def _zpp_ok(Zpn, tol):
    return Zpn[..., 0, 0].real >= -tol


def _refine(evaluator, test, f_pass: float, f_fail: float, tol: float, resolution: float) -> float:
    """Bisect a passive/non-passive boundary down to ``resolution`` Hz."""
    while abs(f_fail - f_pass) > resolution:
        fm = 0.5 * (f_pass + f_fail)
        if test(A_Z @ evaluator(fm) @ A_Z_INV, tol):
            f_pass = fm
        else:
            f_fail = fm
    return f_fail


def _bands(f, good, evaluator, test, tol, resolution):
    bands = []
    k, n = 0, len(f)
    while k < n:
        if good[k]:
            k += 1
            continue
        j = k
        while j + 1 < n and not good[j + 1]:
            j += 1
        lo, hi = f[k], f[j]
        if evaluator is not None:
            if k > 0:
                lo = _refine(evaluator, test, f[k - 1], f[k], tol, resolution)
            if j < n - 1:
                hi = _refine(evaluator, test, f[j + 1], f[j], tol, resolution)
        bands.append((float(lo), float(hi)))
        k = j + 1
    return bands


def passivity_check(scan: ImpedanceScan, tol: float = 1e-4, resolution: float = 1.0,
                    refine: bool = True) -> PassivityReport:
    """Passivity verdict per frequency and the maximal violation bands.

    A frequency is passive when Z + Z^H is positive semidefinite up to ``tol`` pu
    (A > 0, B > 0 and AB > CC* for ``tol = 0``). ``re_zpp_bands`` lists the
    ranges where Re{Z_pp} < -tol. Band edges are bisected to ``resolution`` Hz
    when the scan carries an evaluator.
    """
    if scan.Z_pn is None:
        to_sequence(scan)
    ok = ~scan.flagged
    A, B, CC = _hermitian_terms(scan.Z_pn)
    passive = _verdict(A, B, CC, tol) | ~ok
    f = scan.freq
    ev = scan.evaluator if refine else None
    bands = _bands(f, passive, ev, _full_ok, tol, resolution)
    re_zpp = scan.Z_pn[:, 0, 0].real
    zpp_bands = _bands(f, (re_zpp >= -tol) | ~ok, ev, _zpp_ok, tol, resolution)
    masked = np.where(ok, re_zpp, np.inf)
    w = int(np.argmin(masked))
    return PassivityReport(f, A, B, CC, A > 0, B > 0, A * B > CC, passive, re_zpp, bands,
                           float(re_zpp[w]), float(f[w]), tol, dict(scan.meta), zpp_bands)


# ------------------------------------------------------- swing modes

POWER_LOOP_STATES = ("gfc.plc", "gfc.theta")
SG_SPEED = "sg.w"


@dataclass(frozen=True)
class SwingMode:
    found: bool
    index: int = -1
    value: complex = complex("nan")
    freq_hz: float = math.nan
    damping: float = math.nan
    score: float = math.nan
    top_participants: tuple[tuple[str, float], ...] = ()
    reason: str = ""


def identify_swing_mode(sol: lti.EigenSolution, P: np.ndarray, labels: Sequence[str],
                        band: tuple[float, float] = (0.1, 5.0), min_sg: float = 1e-3) -> SwingMode:
    """Electromechanical pair with the largest SG-speed plus power-loop participation.

    The power loop counts both its filter state and the angle integrator. Without
    a generator speed state there is no swing mode and a not-found result is given.
    """
    labels = list(labels)
    if SG_SPEED not in labels:
        return SwingMode(False, reason="no generator speed state in the model")
    rows = [labels.index(SG_SPEED)] + [labels.index(s) for s in POWER_LOOP_STATES if s in labels]
    lam = sol.values
    fr = lam.imag / (2 * np.pi)
    cand = np.nonzero((fr >= band[0]) & (fr <= band[1]))[0]
    cand = [i for i in cand if P[rows[0], i] >= min_sg]
    if not cand:
        return SwingMode(False, reason=f"no oscillatory pair in {band[0]}-{band[1]} Hz "
                                       "with generator speed participation")
    scores = [(P[rows, i].sum(), P[:, i].max(), i) for i in cand]
    _, _, i = max(scores)
    order = np.argsort(-P[:, i])[:5]
    top = tuple((labels[k], float(P[k, i])) for k in order)
    return SwingMode(True, int(i), complex(lam[i]), float(fr[i]), float(sol.damping[i]),
                     float(P[rows, i].sum()), top)


def swing_mode(eq: Equilibrium) -> SwingMode:
    blk = asm.linearize(eq)
    sol = lti.eigen(blk)
    return identify_swing_mode(sol, lti.participation(blk, sol), blk.state_labels)


# ----------------------------------------------------------- eig sweeps

@dataclass
class EigenSweep:
    description: str
    values: np.ndarray  # path parameter per step
    eigenvalues: list[np.ndarray]
    swing: np.ndarray  # tracked swing eigenvalue per step (upper half plane)
    participation: list[dict]  # state -> participation of the tracked mode
    truncated: str = ""

    @property
    def damping(self) -> np.ndarray:
        return -self.swing.real / np.abs(self.swing)

    @property
    def freq_hz(self) -> np.ndarray:
        return np.abs(self.swing.imag) / (2 * np.pi)

    def continuity_ratio(self) -> np.ndarray:
        """Step displacement of the tracked mode over its distance to the nearest other eigenvalue."""
        out = []
        for k in range(1, len(self.swing)):
            ev = self.eigenvalues[k]
            d = np.abs(ev - self.swing[k])
            gap = np.min(d[d > 1e-12]) if np.any(d > 1e-12) else np.inf
            out.append(abs(self.swing[k] - self.swing[k - 1]) / gap)
        return np.array(out)


def line_impedance_path(model: SystemModel, z: float, x_over_r: float = 10.0) -> SystemModel:
    """Z_TL1 = Z_TL2 = z (pu magnitude, given X/R), transformer kept in series."""
    zc = complex(z / x_over_r, z)
    net = replace(model.net, Z_TL1=zc, Z_TL2=zc, z1_branches=None, z2_branches=None)
    return replace(model, net=net, switches=nw.SwitchState())


def _match(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    """perm such that cur[perm[i]] continues prev[i] with minimal total displacement."""
    cost = np.abs(prev[:, None] - cur[None, :])
    r, c = linear_sum_assignment(cost)
    perm = np.empty(len(prev), int)
    perm[r] = c
    return perm


def eig_sweep(model: SystemModel, values: Sequence[float],
              path: Callable[[SystemModel, float], SystemModel] = line_impedance_path,
              dispatch: asm.Dispatch | None = None, description: str = "") -> EigenSweep:
    """Re-solve equilibrium, linearize and eigen-solve along a parameter path.

    The swing mode is identified at the first step and then followed by
    minimal-displacement matching of consecutive eigenvalue sets.
    """
    values = np.asarray(values, float)

    def step(v):
        try:
            eq = asm.find_equilibrium(path(model, float(v)), dispatch)
            blk = asm.linearize(eq)
        except (asm.AssemblyError, nw.NetworkError) as exc:
            return exc
        sol = lti.eigen(blk)
        return sol, lti.participation(blk, sol), blk.state_labels

    results = _pmap(step, list(values))
    eigs, swing, parts = [], [], []
    truncated = ""
    idx = None
    for k, res in enumerate(results):
        if isinstance(res, Exception):
            truncated = f"equilibrium failed at step {k} (value {values[k]:.4g}): {res}"
            break
        sol, P, labels = res
        lam = sol.values
        if idx is None:
            sm = identify_swing_mode(sol, P, labels)
            if not sm.found:
                raise AnalysisError(f"no swing mode at the start of the path: {sm.reason}")
            idx = sm.index
        else:
            perm = _match(eigs[-1], lam)
            idx = int(perm[idx])
        if lam[idx].imag < 0:  # stay on the upper member of the pair
            idx = int(np.argmin(np.abs(lam - np.conj(lam[idx]))))
        eigs.append(lam)
        swing.append(lam[idx])
        parts.append({s: float(P[j, idx]) for j, s in enumerate(labels)})
    n = len(swing)
    return EigenSweep(description or "Z_TL1 = Z_TL2 sweep", values[:n], eigs, np.array(swing),
                      parts, truncated)


def monotone(x: np.ndarray, increasing: bool = True, allow: int = 0, tol: float = 1e-9) -> bool:
    """Monotone apart from at most ``allow`` reversed steps."""
    d = np.diff(np.asarray(x, float))
    bad = np.sum(d < -tol) if increasing else np.sum(d > tol)
    return bool(bad <= allow)


def turning_shape(x: np.ndarray, tol: float = 1e-6) -> str:
    """"increasing", "decreasing", "down-up", "up-down" or "other"."""
    x = np.asarray(x, float)
    if monotone(x, True, tol=tol):
        return "increasing"
    if monotone(x, False, tol=tol):
        return "decreasing"
    k = int(np.argmin(x))
    if 0 < k < len(x) - 1 and monotone(x[:k + 1], False, tol=tol) and monotone(x[k:], True, tol=tol):
        return "down-up"
    k = int(np.argmax(x))
    if 0 < k < len(x) - 1 and monotone(x[:k + 1], True, tol=tol) and monotone(x[k:], False, tol=tol):
        return "up-down"
    return "other"
