"""Command-line front end: config ingestion, study dispatch, CSV and SVG output.

Usage::

    gfm-lab <verify|impedance|passivity|eigsweep|simulate> --config run.yaml --out results/

Outputs are named after the figure they reproduce (``fig14_zpp.csv`` and so on).
Every file carries the resolved config and its hash; equal hashes give
byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from . import analysis as an
from . import assembly as asm
from . import gfc_controls as gc
from . import lti_core as lti
from . import network as nw
from . import sync_machine as sm
from . import timedomain as td

EXIT_OK, EXIT_ANALYSIS, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("verify", "impedance", "passivity", "eigsweep", "simulate")
SIG = 12  # significant digits in CSV output


class ConfigError(ValueError):
    pass


class EmptyArtifactError(an.AnalysisError):
    pass


# ------------------------------------------------------------------ config

def _complex(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError("an impedance given as a list must be [R, X]")
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    return complex(v)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    base_mva: float = 70.0
    base_kv: float = 13.8
    frequency: float = 50.0

    @field_validator("base_mva", "base_kv", "frequency")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v


_OUTER = gc.OuterLoopParams()


class OuterSection(_Section):
    Kslope: float = _OUTER.Kslope
    T_QLC: float = _OUTER.T_QLC
    R: float = _OUTER.R
    T_inert: float = _OUTER.T_inert
    p_ref: float = _OUTER.p_ref
    q_ref: float = _OUTER.q_ref


class GfcSection(_Section):
    topology: Literal["no_inner", "current_only", "cascaded"] = "no_inner"
    f_sw: float = 2000.0
    design: int | None = None  # cascaded design id; default 1 at 2 kHz, 2 above
    tau_cc: float | None = None  # current-only loop time constant
    X_virt: float | None = None  # steady virtual reactance; topology default when None
    R_virt: float = 0.0
    R_virt_trans: float | None = None
    tau_hp: float = 1.0 / (2 * math.pi * 5.0)
    Y_virt_L: float = 0.15  # current-only virtual admittance reactance
    Y_virt_R: float = 0.0
    outer: OuterSection = OuterSection()


def _dc_section(name: str, dc) -> type[_Section]:
    """Config section mirroring a parameter dataclass, defaults included."""
    from pydantic import create_model

    inst = dc()
    cols = {}
    for f in fields(dc):
        val = getattr(inst, f.name)
        cols[f.name] = (float | None, val) if val is None else (type(val), val)
    return create_model(name, __base__=_Section, **cols)


SgSection = _dc_section("SgSection", sm.SgParams)
AvrSection = _dc_section("AvrSection", sm.AvrParams)
GovSection = _dc_section("GovSection", sm.GovParams)

_NET = nw.NetworkParams()


class NetworkSection(_Section):
    template: Literal["sg", "infinite_bus"] = "sg"
    L1: float = _NET.L1
    R1: float = _NET.R1
    Rf: float = _NET.Rf
    Cf: float = _NET.Cf
    Z_TL1: complex = _NET.Z_TL1
    Z_TL2: complex = _NET.Z_TL2
    Z_T1: complex = _NET.Z_T1
    Z_Load: float = _NET.Z_Load
    z1_branches: list[complex] | None = None
    z2_branches: list[complex] | None = None
    x_inf: float = 0.2  # infinite-bus template: total reactance to the source

    @field_validator("Z_TL1", "Z_TL2", "Z_T1", mode="before")
    @classmethod
    def _z(cls, v):
        return _complex(v)

    @field_validator("z1_branches", "z2_branches", mode="before")
    @classmethod
    def _zs(cls, v):
        return None if v is None else [_complex(z) for z in v]


EVENT_TAGS = {
    "load_step": td.LoadStep,
    "power_ref_step": td.PowerRefStep,
    "voltage_dip": td.VoltageDip,
    "angle_jump": td.AngleJump,
    "impedance_switch": td.ImpedanceSwitch,
    "fault_3lg": td.Fault3LG,
    "load_switch": td.LoadSwitch,
}

# case id -> figure-analog file stem
CASE_FIGURES = {
    "verification": "fig11_13_verification",
    "voltage_dip": "fig18_voltage_dip",
    "angle_jump": "fig19_angle_jump",
    "z1_to_0.6": "fig22_24_z1_to_0.6",
    "swing": "fig25_swing",
    "fault_3lg": "fig26_fault_3lg",
    "load_on": "fig27_load_on",
    "load_off": "fig28_load_off",
}


class ScenarioSection(_Section):
    case: str | None = "verification"
    events: list[dict[str, Any]] = []
    t_end: float | None = None
    dt: float | None = None
    record_every: int = 1

    @field_validator("case")
    @classmethod
    def _case(cls, v):
        if v is not None and v not in CASE_FIGURES:
            raise ValueError(f"unknown case {v!r}; valid cases: {', '.join(CASE_FIGURES)}")
        return v

    @field_validator("events")
    @classmethod
    def _events(cls, v):
        for k, ev in enumerate(v):
            tag = ev.get("type")
            if tag not in EVENT_TAGS:
                raise ValueError(f"event {k}: unknown type {tag!r}; valid types: "
                                 f"{', '.join(EVENT_TAGS)}")
        return v


class AnalysisSection(_Section):
    f_min: float = an.F_MIN
    f_max: float = an.F_MAX
    n_freq: int = an.N_GRID
    impedance_freeze_outer: bool = True
    passivity_freeze_outer: bool = False
    passivity_tol: float = 1e-4
    sweep_min: float = 0.01
    sweep_max: float = 0.5
    sweep_steps: int = 25
    sweep_x_over_r: float = 10.0

    @model_validator(mode="after")
    def _ranges(self):
        if not 0 < self.f_min < self.f_max:
            raise ValueError("need 0 < f_min < f_max")
        if self.n_freq < 2 or self.sweep_steps < 1:
            raise ValueError("grids need at least 2 frequencies and 1 sweep step")
        if not 0 < self.sweep_min <= self.sweep_max:
            raise ValueError("need 0 < sweep_min <= sweep_max")
        return self


class OutputSection(_Section):
    dir: str | None = None
    formats: list[Literal["csv", "svg"]] = ["csv", "svg"]


class RunConfig(_Section):
    system: SystemSection = SystemSection()
    gfc: GfcSection = GfcSection()
    sg: SgSection = SgSection()
    avr: AvrSection = AvrSection()
    gov: GovSection = GovSection()
    network: NetworkSection = NetworkSection()
    scenario: ScenarioSection = ScenarioSection()
    analysis: AnalysisSection = AnalysisSection()
    output: OutputSection = OutputSection()

    def resolved(self) -> dict:
        """Canonical JSON-ready dict (complex numbers as [R, X])."""
        def conv(o):
            if isinstance(o, complex):
                return [o.real, o.imag]
            if isinstance(o, dict):
                return {k: conv(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [conv(v) for v in o]
            return o
        return conv(self.model_dump())

    @property
    def hash(self) -> str:
        """Hash of everything that affects results (the output section is excluded)."""
        d = self.resolved()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        lines.append(f"{loc}: {msg}")
    return "; ".join(lines)


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a validated config; an empty document is the base case."""
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"syntax error at line {line}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping of sections")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    # build every object once so module invariants are checked up front
    model = build_model(cfg)
    if cfg.scenario.events:
        build_scenario(cfg, model.gfc)
    return cfg


# ---------------------------------------------------------- object builders

def _design_id(g: GfcSection) -> int:
    if g.design is not None:
        if g.design not in gc.CASCADED_TABLE:
            raise ConfigError(f"gfc.design must be one of {sorted(gc.CASCADED_TABLE)}")
        Td = gc.CASCADED_TABLE[g.design][0]
        if abs(g.f_sw * Td - 1.0) > 1e-9:
            raise ConfigError(
                f"gfc: design {g.design} fixes the PWM delay Td = {Td * 1e3:g} ms "
                f"(f_sw = {1 / Td:g} Hz), inconsistent with f_sw = {g.f_sw:g} Hz")
        return g.design
    for d, row in sorted(gc.CASCADED_TABLE.items()):
        if abs(g.f_sw * row[0] - 1.0) < 1e-9:
            return d
    raise ConfigError(f"gfc: no cascaded design for f_sw = {g.f_sw:g} Hz "
                      f"(designs use {sorted({1 / r[0] for r in gc.CASCADED_TABLE.values()})} Hz)")


def build_design(cfg: RunConfig, topology: str | None = None, design: int | None = None
                 ) -> gc.GfcDesign:
    g = cfg.gfc
    topo = topology or g.topology
    o = g.outer
    outer = gc.OuterLoopParams(Kslope=o.Kslope, T_QLC=o.T_QLC, R=o.R, T_inert=o.T_inert,
                               omega_b=2 * math.pi * cfg.system.frequency,
                               p_ref=o.p_ref, q_ref=o.q_ref)
    net = cfg.network
    kw = {}
    if g.R_virt_trans is not None:
        kw["R_virt_trans"] = g.R_virt_trans
    try:
        if topo == "no_inner":
            if g.design is not None and topology is None:
                raise ConfigError("gfc.design applies to the cascaded topology only")
            return gc.no_inner_design(g.f_sw, outer, X_virt=-0.05 if g.X_virt is None
                                      else g.X_virt, R_virt=g.R_virt, tau_hp=g.tau_hp, **kw)
        if topo == "current_only":
            if g.design is not None and topology is None:
                raise ConfigError("gfc.design applies to the cascaded topology only")
            if g.X_virt is not None or g.R_virt:
                raise ConfigError("current_only sets its steady impedance through "
                                  "Y_virt_L/Y_virt_R, not X_virt/R_virt")
            return gc.current_only_design(g.f_sw, g.tau_cc, outer, L1=net.L1, R1=net.R1,
                                          tau_hp=g.tau_hp,
                                          yvirt=gc.VirtualAdmittance(g.Y_virt_R, g.Y_virt_L),
                                          **kw)
        d = design if design is not None else _design_id(g)
        return gc.cascaded_design(d, outer, L1=net.L1, R1=net.R1, Cf=net.Cf,
                                  X_virt=0.15 if g.X_virt is None else g.X_virt,
                                  R_virt=g.R_virt, tau_hp=g.tau_hp, **kw)
    except gc.DesignError as exc:
        raise ConfigError(f"gfc: {exc}") from None


def build_network(cfg: RunConfig) -> nw.NetworkParams:
    n = cfg.network
    try:
        return nw.NetworkParams(
            L1=n.L1, R1=n.R1, Rf=n.Rf, Cf=n.Cf, Z_TL1=n.Z_TL1, Z_TL2=n.Z_TL2, Z_T1=n.Z_T1,
            Z_Load=n.Z_Load, omega_b=2 * math.pi * cfg.system.frequency,
            z1_branches=None if n.z1_branches is None else tuple(n.z1_branches),
            z2_branches=None if n.z2_branches is None else tuple(n.z2_branches))
    except nw.NetworkError as exc:
        raise ConfigError(f"network: {exc}") from None


def build_model(cfg: RunConfig, design: gc.GfcDesign | None = None) -> asm.SystemModel:
    design = design or build_design(cfg)
    net = build_network(cfg)
    try:
        sgp = sm.SgParams(**cfg.sg.model_dump())
        avr = sm.AvrParams(**cfg.avr.model_dump())
        gov = sm.GovParams(**cfg.gov.model_dump())
    except sm.SgError as exc:
        raise ConfigError(f"sg: {exc}") from None
    try:
        if cfg.network.template == "infinite_bus":
            return asm.infinite_bus_model(design, net, x_total=cfg.network.x_inf)
        return asm.SystemModel(design, net, sg=sgp, avr=avr, gov=gov)
    except (asm.AssemblyError, nw.NetworkError) as exc:
        raise ConfigError(f"network: {exc}") from None


def build_scenario(cfg: RunConfig, design: gc.GfcDesign) -> td.Scenario:
    s = cfg.scenario
    if s.t_end is None:
        raise ConfigError("scenario.t_end is required with an explicit event list")
    evs = []
    try:
        for k, ev in enumerate(s.events):
            args = {key: val for key, val in ev.items() if key != "type"}
            if "Z" in args:  # switched loads are resistive
                args["Z"] = float(args["Z"])
            if "R" in args:
                args["R"] = float(args["R"])
            evs.append(EVENT_TAGS[ev["type"]](**args))
        dt = s.dt if s.dt is not None else td.default_dt(design)
        return td.Scenario(s.t_end, dt, tuple(evs), s.record_every)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


# ---------------------------------------------------------------- artifacts

@dataclass
class Table:
    """Column table with a leading independent variable (time, frequency or path value)."""
    x_label: str
    x: np.ndarray
    columns: dict  # label -> 1-D array
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)


def table_from_series(ts: td.TimeSeries, channels=None) -> Table:
    channels = channels or ts.labels
    return Table("t_s", ts.t, {c: ts.channel(c) for c in channels})


def table_from_scan(scan: an.ImpedanceScan) -> Table:
    if scan.Z_pn is None:
        an.to_sequence(scan)
    cols = {}
    for name, (i, j) in (("dd", (0, 0)), ("dq", (0, 1)), ("qd", (1, 0)), ("qq", (1, 1))):
        cols[f"Re_Z{name}"] = scan.Z_DQ[:, i, j].real
        cols[f"Im_Z{name}"] = scan.Z_DQ[:, i, j].imag
    for name, (i, j) in (("pp", (0, 0)), ("pn", (0, 1)), ("np", (1, 0)), ("nn", (1, 1))):
        cols[f"Re_Z{name}"] = scan.Z_pn[:, i, j].real
        cols[f"Im_Z{name}"] = scan.Z_pn[:, i, j].imag
    cols["flagged"] = scan.flagged.astype(float)
    return Table("f_hz", scan.freq, cols)


def table_from_sweep(sw: an.EigenSweep) -> Table:
    cols = {"swing_re": sw.swing.real, "swing_im": sw.swing.imag, "freq_hz": sw.freq_hz,
            "damping_ratio": sw.damping}
    meta = {"truncated": sw.truncated} if sw.truncated else {}
    return Table("Z_TL_pu", sw.values, cols, meta)


def _as_table(artifact) -> Table:
    if isinstance(artifact, Table):
        return artifact
    if isinstance(artifact, td.TimeSeries):
        return table_from_series(artifact)
    if isinstance(artifact, an.ImpedanceScan):
        return table_from_scan(artifact)
    if isinstance(artifact, an.EigenSweep):
        return table_from_sweep(artifact)
    raise TypeError(f"cannot emit {type(artifact).__name__}")


def _fmt(v: float) -> str:
    return f"{v:.{SIG}g}"


def _header(cfg: RunConfig, meta: dict) -> list[str]:
    lines = [f"# config_hash: {cfg.hash}",
             "# config: " + json.dumps(cfg.resolved(), sort_keys=True, separators=(",", ":"))]
    for k in sorted(meta):
        lines.append(f"# {k}: {json.dumps(meta[k], sort_keys=True)}")
    return lines


def emit_csv(artifact, path: str | Path, cfg: RunConfig) -> Path:
    """Write one row per sample; '#' metadata lines, then a label row."""
    tab = _as_table(artifact)
    if len(tab) == 0 or not tab.columns:
        raise EmptyArtifactError(f"nothing to write for {Path(path).name}")
    path = Path(path)
    buf = io.StringIO()
    for line in _header(cfg, tab.meta):
        buf.write(line + "\n")
    labels = [tab.x_label] + list(tab.columns)
    buf.write(",".join(labels) + "\n")
    data = np.column_stack([tab.x] + [np.asarray(c, float) for c in tab.columns.values()])
    for row in data:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    path.write_text(buf.getvalue())
    return path


def read_csv(path: str | Path) -> tuple[dict, list[str], np.ndarray]:
    """Inverse of :func:`emit_csv`: (metadata, labels, data)."""
    meta, rows, labels = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition(": ")
            meta[key] = val
        elif labels is None:
            labels = line.split(",")
        else:
            rows.append([float(v) for v in line.split(",")])
    return meta, labels, np.array(rows).reshape(-1, len(labels))


# -------------------------------------------------------------------- plots

def _figure(nrows: int = 1, height: float = 3.0):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(nrows, 1, figsize=(7.0, height * nrows + 0.6), squeeze=False)
    return fig, axes[:, 0]


def _save(fig, path: Path, cfg: RunConfig, title: str, description: str = ""):
    import matplotlib
    import matplotlib.pyplot as plt

    fig.suptitle(title)
    fig.text(0.01, 0.005, f"config {cfg.hash}", fontsize=7, ha="left", va="bottom")
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    with matplotlib.rc_context({"svg.hashsalt": cfg.hash}):
        fig.savefig(path, format="svg",
                    metadata={"Date": None, "Title": title,
                              "Description": f"config_hash={cfg.hash}; {description}"})
    plt.close(fig)
    return path


def plot_series(series: dict, path: Path, cfg: RunConfig, title: str,
                channels=("P_vsc", "Q_vsc", "w_vsc")) -> Path:
    if not series or any(len(ts.t) == 0 for ts in series.values()):
        raise EmptyArtifactError(f"nothing to plot for {path.name}")
    fig, axes = _figure(len(channels), 2.2)
    for name, ts in series.items():
        for ax, ch in zip(axes, channels):
            ax.plot(ts.t, ts.channel(ch), lw=0.9, label=name)
    for ax, ch in zip(axes, channels):
        ax.set_ylabel(f"{ch} (pu)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, loc="best")
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path, cfg, title)


def plot_verification(rep: asm.VerificationReport, path: Path, cfg: RunConfig) -> Path:
    fig, axes = _figure(len(rep.channels), 2.0)
    for k, (ax, ch) in enumerate(zip(axes, rep.channels)):
        ax.plot(rep.t, rep.nonlinear[:, k], lw=1.0, label="nonlinear")
        ax.plot(rep.t, rep.linear[:, k], "--", lw=1.0, label="linear")
        ax.set_ylabel(f"d{ch} (pu)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, loc="best")
    axes[-1].set_xlabel("time (s)")
    return _save(fig, path, cfg, "Linear vs nonlinear model")


def plot_impedance(scans: dict, path: Path, cfg: RunConfig) -> Path:
    fig, axes = _figure(2, 2.6)
    for name, scan in scans.items():
        zpp = scan.entry("pp")
        axes[0].loglog(scan.freq, np.abs(zpp), label=name)
        axes[1].semilogx(scan.freq, np.degrees(np.angle(zpp)), label=name)
    axes[0].set_ylabel("|Z_pp| (pu)")
    axes[1].set_ylabel("angle Z_pp (deg)")
    axes[1].set_xlabel("frequency (Hz)")
    for ax in axes:
        ax.grid(alpha=0.3, which="both")
        ax.legend(fontsize=7, loc="best")
    return _save(fig, path, cfg, "Converter impedance Z_pp")


def plot_passivity(rep: an.PassivityReport, path: Path, cfg: RunConfig, label: str) -> Path:
    fig, axes = _figure(1, 3.4)
    ax = axes[0]
    ax.semilogx(rep.freq, rep.re_zpp, label=f"Re Z_pp ({label})")
    ax.axhline(0.0, color="k", lw=0.6)
    for k, (lo, hi) in enumerate(rep.re_zpp_bands):
        ax.axvspan(lo, hi, color="tab:red", alpha=0.25,
                   label="Re Z_pp < 0" if k == 0 else None)
    for k, (lo, hi) in enumerate(rep.bands):
        ax.axvspan(lo, hi, facecolor="none", edgecolor="tab:orange", hatch="//", lw=0.0,
                   label="Z + Z^H not positive" if k == 0 else None)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("Re Z_pp (pu)")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=7, loc="best")
    desc = (f"re_zpp_bands={json.dumps(rep.re_zpp_bands)}; "
            f"bands={json.dumps(rep.bands)}")
    return _save(fig, path, cfg, "Real part of Z_pp", desc)


def plot_sweep(sw: an.EigenSweep, path: Path, cfg: RunConfig, label: str) -> Path:
    fig, axes = _figure(1, 3.6)
    ax = axes[0]
    ax.plot(sw.swing.real, sw.swing.imag, "o-", ms=3, label=label)
    ax.annotate(f"{sw.values[0]:g} pu", (sw.swing[0].real, sw.swing[0].imag), fontsize=7)
    ax.annotate(f"{sw.values[-1]:g} pu", (sw.swing[-1].real, sw.swing[-1].imag), fontsize=7)
    ax.set_xlabel("real (1/s)")
    ax.set_ylabel("imag (rad/s)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="best")
    return _save(fig, path, cfg, "Swing-mode trajectory")


# ----------------------------------------------------------------- commands

class _Outputs:
    """Tracks written files so a failed run can remove them."""

    def __init__(self, out: Path, cfg: RunConfig):
        self.out, self.cfg, self.written = out, cfg, []
        self.formats = set(cfg.output.formats)

    def csv(self, artifact, stem: str):
        if "csv" in self.formats:
            path = self.out / f"{stem}.csv"
            self.written.append(path)
            emit_csv(artifact, path, self.cfg)

    def plot(self, fn, stem: str, *args, **kw):
        if "svg" in self.formats:
            path = self.out / f"{stem}.svg"
            self.written.append(path)
            fn(*args, path, self.cfg, **kw)

    def cleanup(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def _equilibrium(cfg: RunConfig, design: gc.GfcDesign | None = None) -> asm.Equilibrium:
    return asm.find_equilibrium(build_model(cfg, design))


def _freq(cfg: RunConfig) -> np.ndarray:
    a = cfg.analysis
    return an.default_grid(a.n_freq, a.f_min, a.f_max)


def cmd_verify(cfg: RunConfig, out: _Outputs) -> dict:
    eq = _equilibrium(cfg)
    dt = cfg.scenario.dt
    rep = asm.verify_model(eq, dt=dt)
    cols = {}
    for k, ch in enumerate(rep.channels):
        cols[f"{ch}_nonlinear"] = rep.nonlinear[:, k]
        cols[f"{ch}_linear"] = rep.linear[:, k]
    nrms = {f"{c}[{w}]": v for (c, w), v in rep.nrms.items()}
    stem = "fig11_13_verification"
    out.csv(Table("t_s", rep.t, cols, {"nrms": nrms, "topology": cfg.gfc.topology}), stem)
    out.plot(plot_verification, stem, rep)
    return {"nrms_max": max(rep.nrms.values())}


def cmd_impedance(cfg: RunConfig, out: _Outputs) -> dict:
    eq = _equilibrium(cfg)
    f = _freq(cfg)
    scan = an.dq_impedance(eq, f, freeze_outer=cfg.analysis.impedance_freeze_outer)
    ideal = an.ideal_source_scan(0.15, f)
    tab = table_from_scan(scan)
    an.to_sequence(ideal)
    tab.columns["Re_Zpp_ideal"] = ideal.Z_pn[:, 0, 0].real
    tab.columns["Im_Zpp_ideal"] = ideal.Z_pn[:, 0, 0].imag
    tab.meta = {"topology": cfg.gfc.topology, "freeze_outer": scan.meta.get("freeze_outer")}
    out.csv(tab, "fig14_zpp")
    out.plot(plot_impedance, "fig14_zpp", {cfg.gfc.topology: scan, "ideal 0.15 pu": ideal})
    return {"points": len(f)}


def cmd_passivity(cfg: RunConfig, out: _Outputs) -> dict:
    eq = _equilibrium(cfg)
    scan = an.dq_impedance(eq, _freq(cfg), freeze_outer=cfg.analysis.passivity_freeze_outer)
    rep = an.passivity_check(scan, tol=cfg.analysis.passivity_tol)
    cols = {"A": rep.A, "B": rep.B, "CC": rep.CC, "Re_Zpp": rep.re_zpp,
            "passive": rep.passive.astype(float)}
    meta = {"re_zpp_bands": rep.re_zpp_bands, "bands": rep.bands,
            "topology": cfg.gfc.topology}
    out.csv(Table("f_hz", rep.freq, cols, meta), "fig15_passivity")
    out.plot(plot_passivity, "fig15_passivity", rep, label=cfg.gfc.topology)
    return {"re_zpp_bands": rep.re_zpp_bands, "bands": rep.bands}


def cmd_eigsweep(cfg: RunConfig, out: _Outputs) -> dict:
    a = cfg.analysis
    model = build_model(cfg)
    values = np.linspace(a.sweep_min, a.sweep_max, a.sweep_steps)

    def path(m, z):
        return an.line_impedance_path(m, z, a.sweep_x_over_r)

    sw = an.eig_sweep(model, values, path, description=f"{cfg.gfc.topology} Z_TL sweep")
    stem = "fig17_eigsweep" if cfg.gfc.topology == "cascaded" else "fig16_eigsweep"
    tab = table_from_sweep(sw)
    tab.meta["topology"] = cfg.gfc.topology
    out.csv(tab, stem)
    if len(sw.values):
        out.plot(plot_sweep, stem, sw, label=model.gfc.name)
    return {"steps": len(sw.values), "truncated": sw.truncated}


def _case_designs(cfg: RunConfig, case: str) -> dict:
    if case == "swing":
        return {f"cascaded_d{d}": build_design(cfg, "cascaded", d) for d in gc.CASCADED_TABLE}
    return {t: build_design(cfg, t, 1 if t == "cascaded" and cfg.gfc.f_sw <= 2000 else None)
            for t in td.TOPOLOGIES}


def cmd_simulate(cfg: RunConfig, out: _Outputs, case: str | None = None) -> dict:
    s = cfg.scenario
    if case is None and s.events:
        design = build_design(cfg)
        eq = _equilibrium(cfg, design)
        scen = build_scenario(cfg, design)
        ts = td.integrate(eq, scen)
        stem = f"simulate_{cfg.gfc.topology}"
        out.csv(ts, stem)
        out.plot(plot_series, stem, {cfg.gfc.topology: ts}, title="Time-domain response")
        return {"samples": len(ts.t)}
    case = case or s.case or "verification"
    if case not in CASE_FIGURES:
        raise ConfigError(f"unknown case {case!r}; valid cases: {', '.join(CASE_FIGURES)}")
    fig = CASE_FIGURES[case]
    designs = _case_designs(cfg, case)
    series, summary = {}, {}
    for name, d in designs.items():
        if case == "swing":
            res = td.swing_stability_case(d, dt=s.dt)
            series[name] = res.series
            summary[name] = {"log_decrement": res.log_decrement, "diverged": res.diverged}
        else:
            ts, met = td.run_case(case, d, s.dt)
            series[name] = ts
            summary[name] = met
    for name, ts in series.items():
        tab = table_from_series(ts)
        tab.meta = {"case": case, "design": name, "metrics": summary[name]}
        out.csv(tab, f"{fig}_{name}")
    out.plot(plot_series, fig, series, title=case.replace("_", " "))
    return summary


def run(command: str, cfg: RunConfig, out_dir: str | Path, case: str | None = None) -> dict:
    """Execute one command; on failure every file written so far is removed."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; valid commands: {', '.join(COMMANDS)}")
    out_dir = Path(out_dir)
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = _Outputs(out_dir, cfg)
    try:
        if command == "simulate":
            return cmd_simulate(cfg, outputs, case)
        return {"verify": cmd_verify, "impedance": cmd_impedance, "passivity": cmd_passivity,
                "eigsweep": cmd_eigsweep}[command](cfg, outputs)
    except BaseException:
        outputs.cleanup()
        if created and not any(out_dir.iterdir()):
            out_dir.rmdir()
        raise


ANALYSIS_ERRORS = (an.AnalysisError, asm.AssemblyError, td.SimulationError, lti.LtiError,
                   nw.NetworkError, td.ScenarioError, OSError)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gfm-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="YAML run config (omit for the base case)")
    ap.add_argument("--out", help="output directory (default: output.dir or ./gfm-out)")
    ap.add_argument("--case", help="named time-domain case for simulate")
    args = ap.parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else ""
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
        if args.case is not None and args.case not in CASE_FIGURES:
            raise ConfigError(f"unknown case {args.case!r}; valid cases: "
                              f"{', '.join(CASE_FIGURES)}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output.dir or "gfm-out"
    try:
        summary = run(args.command, cfg, out, args.case)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ANALYSIS_ERRORS as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    print(json.dumps({"command": args.command, "config_hash": cfg.hash, "out": str(out),
                      "summary": summary}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
