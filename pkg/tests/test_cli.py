import json
import re

import numpy as np
import pytest

from gfmlab import analysis as an
from gfmlab import cli
from gfmlab import network as nw
from gfmlab import timedomain as td

TOPOLOGIES = ("no_inner", "current_only", "cascaded")


def cfg_for(topology="no_inner", extra=""):
    return cli.parse_config(f"gfc:\n  topology: {topology}\n{extra}")


def test_empty_config_is_base_case():
    cfg = cli.parse_config("")
    assert cfg.system.base_mva == 70 and cfg.system.base_kv == 13.8
    assert cfg.system.frequency == 50
    net = cli.build_network(cfg)
    ref = nw.NetworkParams()
    assert net.z1 == ref.z1 and net.z2 == ref.z2 and net.G_load == ref.G_load
    assert net.L1 == ref.L1 and net.Cf == ref.Cf
    assert cli.build_design(cfg).name == "no_inner_2000Hz"


def test_misspelled_topology_lists_valid_tags():
    with pytest.raises(cli.ConfigError) as exc:
        cli.parse_config("gfc:\n  topology: cascade\n")
    msg = str(exc.value)
    for tag in TOPOLOGIES:
        assert tag in msg


def test_design_switching_frequency_consistency():
    with pytest.raises(cli.ConfigError) as exc:
        cli.parse_config("gfc:\n  topology: cascaded\n  f_sw: 10000\n  design: 1\n")
    assert "0.5 ms" in str(exc.value)
    cfg = cli.parse_config("gfc:\n  topology: cascaded\n  f_sw: 10000\n")
    assert cli.build_design(cfg).name == "cascaded_d2"


def test_unknown_key_and_syntax_errors():
    with pytest.raises(cli.ConfigError, match="unknown key"):
        cli.parse_config("gfc:\n  topolgy: cascaded\n")
    with pytest.raises(cli.ConfigError, match="line 3"):
        cli.parse_config("gfc:\n  topology: no_inner\n  f_sw: : 2\nsystem: {}\n")
    with pytest.raises(cli.ConfigError, match="valid types"):
        cli.parse_config("scenario:\n  t_end: 1\n  events:\n    - {type: brownout, t: 0.5}\n")


def test_invariant_violation_names_module():
    with pytest.raises(cli.ConfigError, match="^network"):
        cli.parse_config("network:\n  Z_Load: -1\n")
    with pytest.raises(cli.ConfigError, match="^sg"):
        cli.parse_config("sg:\n  Xd_p: 5.0\n")


def test_explicit_event_list():
    cfg = cli.parse_config("scenario:\n  t_end: 0.5\n  events:\n"
                           "    - {type: load_step, t: 0.1, fraction: 0.05}\n"
                           "    - {type: load_switch, t: 0.2, Z: 2.0}\n")
    scen = cli.build_scenario(cfg, cli.build_design(cfg))
    assert isinstance(scen.events[0], td.LoadStep)
    assert scen.events[1].Z == 2.0


def test_hash_ignores_output_section():
    a = cli.parse_config("")
    b = cli.parse_config("output:\n  dir: elsewhere\n")
    c = cli.parse_config("gfc:\n  f_sw: 10000\n")
    assert a.hash == b.hash != c.hash


def test_csv_round_trip(tmp_path):
    cfg = cli.parse_config("")
    x = np.linspace(0.0, 1.0, 7)
    vals = np.pi * np.exp(3 * x) * 1e-5
    path = cli.emit_csv(cli.Table("t_s", x, {"a": vals}), tmp_path / "t.csv", cfg)
    meta, labels, data = cli.read_csv(path)
    assert labels == ["t_s", "a"]
    assert meta["config_hash"] == cfg.hash
    assert np.allclose(data[:, 1], vals, rtol=1e-11, atol=0)
    assert [float(f"{v:.12g}") for v in vals] == list(data[:, 1])


def test_empty_artifact_writes_nothing(tmp_path):
    cfg = cli.parse_config("")
    empty = an.EigenSweep("", np.array([]), [], np.array([], complex), [])
    with pytest.raises(cli.EmptyArtifactError):
        cli.emit_csv(empty, tmp_path / "e.csv", cfg)
    assert not (tmp_path / "e.csv").exists()


def test_equal_hash_gives_identical_csv(tmp_path):
    cfg = cli.parse_config("analysis:\n  n_freq: 40\n")
    cli.run("impedance", cfg, tmp_path / "a")
    cli.run("impedance", cli.parse_config("analysis:\n  n_freq: 40\n"), tmp_path / "b")
    a = (tmp_path / "a" / "fig14_zpp.csv").read_bytes()
    assert a == (tmp_path / "b" / "fig14_zpp.csv").read_bytes()
    assert (tmp_path / "a" / "fig14_zpp.svg").read_bytes() == \
        (tmp_path / "b" / "fig14_zpp.svg").read_bytes()


def test_passivity_plot_bands_match_report(tmp_path):
    cfg = cfg_for("current_only")
    summary = cli.run("passivity", cfg, tmp_path)
    assert summary["re_zpp_bands"]
    svg = (tmp_path / "fig15_passivity.svg").read_text()
    m = re.search(r"re_zpp_bands=(\[.*?\]\]|\[\]); bands=(\[.*?\]\]|\[\])", svg)
    assert m is not None
    assert json.loads(m.group(1)) == [list(b) for b in summary["re_zpp_bands"]]
    assert json.loads(m.group(2)) == [list(b) for b in summary["bands"]]
    assert cfg.hash in svg


def test_passivity_no_inner_has_no_bands(tmp_path):
    summary = cli.run("passivity", cfg_for("no_inner"), tmp_path)
    assert summary["re_zpp_bands"] == []


def test_eigsweep_rows(tmp_path):
    cli.run("eigsweep", cfg_for("no_inner"), tmp_path)
    meta, labels, data = cli.read_csv(tmp_path / "fig16_eigsweep.csv")
    assert data.shape[0] == 25
    assert labels[0] == "Z_TL_pu" and "swing_re" in labels
    assert data[0, 0] == pytest.approx(0.01) and data[-1, 0] == pytest.approx(0.5)


def test_simulate_case_voltage_dip(tmp_path):
    cli.run("simulate", cli.parse_config(""), tmp_path, case="voltage_dip")
    files = sorted(tmp_path.glob("fig18_voltage_dip_*.csv"))
    assert len(files) == 3
    times = [cli.read_csv(p)[2][:, 0] for p in files]
    assert all(np.array_equal(times[0], t) for t in times[1:])
    assert (tmp_path / "fig18_voltage_dip.svg").exists()


@pytest.mark.parametrize("topology", TOPOLOGIES)
@pytest.mark.parametrize("command", cli.COMMANDS)
def test_command_matrix(tmp_path, command, topology):
    summary = cli.run(command, cfg_for(topology), tmp_path)
    assert isinstance(summary, dict)
    csvs = list(tmp_path.glob("*.csv"))
    assert csvs and list(tmp_path.glob("*.svg"))
    h = cfg_for(topology).hash
    for p in csvs:
        assert cli.read_csv(p)[0]["config_hash"] == h


def test_main_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text("analysis:\n  n_freq: 20\n")
    assert cli.main(["impedance", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["command"] == "impedance"
    bad = tmp_path / "bad.yaml"
    bad.write_text("gfc:\n  topology: cascade\n")
    assert cli.main(["impedance", "--config", str(bad), "--out", str(tmp_path / "o2")]) == 2
    assert cli.main(["impedance", "--config", str(tmp_path / "missing.yaml")]) == 2
    # infinite-bus cascaded design 1 is unstable: verification refuses and nothing is left behind
    unstable = tmp_path / "unstable.yaml"
    unstable.write_text("gfc:\n  topology: cascaded\nnetwork:\n  template: infinite_bus\n")
    out_dir = tmp_path / "o3"
    assert cli.main(["verify", "--config", str(unstable), "--out", str(out_dir)]) == 1
    assert not out_dir.exists()


def test_partial_outputs_removed_on_failure(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise an.AnalysisError("plot failed")

    monkeypatch.setattr(cli, "plot_impedance", boom)
    out = tmp_path / "run"
    with pytest.raises(an.AnalysisError):
        cli.run("impedance", cfg_for("no_inner", "analysis:\n  n_freq: 20\n"), out)
    assert not out.exists()
