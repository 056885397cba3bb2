import json

import numpy as np
import pytest

from icbf import cli
from icbf.acc import CHANNELS
from icbf.cli import ConfigError, parse_config, parse_config_text, read_trajectory_csv, write_trajectory_csv
from icbf.integrator import Trajectory


def test_empty_config_is_all_defaults():
    cfg = parse_config_text("")
    assert (cfg.scenario, cfg.controller, cfg.dt, cfg.t_end) == ("acc", "combined", 1e-3, 40.0)
    assert cfg.predictor_mode == "exact_linear" and cfg.infeasibility_policy == "halt"
    assert set(cfg.defaults_applied) == set(cli.defaults())


def test_override_and_comments(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# header\nalpha = 20   # faster\n\ncontroller=all\n")
    cfg = parse_config(str(path))
    assert cfg.alpha == 20.0 and cfg.params().alpha == 20.0
    assert cfg.explicit == ["alpha", "controller"]
    assert "alpha" not in cfg.defaults_applied
    assert cfg.variants() == ["unfiltered", "input_only", "state_only", "combined"]


@pytest.mark.parametrize("text,key,line", [
    ("dt=-1", "dt", 1),
    ("\nbogus = 3", "bogus", 2),
    ("t_end = soon", "t_end", 1),
    ("controller = fancy", "controller", 1),
    ("dt=0.1\nt_end=0.01", "t_end", 2),
    ("m = 0", "m", 1),
    ("seed = 1.5", "seed", 1),
    ("alpha = nan", "alpha", 1),
    ("dt = 1\ndt = 2", "dt", 2),
])
def test_config_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.key == key and info.value.line == line
    assert key in str(info.value)


def test_malformed_line():
    with pytest.raises(ConfigError) as info:
        parse_config_text("alpha 20")
    assert info.value.line == 1


def test_custom_requires_factory():
    with pytest.raises(ConfigError):
        parse_config_text("scenario = custom")


def zero_traj(K=3, n=3, m=1):
    return Trajectory(np.arange(K) * 0.1, np.zeros((K, n)), np.zeros((K, m)), 0.1, {})


def test_csv_zero_trajectory(tmp_path):
    path = tmp_path / "z.csv"
    write_trajectory_csv(zero_traj(), str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0] == "t,x1,x2,x3,u1," + ",".join(CHANNELS)
    fields = lines[1].split(",")
    assert fields[1:5] == ["0", "0", "0", "0"]
    assert fields[5:] == [""] * len(CHANNELS)


def test_csv_roundtrip_bit_exact(tmp_path, rng):
    K = 50
    tr = Trajectory(np.arange(K) * 1e-3, rng.normal(size=(K, 3)) * 1e5, rng.normal(size=(K, 1)) * 1e-7, 1e-3,
                    {c: rng.normal(size=K) for c in CHANNELS})
    tr.aux["h_e"][3] = np.nan
    path = tmp_path / "r.csv"
    write_trajectory_csv(tr, str(path))
    back = read_trajectory_csv(str(path))
    np.testing.assert_array_equal(back["t"], tr.times)
    np.testing.assert_array_equal(back["x2"], tr.x[:, 1])
    np.testing.assert_array_equal(back["u1"], tr.u[:, 0])
    for c in CHANNELS:
        np.testing.assert_array_equal(back[c], tr.aux[c])


def run_cfg(tmp_path, text, name="out"):
    out = tmp_path / name
    path = tmp_path / f"{name}.cfg"
    path.write_text(text + f"\noutput_dir = {out}\n")
    code = cli.main(["run", str(path)])
    summary = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else None
    return code, out, summary


def test_minimal_run_two_rows(tmp_path):
    code, out, summary = run_cfg(tmp_path, "t_end = 0.001\ndt = 0.001\ncontroller = all")
    assert code == 0
    for name in ("unfiltered", "input_only", "state_only", "combined"):
        assert len((out / f"{name}.csv").read_text().splitlines()) == 3
    assert summary["controllers"]["combined"]["steps"] == 2


def test_all_controllers_summary_matches_csv(tmp_path):
    code, out, summary = run_cfg(tmp_path, "t_end = 4\ncontroller = all\nalpha = 20")
    assert code == 0
    assert summary["config"]["alpha"] == 20.0
    assert "alpha" not in summary["defaults_applied"] and "gamma" in summary["defaults_applied"]
    for name, entry in summary["controllers"].items():
        data = read_trajectory_csv(entry["csv"])
        assert len(data["t"]) == 4001
        for col in ("h_x", "h_u", "h_e"):
            assert entry[f"min_{col}"] == float(np.nanmin(data[col]))
        assert entry["max_abs_u"] == float(np.max(np.abs(data["u1"])))
        assert entry["halted"] is False
        assert np.isfinite(entry["sup_tail_error"]) and entry["wall_time_s"] >= 0
    comb = summary["controllers"]["combined"]
    assert comb["infeasible_steps"] == 0
    assert comb["min_h_x"] >= -1e-2
    assert comb["max_abs_u"] <= 1650 * 0.3 * 9.81 + 1e-2
    assert summary["initial_condition_violations"] == []


def test_unfiltered_only_reports_metrics(tmp_path):
    code, out, summary = run_cfg(tmp_path, "t_end = 2\ncontroller = unfiltered")
    assert code == 0
    assert list(summary["controllers"]) == ["unfiltered"]
    data = read_trajectory_csv(str(out / "unfiltered.csv"))
    assert np.isnan(data["feasible"]).all() and np.isnan(data["active_x"]).all()


def test_halt_exit_code_and_partial_csv(tmp_path, capsys):
    code, out, summary = run_cfg(tmp_path, "t_end = 2\nx2_0 = 30\nx3_0 = 54.5\nu_0 = 4800")
    assert code == cli.EXIT_HALT
    entry = summary["controllers"]["combined"]
    assert entry["halted"] and "infeasible" in entry["halt_reason"]
    assert summary["initial_condition_violations"]
    assert len((out / "combined.csv").read_text().splitlines()) - 1 == entry["steps"]
    assert "warning" in capsys.readouterr().err


def test_zero_policy_completes_and_counts(tmp_path):
    code, _, summary = run_cfg(tmp_path, "t_end = 2\nx2_0 = 30\nx3_0 = 54.5\nu_0 = 4800\ninfeasibility_policy = zero")
    assert code == 0
    assert summary["controllers"]["combined"]["infeasible_steps"] > 0


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("dt = -1\n")
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    assert "dt" in capsys.readouterr().err


def test_io_error_exit_codes(tmp_path):
    assert cli.main(["run", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = tmp_path / "c.cfg"
    path.write_text(f"t_end = 0.01\noutput_dir = {blocker}/sub\n")
    assert cli.main(["run", str(path)]) == cli.EXIT_IO


def custom_factory(cfg):
    from icbf.acc import build_acc_scenario
    return build_acc_scenario(cfg.params())


def test_custom_factory(tmp_path):
    code, _, summary = run_cfg(tmp_path, "scenario = custom\nfactory = test_cli:custom_factory\nt_end = 0.5")
    assert code == 0 and summary["controllers"]["combined"]["steps"] == 501
    code, _, _ = run_cfg(tmp_path, "scenario = custom\nfactory = nowhere:nothing\nt_end = 0.5", name="o2")
    assert code == cli.EXIT_CONFIG


def test_print_defaults_lists_every_key(capsys):
    assert cli.main(["print-defaults"]) == 0
    out = capsys.readouterr().out
    for key in cli.defaults():
        assert f"{key} = " in out


def test_selftest_passes(capsys):
    assert cli.main(["selftest", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 5 and "[FAIL]" not in out
