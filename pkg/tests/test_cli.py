import csv
import json
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from driftbandit.cli import (
    BLOCK_HEADER,
    SUMMARY_HEADER,
    TRACE_HEADER,
    ConfigError,
    ExperimentConfig,
    build_config,
    cmd_slope,
    main,
    make_parser,
)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate_sinusoidal_shape(tmp_path):
    assert main(["generate", "--kind", "sinusoidal", "--T", "1000", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "path_T1000.csv")
    assert rows[0] == ["t", "theta_1", "theta_2"] and len(rows) == 1001


def test_generate_is_byte_reproducible(tmp_path):
    args = ["generate", "--kind", "piecewise-linear", "--T", "2000", "--env-seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("path_T2000.csv", "actions_T2000.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_invalid_kind_lists_valid_kinds(tmp_path, capsys):
    assert main(["generate", "--kind", "bogus", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "sinusoidal" in err and "piecewise-linear" in err and "lower-bound" in err and "replay" in err


def test_bad_flag_is_config_error(capsys):
    assert main(["run", "--no-such-flag"]) == 1


def test_run_summary_rows_and_determinism(tmp_path):
    base = ["run", "--T", "600,1200,2400", "--policies", "swucb:tuned,exp3s", "--reps", "2", "--seed", "4"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b")]) == 0
    a, b = _rows(tmp_path / "a" / "summary.csv"), _rows(tmp_path / "b" / "summary.csv")
    assert a[0] == SUMMARY_HEADER and len(a) == 7
    strip = lambda rows: [r[:-1] for r in rows]  # wall-clock differs
    assert strip(a) == strip(b)


def test_run_trace_and_block_files(tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--T", "3000", "--policies", "bob,swucb:opt", "--reps", "2",
                 "--trace-every", "100", "--out", str(out)]) == 0
    trace = _rows(out / "trace_T3000.csv")
    assert trace[0] == TRACE_HEADER
    # 30 points per rep and policy
    assert len(trace) == 1 + 2 * 2 * 30
    for r in trace[1:]:
        int(r[1]), int(r[2]), float(r[3]), float(r[4])
    blocks = _rows(out / "blocks_BOB_T3000.csv")
    assert blocks[0] == BLOCK_HEADER
    for r in blocks[1:]:
        assert r[4] != "" and int(r[5]) in (0, 1)
        float(r[4])
    summary = _rows(out / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["BOB", "SW-UCB[opt]"]


def test_mismatched_policy_and_env(tmp_path, capsys):
    rc = main(["run", "--kind", "lower-bound", "--T", "5000", "--policies", "darm", "--out", str(tmp_path)])
    assert rc == 1
    assert "standard-basis" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    pf = tmp_path / "p.csv"
    af = tmp_path / "a.csv"
    pf.write_text("t,theta_1\n1,0.1\n3,0.2\n")
    af.write_text("t,action_id,x_1\n*,1,1\n")
    rc = main(["run", "--kind", "replay", "--path-file", str(pf), "--actions-file", str(af), "--T", "4",
               "--out", str(tmp_path / "o")])
    assert rc == 2


def test_replay_env_runs(tmp_path):
    assert main(["generate", "--kind", "sinusoidal", "--T", "2000", "--out", str(tmp_path)]) == 0
    rc = main(["run", "--kind", "replay", "--path-file", str(tmp_path / "path_T2000.csv"),
               "--actions-file", str(tmp_path / "actions_T2000.csv"), "--T", "1000,2000",
               "--policies", "swucb:tuned,darm:oblivious", "--out", str(tmp_path / "o")])
    assert rc == 0
    assert len(_rows(tmp_path / "o" / "summary.csv")) == 5


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(T_grid=[2000, 1000])
    with pytest.raises(ConfigError):
        ExperimentConfig(reps=0)
    with pytest.raises(ConfigError, match="valid kinds"):
        ExperimentConfig(policies=[{"kind": "thompson"}])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus_key": 1})


@given(
    st.lists(st.integers(4, 10**6), min_size=1, max_size=5, unique=True).map(sorted),
    st.integers(1, 100), st.integers(0, 2**31), st.sampled_from(["constant", "T^1/3"]),
    st.lists(st.sampled_from([{"kind": "swucb", "tuning": "opt"}, {"kind": "bob"}, {"kind": "exp3"},
                              {"kind": "darm", "tuning": "oblivious"}]), min_size=1, max_size=4, unique_by=str),
)
def test_config_round_trip(grid, reps, seed, rule, pols):
    cfg = ExperimentConfig(T_grid=grid, reps=reps, base_seed=seed, B_rule={"rule": rule, "value": 2.0},
                           policies=pols, env={"kind": "piecewise-linear", "seed": 3, "params": {"d": 2}})
    d = cfg.to_dict()
    again = ExperimentConfig.from_dict(json.loads(json.dumps(d)))
    assert again.to_dict() == d


def test_precedence_flags_over_file_over_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("DRIFTBANDIT_SEED", raising=False)
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"reps": 7, "base_seed": 11, "T_grid": [100, 200, 300]}))
    parser = make_parser()
    cfg = build_config(parser.parse_args(["run", "--config", str(cfg_file)]))
    assert cfg.reps == 7 and cfg.base_seed == 11 and cfg.T_grid == [100, 200, 300] and cfg.jobs == 1
    cfg = build_config(parser.parse_args(["run", "--config", str(cfg_file), "--reps", "3"]))
    assert cfg.reps == 3
    monkeypatch.setenv("DRIFTBANDIT_SEED", "99")
    assert build_config(parser.parse_args(["run", "--config", str(cfg_file)])).base_seed == 99
    assert build_config(parser.parse_args(["run", "--config", str(cfg_file), "--seed", "5"])).base_seed == 5


def _write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)


def test_slope_power_law_fixture_and_filters(tmp_path, capsys):
    Ts = [30_000 * k for k in range(1, 9)]
    rows = [["A", "linear", T, 1.0, 20, 2.5 * T ** (2 / 3), 0.1, 1.0] for T in Ts]
    rows += [["B", "linear", T, 1.0, 20, 0.01 * T, 0.1, 1.0] for T in Ts]
    f = tmp_path / "s.csv"
    _write_summary(f, rows)
    res = cmd_slope(f)
    assert res["A"][0] == pytest.approx(2 / 3, abs=1e-6)
    assert res["B"][0] == pytest.approx(1.0, abs=1e-6)
    assert res["A"][1] == Ts
    assert main(["slope", str(f), "--policy", "A"]) == 0
    assert "A: slope=0.6667" in capsys.readouterr().out
    assert main(["slope", str(f), "--policy", "Z"]) == 1


def test_slope_needs_three_rows(tmp_path):
    f = tmp_path / "s.csv"
    _write_summary(f, [["A", "linear", 10, 1.0, 1, 1.0, 0.0, 1.0], ["A", "linear", 20, 1.0, 1, 2.0, 0.0, 1.0]])
    with pytest.raises(ConfigError, match="at least 3"):
        cmd_slope(f)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "driftbandit", "run", "--dump-config", "--reps", "3"],
                       capture_output=True, text=True, check=True)
    assert json.loads(r.stdout)["reps"] == 3
