import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmo_bsde import harness
from bmo_bsde.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_STAGE,
    EXIT_UNKNOWN_COMMAND,
    build_parser,
    config_from_args,
    main,
)
from bmo_bsde.harness import (
    ConfigError,
    ExperimentConfig,
    RunResult,
    StageRunner,
    VerdictReport,
    check_gt,
    check_le,
    check_rel,
    read_table,
    write_table,
)

SMALL = ["--paths", "1500", "--steps", "20"]


def test_ini_round_trip_of_defaults():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg


def test_ini_round_trip_of_modified_config():
    cfg = ExperimentConfig(n_paths=123, p=(1.25, 4.0), beta=0.75, M="sin:0.5,0.25", control_variate=False,
                           picard_p=1.3, out="x/y")
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back == cfg
    assert back.beta == 0.75 and back.picard_p == 1.3


def test_ini_keys_are_case_sensitive():
    text = ExperimentConfig().to_ini()
    assert "M = const:0.5" in text and "X = const:1.0" in text


@pytest.mark.parametrize("text, match", [
    ("[grid]\nbogus = 1\n", "unknown config key"),
    ("[simulation]\nhorizon = 1\n", "belongs in section"),
    ("[grid]\nn_steps = many\n", "bad value"),
    ("[estimator]\ncontrol_variate = maybe\n", "bad value"),
    ("[grid]\nn_steps = 1\n", "n_steps"),
    ("[exponents]\np = 2; 1\n", "exceed 1"),
    ("[integrands]\nM = nonsense:1\n", "cannot parse integrand"),
    ("not an ini", "malformed"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_ini(text)


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.load(tmp_path / "absent.ini")


def test_cli_overrides_map_to_fields():
    args = build_parser().parse_args(["bmo", "--lambda", "0.3", "--p", "2", "--p", "4", "--paths", "10",
                                      "--steps", "5", "--T", "2", "--seed", "9", "--norm", "0.7", "--beta", "0.5"])
    cfg = config_from_args(args)
    assert cfg.M == "const:0.3" and cfg.lambdas == (0.3,)
    assert cfg.p == (2.0, 4.0) and cfg.norms == (0.7,) and cfg.beta == 0.5
    assert (cfg.n_paths, cfg.n_steps, cfg.horizon, cfg.seed) == (10, 5, 2.0, 9)


def test_config_file_then_flags(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(ExperimentConfig(n_paths=77, seed=3).to_ini())
    cfg = config_from_args(build_parser().parse_args(["bmo", "--config", str(ini), "--seed", "5"]))
    assert cfg.n_paths == 77 and cfg.seed == 5


def test_write_config_prints_loadable_ini(capsys):
    assert main(["write-config", "--paths", "321"]) == EXIT_OK
    assert ExperimentConfig.from_ini(capsys.readouterr().out).n_paths == 321


def test_table_schema_line_and_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    rows = [(0.0, "a", 1.5), (0.5, "b", -2.25e-9)]
    write_table(path, rows, "demo")
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=bmo_bsde.demo/1"
    assert lines[1] == "x,series,y"
    assert read_table(path) == rows


def test_report_json_is_sorted_and_finite():
    rep = VerdictReport("demo", metadata={"b": math.inf, "a": 1.0})
    rep.add(check_rel("r", "anchor", 1.0, 1.0, 0.1), check_le("nan bound", "anchor", 1.0, math.nan))
    text = rep.to_json()
    data = json.loads(text)
    assert data["metadata"] == {"a": 1.0, "b": None}
    assert data["schema"] == "bmo_bsde.report/1"
    assert text == json.dumps(data, indent=2, sort_keys=True) + "\n"
    assert "NaN" not in text and "Infinity" not in text


def test_check_helpers():
    assert check_rel("x", "a", 1.01, 1.0, 0.02).passed
    assert not check_rel("x", "a", 1.03, 1.0, 0.02).passed
    assert check_le("x", "a", 1.05, 1.0, 0.1).passed
    assert not check_gt("x", "a", 1.0, 1.0).passed


def test_stage_runner_records_the_failing_stage():
    rep = VerdictReport("demo")
    run = StageRunner(rep)
    assert run("good", lambda: 3) == 3
    assert run("bad", lambda: 1 / 0) is None
    assert rep.errors == [{"stage": "bad", "error": "ZeroDivisionError: division by zero"}]
    assert not rep.passed


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env"))
    assert ExperimentConfig().output_dir() == tmp_path / "env"
    assert ExperimentConfig(out="explicit").output_dir().name == "explicit"
    assert main(["constants", "--norm", "0.5"]) == EXIT_OK
    assert (tmp_path / "env" / "constants.json").exists()


def test_exit_ok_writes_csv_and_json(tmp_path, capsys):
    assert main(["constants", "--out", str(tmp_path)]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert (tmp_path / "constants.csv").read_text().startswith("# schema=bmo_bsde.constants/1\n")
    assert json.loads((tmp_path / "constants.json").read_text())["passed"] is True


def test_exit_check_failed(tmp_path, monkeypatch):
    def failing(cfg, ws=None):
        rep = VerdictReport("constants")
        rep.add(check_le("always fails", "anchor", 2.0, 1.0))
        return RunResult(rep, [])

    monkeypatch.setitem(harness.RUNNERS, "constants", failing)
    assert main(["constants", "--out", str(tmp_path)]) == EXIT_CHECK_FAILED


def test_exit_config_error(tmp_path):
    assert main(["bmo", "--paths", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["bmo", "--config", str(tmp_path / "absent.ini")]) == EXIT_CONFIG
    assert main(["bmo", "--paths", "lots"]) == EXIT_CONFIG


def test_exit_stage_error_names_the_stage(tmp_path, capsys):
    # one implicit step with lambda = 1, q = 5 over 10 steps is not solvable
    code = main(["bsde", "--lambda", "1", "--steps", "10", "--p", "5", "--paths", "500", "--out", str(tmp_path)])
    assert code == EXIT_STAGE
    assert "ERROR in stage solve p=5" in capsys.readouterr().out
    rep = json.loads((tmp_path / "bsde.json").read_text())
    assert rep["errors"][0]["stage"] == "solve p=5"


def test_exit_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["constants", "--out", str(blocker)]) == EXIT_IO


def test_exit_unknown_command():
    assert main(["no-such-command"]) == EXIT_UNKNOWN_COMMAND


@pytest.mark.parametrize("name", list(harness.RUNNERS))
def test_every_subcommand_runs_cleanly_at_small_scale(tmp_path, name):
    code = main([name, *SMALL, "--out", str(tmp_path)])
    rep = json.loads((tmp_path / f"{name.replace('-', '_')}.json").read_text())
    assert rep["errors"] == []
    assert code in (EXIT_OK, EXIT_CHECK_FAILED)
    assert (tmp_path / f"{name.replace('-', '_')}.csv").exists()


@pytest.mark.parametrize("name", list(harness.RUNNERS))
def test_rerun_is_byte_identical(tmp_path, name):
    outs = []
    for i in (0, 1):
        d = tmp_path / str(i)
        main([name, *SMALL, "--out", str(d)])
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]


@given(st.integers(2, 500), st.integers(1, 10**6), st.floats(0.1, 10.0), st.booleans())
@settings(max_examples=30, deadline=None)
def test_ini_round_trip_property(n_steps, n_paths, horizon, cv):
    cfg = ExperimentConfig(n_steps=n_steps, n_paths=n_paths, horizon=horizon, control_variate=cv)
    assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg
