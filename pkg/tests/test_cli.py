import json
from dataclasses import replace

import pytest

from krflow import cli, flow
from krflow.errors import ConfigurationError

FAST = "preset = cp1\nN = 129\namplitude = 0.2\nt_max = 3.0\ncadence = 5\npoincare = false\n"


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def reference_dirs(tmp_path_factory):
    """CLI runs of the default cp1 and blowup1 configurations."""
    base = tmp_path_factory.mktemp("cli_runs")
    out = {}
    for preset, extra in (("cp1", ""), ("blowup1", "symmetrize = true\ncadence = 20\n")):
        d = base / preset
        cfg = write(base, f"preset = {preset}\n{extra}out_dir = {d}\n", f"{preset}.cfg")
        out[preset] = (cli.main(["run", str(cfg)]), d)
    return out


# parse_config ---------------------------------------------------------------------------


def test_minimal_config_gets_defaults(tmp_path):
    cfg = cli.parse_config(write(tmp_path, "preset = cp1\n"))
    assert cfg.flow == flow.FlowConfig()
    assert cfg.out_dir == "krflow-out" and cfg.resume is None


def test_comments_and_types(tmp_path):
    cfg = cli.parse_config(write(tmp_path, "# a run\npreset = blowup3  # Bl3\nN = 41\nsymmetrize = true\n"
                                           "probe_time = none\ndeltas = 0.1, 0.2\n"))
    assert cfg.flow.N == 41 and cfg.flow.symmetrize is True
    assert cfg.flow.probe_time is None and cfg.flow.deltas == (0.1, 0.2)


@pytest.mark.parametrize("text,key", [
    ("dt = -1\n", "dt"),
    ("colour = blue\n", "colour"),
    ("preset = cp7\n", "preset"),
    ("N = many\n", "N"),
    ("symmetrize = yes\n", "symmetrize"),
])
def test_bad_config_names_key(tmp_path, text, key):
    with pytest.raises(ConfigurationError) as e:
        cli.parse_config(write(tmp_path, text))
    assert e.value.key == key
    assert key in str(e.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.parse_config(tmp_path / "absent.cfg")


def test_round_trip(tmp_path):
    cfg = cli.parse_config(write(tmp_path, "preset = p1xp1\ndt = 0.025\nsymmetrize = true\nseed = 4\n"
                                           "probe_time = 2.5\nout_dir = somewhere\n"))
    again = cli.parse_text(cli.serialize(cfg))
    assert again == cfg
    assert cli.serialize(again) == cli.serialize(cfg)


# run_experiment -------------------------------------------------------------------------------


def test_reference_exit_codes(reference_dirs):
    assert reference_dirs["cp1"][0] == 0
    assert reference_dirs["blowup1"][0] == 2


def test_run_outputs(reference_dirs):
    _, d = reference_dirs["cp1"]
    lines = (d / "run.csv").read_text().splitlines()
    assert lines[0] == ",".join(cli.fn.CSV_FIELDS)
    times = [float(r.split(",")[0]) for r in lines[1:]]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert any(len(v.lstrip("-").replace(".", "").split("e")[0]) >= 15 for v in lines[-1].split(","))
    summary = json.loads((d / "summary.json").read_text())
    assert summary["outcome"] == "Converged-KE" and summary["classification"] == "AllBounded"
    assert summary["rate"] > 0 and summary["monotonicity_violations"] == []
    monitors = json.loads((d / "monitors.json").read_text())
    assert {"step8", "step9_identity", "delta_sweep"} <= set(monitors["monitors"]) | set(monitors)
    assert set(json.loads(json.dumps(monitors["delta_sweep"]))) == {
        "deltas", "sup_integrals", "alpha_hat", "budget", "threshold", "threshold_passed"}
    assert (d / "final.bin").exists() and (d / "config.txt").exists()


def test_identical_config_gives_identical_csv(tmp_path):
    cfg = cli.parse_text(FAST)
    a = cli.run_experiment(replace(cfg, out_dir=str(tmp_path / "a")))
    b = cli.run_experiment(replace(cfg, out_dir=str(tmp_path / "b")))
    assert a.config_hash == b.config_hash
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()


def test_resume_reproduces_csv(tmp_path):
    cfg = cli.parse_text(FAST + "checkpoint_every = 30\n")
    full = tmp_path / "full"
    cli.run_experiment(replace(cfg, out_dir=str(full)))
    ck = tmp_path / "ck.bin"
    for suffix in (".bin", ".json", ".history.npz"):
        (full / f"checkpoint{suffix}").rename(ck.with_suffix(suffix))
    code = cli.main(["run", str(write(tmp_path, FAST + f"checkpoint_every = 30\nout_dir = {tmp_path / 'res'}\n")),
                     "--resume", str(ck)])
    assert code == 0
    assert (tmp_path / "res" / "run.csv").read_bytes() == (full / "run.csv").read_bytes()


def test_krflow_out_overrides(tmp_path, monkeypatch):
    target = tmp_path / "env"
    monkeypatch.setenv("KRFLOW_OUT", str(target))
    cfg = write(tmp_path, FAST.replace("t_max = 3.0", "t_max = 0.5") + f"out_dir = {tmp_path / 'ignored'}\n")
    cli.main(["run", str(cfg)])
    assert (target / "run.csv").exists() and (target / "summary.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_io_failure_exits_5(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    cfg = write(tmp_path, FAST + f"out_dir = {blocker / 'sub'}\n")
    assert cli.main(["run", str(cfg)]) == 5


def test_bad_config_exits_1(tmp_path, capsys):
    assert cli.main(["run", str(write(tmp_path, "dt = -1\n"))]) == 1
    assert "dt" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "nope.cfg")]) == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 1


def test_inconclusive_exit_code(tmp_path):
    cfg = write(tmp_path, FAST.replace("t_max = 3.0", "t_max = 0.5") + f"out_dir = {tmp_path / 'o'}\n")
    # half a time unit does not reach the convergence tolerance
    assert cli.main(["run", str(cfg)]) == 4


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise cli.flow.NumericalError("forced")

    monkeypatch.setattr(cli.flow, "implicit_step", broken)
    cfg = write(tmp_path, FAST + f"out_dir = {tmp_path / 'o'}\n")
    assert cli.main(["run", str(cfg)]) == 3
    assert "forced" in json.loads((tmp_path / "o" / "summary.json").read_text())["failure"]


# sweep -------------------------------------------------------------------------------------


def test_single_value_sweep_matches_run(tmp_path):
    cfg = replace(cli.parse_text(FAST), out_dir=str(tmp_path / "sw"))
    index = cli.sweep(cfg, "seed", ["0"])
    direct = cli.run_experiment(replace(cfg, out_dir=str(tmp_path / "direct")))
    run = index["runs"][0]
    assert run["outcome"] == direct.outcome and run["exit_code"] == direct.exit_code
    assert (tmp_path / "sw" / "seed=0" / "run.csv").read_bytes() == (tmp_path / "direct" / "run.csv").read_bytes()
    assert json.loads((tmp_path / "sw" / "index.json").read_text()) == index


def test_dt_sweep_writes_order_table(tmp_path):
    text = ("preset = cp1\nL = 4\nN = 33\ntail_tol = 0.5\nscheme = rk4\nc0_policy = zero\namplitude = 0.2\n"
            "t_max = 0.1\ncadence = 1000000\npoincare = false\n")
    cfg = replace(cli.parse_text(text), out_dir=str(tmp_path))
    index = cli.sweep(cfg, "dt", [1e-3, 5e-4, 2.5e-4])
    order = index["order"]
    assert [r["dt"] for r in order] == [1e-3, 5e-4]
    assert "order" in order[1] and order[1]["order"] > 3


def test_amplitude_sweep_records_failures_and_continues(tmp_path):
    cfg = replace(cli.parse_text(FAST), out_dir=str(tmp_path))
    index = cli.sweep(cfg, "amplitude", [0.1, 0.3, 50.0])
    codes = [r["exit_code"] for r in index["runs"]]
    assert codes[:2] == [0, 0]
    assert index["runs"][2]["error"] and "amplitude" in index["runs"][2]["error"]


def test_sweep_rejects_non_scalar_axis(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.sweep(cli.parse_text(FAST), "deltas", ["0.1"])


# report -----------------------------------------------------------------------------------


def test_empty_report(tmp_path):
    rep = cli.report([], tmp_path)
    assert rep == {"runs": [], "classifications": [], "mixed": False, "warnings": []}
    assert json.loads((tmp_path / "report.json").read_text()) == rep


def test_report_contrasts_runs_and_is_deterministic(reference_dirs, tmp_path):
    dirs = [reference_dirs["cp1"][1], reference_dirs["blowup1"][1], tmp_path / "missing"]
    cli.report(dirs, tmp_path / "a", svg=True)
    rep = cli.report(dirs, tmp_path / "b")
    assert rep["classifications"] == ["AllBounded", "AllUnbounded"]
    assert not rep["mixed"]
    assert len(rep["warnings"]) == 1 and "missing" in rep["warnings"][0]
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    assert (reference_dirs["cp1"][1] / "plots.svg").read_text().startswith("<svg")


def test_report_command(reference_dirs, tmp_path):
    assert cli.main(["report", str(reference_dirs["cp1"][1]), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report.json").read_text())["runs"][0]["outcome"] == "Converged-KE"
