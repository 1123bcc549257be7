import pytest

from einn import config as cfgmod
from einn.cli import compare, config_from_report, main
from einn.training import ExperimentReport

SMALL_EVAL = """
r_probes = 2
r_batch_N = 16
eval_points = 3
eval_steps = 10
eval_batch_N = 1024
grid_per_axis = 11
kl_count = 256
energy_count = 256
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_missing_problem_exit_2(tmp_path, capsys):
    path = write(tmp_path, "c.cfg", "method = einn\n")
    assert main(["run", path]) == 2
    assert "problem" in capsys.readouterr().err


@pytest.mark.parametrize("text,field", [
    ("problem = lamb_oseen\nmethod = einn\nlr = fast\n", "lr"),
    ("problem = lamb_oseen\nmethod = einn\nwidth = 3\n", "width"),
    ("problem = heat\nmethod = einn\n", "problem"),
    ("problem = lamb_oseen\nmethod = pinn\n", "method"),
    ("problem = lamb_oseen\nmethod = einn\nminibatch = 0\n", "minibatch"),
    ("problem = barenblatt\nmethod = einn\nnu = 0.1\n", "nu"),
    ("problem = lamb_oseen\nmethod = einn\neval_points = 4\neval_steps = 10\n", "eval_steps"),
    ("problem = lamb_oseen\nmethod = drvn\nsteps = 10\n", "steps"),
    ("problem = lamb_oseen\nmethod = einn\ncheckpoint_at = 5,0\n", "checkpoint_at"),
])
def test_schema_errors_name_the_field(tmp_path, capsys, text, field):
    assert main(["run", write(tmp_path, "c.cfg", text)]) == 2
    assert field in capsys.readouterr().err


def test_parse_round_trip():
    cfg = cfgmod.parse("problem = lamb_oseen  # comment\nmethod = einn\nhidden = 8, 8\nlr = 0.01\n\n")
    assert cfg.hidden == (8, 8) and cfg.lr == 0.01 and cfg.iterations == 5000
    assert cfgmod.parse(cfg.to_text()) == cfg
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("problem = lamb_oseen\nmethod = einn\nmethod = drvn\n")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse("problem lamb_oseen\n")


def test_oracle_barenblatt_run(tmp_path, capsys):
    out = tmp_path / "oracle"
    path = write(tmp_path, "o.cfg", "problem = barenblatt\nmethod = oracle\n" + SMALL_EVAL)
    assert main(["run", path, "--out-dir", str(out)]) == 0
    rep = ExperimentReport.read(out / "report.json")
    assert rep.method == "oracle" and len(rep.evaluations) == 1
    assert rep.evaluations[0]["KL"][0] == 0.0
    assert rep.summary["escaped_total"] == 0
    rows = (out / "metrics.csv").read_text().strip().split("\n")
    assert rows[0] == "checkpoint,t,Q,KL,F,escaped_count" and len(rows) == 4
    assert all(f.name[0] != "." for f in out.iterdir())


def test_einn_and_drvn_runs_and_compare(tmp_path, capsys):
    base = "problem = lamb_oseen\niterations = 3\nminibatch = 2\nbatch_N = 8\nsteps = 20\nhidden = 4\ncheckpoint_every = 2\n" + SMALL_EVAL
    reports = []
    for method in ("einn", "drvn"):
        path = write(tmp_path, f"{method}.cfg", base + f"method = {method}\n")
        out = tmp_path / method
        assert main(["run", path, "--out-dir", str(out), "--seed", "5"]) == 0
        reports.append(str(out / "report.json"))
        rep = ExperimentReport.read(out / "report.json")
        assert len(rep.loss) == 3 and rep.seeds["train"] == 5
        assert [e["iteration"] for e in rep.evaluations] == [0, 2, 3]
        has_r = [e["R"] is not None for e in rep.evaluations]
        assert has_r == [method == "einn"] * 3
        for name in rep.files.values():
            assert (out / name).exists()
        assert (out / "final.ckpt").exists()
        cfg = config_from_report(rep)
        assert cfg == cfgmod.load(path).replace(seed=5, out_dir=str(out))
    table = compare(reports)
    lines = table.strip().split("\n")
    assert lines[0] == "report,method,problem,iterations,time_averaged_Q,final_Q"
    assert [l.split(",")[1] for l in lines[1:]] == ["einn", "drvn"]
    same = compare([reports[0], reports[0]]).strip().split("\n")
    assert same[1].split(",")[1:] == same[2].split(",")[1:]
    assert main(["compare", reports[0], reports[1], "--out", str(tmp_path / "cmp.csv")]) == 0
    assert (tmp_path / "cmp.csv").read_text() == table


def test_ou_run_has_kl_but_no_q(tmp_path, capsys):
    # K = 0: the convolution field vanishes, so only KL is reported
    text = "problem = ou\nmethod = einn\niterations = 10\nbatch_N = 4\nhidden = 5\ncheckpoint_every = 10\n" + SMALL_EVAL
    out = tmp_path / "ou"
    assert main(["run", write(tmp_path, "c.cfg", text), "--out-dir", str(out)]) == 0
    assert "Q n/a" in capsys.readouterr().out
    rep = ExperimentReport.read(str(out / "report.json"))
    assert rep.summary["time_averaged_Q"] is None and rep.summary["sup_KL"] is not None
    rows = (out / "metrics.csv").read_text().splitlines()
    assert rows[1].split(",")[2] == "" and rows[1].split(",")[3] != ""


def test_compare_errors(tmp_path, capsys):
    a = ExperimentReport(method="einn", problem="lamb_oseen", summary={"time_averaged_Q": 0.1, "final_Q": 0.2})
    b = ExperimentReport(method="einn", problem="barenblatt", summary={"time_averaged_Q": 0.1, "final_Q": 0.2})
    a.write(tmp_path / "a.json")
    b.write(tmp_path / "b.json")
    with pytest.raises(ValueError):
        compare([str(tmp_path / "a.json")])
    with pytest.raises(ValueError):
        compare([str(tmp_path / "a.json"), str(tmp_path / "b.json")])
    assert main(["compare", str(tmp_path / "a.json")]) == 1


def test_runtime_failure_exit_1(tmp_path, capsys):
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("")
    path = write(tmp_path, "c.cfg", "problem = barenblatt\nmethod = oracle\n" + SMALL_EVAL)
    assert main(["run", path, "--out-dir", str(blocker / "out")]) == 1
    assert "run failed" in capsys.readouterr().err
