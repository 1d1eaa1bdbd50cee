import json

import pytest

from pmelab import cli
from pmelab.solver import SolverError


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text.replace("OUT", str(tmp_path / "out")))
    return p


def manifest(tmp_path):
    return json.loads((tmp_path / "out" / "manifest.json").read_text())


BASE = "[grid]\ndim = 1\nnx = 16\nnt = 6\n[model]\nm = 2\n[output]\ndir = OUT\n"


@pytest.mark.parametrize("extra", [
    "[task]\ntype = solve\n[solve]\ncolour = red\n",
    "[task]\ntype = solve\n[bogus]\nx = 1\n",
    "[task]\ntype = dance\n",
    "[task]\ntype = solve\n[capacity]\ncells = 1:2\n",
    "[task]\ntype = capacity\n[capacity]\ncells = 0:2\n",
    "[task]\ntype = obstacle\n[obstacle]\nbump = 0.5\n",
    "[task]\ntype = obstacle\n[obstacle]\nbump = 0.5,0.5,0.2,0.3,1\neps = 2\n",
])
def test_validation_errors(tmp_path, extra, capsys):
    assert cli.main(["run", str(write(tmp_path, BASE + extra))]) == 1
    assert "invalid config" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_bad_model_and_missing_file(tmp_path):
    text = BASE.replace("m = 2", "m = 1") + "[task]\ntype = solve\n"
    assert cli.main(["run", str(write(tmp_path, text))]) == 1
    assert cli.main(["run", str(tmp_path / "none.ini")]) == 1
    assert cli.main(["bogus"]) == 1


def test_solve_constant(tmp_path):
    text = BASE + "[task]\ntype = solve\n[solve]\ninitial = 0.3\nlateral = 0.3\n"
    assert cli.main(["run", str(write(tmp_path, text))]) == 0
    man = manifest(tmp_path)
    assert man["exit_status"] == 0 and "solution.csv" in man["outputs"]
    rows = (tmp_path / "out" / "solution.csv").read_text().splitlines()
    assert len(rows) == 7 and rows[-1].split(",")[1] == "0.3"


def test_capacity_empty_and_cell(tmp_path):
    text = BASE + "[task]\ntype = capacity\n[capacity]\ncells = \n"
    assert cli.main(["run", str(write(tmp_path, text))]) == 0
    assert json.loads((tmp_path / "out" / "capacity.json").read_text())["value"] == 0
    text = BASE.replace("nt = 6", "nt = 12") + "[task]\ntype = capacity\n[capacity]\ncells = 4:7\n"
    assert cli.main(["run", str(write(tmp_path, text))]) == 0
    val = json.loads((tmp_path / "out" / "capacity.json").read_text())["value"]
    assert val == pytest.approx(0.6144434086961432, rel=1e-6)


def test_obstacle_with_eps(tmp_path):
    text = (BASE.replace("nt = 6", "nt = 11") +
            "[task]\ntype = obstacle\n[obstacle]\nbump = 0.5,0.3,0.25,0.2,1\neps = 0.2,0.1\n")
    assert cli.main(["run", str(write(tmp_path, text))]) == 0
    assert (tmp_path / "out" / "family" / "manifest.json").is_file()


def test_solver_failure_exit_2(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SolverError("forced")
    monkeypatch.setitem(cli.TASK_FUNCS, "solve", ("pme-solver", "solve_cauchy_dirichlet", boom))
    assert cli.main(["run", str(write(tmp_path, BASE + "[task]\ntype = solve\n"))]) == 2
    assert manifest(tmp_path)["message"].startswith("pme-solver.solve_cauchy_dirichlet:")


def test_suite_failure_exit_3(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_suite", lambda name, seed: [
        {"probe": False, "status": "fail", "id": 0}])
    assert cli.main(["run", str(write(tmp_path, BASE + "[task]\ntype = verify\n"))]) == 3
    assert cli.main(["verify", "--suite", "full", "--seed", "1"]) == 3


def test_verify_smoke(tmp_path, capsys):
    assert cli.main(["verify", "--suite", "smoke", "--seed", "2"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["verify", "--suite", "smoke", "--seed", "2",
                     "--out", str(tmp_path / "s.jsonl")]) == 0
    assert (tmp_path / "s.jsonl").read_text() == first
    assert cli.main(["verify", "--suite", "nope", "--seed", "2"]) == 1


def test_threads_env(monkeypatch):
    monkeypatch.setenv("PMELAB_THREADS", "0")
    assert cli.main(["verify", "--suite", "smoke", "--seed", "2"]) == 1


def test_calibrate(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "calibration_grids", lambda dim: [
        cli.Grid.make(1, 20, 101, dt=0.01), cli.Grid.make(1, 30, 101, dt=0.01)])
    side = tmp_path / "cal.json"
    assert cli.main(["calibrate", "--m", "2", "--dim", "1", "--sidecar", str(side)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["pass"] and "n=1,m=2,Lx=1,Ly=" in json.loads(side.read_text())
    assert cli.main(["calibrate", "--m", "0.5"]) == 1
