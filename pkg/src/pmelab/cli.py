"""Command-line front end: ``pmelab run | verify | calibrate``."""
from __future__ import annotations

import argparse
import configparser
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import io
from .capacity import DEPTH, RADIUS, capacity_of_compact
from .grid import CompactSet, Field, Grid, MarginError
from .obstacle import InadmissibleObstacle, ObstacleSpec, smooth_obstacle_eps, solve_obstacle
from .reference import store_calibration, universal_calibrate
from .solver import PMEProblem, SolverError, solve_cauchy_dirichlet
from .verify import SUITES, bump_data, run_suite, summarize, to_json_lines

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_SUITE = 0, 1, 2, 3
TASKS = ("solve", "obstacle", "capacity", "verify", "calibrate")

SCHEMA = {
    "grid": {"dim": int, "nx": int, "ny": int, "nt": int, "Lx": float, "Ly": float, "dt": float},
    "model": {"m": float},
    "task": {"type": str},
    "solve": {"initial": str, "lateral": float},
    "obstacle": {"file": str, "bump": str, "backend": str, "eps": str},
    "capacity": {"cells": str, "box": str, "depth": int, "radius": int, "backend": str},
    "verify": {"suite": str, "seed": int},
    "calibrate": {"amplitudes": str, "sidecar": str},
    "output": {"dir": str},
}
REQUIRED = {"grid": ("dim", "nx", "nt"), "model": ("m",), "task": ("type",)}


class ConfigError(ValueError):
    pass


class TaskFailure(RuntimeError):
    """A task ran but its checks did not pass."""


@dataclass
class RunConfig:
    grid: dict
    m: float
    task: str
    options: dict = field(default_factory=dict)
    output: str = "pmelab_out"
    source: str = ""

    def make_grid(self) -> Grid:
        g = self.grid
        return Grid.make(g["dim"], g["nx"], g["nt"], g.get("Lx", 1.0), g.get("dt"),
                         g.get("ny"), g.get("Ly"))


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def parse_cells(text: str, dim: int) -> list[list[int]]:
    """``n:i[:j]`` entries separated by ``;``."""
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        try:
            cell = [int(x) for x in item.split(":")]
        except ValueError:
            raise ConfigError(f"capacity.cells: bad entry {item!r}") from None
        if len(cell) != dim + 1:
            raise ConfigError(f"capacity.cells: {item!r} needs {dim + 1} indices")
        out.append(cell)
    return out


def parse_box(text: str, dim: int) -> list[tuple[int, int]]:
    """``n0,n1;i0,i1[;j0,j1]``, inclusive cell ranges."""
    parts = [p for p in text.split(";") if p.strip()]
    if len(parts) != dim + 1:
        raise ConfigError(f"capacity.box: need {dim + 1} ranges, got {len(parts)}")
    out = []
    for p in parts:
        r = [int(x) for x in _floats(p, "capacity.box")]
        if len(r) != 2 or r[0] > r[1]:
            raise ConfigError(f"capacity.box: bad range {p!r}")
        out.append((r[0], r[1]))
    return out


def load_config(path) -> RunConfig:
    """Parse and validate an INI run file; every key is checked before any compute."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        values[sec] = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            kind = SCHEMA[sec][key]
            try:
                values[sec][key] = kind(raw) if kind is not str else raw.strip()
            except ValueError:
                raise ConfigError(f"{sec}.{key}: expected {kind.__name__}, got {raw!r}") from None
    for sec, keys in REQUIRED.items():
        for key in keys:
            if key not in values.get(sec, {}):
                raise ConfigError(f"missing required key {sec}.{key}")
    task = values["task"]["type"]
    if task not in TASKS:
        raise ConfigError(f"task.type must be one of {TASKS}, got {task!r}")
    for sec in SCHEMA:
        if sec in TASKS and sec != task and sec in values:
            raise ConfigError(f"section [{sec}] does not apply to task {task!r}")
    cfg = RunConfig(values["grid"], values["model"]["m"], task, values.get(task, {}),
                    values.get("output", {}).get("dir", "pmelab_out"), str(path))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    try:
        grid = cfg.make_grid()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    if not cfg.m > 1:
        raise ConfigError(f"model.m must exceed 1, got {cfg.m}")
    o = cfg.options
    if cfg.task == "solve":
        init = o.get("initial", "0")
        if init != "bump":
            _floats(init, "solve.initial")
        if o.get("lateral", 0.0) < 0:
            raise ConfigError("solve.lateral must be nonnegative")
    elif cfg.task == "obstacle":
        if ("file" in o) == ("bump" in o):
            raise ConfigError("obstacle: give exactly one of file or bump")
        if "bump" in o and len(_floats(o["bump"], "obstacle.bump")) != 2 * grid.dim + 3:
            raise ConfigError("obstacle.bump: expects centre coords, t0, radius, time radius, height")
        if "file" in o and not Path(o["file"]).is_file():
            raise ConfigError(f"obstacle.file {o['file']} not found")
        if o.get("backend", "projected") not in ("projected", "penalized"):
            raise ConfigError("obstacle.backend must be projected or penalized")
        if any(not 0 < e <= 1 for e in _floats(o.get("eps", ""), "obstacle.eps")):
            raise ConfigError("obstacle.eps values must lie in (0, 1]")
    elif cfg.task == "capacity":
        if "cells" in o and "box" in o:
            raise ConfigError("capacity: give cells or box, not both")
        if "box" in o:
            parse_box(o["box"], grid.dim)
        else:
            parse_cells(o.get("cells", ""), grid.dim)
        if o.get("depth", DEPTH) < 1 or o.get("radius", RADIUS) < 1:
            raise ConfigError("capacity.depth and capacity.radius must be positive")
        if o.get("backend", "projected") not in ("projected", "penalized"):
            raise ConfigError("capacity.backend must be projected or penalized")
        try:
            _compact(cfg, grid)
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"capacity: {exc}") from None
    elif cfg.task == "verify":
        if o.get("suite", "full") not in SUITES:
            raise ConfigError(f"verify.suite must be one of {sorted(SUITES)}")
    elif cfg.task == "calibrate":
        if any(a <= 0 for a in _floats(o.get("amplitudes", "100"), "calibrate.amplitudes")):
            raise ConfigError("calibrate.amplitudes must be positive")


def _compact(cfg: RunConfig, grid: Grid) -> CompactSet:
    o = cfg.options
    if "box" in o:
        r = parse_box(o["box"], grid.dim)
        return CompactSet.box(grid, r[0], *r[1:])
    return CompactSet.from_cells(grid, parse_cells(o.get("cells", ""), grid.dim))


def _bump_obstacle(grid: Grid, params) -> Field:
    *center, t0, r, s, H = params
    q = 1.0 - ((grid.times - t0) / s).reshape((-1,) + (1,) * grid.dim) ** 2
    q = q - sum((x - c) ** 2 for x, c in zip(grid.coords(), center))[None] / r**2
    return Field(grid, H * np.maximum(q, 0.0) ** 2, "psi")


def versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
    try:
        out["pmelab"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["pmelab"] = "unknown"
    return out


# tasks ---------------------------------------------------------------------------

def task_solve(cfg, grid, out) -> dict:
    o = cfg.options
    if o.get("initial", "0") == "bump":
        init = bump_data(grid, [0.5 * grid.Lx] + ([0.5 * grid.Ly] if grid.dim == 2 else []),
                         0.25 * grid.Lx, 1.0)
    else:
        vals = _floats(o.get("initial", "0"), "solve.initial")
        init = vals[0] if len(vals) == 1 else np.asarray(vals).reshape(grid.node_shape)
    lateral = o.get("lateral", 0.0)
    u, report = solve_cauchy_dirichlet(PMEProblem(grid, cfg.m, init, lateral))
    io.write_field_csv(out / "solution.csv", u)
    rep = report.to_dict()
    rep.pop("wall_time")
    io.write_json(out / "solver_report.json", rep)
    return {"outputs": ["solution.csv", "solver_report.json"], "pass": True}


def task_obstacle(cfg, grid, out) -> dict:
    o = cfg.options
    if "file" in o:
        psi = io.read_field_csv(o["file"], grid, "psi")
    else:
        psi = _bump_obstacle(grid, _floats(o["bump"], "obstacle.bump"))
    spec = ObstacleSpec(psi, cfg.m)
    backend = o.get("backend", "projected")
    eps = _floats(o.get("eps", ""), "obstacle.eps")
    specs = [spec] + [smooth_obstacle_eps(spec, e) for e in eps]
    outputs, checks = [], []
    for k, s in enumerate(specs):
        sol = solve_obstacle(s, backend)
        name = "obstacle_solution.csv" if k == 0 else f"obstacle_solution_eps{k}.csv"
        io.write_field_csv(out / name, sol.u)
        outputs.append(name)
        checks.append(sol.check_invariants())
    if eps:
        io.write_obstacle_family(out / "family", [s.psi for s in specs[1:]], "eps", eps)
        outputs.append("family/manifest.json")
    io.write_json(out / "obstacle_checks.json", checks)
    ok = all(c["above_obstacle"] and c["supersolution"] for c in checks)
    return {"outputs": outputs + ["obstacle_checks.json"], "pass": ok}


def task_capacity(cfg, grid, out) -> dict:
    o = cfg.options
    K = _compact(cfg, grid)
    res = capacity_of_compact(K, cfg.m, o.get("depth", DEPTH), o.get("radius", RADIUS),
                              o.get("backend", "projected"))
    io.write_capacity(out, "capacity", res)
    io.write_compact(out / "K.json", K)
    return {"outputs": ["capacity.json", "capacity_extremal.csv", "capacity_measure.json",
                        "K.json"], "pass": True, "value": res.value}


def task_verify(cfg, grid, out, suite=None, seed=None) -> dict:
    suite = suite or cfg.options.get("suite", "full")
    seed = cfg.options.get("seed", 0) if seed is None else seed
    reports = run_suite(suite, seed)
    (out / "suite.jsonl").write_text(to_json_lines(reports))
    summary = summarize(reports)
    io.write_json(out / "suite_summary.json", summary)
    return {"outputs": ["suite.jsonl", "suite_summary.json"], "pass": summary["ok"],
            "summary": summary}


def calibration_grids(dim: int) -> list[Grid]:
    if dim == 1:
        return [Grid.make(1, 50, 201, dt=0.005), Grid.make(1, 100, 201, dt=0.005)]
    return [Grid.make(2, 12, 201, dt=0.005), Grid.make(2, 20, 201, dt=0.005)]


def run_calibration(m: float, dim: int, amplitudes=(100.0,)) -> dict:
    """Calibrate on two grids; the exponent must match ``-1/(m-1)`` within 10% on both."""
    per = [universal_calibrate([g], m, amplitudes) for g in calibration_grids(dim)]
    expected = -1.0 / (m - 1)
    exps = [c.exponent for c in per]
    ok = all(abs(e - expected) <= 0.1 * abs(expected) for e in exps)
    best = max(per, key=lambda c: c.c_emp)
    best.per_grid = [row for c in per for row in c.per_grid]
    return {"calibration": best, "exponents": exps, "expected": expected, "pass": ok}


def task_calibrate(cfg, grid, out) -> dict:
    o = cfg.options
    amps = tuple(_floats(o.get("amplitudes", "100"), "calibrate.amplitudes"))
    res = run_calibration(cfg.m, grid.dim, amps)
    sidecar = Path(o.get("sidecar", out / "calibration.json"))
    store_calibration(sidecar, res["calibration"], 1.0, None if grid.dim == 1 else 1.0)
    io.write_json(out / "calibration_report.json",
                  {"exponents": res["exponents"], "expected": res["expected"], "pass": res["pass"],
                   "c_emp": res["calibration"].c_emp})
    return {"outputs": ["calibration_report.json", str(sidecar)], "pass": res["pass"]}


TASK_FUNCS = {"solve": ("pme-solver", "solve_cauchy_dirichlet", task_solve),
              "obstacle": ("obstacle", "solve_obstacle", task_obstacle),
              "capacity": ("capacity", "capacity_of_compact", task_capacity),
              "verify": ("verify", "run_suite", task_verify),
              "calibrate": ("reference", "universal_calibrate", task_calibrate)}


def run(config_path) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"pmelab: cli.run: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    module, op, func = TASK_FUNCS[cfg.task]
    grid = cfg.make_grid()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    status, message, result = EXIT_OK, None, {}
    try:
        result = func(cfg, grid, out)
        if not result["pass"]:
            status, message = EXIT_SUITE, f"{module}.{op}: checks did not pass"
    except SolverError as exc:
        status, message = EXIT_SOLVER, f"{module}.{op}: solver failure: {exc}"
    except (InadmissibleObstacle, MarginError, ValueError) as exc:
        status, message = EXIT_VALIDATION, f"{module}.{op}: invalid input: {exc}"
    manifest = {"config": asdict(cfg), "versions": versions(), "task": cfg.task,
                "exit_status": status, "message": message,
                "outputs": result.get("outputs", []),
                "wall_time": time.perf_counter() - start}
    io.write_json(out / "manifest.json", manifest)
    if message:
        print(f"pmelab: {message}", file=sys.stderr)
    return status


def cmd_verify(args) -> int:
    try:
        reports = run_suite(args.suite, args.seed)
    except ValueError as exc:
        print(f"pmelab: verify.run_suite: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    text = to_json_lines(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    summary = summarize(reports)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK if summary["ok"] else EXIT_SUITE


def cmd_calibrate(args) -> int:
    if not args.m > 1 or args.dim not in (1, 2):
        print("pmelab: reference.universal_calibrate: need m > 1 and dim in {1, 2}",
              file=sys.stderr)
        return EXIT_VALIDATION
    try:
        res = run_calibration(args.m, args.dim)
    except SolverError as exc:
        print(f"pmelab: reference.universal_calibrate: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    store_calibration(args.sidecar, res["calibration"], 1.0, None if args.dim == 1 else 1.0)
    print(json.dumps({"m": args.m, "dim": args.dim, "c_emp": res["calibration"].c_emp,
                      "exponents": res["exponents"], "expected": res["expected"],
                      "pass": res["pass"]}, sort_keys=True))
    return EXIT_OK if res["pass"] else EXIT_SUITE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmelab", description="Porous medium equation lab")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a task from an INI config")
    r.add_argument("config")
    v = sub.add_parser("verify", help="run a bundled comparison suite")
    v.add_argument("--suite", default="full")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write JSON lines here instead of stdout")
    c = sub.add_parser("calibrate", help="fit the universal decay constant")
    c.add_argument("--m", type=float, required=True)
    c.add_argument("--dim", type=int, default=1)
    c.add_argument("--sidecar", default="calibration.json")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    if args.command == "run":
        return run(args.config)
    if args.command == "verify":
        return cmd_verify(args)
    return cmd_calibrate(args)


if __name__ == "__main__":
    sys.exit(main())
