"""On-disk formats: field CSV, grid/set/measure JSON, obstacle-family manifests."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .grid import CompactSet, Field, Grid
from .measure import DiscreteMeasure


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _node_labels(grid: Grid) -> list[str]:
    if grid.dim == 1:
        return [f"x{i}" for i in range(grid.nx + 1)]
    return [f"x{i}_y{j}" for i in range(grid.nx + 1) for j in range(grid.ny + 1)]


def write_field_csv(path, u: Field) -> Path:
    """One row per level: time, then nodal values in row-major order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + _node_labels(u.grid))
        for t, row in zip(u.grid.times, u.values.reshape(u.grid.nt, -1)):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
    return path


def read_field_csv(path, grid: Grid, name: str = "u") -> Field:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header != ["t"] + _node_labels(grid):
        raise ValueError("CSV header does not match the grid's nodes")
    if len(body) != grid.nt:
        raise ValueError(f"CSV has {len(body)} levels, grid has {grid.nt}")
    data = np.array([[float(x) for x in r] for r in body])
    if not np.allclose(data[:, 0], grid.times, rtol=1e-12, atol=1e-15):
        raise ValueError("CSV time column does not match the grid")
    return Field(grid, data[:, 1:].reshape(grid.field_shape), name)


def write_grid(path, grid: Grid) -> Path:
    return write_json(path, grid.to_dict())


def read_grid(path) -> Grid:
    return Grid.from_dict(read_json(path))


def write_compact(path, K: CompactSet) -> Path:
    return write_json(path, K.to_dict())


def read_compact(path) -> CompactSet:
    return CompactSet.from_dict(read_json(path))


def write_measure(path, mu: DiscreteMeasure) -> Path:
    path = Path(path)
    path.write_text(mu.to_json() + "\n")
    return path


def read_measure(path, grid: Grid | None = None) -> DiscreteMeasure:
    return DiscreteMeasure.from_json(Path(path).read_text(), grid)


def write_obstacle_family(directory, fields, family: str, params: list) -> Path:
    """Write each member as CSV plus a manifest naming the family and its parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(fields) != len(params):
        raise ValueError("one parameter per family member")
    members = []
    for k, (f, p) in enumerate(zip(fields, params)):
        name = f"member_{k:03d}.csv"
        write_field_csv(directory / name, f)
        members.append({"file": name, "param": p})
    return write_json(directory / "manifest.json",
                      {"family": family, "grid": fields[0].grid.to_dict(), "members": members})


def read_obstacle_family(directory):
    directory = Path(directory)
    man = read_json(directory / "manifest.json")
    grid = Grid.from_dict(man["grid"])
    fields = [read_field_csv(directory / mem["file"], grid, f"psi_{mem['param']}")
              for mem in man["members"]]
    return man["family"], [mem["param"] for mem in man["members"]], fields


def write_capacity(directory, stem: str, result) -> Path:
    """CapacityResult as JSON, with the extremal field and measure beside it."""
    directory = Path(directory)
    field_file = write_field_csv(directory / f"{stem}_extremal.csv", result.extremal).name
    measure_file = write_measure(directory / f"{stem}_measure.json", result.extremal_measure).name
    return write_json(directory / f"{stem}.json", result.to_dict(field_file, measure_file))
