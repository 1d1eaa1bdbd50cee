"""Executable comparison principles and the bundled comparison suites.

Every check returns a JSON-ready report.  A report's ``status`` is
``"pass"``, ``"fail"`` or ``"rejected"``; an instance whose hypotheses do
not hold is rejected and never counts as a counterexample.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .capacity import balayage
from .grid import CompactSet, Field, Grid, SpaceTimeUnion, laplacian
from .measure import DiscreteMeasure, dominates, residual_rate
from .rng import Stream
from .solver import (MAX_HALVINGS, MAX_NEWTON, PMEProblem, SolverError, newton_tolerance,
                     solve_cauchy_dirichlet, solve_measure_data)

COMP_REL = 1e-6
SOL_REL = 1e-8
SCALING_REL = 1e-9


def worker_count() -> int:
    """Worker cap from ``PMELAB_THREADS``, else the machine's parallelism."""
    raw = os.environ.get("PMELAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    n = int(raw)
    if n < 1:
        raise ValueError("PMELAB_THREADS must be a positive integer")
    return n


def _scale(*fields) -> float:
    return max(1.0, *(float(np.abs(f.values).max()) for f in fields))


def _worst(diff: np.ndarray, mask: np.ndarray):
    if not mask.any():
        return -np.inf, None
    masked = np.where(mask, diff, -np.inf)
    idx = np.unravel_index(int(np.argmax(masked)), diff.shape)
    return float(masked[idx]), [int(i) for i in idx]


def _step_residual(u: Field, m: float) -> np.ndarray:
    """Per-step residual ``dt·(u_t - Δ_h u^m)``, the quantity Newton drives to tolerance."""
    return residual_rate(u, m) * u.grid.dt


def _report(op, geometry, hyps, diff, region, tol, scale, **extra):
    rejected = [k for k, ok in hyps.items() if not ok]
    margin, loc = _worst(diff, region)
    if rejected:
        status = "rejected"
    else:
        status = "pass" if margin <= tol else "fail"
    out = {"op": op, "geometry": geometry, "hypotheses": hyps, "rejected_hypotheses": rejected,
           "status": status, "margin": margin, "location": loc, "comp_tol": tol,
           "scale": scale, "micro_violation": max(0.0, margin) if margin <= tol else None}
    out.update(extra)
    return out


def _same_grid(u: Field, v: Field):
    if u.grid != v.grid:
        raise ValueError("fields live on different grids")


# comparison checks -----------------------------------------------------------

def compare_cylinder(u: Field, v: Field, m: float, box=None) -> dict:
    """Cylinder comparison: ``u <= v`` on ``∂_p`` of the box forces ``u <= v`` inside.

    ``box`` is ``((n0, n1), (i0, i1)[, (j0, j1)])`` in node indices; the whole
    grid by default.
    """
    _same_grid(u, v)
    g = u.grid
    if box is None:
        box = ((0, g.nt - 1),) + tuple((0, s - 1) for s in g.node_shape)
    closed = np.zeros(g.field_shape, dtype=bool)
    closed[tuple(slice(a, b + 1) for a, b in box)] = True
    inner = np.zeros_like(closed)
    inner[(slice(box[0][0] + 1, box[0][1] + 1),) + tuple(slice(a + 1, b) for a, b in box[1:])] = True
    parabolic = closed & ~inner
    scale = _scale(u, v)
    tol = COMP_REL * scale
    ru, rv = _step_residual(u, m), _step_residual(v, m)
    hyps = {"u_solution": bool(np.abs(ru[inner]).max(initial=0.0) <= SOL_REL * scale),
            "v_supersolution": bool(rv[inner].min(initial=0.0) >= -SOL_REL * scale),
            "u_le_v_on_parabolic_boundary": _worst(u.values - v.values, parabolic)[0] <= tol}
    return _report("compare_cylinder", {"kind": "cylinder", "box": [list(b) for b in box]},
                   hyps, u.values - v.values, closed, tol, scale)


def compare_punctured(u: Field, v: Field, K: CompactSet, m: float) -> dict:
    """Comparison in ``Ω_T ∖ K``: ordering on ``K ∪ ∂_p`` and ``v > 0`` on K give ``u <= v``."""
    _same_grid(u, v)
    g = u.grid
    if K.grid != g:
        raise ValueError("K lives on a different grid")
    scale = _scale(u, v)
    tol = COMP_REL * scale
    diff = u.values - v.values
    off = g.active_cells() & ~K.mask
    ru, rv = _step_residual(u, m), _step_residual(v, m)
    parabolic = ~g.active_cells()
    parabolic[-1] = ~g.spatial_interior()
    hyps = {"u_solution_off_K": bool(np.abs(ru[off]).max(initial=0.0) <= SOL_REL * scale),
            "v_supersolution_off_K": bool(rv[off].min(initial=0.0) >= -SOL_REL * scale),
            "v_positive_on_K": bool(K.is_empty or v.values[K.mask].min() > 0),
            "u_le_v_on_K": _worst(diff, K.mask)[0] <= tol,
            "u_le_v_on_parabolic_boundary": _worst(diff, parabolic)[0] <= tol}
    return _report("compare_punctured", {"kind": "punctured", "K_cells": len(K)}, hyps, diff,
                   np.ones_like(off), tol, scale)


def compare_general_open(u: Field, v: Field, E: SpaceTimeUnion, m: float) -> dict:
    """Comparison on a union of boxes; ordering is imposed on all of ``∂E``.

    The positivity of ``v`` on ``∂E`` is recorded but not required, since the
    boundary is that of a finite union of cylinders.
    """
    _same_grid(u, v)
    g = u.grid
    if E.grid != g:
        raise ValueError("E lives on a different grid")
    scale = _scale(u, v)
    tol = COMP_REL * scale
    diff = u.values - v.values
    inner = E.interior
    ru, rv = _step_residual(u, m), _step_residual(v, m)
    pieces = {k: _worst(diff, p)[0] for k, p in E.pieces().items()}
    hyps = {"u_solution_in_E": bool(np.abs(ru[inner]).max(initial=0.0) <= SOL_REL * scale),
            "v_supersolution_in_E": bool(rv[inner].min(initial=0.0) >= -SOL_REL * scale),
            "u_le_v_on_boundary": max(pieces.values()) <= tol}
    positive = bool(v.values[E.boundary].min() > 0)
    return _report("compare_general_open",
                   {"kind": "union_of_boxes", "boxes": [[list(r) for r in b] for b in E.boxes]},
                   hyps, diff, E.closure, tol, scale,
                   boundary_margins={k: (None if not np.isfinite(x) else x) for k, x in pieces.items()},
                   waived={"v_positive_on_boundary": positive})


def scaling_residual_check(u: Field, m: float, eps_list=(0.1, 0.01)) -> dict:
    """Residual of ``u/(1+ε)`` against ``((1+ε)^{m-1} - 1)/(1+ε)^m · Δ_h u^m``.

    Both sides are compared per step (times ``dt``) on active cells, within
    ``1e-9·max(1, sup u)``.  The sup-norm ratio ``f(0.1)/f(0.01)`` is reported
    when both values of ε are present.
    """
    g = u.grid
    scale = max(1.0, u.sup)
    tol = SCALING_REL * scale
    active = g.active_cells()
    base = _step_residual(u, m)
    lap = np.zeros(g.field_shape)
    inner = (slice(1, -1),) * g.dim
    for n in range(1, g.nt):
        lap[n][inner] = laplacian(u.values[n] ** m, g.h)
    rows = []
    sup_f = {}
    for eps in eps_list:
        w = Field(g, u.values / (1.0 + eps), "u_scaled")
        coef = ((1.0 + eps) ** (m - 1) - 1.0) / (1.0 + eps) ** m
        f = coef * lap * g.dt
        err = float(np.abs(_step_residual(w, m) - f)[active].max(initial=0.0))
        sup_f[eps] = float(np.abs(f[active]).max(initial=0.0))
        rows.append({"eps": eps, "max_error": err, "sup_f": sup_f[eps], "pass": err <= tol})
    ratio = None
    ratio_ok = True
    if 0.1 in sup_f and 0.01 in sup_f and sup_f[0.01] > 0:
        ratio = sup_f[0.1] / sup_f[0.01]
        ratio_ok = 8.0 <= ratio <= 12.0
    hyp = {"u_solution": bool(np.abs(base[active]).max(initial=0.0) <= tol)}
    ok = all(r["pass"] for r in rows) and ratio_ok
    return {"op": "scaling_residual_check", "m": m, "hypotheses": hyp,
            "rejected_hypotheses": [k for k, v in hyp.items() if not v],
            "status": "rejected" if not hyp["u_solution"] else ("pass" if ok else "fail"),
            "tol": tol, "eps": rows, "ratio": ratio}


def measure_domination(mu_u: DiscreteMeasure, mu_v: DiscreteMeasure, m: float) -> dict:
    """``μ_v <= μ_u`` cellwise forces ``u_{μ_v} <= u_{μ_u}`` for zero parabolic data."""
    hyps = {"mu_v_le_mu_u": dominates(mu_u, mu_v),
            "nonnegative": mu_v.is_nonnegative(0.0) and mu_u.is_nonnegative(0.0)}
    g = mu_u.grid
    if not all(hyps.values()):
        return {"op": "measure_domination", "hypotheses": hyps, "status": "rejected",
                "rejected_hypotheses": [k for k, v in hyps.items() if not v]}
    u = solve_measure_data(g, m, mu_u)
    v = solve_measure_data(g, m, mu_v)
    scale = _scale(u, v)
    return _report("measure_domination", {"kind": "cylinder"}, hyps, v.values - u.values,
                   np.ones(g.field_shape, bool), COMP_REL * scale, scale, m=m)


# PME on a union of boxes -------------------------------------------------------

def _node_laplacian(g: Grid) -> sp.csr_matrix:
    """Five/three-point Laplacian over all nodes; rows of boundary nodes are unused."""
    def second(n):
        return sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    shape = g.node_shape
    if g.dim == 1:
        return (second(shape[0]) / g.h**2).tocsr()
    L = sp.kron(second(shape[0]), sp.identity(shape[1])) + \
        sp.kron(sp.identity(shape[0]), second(shape[1]))
    return (L / g.h**2).tocsr()


def solve_on_union(E: SpaceTimeUnion, m: float, data: np.ndarray) -> Field:
    """PME solution in the open union ``E`` with Dirichlet values ``data`` off it.

    Every node outside ``E``'s interior keeps its value from ``data``; the
    interior nodes of each level are solved by damped Newton.
    """
    g = E.grid
    data = np.asarray(data, float)
    if data.shape != g.field_shape or data.min() < 0:
        raise ValueError("data must be a nonnegative field on E's grid")
    L = _node_laplacian(g)
    inner = E.interior
    vals = data.copy()
    for n in range(1, g.nt):
        S = np.flatnonzero(inner[n].ravel())
        if S.size == 0:
            continue
        prev = vals[n - 1].ravel()
        full = vals[n].ravel().copy()
        Lss = L[S][:, S]
        tol = newton_tolerance(vals[n - 1])

        def F(U):
            full[S] = U
            return U - g.dt * (L @ full**m)[S] - prev[S]

        U = np.maximum(prev[S], 0.0)
        res = F(U)
        norm = float(np.abs(res).max())
        it = 0
        while norm > tol:
            if it >= MAX_NEWTON:
                raise SolverError("Newton did not converge on the union", n)
            J = sp.identity(S.size) - g.dt * (Lss @ sp.diags(m * (U + 1e-9) ** (m - 1)))
            step = spsolve(J.tocsc(), -res)
            lam = 1.0
            for _ in range(MAX_HALVINGS + 1):
                trial = np.maximum(U + lam * step, 0.0)
                rt = F(trial)
                nt = float(np.abs(rt).max())
                if nt < norm or nt <= tol:
                    break
                lam *= 0.5
            else:
                raise SolverError("line search failed on the union", n)
            U, res, norm = trial, rt, nt
            it += 1
        full[S] = U
        vals[n] = full.reshape(g.node_shape)
    return Field(g, vals, "u_union").check()


# bundled suites ----------------------------------------------------------------

GRID_1D = {"dim": 1, "nx": 24, "nt": 20}
GRID_2D = {"dim": 2, "nx": 10, "nt": 12}
MS = (1.5, 2.0, 3.0)


def _grid(d: dict) -> Grid:
    return Grid.make(d["dim"], d["nx"], d["nt"])


def bump_data(grid: Grid, center, radius: float, height: float) -> np.ndarray:
    """Nodal bump ``height·(1 - |x-c|²/r²)_+²``, zeroed on ∂Ω."""
    r2 = sum((x - c) ** 2 for x, c in zip(grid.coords(), center))
    out = height * np.maximum(1.0 - r2 / radius**2, 0.0) ** 2
    out[~grid.spatial_interior()] = 0.0
    return out


def _solve(grid, m, init, source=None) -> Field:
    return solve_cauchy_dirichlet(PMEProblem(grid, m, init, 0.0, source=source))[0]


def _rand_bump(s: Stream, grid: Grid) -> dict:
    L = grid.Lx
    return {"center": [float(x) for x in s.uniform(0.35 * L, 0.65 * L, grid.dim)],
            "radius": float(s.uniform(0.15, 0.3) * L), "height": float(s.uniform(0.5, 2.0))}


def _rand_box(s: Stream, grid: Grid, levels, width, lo=3) -> list:
    """Inclusive cell box at least ``lo`` cells away from the margin."""
    hi_t = grid.nt - 1 - lo
    n0 = int(s.integers(levels[0], levels[1] + 1))
    box = [[n0, min(n0 + int(s.integers(0, 2)), hi_t)]]
    for size in grid.node_shape:
        i0 = int(s.integers(lo + 1, size - 1 - lo - width))
        box.append([i0, i0 + int(s.integers(0, width + 1))])
    return box


def _grow(box, grid: Grid, s: Stream, lo=3) -> list:
    """Enlarge an inclusive cell box by up to two cells per side, inside the margin."""
    limits = [grid.nt - 1 - lo] + [n - 1 - lo for n in grid.node_shape]
    out = []
    for k, ((a, b), top) in enumerate(zip(box, limits)):
        out.append([max(lo, a - int(s.integers(0, 3))) if k else a,
                    min(top, b + int(s.integers(0, 3)))])
    return out


def _rand_L(s: Stream, grid: Grid) -> list:
    """Two node boxes forming an L: a tall narrow box joined to a short wide one."""
    T = grid.nt - 1
    n0 = int(s.integers(1, 4))
    n2 = int(s.integers(max(T - 4, n0 + 6), T + 1))
    n1 = int(s.integers(n0 + 3, n2 - 2))
    space_a, space_b = [], []
    for size in grid.node_shape:
        N = size - 1
        i0 = int(s.integers(0, N // 4 + 1))
        i1 = int(s.integers(i0 + 3, N // 2 + 2))
        i2 = int(s.integers(i1 + 2, N + 1))
        space_a.append([i0, i1])
        space_b.append([i0, i2])
    lower = bool(s.integers(0, 2))
    tall = [[n0, n2]] + space_a
    wide = ([[n0, n1]] if lower else [[n1, n2]]) + space_b
    return [tall, wide]


def _union(grid, boxes) -> SpaceTimeUnion:
    return SpaceTimeUnion(grid, tuple(tuple(tuple(r) for r in b) for b in boxes))


def _compact(grid, box) -> CompactSet:
    return CompactSet.box(grid, tuple(box[0]), *(tuple(r) for r in box[1:]))


def build_suite(name: str, seed: int) -> list[dict]:
    """Seed-pinned instance descriptions for the named suite."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    root = Stream(seed, f"suite/{name}")
    out = []
    for kind, grid_desc, count in SUITES[name]:
        for k in range(count):
            s = root.split(f"{kind}/{grid_desc['dim']}/{k}")
            out.append(_describe(kind, dict(grid_desc), s))
    for i, d in enumerate(out):
        d["id"] = i
    return out


def _describe(kind: str, gd: dict, s: Stream) -> dict:
    g = _grid(gd)
    d = {"kind": kind, "grid": gd, "m": float(s.choice(MS))}
    if kind in ("cylinder_ordered", "probe_cylinder_boundary", "open_restriction"):
        d["a"] = _rand_bump(s, g)
        d["b"] = _rand_bump(s, g)
    if kind == "cylinder_ordered" and bool(s.integers(0, 2)):
        d["box"] = [[int(s.integers(0, 4)), g.nt - 1 - int(s.integers(0, 4))]] + \
                   [[int(s.integers(0, 4)), n - 1 - int(s.integers(0, 4))] for n in g.node_shape]
    if kind == "cylinder_source":
        d["a"] = _rand_bump(s, g)
        cell = [int(s.integers(1, g.nt - 1))] + [int(s.integers(2, n - 2)) for n in g.node_shape]
        d["cell"], d["weight"] = cell, float(s.uniform(0.01, 0.1)) * g.h ** g.dim
    if kind.startswith("punctured") or kind.startswith("probe_punctured"):
        late = g.nt - 1 - 3 - 2
        d["K"] = _rand_box(s, g, (3, max(3, late // 2)), 2)
        if kind == "probe_punctured_disjoint":
            d["K2"] = [[d["K"][0][1] + 2, d["K"][0][1] + 2]] + [list(r) for r in d["K"][1:]]
        else:
            d["K2"] = _grow(d["K"], g, s)
    if kind.startswith("open") or kind.startswith("probe_open"):
        d["boxes"] = _rand_L(s, g)
        if kind == "open_box":
            d["boxes"] = d["boxes"][:1]
        d["theta"] = float(s.uniform(0.5, 0.95))
        d["v_source"] = "balayage" if bool(s.integers(0, 2)) else "solution"
        d["b"] = _rand_bump(s, g)
        late = g.nt - 1 - 3 - 2
        d["K"] = _rand_box(s, g, (3, max(3, late // 2)), 2)
    if kind == "probe_open_data":
        d["theta"] = 1.1
    if kind == "measure_domination":
        d["measure"] = random_sparse_weights(g, s, 4)
        d["ratio"] = float(s.uniform(0.3, 0.9))
    if kind == "scaling":
        d["a"] = _rand_bump(s, g)
    return d


def random_sparse_weights(grid: Grid, s: Stream, count: int, mass: float = 0.05) -> list:
    """``count`` random active cells with positive weights, as ``[flat index, weight]`` pairs."""
    active = np.flatnonzero(grid.active_cells().ravel())
    cells = sorted(int(c) for c in s.choice(active, count, replace=False))
    w = s.uniform(0.2, 1.0, count)
    w = mass * w / w.sum()
    return [[c, float(x)] for c, x in zip(cells, w)]


def _weights(grid: Grid, pairs) -> np.ndarray:
    flat = np.zeros(int(np.prod(grid.field_shape)))
    for c, w in pairs:
        flat[c] = w
    return flat.reshape(grid.field_shape)


def _bump(g, p):
    return bump_data(g, p["center"], p["radius"], p["height"])


def _open_v(d, g, m) -> Field:
    if d["v_source"] == "balayage":
        return balayage(_compact(g, d["K"]), m)
    return _solve(g, m, _bump(g, d["b"]))


def run_instance(d: dict) -> dict:
    """Build and check one suite instance; the report echoes the description."""
    g, m, kind = _grid(d["grid"]), d["m"], d["kind"]
    try:
        if kind in ("cylinder_ordered", "probe_cylinder_boundary"):
            a = _bump(g, d["a"])
            b = a + _bump(g, d["b"])
            u, v = _solve(g, m, a), _solve(g, m, b)
            if kind == "probe_cylinder_boundary":
                u, v = v, u
            box = None if "box" not in d else tuple(tuple(r) for r in d["box"])
            rep = compare_cylinder(u, v, m, box)
        elif kind == "cylinder_source":
            a = _bump(g, d["a"])
            w = np.zeros(g.field_shape)
            w[tuple(d["cell"])] = d["weight"]
            rep = compare_cylinder(_solve(g, m, a), _solve(g, m, a, w / g.cell_volume), m)
        elif kind in ("punctured_nested", "probe_punctured_scaled", "probe_punctured_disjoint"):
            K, K2 = _compact(g, d["K"]), _compact(g, d["K2"])
            u, v = balayage(K, m), balayage(K2, m)
            if kind == "probe_punctured_scaled":
                v = Field(g, 0.5 * v.values, "v_half")
            rep = compare_punctured(u, v, K, m)
        elif kind == "punctured_equal":
            K = _compact(g, d["K"])
            u = balayage(K, m)
            rep = compare_punctured(u, u, K, m)
        elif kind == "open_restriction":
            a = _bump(g, d["a"])
            u, v = _solve(g, m, a), _solve(g, m, a + _bump(g, d["b"]))
            rep = compare_general_open(u, v, _union(g, d["boxes"]), m)
        elif kind in ("open_constructed", "open_box", "probe_open_data"):
            E = _union(g, d["boxes"])
            v = _open_v(d, g, m)
            u = solve_on_union(E, m, d["theta"] * v.values)
            rep = compare_general_open(u, v, E, m)
        elif kind == "probe_open_not_solution":
            E = _union(g, d["boxes"])
            v = _solve(g, m, _bump(g, d["b"]))
            rep = compare_general_open(Field(g, d["theta"] * v.values), v, E, m)
        elif kind == "measure_domination":
            mu = DiscreteMeasure(g, _weights(g, d["measure"]))
            rep = measure_domination(mu, mu * d["ratio"], m)
        elif kind == "scaling":
            rep = scaling_residual_check(_solve(g, m, _bump(g, d["a"])), m)
        else:
            raise ValueError(f"unknown instance kind {kind!r}")
    except SolverError as exc:
        rep = {"status": "error", "error": str(exc)}
    rep.update({"id": d["id"], "kind": kind, "m": m, "dim": g.dim,
                "probe": kind.startswith("probe")})
    return rep


SUITES = {
    "smoke": [("cylinder_ordered", GRID_1D, 1), ("punctured_nested", GRID_1D, 1),
              ("open_constructed", GRID_1D, 1), ("probe_punctured_scaled", GRID_1D, 1),
              ("probe_open_data", GRID_1D, 1)],
    "full": [("cylinder_ordered", GRID_1D, 4), ("cylinder_ordered", GRID_2D, 2),
             ("cylinder_source", GRID_1D, 3),
             ("punctured_nested", GRID_1D, 8), ("punctured_nested", GRID_2D, 2),
             ("punctured_equal", GRID_1D, 2),
             ("open_restriction", GRID_1D, 5), ("open_restriction", GRID_2D, 1),
             ("open_constructed", GRID_1D, 8), ("open_constructed", GRID_2D, 2),
             ("open_box", GRID_1D, 2),
             ("measure_domination", GRID_1D, 3), ("scaling", GRID_1D, 3),
             ("probe_cylinder_boundary", GRID_1D, 2), ("probe_punctured_scaled", GRID_1D, 2),
             ("probe_punctured_disjoint", GRID_1D, 2), ("probe_open_data", GRID_1D, 2),
             ("probe_open_not_solution", GRID_1D, 2)],
}


def run_suite(name: str, seed: int, workers: int | None = None) -> list[dict]:
    """Run a bundled suite; results come back in instance order whatever the worker count."""
    descs = build_suite(name, seed)
    workers = worker_count() if workers is None else workers
    if workers <= 1:
        return [run_instance(d) for d in descs]
    with ProcessPoolExecutor(max_workers=min(workers, len(descs))) as pool:
        return list(pool.map(run_instance, descs))


def summarize(reports: list[dict]) -> dict:
    valid = [r for r in reports if not r["probe"]]
    probes = [r for r in reports if r["probe"]]
    return {"instances": len(reports),
            "valid": len(valid),
            "valid_passed": sum(r["status"] == "pass" for r in valid),
            "valid_rejected": sum(r["status"] == "rejected" for r in valid),
            "failed": sum(r["status"] in ("fail", "error") for r in reports),
            "probes": len(probes),
            "probes_rejected": sum(r["status"] == "rejected" for r in probes),
            "ok": all(r["status"] == "pass" for r in valid)
            and all(r["status"] == "rejected" for r in probes)}


def to_json_lines(reports: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"
                   for r in reports)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")
