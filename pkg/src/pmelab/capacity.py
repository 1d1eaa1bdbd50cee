"""Balayages and PME capacities of cell sets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from .grid import CompactSet, Field, Grid, chessboard_distance, margin_mask, shrink_neighborhoods
from .measure import DiscreteMeasure, extract_riesz, measure_of_set
from .obstacle import ObstacleSpec, solve_obstacle
from .solver import PMEProblem, SolverError, step_implicit, truncation_horizon

DEPTH = 5
RADIUS = 3
SUPPORT_TOL = 0.01
FEAS_TOL = 1e-12


@dataclass
class CapacityResult:
    value: float
    extremal: Field
    extremal_measure: DiscreteMeasure
    error_bar: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, extremal_file: str | None = None, measure_file: str | None = None) -> dict:
        return {"value": self.value, "error_bar": self.error_bar,
                "diagnostics": self.diagnostics,
                "extremal_file": extremal_file, "measure_file": measure_file}


def obstacle_family(K: CompactSet, m: float, depth: int = DEPTH, radius: int = RADIUS):
    """Obstacles ``ψ_i = (1 + 2^{-i}) g_i²`` with ``g_i = 1`` on K, supported in ``Ē_i``.

    ``g_i = (1 - dist/r_i)_+`` with ``r_i = ceil(radius / i)``, so the family
    decreases in ``i`` and tends to ``χ_K`` as the neighbourhoods shrink.
    """
    hoods = shrink_neighborhoods(K, depth, radius)
    dist = chessboard_distance(K.mask)
    specs = []
    for i, E in enumerate(hoods, start=1):
        r = -(-radius // i)
        g = np.clip(1.0 - dist / r, 0.0, 1.0)
        psi = (1.0 + 2.0**-i) * g**2
        assert not np.any(psi[~E] > 0)
        specs.append(ObstacleSpec(Field(K.grid, psi, f"psi_{i}"), m))
    return specs


def balayage(K: CompactSet, m: float, depth: int = DEPTH, radius: int = RADIUS,
             backend: str = "projected", return_all: bool = False):
    """Balayage of K: obstacle solutions for the decreasing family, last one returned."""
    if K.is_empty:
        out = Field(K.grid, np.zeros(K.grid.field_shape), "balayage")
        return (out, []) if return_all else out
    sols = [solve_obstacle(s, backend) for s in obstacle_family(K, m, depth, radius)]
    for i in range(1, len(sols)):
        rise = float((sols[i].u.values - sols[i - 1].u.values).max())
        if rise > 1e-8 * max(1.0, sols[i - 1].u.sup):
            raise SolverError(f"balayage family not decreasing at i={i + 1}: rise {rise:.3e}")
    out = Field(K.grid, sols[-1].u.values, "balayage")
    return (out, sols) if return_all else out


def capacity_of_compact(K: CompactSet, m: float, depth: int = DEPTH, radius: int = RADIUS,
                        backend: str = "projected", c_universal: float = 1.0) -> CapacityResult:
    """Capacity of K as the extremal measure's mass on K plus its one-cell ring.

    Diagnostics split the mass into K, the ring and everything else.  The
    scheme is causal, so the mass near K does not depend on levels after
    K's last level; the universal-estimate horizon is reported only.
    """
    g = K.grid
    if K.is_empty:
        z = Field(g, np.zeros(g.field_shape), "balayage")
        return CapacityResult(0.0, z, DiscreteMeasure.zeros(g), 0.0, {"empty": True})
    u = balayage(K, m, depth, radius, backend)
    mu = extract_riesz(u, m)
    dil = K.dilate(1)
    ring = dil & ~K.mask
    on_K = measure_of_set(mu, K)
    on_ring = measure_of_set(mu, ring)
    outside = float(np.abs(mu.weights[~dil]).sum())
    value = on_K + on_ring
    inside_tv = float(np.abs(mu.weights[dil]).sum())
    horizon = truncation_horizon(g, m, K, 1e-6, c=2.0 * c_universal, check_extent=False)
    diag = {"grid": g.to_dict(), "m": m, "depth": depth, "radius": radius, "backend": backend,
            "mass_on_K": on_K, "mass_ring": on_ring, "mass_outside": outside,
            "support_fraction": inside_tv / max(inside_tv + outside, 1e-300),
            "max_extremal": u.sup, "min_weight": float(mu.weights.min()),
            "horizon_level": horizon, "horizon_within_grid": horizon <= g.nt - 1}
    return CapacityResult(value, u, mu, abs(on_ring) + outside, diag)


# brute-force oracle ----------------------------------------------------------

@dataclass
class BruteForceResult:
    value: float
    weights: np.ndarray
    cycles: int
    solves: int
    trial_masses: list
    budget_exceeded: bool = False
    ascent_value: float = 0.0
    saturation_cycles: int = 0


class _Counter:
    """Measure-data solves for the oracle, with every feasible trial mass recorded.

    Solves stop at the last level carrying weight: later levels are
    source-free with zero data and cannot exceed the earlier maximum.
    Levels before the first weight change since the previous call are
    reused, which reproduces a full solve bit for bit.
    """

    def __init__(self, grid, m, max_solves, last_level):
        self.grid = grid.with_nt(last_level + 1)
        self.m, self.max_solves = m, max_solves
        self.solves = 0
        self.trials = []
        self._w = np.zeros(self.grid.field_shape)
        self._u = np.zeros(self.grid.field_shape)

    def field(self, weights):
        if self.solves >= self.max_solves:
            raise _Budget
        self.solves += 1
        g = self.grid
        w = weights[: g.nt]
        changed = np.flatnonzero((w != self._w).reshape(g.nt, -1).any(axis=1))
        if changed.size:
            if w.min() < 0:
                raise ValueError("negative trial weight")
            problem = PMEProblem(g, self.m, 0.0, 0.0, source=w / g.cell_volume)
            u = self._u.copy()
            for n in range(max(int(changed[0]), 1), g.nt):
                u[n] = step_implicit(u[n - 1], problem, n)[0]
            self._w, self._u = w.copy(), u
        u = self._u
        if u.max() <= 1.0 + FEAS_TOL:
            self.trials.append(float(weights.sum()))
        return u

    def feasible(self, weights) -> bool:
        return self.field(weights).max() <= 1.0 + FEAS_TOL


class _Budget(Exception):
    pass


def _ascent(K, solver, w, rel_tol, max_cycles, bisect_rel):
    """Cyclic coordinate ascent: each cell takes its largest feasible weight."""
    g = K.grid
    cells = [tuple(c) for c in np.argwhere(K.mask)]  # time-major order
    unit = g.h ** g.dim
    total = float(w.sum())
    for cycle in range(1, max_cycles + 1):
        before = total
        for c in cells:
            trial = w.copy()
            trial[c] = 0.0
            if not solver.feasible(trial):
                w[c] = 0.0
                continue
            lo, hi = 0.0, max(2.0 * w[c], unit)
            trial[c] = hi
            while solver.feasible(trial):
                lo, hi = hi, 2.0 * hi
                trial[c] = hi
            while hi - lo > bisect_rel * hi:
                trial[c] = 0.5 * (lo + hi)
                if solver.feasible(trial):
                    lo = trial[c]
                else:
                    hi = trial[c]
            w[c] = lo
        total = float(w.sum())
        if abs(total - before) < rel_tol * max(total, 1e-300):
            return cycle, True
    return max_cycles, False


def _saturate(K, solver, w, rel_tol, max_cycles):
    """Nonlinear Gauss-Seidel on ``u_μ = 1`` at K's cells, weights kept >= 0.

    A fixed point has ``u_μ <= 1`` on K and ``u_μ = 1`` wherever weight sits;
    off K the field solves the PME with zero data, so it is feasible.
    """
    g = K.grid
    cells = [tuple(c) for c in np.argwhere(K.mask)]
    unit = g.h ** g.dim
    for cycle in range(1, max_cycles + 1):
        old = w.copy()
        for c in cells:
            def gap(x, c=c):
                trial = w.copy()
                trial[c] = x
                return solver.field(trial)[c] - 1.0

            if gap(0.0) >= 0:
                w[c] = 0.0
                continue
            hi = max(2.0 * w[c], unit)
            while gap(hi) < 0:
                hi *= 2.0
            w[c] = brentq(gap, 0.0, hi, xtol=1e-15, rtol=1e-13)
        if np.abs(w - old).sum() <= rel_tol * max(w.sum(), 1e-300):
            return cycle
    return max_cycles


def brute_force_capacity(K: CompactSet, m: float, rel_tol: float = 1e-4, max_cycles: int = 60,
                         max_solves: int = 50000, initial=None, bisect_rel: float = 1e-9,
                         saturate: bool = True) -> BruteForceResult:
    """``sup{μ(Ω): supp μ ⊂ K, 0 <= u_μ <= 1}`` from measure-data solves only.

    Phase one is cyclic coordinate ascent: each cell in turn takes the
    largest weight keeping ``max u_μ <= 1`` (bisection), until a cycle gains
    less than ``rel_tol`` of the total.  Ascent alone stalls when cells are
    coupled within a time level, so phase two runs Gauss-Seidel saturation
    (see ``_saturate``) from the ascent's point and rescales the result into
    the feasible set.  The larger feasible total is returned.
    """
    g = K.grid
    if K.is_empty:
        return BruteForceResult(0.0, np.zeros(g.field_shape), 0, 0, [])
    if len(K) > 500:
        raise ValueError("brute force is limited to about 500 cells")
    solver = _Counter(g, m, max_solves, K.last_level())
    w = np.zeros(g.field_shape) if initial is None else np.array(initial, dtype=float)
    try:
        cycles, settled = _ascent(K, solver, w, rel_tol, max_cycles, bisect_rel)
    except _Budget:
        return BruteForceResult(float(w.sum()), w, max_cycles, solver.solves, solver.trials, True,
                                float(w.sum()))
    ascent_value = float(w.sum())
    best = w.copy()
    sat_cycles = 0
    if saturate:
        ws = w.copy()
        try:
            sat_cycles = _saturate(K, solver, ws, 1e-9, 400)
            top = solver.field(ws).max()
            if top > 1.0 + FEAS_TOL:
                s = brentq(lambda s: solver.field(s * ws).max() - 1.0, 0.0, 1.0, xtol=1e-15)
                ws = s * ws * (1 - 1e-12)
            if solver.feasible(ws) and ws.sum() > best.sum():
                best = ws
        except _Budget:
            settled = False
    return BruteForceResult(float(best.sum()), best, cycles, solver.solves, solver.trials,
                            not settled, ascent_value, sat_cycles)


# open sets and structural properties ----------------------------------------

def _erode(mask: np.ndarray, r: int) -> np.ndarray:
    if r <= 0:
        return mask.copy()
    st = np.ones((3,) * mask.ndim, dtype=bool)
    return ndimage.binary_erosion(mask, structure=st, iterations=r, border_value=0)


def capacity_of_open(U, m: float, grid: Grid | None = None, max_radius: int = 3, **kw) -> dict:
    """Capacity of an open cell set via the exhaustion ``K_j ↑ U``.

    ``K_j`` are erosions of U by ``R, R-1, ..., 0`` cells; the last increment is
    the error bar.
    """
    mask = U.mask if isinstance(U, CompactSet) else np.asarray(U, dtype=bool)
    grid = U.grid if isinstance(U, CompactSet) else grid
    if not mask.any():
        return {"value": 0.0, "error_bar": 0.0, "sequence": []}
    if np.any(mask & margin_mask(grid)):
        raise ValueError("open set must have compact closure inside the domain")
    radii = [r for r in range(max_radius, -1, -1) if _erode(mask, r).any()]
    seq = [capacity_of_compact(CompactSet(grid, _erode(mask, r)), m, **kw).value for r in radii]
    bar = abs(seq[-1] - seq[-2]) if len(seq) > 1 else 0.0
    return {"value": seq[-1], "error_bar": bar, "sequence": seq, "radii": radii}


def capacity_property_suite(instances, rel_tol: float = 0.10, **kw) -> dict:
    """Check structural capacity properties on a list of instances.

    Each instance is a dict with ``kind`` in ``subadditive`` (``sets``: two
    compacts), ``monotone`` (``sets``: K ⊂ K'), ``decreasing`` (``sets``:
    K_1 ⊃ K_2 ⊃ ... ⊃ K, last one the limit) or ``inner`` (``open``: open
    mask on ``grid``) and a model exponent ``m``.
    """
    cache = {}

    def cap(K, m):
        key = (K.mask.tobytes(), K.grid, m)
        if key not in cache:
            cache[key] = capacity_of_compact(K, m, **kw).value
        return cache[key]

    results = []
    for inst in instances:
        kind, m = inst["kind"], inst["m"]
        rec = {"kind": kind, "m": m}
        if kind == "subadditive":
            A, B = inst["sets"]
            union, a, b = cap(A | B, m), cap(A, m), cap(B, m)
            rec.update(union=union, parts=[a, b], margin=union - (a + b) * (1 + rel_tol))
            rec["pass"] = union <= (a + b) * (1 + rel_tol)
        elif kind == "monotone":
            A, B = inst["sets"]
            if not A.issubset(B):
                raise ValueError("monotone instance needs nested sets")
            a, b = cap(A, m), cap(B, m)
            tol = 1e-8 * max(1.0, b)
            rec.update(small=a, large=b, margin=a - b)
            rec["pass"] = a <= b + tol
        elif kind == "decreasing":
            sets = inst["sets"]
            vals = [cap(K, m) for K in sets]
            mono = all(vals[i + 1] <= vals[i] + 1e-8 * max(1.0, vals[i])
                       for i in range(len(vals) - 1))
            limit = vals[-1]
            approach = abs(vals[-2] - limit) <= rel_tol * limit if len(vals) > 1 else True
            rec.update(values=vals, monotone=mono, pass_limit=approach)
            rec["pass"] = bool(mono and approach)
        elif kind == "inner":
            res = capacity_of_open(inst["open"], m, inst["grid"], **kw)
            seq = res["sequence"]
            mono = all(seq[i] <= seq[i + 1] + 1e-8 * max(1.0, seq[i + 1])
                       for i in range(len(seq) - 1))
            direct = cap(CompactSet(inst["grid"], inst["open"]), m)
            rec.update(sequence=seq, direct=direct)
            rec["pass"] = bool(mono and abs(max(seq) - direct) <= rel_tol * direct)
        else:
            raise ValueError(f"unknown property kind {kind!r}")
        results.append(rec)
    failures = [r for r in results if not r["pass"]]
    return {"results": results, "failures": len(failures), "pass": not failures}


def horizon_note(grid: Grid, m: float, K: CompactSet, c: float) -> dict:
    """Tail bound after truncation: universal-estimate value at the grid's final time."""
    t = (grid.nt - 1 - K.last_level()) * grid.dt
    bound = c * t ** (-1.0 / (m - 1)) if t > 0 else math.inf
    return {"final_time_after_K": t, "tail_bound": bound}
