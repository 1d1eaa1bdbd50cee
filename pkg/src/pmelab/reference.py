"""Reference objects: Barenblatt profiles, universal-decay calibration, Caccioppoli bound."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .grid import Field, Grid
from .solver import PMEProblem, solve_cauchy_dirichlet


@dataclass(frozen=True)
class BarenblattParams:
    m: float
    n: int = 1
    mass: float = 0.05
    center: tuple = (0.5,)
    tau: float = 0.1

    @property
    def alpha(self) -> float:
        return self.n / (self.n * (self.m - 1) + 2)

    @property
    def beta(self) -> float:
        return self.alpha / self.n

    @property
    def k(self) -> float:
        return self.alpha * (self.m - 1) / (2 * self.m * self.n)

    @property
    def C(self) -> float:
        # mass = C^{p+n/2} k^{-n/2} π^{n/2} Γ(p+1)/Γ(p+1+n/2), p = 1/(m-1)
        p, n = 1.0 / (self.m - 1), self.n
        log_unit = 0.5 * n * math.log(math.pi / self.k) + gammaln(p + 1) - gammaln(p + 1 + n / 2)
        return math.exp((math.log(self.mass) - log_unit) / (p + n / 2))

    def radius(self, t: float) -> float:
        """Support radius of the profile at time ``t``."""
        return math.sqrt(self.C / self.k) * (t + self.tau) ** self.beta


def barenblatt_eval(p: BarenblattParams, x, t: float):
    """Evaluate the Barenblatt profile at points ``x`` (last axis = coordinates when n > 1)."""
    s = t + p.tau
    if s <= 0:
        raise ValueError("t + tau must be positive")
    x = np.asarray(x, dtype=float)
    c = np.asarray(p.center, dtype=float)
    r2 = (x - c[0]) ** 2 if p.n == 1 else np.sum((x - c) ** 2, axis=-1)
    core = np.maximum(p.C - p.k * r2 * s ** (-2 * p.beta), 0.0)
    return s ** (-p.alpha) * core ** (1.0 / (p.m - 1))


def barenblatt_field(p: BarenblattParams, grid: Grid) -> Field:
    """Nodal samples of the Barenblatt profile on every level of ``grid``."""
    coords = grid.coords()
    pts = coords[0] if grid.dim == 1 else np.stack(coords, axis=-1)
    vals = np.stack([barenblatt_eval(p, pts, t) for t in grid.times])
    return Field(grid, vals, "barenblatt")


def barenblatt_problem(p: BarenblattParams, grid: Grid) -> PMEProblem:
    coords = grid.coords()
    pts = coords[0] if grid.dim == 1 else np.stack(coords, axis=-1)
    return PMEProblem(grid, p.m, barenblatt_eval(p, pts, grid.t0), 0.0)


# universal estimate ---------------------------------------------------------

@dataclass
class Calibration:
    c_emp: float
    exponent: float
    expected_exponent: float
    m: float
    dim: int
    per_grid: list

    def to_dict(self) -> dict:
        return {"c_emp": self.c_emp, "exponent": self.exponent,
                "expected_exponent": self.expected_exponent, "m": self.m, "dim": self.dim,
                "per_grid": self.per_grid}


def decay_fit(u: Field, t0: float = 0.0, window: float = 1 / 3) -> dict:
    """Fit ``log sup_x u`` against ``log(t - t0)`` over the last ``window`` of levels."""
    g = u.grid
    sup = u.values.reshape(g.nt, -1).max(axis=1)
    t = g.times - t0
    first = max(1, int(math.floor(g.nt * (1 - window))))
    idx = np.arange(first, g.nt)
    if idx.size < 10:
        raise ValueError(f"late window has {idx.size} levels, need at least 10")
    if not np.all(sup[idx] > 0):
        return {"exponent": None, "c": float(sup[idx].max(initial=0.0)), "levels": idx.size}
    slope = float(np.polyfit(np.log(t[idx]), np.log(sup[idx]), 1)[0])
    return {"exponent": slope, "levels": int(idx.size),
            "t_window": [float(t[idx[0]]), float(t[idx[-1]])]}


def universal_calibrate(grids, m: float, amplitudes=(100.0,), initial=None) -> Calibration:
    """Empirical constant ``c`` in ``sup u(., t) <= c t^{-1/(m-1)}`` for zero lateral data.

    Each grid is solved from constant initial data of every amplitude (plus an
    optional extra ``initial`` callable of the grid).  ``c_emp`` is the largest
    ``sup u · t^{1/(m-1)}`` seen in the late windows; the exponent is the fit of
    the largest amplitude on the finest grid.
    """
    q = 1.0 / (m - 1)
    c_emp = 0.0
    per_grid = []
    exponent = None
    for grid in grids:
        data = [np.full(grid.node_shape, a) for a in amplitudes]
        if initial is not None:
            data.append(np.asarray(initial(grid), float))
        for init in data:
            init = init.copy()
            init[~grid.spatial_interior()] = 0.0
            u, _ = solve_cauchy_dirichlet(PMEProblem(grid, m, init, 0.0))
            fit = decay_fit(u)
            sup = u.values.reshape(grid.nt, -1).max(axis=1)
            first = grid.nt - fit["levels"]
            scaled = sup[first:] * (grid.times[first:] - grid.t0) ** q
            c_emp = max(c_emp, float(scaled.max()))
            per_grid.append({"nx": grid.nx, "nt": grid.nt, "dt": grid.dt,
                             "amplitude": float(init.max()), "exponent": fit["exponent"]})
            if fit["exponent"] is not None:
                exponent = fit["exponent"]
    return Calibration(c_emp, exponent if exponent is not None else float("nan"), -q, m,
                       grids[0].dim, per_grid)


def calibration_key(n: int, m: float, Lx: float, Ly: float | None) -> str:
    return f"n={n},m={m:g},Lx={Lx:g},Ly={'' if Ly is None else format(Ly, 'g')}"


def store_calibration(path, cal: Calibration, Lx: float, Ly: float | None = None) -> dict:
    path = Path(path)
    table = json.loads(path.read_text()) if path.exists() else {}
    table[calibration_key(cal.dim, cal.m, Lx, Ly)] = cal.to_dict()
    path.write_text(json.dumps(table, indent=2, sort_keys=True))
    return table


def load_calibration(path, n: int, m: float, Lx: float, Ly: float | None = None):
    path = Path(path)
    if not path.exists():
        return None
    return json.loads(path.read_text()).get(calibration_key(n, m, Lx, Ly))


# Caccioppoli ----------------------------------------------------------------

def _grad_sq(f: np.ndarray, h: float) -> np.ndarray:
    """Squared forward-difference gradient on cells, one value per lower-left node."""
    if f.ndim == 1:
        return ((f[1:] - f[:-1]) / h) ** 2
    gx = (f[1:, :-1] - f[:-1, :-1]) / h
    gy = (f[:-1, 1:] - f[:-1, :-1]) / h
    return gx**2 + gy**2


def _cell_avg(f: np.ndarray) -> np.ndarray:
    if f.ndim == 1:
        return 0.5 * (f[1:] + f[:-1])
    return 0.25 * (f[1:, 1:] + f[:-1, 1:] + f[1:, :-1] + f[:-1, :-1])


def caccioppoli_check(u: Field, m: float, M: float, eta: np.ndarray) -> dict:
    """Energy bound ``∬ η²|∇u^m|² <= 16 M^{2m} T ∫|∇η|² + 6 M^{m+1} ∫ η²``."""
    g = u.grid
    if u.sup > M * (1 + 1e-12):
        raise ValueError(f"sup|u| = {u.sup} exceeds M = {M}")
    eta = np.asarray(eta, float)
    if eta.shape != g.node_shape or eta.min() < 0 or eta.max() > 1:
        raise ValueError("eta must be a nodal cutoff with values in [0, 1]")
    hd = g.h ** g.dim
    eta2 = _cell_avg(eta**2)
    lhs = 0.0
    for n in range(1, g.nt):
        lhs += float(np.sum(eta2 * _grad_sq(u.values[n] ** m, g.h))) * hd * g.dt
    rhs = 16 * M ** (2 * m) * g.T * float(np.sum(_grad_sq(eta, g.h))) * hd \
        + 6 * M ** (m + 1) * float(np.sum(eta**2)) * hd
    return {"lhs": lhs, "rhs": rhs, "pass": bool(lhs <= rhs)}


def bump_cutoff(grid: Grid, margin: int = 1) -> np.ndarray:
    """Smooth-ish nodal cutoff: product of sin² bumps vanishing ``margin`` nodes from ∂Ω."""
    out = np.ones(grid.node_shape)
    for axis, x in enumerate(grid.axes()):
        L = x[-1]
        a, b = margin * grid.h, L - margin * grid.h
        s = np.clip((x - a) / (b - a), 0, 1)
        prof = np.sin(np.pi * s) ** 2
        shape = [1] * grid.dim
        shape[axis] = -1
        out = out * prof.reshape(shape)
    return out
