"""Backward-Euler / Newton solver for u_t = Δ(u^m) with Dirichlet data."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse.linalg import LinearOperator, cg

from .grid import CompactSet, Field, Grid, laplacian

MAX_NEWTON = 50
MAX_HALVINGS = 30


class SolverError(RuntimeError):
    """Raised when a time step cannot be completed; carries the failing level."""

    def __init__(self, message, level=None, diagnostics=None):
        super().__init__(message if level is None else f"level {level}: {message}")
        self.level = level
        self.diagnostics = diagnostics or {}


@dataclass
class PMEProblem:
    grid: Grid
    m: float
    initial: np.ndarray
    lateral: np.ndarray | float = 0.0
    source: np.ndarray | None = None
    reg_floor: float = 1e-9

    def __post_init__(self):
        g = self.grid
        if not self.m > 1:
            raise ValueError(f"m must exceed 1, got {self.m}")
        if not 0 < self.reg_floor <= 1e-6:
            raise ValueError("reg_floor must lie in (0, 1e-6]")
        self.initial = np.broadcast_to(np.asarray(self.initial, float), g.node_shape).copy()
        self.lateral = np.broadcast_to(np.asarray(self.lateral, float), g.field_shape).copy()
        if self.source is not None:
            self.source = np.broadcast_to(np.asarray(self.source, float), g.field_shape).copy()
        if self.initial.min() < 0 or self.boundary_data().min() < 0:
            raise ValueError("initial and lateral data must be nonnegative")

    def boundary_data(self) -> np.ndarray:
        """Lateral values at levels >= 1 on boundary nodes."""
        side = ~self.grid.spatial_interior()
        return self.lateral[1:][:, side]

    def source_at(self, level: int) -> np.ndarray | float:
        if self.source is None:
            return 0.0
        return self.source[level][(slice(1, -1),) * self.grid.dim]


@dataclass
class SolverReport:
    newton_iterations: list = field(default_factory=list)
    max_residual: list = field(default_factory=list)
    clamped: list = field(default_factory=list)
    converged: bool = True
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"newton_iterations": list(self.newton_iterations),
                "max_residual": [float(r) for r in self.max_residual],
                "clamped": [float(c) for c in self.clamped],
                "converged": self.converged, "wall_time": self.wall_time}


def _interior(a: np.ndarray) -> np.ndarray:
    return a[(slice(1, -1),) * a.ndim]


def solve_jacobian(a: np.ndarray, d: np.ndarray, rhs: np.ndarray, dt: float, h: float) -> np.ndarray:
    """Solve ``diag(a) x - dt·L(d·x) = rhs`` on interior nodes, zero Dirichlet data.

    ``L`` is the discrete Laplacian, ``a >= 1`` and ``d >= 0``.  1-D uses a
    banded direct solve.  2-D runs CG on the SPD system
    ``(diag(a) - dt D^½ L D^½) z = D^½ rhs`` and recovers
    ``x = (rhs + dt L D^½ z) / a``, which never divides by small ``d``.
    """
    lam = dt / h**2
    if rhs.ndim == 1:
        n = rhs.size
        ab = np.zeros((3, n))
        ab[1] = a + 2.0 * lam * d
        ab[0, 1:] = -lam * d[1:]
        ab[2, :-1] = -lam * d[:-1]
        return solve_banded((1, 1), ab, rhs)

    shape = rhs.shape
    sq = np.sqrt(d)

    def lap0(x):
        p = np.zeros((shape[0] + 2, shape[1] + 2))
        p[1:-1, 1:-1] = x
        return laplacian(p, h)

    def matvec(z):
        z = z.reshape(shape)
        return (a * z - dt * sq * lap0(sq * z)).ravel()

    op = LinearOperator((rhs.size, rhs.size), matvec=matvec, dtype=float)
    b = (sq * rhs).ravel()
    if not np.any(b):
        z = np.zeros(shape)
    else:
        z, info = cg(op, b, rtol=1e-12, atol=0.0, maxiter=20 * rhs.size)
        if info != 0:
            raise SolverError(f"CG did not converge (info={info})")
        z = z.reshape(shape)
    return (rhs + dt * lap0(sq * z)) / a


def newton_tolerance(u_prev: np.ndarray) -> float:
    return 1e-10 * max(1.0, float(np.abs(u_prev).max(initial=0.0)))


def _newton(residual, jac_diag, U0, full, dt, h, m, reg, tol, polish=True, scale=None):
    """Damped Newton on interior unknowns with projection onto U >= 0.

    ``residual(full)`` returns the interior residual for a nodal array whose
    interior is the current iterate; ``jac_diag(U)`` the extra diagonal of the
    Jacobian beyond the identity.  ``scale(U)`` (nodal, >= 1) loosens the
    convergence test per node to ``|F| / scale(U) <= tol``; the line search
    compares sup norms of ``F / scale`` with the scale frozen at the current
    iterate.
    """
    def raw(F, w=1.0):
        return float(np.abs(F / w).max(initial=0.0))

    def done(F, U):
        return raw(F, 1.0 if scale is None else scale(U)) <= tol

    U = np.maximum(U0, 0.0)
    inner = (slice(1, -1),) * full.ndim
    full = full.copy()
    full[inner] = U
    F = residual(full)
    norm = raw(F)
    it = 0
    while not done(F, U):
        if it >= MAX_NEWTON:
            raise SolverError(f"Newton did not converge in {MAX_NEWTON} iterations",
                              diagnostics={"residual": norm, "tol": tol})
        d = m * (U + reg) ** (m - 1)
        step = solve_jacobian(1.0 + jac_diag(U), d, -F, dt, h)
        w = 1.0 if scale is None else scale(U)
        # sup-norm descent first, plain or scaled; with kinks in the residual
        # the Newton direction may only descend in l2, which is tried second
        merits = ((lambda F: raw(F), lambda F: raw(F, w)),
                  (lambda F: float(np.sum((F / w) ** 2)),))
        for group in merits:
            base = [f(F) for f in group]
            lam = 1.0
            for _ in range(MAX_HALVINGS + 1):
                trial = np.maximum(U + lam * step, 0.0)
                full[inner] = trial
                Ft = residual(full)
                if any(f(Ft) < b for f, b in zip(group, base)) or done(Ft, trial):
                    break
                lam *= 0.5
            else:
                continue
            break
        else:
            raise SolverError(f"line search failed at residual {norm:.3e} (tol {tol:.1e}, it {it})",
                              diagnostics={"residual": norm})
        nt = raw(Ft)
        U, F, norm = trial, Ft, nt
        it += 1
    if polish and norm > 0:
        # one extra step drives the residual toward round-off
        d = m * (U + reg) ** (m - 1)
        trial = np.maximum(U - solve_jacobian(1.0 + jac_diag(U), d, F, dt, h), 0.0)
        full[inner] = trial
        Ft = residual(full)
        nt = raw(Ft)
        if done(Ft, trial) and (scale is not None or nt < norm):
            U, norm = trial, nt
            it += 1
        full[inner] = U
    return full, it, norm


def step_implicit(u_prev: np.ndarray, problem: PMEProblem, level: int, tol=None):
    """Advance one backward-Euler step to ``level``.

    Solves ``U - dt·Δ_h(U^m) = u_prev + dt·S`` at interior nodes with the
    problem's Dirichlet values.  Returns ``(U, iterations, residual, clamped)``.
    """
    g, m = problem.grid, problem.m
    if not 1 <= level < g.nt:
        raise IndexError(f"level {level} out of range")
    if u_prev.min() < 0:
        raise ValueError("u_prev must be nonnegative")
    rhs = _interior(u_prev) + g.dt * problem.source_at(level)
    if np.any(rhs < -newton_tolerance(u_prev)):
        raise SolverError("negative source makes the implicit system infeasible", level)
    full = problem.lateral[level].copy()
    tol = newton_tolerance(u_prev) if tol is None else tol

    def residual(f):
        return _interior(f) - g.dt * laplacian(f**m, g.h) - rhs

    try:
        U, it, res = _newton(residual, lambda U: 0.0, _interior(u_prev), full, g.dt, g.h, m,
                             problem.reg_floor, tol)
    except SolverError as exc:
        raise SolverError(str(exc), level, exc.diagnostics) from None
    clamped = float(max(0.0, -U.min()))
    return np.maximum(U, 0.0), it, res, clamped


def solve_cauchy_dirichlet(problem: PMEProblem) -> tuple[Field, SolverReport]:
    g = problem.grid
    start = time.perf_counter()
    values = np.empty(g.field_shape)
    values[0] = problem.initial
    report = SolverReport()
    for n in range(1, g.nt):
        U, it, res, clamped = step_implicit(values[n - 1], problem, n)
        values[n] = U
        report.newton_iterations.append(it)
        report.max_residual.append(res)
        report.clamped.append(clamped)
    report.wall_time = time.perf_counter() - start
    return Field(g, values, "u").check(), report


def solve_measure_data(grid: Grid, m: float, mu) -> Field:
    """Solve ``u_t - Δu^m = μ`` with zero parabolic data.

    ``mu`` is a :class:`~pmelab.measure.DiscreteMeasure` or a raw weight
    array; cell weight ``w`` becomes the rate ``w / (h^d dt)`` in its cell.
    """
    weights = np.asarray(getattr(mu, "weights", mu), dtype=float)
    if weights.shape != grid.field_shape:
        raise ValueError("measure does not live on this grid")
    if weights.min(initial=0.0) < 0:
        raise ValueError("measure-data problem needs nonnegative weights")
    if np.any(weights[~grid.active_cells()]):
        raise ValueError("measure has weight outside the active cells")
    problem = PMEProblem(grid, m, 0.0, 0.0, source=weights / grid.cell_volume)
    u, _ = solve_cauchy_dirichlet(problem)
    u.name = "u_mu"
    return u


def truncation_horizon(grid: Grid, m: float, K: CompactSet, tol: float, c: float = 1.0,
                       check_extent: bool = True) -> int:
    """Level after which the universal bound ``c (t - t_K)^{-1/(m-1)}`` drops below ``tol``.

    ``c`` should already include any safety inflation.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    base = K.last_level()
    if math.isinf(tol):
        level = base + 1
    else:
        span = (c / tol) ** (m - 1)
        level = base + max(1, math.ceil(span / grid.dt - 1e-9))
    if check_extent and level > grid.nt - 1:
        raise ValueError(f"horizon level {level} exceeds grid (nt={grid.nt}); extend nt")
    return level
