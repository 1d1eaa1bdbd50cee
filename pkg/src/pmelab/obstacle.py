"""PME obstacle problems: penalized and projected solvers, obstacle families."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .grid import Field, Grid, laplacian, margin_mask
from .measure import extract_riesz, residual_rate
from .solver import SolverError, _newton, newton_tolerance

REG = 1e-9
MAX_ACTIVE_SET = 200
MAX_DELTAS = 20
MAX_CONTINUATION = 6


class InadmissibleObstacle(ValueError):
    pass


@dataclass
class ObstacleSpec:
    psi: Field
    m: float
    boundary_value: float = 0.0
    positive_everywhere: bool = False
    admissibility: dict = field(init=False)

    def __post_init__(self):
        g, v = self.psi.grid, self.psi.values
        if not np.all(np.isfinite(v)):
            raise InadmissibleObstacle("obstacle has non-finite values")
        if v.min() < 0:
            raise InadmissibleObstacle("obstacle must be nonnegative")
        if self.positive_everywhere:
            edge = v[margin_mask(g) & ~_final_interior(g)]
            if not np.allclose(edge, self.boundary_value, rtol=1e-12, atol=1e-14):
                raise InadmissibleObstacle("smoothed obstacle must equal the boundary value on ∂_p")
        else:
            if self.boundary_value != 0.0:
                raise InadmissibleObstacle("compactly supported obstacles use zero data")
            if np.any(v[margin_mask(g)] != 0):
                raise InadmissibleObstacle(
                    "obstacle must vanish on the parabolic boundary and the final level")
        Psi = residual_rate(self.psi, self.m)
        self.admissibility = {"Psi_sup": float(np.abs(Psi).max()),
                              "finite": bool(np.all(np.isfinite(Psi)))}
        if not self.admissibility["finite"]:
            raise InadmissibleObstacle("∂_tψ - Δψ^m is not finite")

    @property
    def grid(self) -> Grid:
        return self.psi.grid

    @property
    def scale(self) -> float:
        return max(1.0, self.psi.sup)

    @property
    def contact_tol(self) -> float:
        return 1e-7 * self.scale

    def Psi_plus(self) -> np.ndarray:
        """Positive part of ``∂_tψ - Δ_hψ^m`` (backward difference in time)."""
        return np.maximum(residual_rate(self.psi, self.m), 0.0)

    def support(self) -> np.ndarray:
        return self.psi.values > (self.boundary_value if self.positive_everywhere else 0.0)


def _final_interior(g: Grid) -> np.ndarray:
    mask = np.zeros(g.field_shape, dtype=bool)
    mask[-1] = g.spatial_interior()
    return mask


@dataclass
class ObstacleSolution:
    u: Field
    spec: ObstacleSpec
    backend: str
    contact_set: np.ndarray
    delta: float | None = None
    history: list = field(default_factory=list)

    def check_invariants(self) -> dict:
        """Evaluate the obstacle-solution invariants; returns margins and flags."""
        spec, u = self.spec, self.u
        g = u.grid
        mu = extract_riesz(u, spec.m)
        neg = max(mu.neg_tol, 1e-12)
        above = float((spec.psi.values - u.values).max())
        supp = spec.support() & self.contact_set
        off = g.active_cells() & ~supp
        rate = residual_rate(u, spec.m)
        return {"above_obstacle": above <= spec.contact_tol, "max_below": above,
                "supersolution": bool(mu.weights.min() >= -neg),
                "min_weight": float(mu.weights.min()),
                "off_contact_residual": float(np.abs(rate[off]).max(initial=0.0) * g.dt),
                "measure_off_contact": float(np.abs(mu.weights[off]).sum())}


def _inner(a):
    return a[(slice(1, -1),) * a.ndim]


def _eta(s: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(1.0 + s / delta, 0.0, 1.0)


def _pow_gap(psi: np.ndarray, U: np.ndarray, m: float) -> np.ndarray:
    """``ψ^m - U^m`` with relative accuracy when ``U`` is close to ``ψ``."""
    safe = np.where(psi > 0, psi, 1.0)
    r = np.maximum((U - psi) / safe, -1.0)
    near = -psi**m * np.expm1(m * np.log1p(np.maximum(r, -1.0 + 1e-16)))
    return np.where(psi > 0, np.where(r > -0.5, near, psi**m - U**m), -U**m)


def _penalized_level(prev_u, psin, src, full, delta, U0, g, m):
    """One backward-Euler step of the penalized equation at a fixed ``δ``."""
    def residual(f):
        U = _inner(f)
        return U - g.dt * laplacian(f**m, g.h) - prev_u - src * _eta(_pow_gap(psin, U, m), delta)

    def jac_diag(U):
        s = _pow_gap(psin, U, m)
        slope = np.where((s > -delta) & (s < 0), 1.0 / delta, 0.0)
        return src * slope * m * (U + REG) ** (m - 1)

    def scale(U):
        # in the penalty band the residual has slope ~1/δ, so it is measured
        # in units of the Newton correction it implies; at a kink the
        # largest slope within one ulp counts
        up, down = np.nextafter(U, np.inf), np.maximum(np.nextafter(U, -np.inf), 0.0)
        return 1.0 + np.maximum(jac_diag(U), np.maximum(jac_diag(up), jac_diag(down)))

    return _newton(residual, jac_diag, U0, full, g.dt, g.h, m, REG,
                   newton_tolerance(prev_u), scale=scale)


def _continued_level(args, delta, U0, delta0, depth=0):
    """Solve at ``δ`` from a guess converged at ``δ0``; on failure go through
    the geometric midpoint first."""
    try:
        return _penalized_level(*args[:4], delta, U0, *args[4:])
    except SolverError:
        if depth >= MAX_CONTINUATION or delta0 is None:
            raise
    mid = np.sqrt(delta * delta0)
    full, it0, _ = _continued_level(args, mid, U0, delta0, depth + 1)
    full, it1, norm = _continued_level(args, delta, _inner(full), mid, depth + 1)
    return full, it0 + it1, norm


def _penalized_march(spec: ObstacleSpec, delta: float, guess: np.ndarray | None,
                     guess_delta: float | None = None):
    g, m = spec.grid, spec.m
    psi = spec.psi.values
    Pp = spec.Psi_plus()
    vals = np.empty(g.field_shape)
    vals[0] = psi[0] if spec.positive_everywhere else 0.0
    iters = []
    for n in range(1, g.nt):
        full = np.full(g.node_shape, spec.boundary_value, dtype=float)
        rhs = _inner(vals[n - 1])
        args = (rhs, _inner(psi[n]), g.dt * _inner(Pp[n]), full, g, m)
        U0 = _inner(guess[n]) if guess is not None else np.maximum(rhs, _inner(psi[n]))
        try:
            full, it, _ = _continued_level(args, delta, U0, guess_delta)
        except SolverError as exc:
            raise SolverError(f"penalized step failed (delta={delta:g}): {exc}", n) from None
        vals[n] = full
        iters.append(it)
    return vals, iters


def default_deltas(count: int = MAX_DELTAS) -> list[float]:
    return [0.25**k for k in range(1, count + 1)]


def solve_penalized(spec: ObstacleSpec, delta_sequence=None, stop_tol: float | None = None,
                    ) -> ObstacleSolution:
    """Obstacle problem as the δ → 0 limit of the penalized PME.

    Each δ solves ``∂_t u - Δu^m = η_δ(ψ^m - u^m)(∂_tψ - Δψ^m)_+`` with the
    piecewise-linear ``η_δ``.  The run stops once successive iterates differ
    by at most ``stop_tol`` (default ``1e-6·scale``) in sup norm; exhausting
    the sequence first is an error.
    """
    deltas = default_deltas() if delta_sequence is None else list(delta_sequence)
    if not deltas or any(d <= 0 for d in deltas) or any(np.diff(deltas) >= 0):
        raise ValueError("delta_sequence must be positive and strictly decreasing")
    stop_tol = 1e-6 * spec.scale if stop_tol is None else stop_tol
    g = spec.grid
    prev = prev_delta = None
    history = []
    for delta in deltas:
        vals, iters = _penalized_march(spec, delta, prev, prev_delta)
        change = None if prev is None else float(np.abs(vals - prev).max())
        history.append({"delta": delta, "change": change, "newton": int(sum(iters))})
        prev, prev_delta = vals, delta
        if change is not None and change <= stop_tol:
            break
    else:
        if len(deltas) > 1 or stop_tol < np.inf:
            raise SolverError(f"penalization did not settle: last change {history[-1]['change']}"
                              f" > {stop_tol:g}", diagnostics={"history": history})
    u = Field(g, prev, "u_penalized").check()
    active = (u.values**spec.m < spec.psi.values**spec.m + delta) & spec.support()
    return ObstacleSolution(u, spec, "penalized", active & g.active_cells(), delta, history)


def _interior_laplacian(g: Grid) -> sp.csr_matrix:
    n = g.nx - 1
    T = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1])
    if g.dim == 1:
        return (T / g.h**2).tocsr()
    ny = g.ny - 1
    Ty = sp.diags([np.ones(ny - 1), -2 * np.ones(ny), np.ones(ny - 1)], [-1, 0, 1])
    L = sp.kron(T, sp.identity(ny)) + sp.kron(sp.identity(n), Ty)
    return (L / g.h**2).tocsr()


def solve_projected(spec: ObstacleSpec, tol: float | None = None) -> ObstacleSolution:
    """Per-level complementarity ``min(U - ψ, U - dt·Δ_h U^m - U_prev) = 0`` by
    semismooth (active-set) Newton."""
    g, m = spec.grid, spec.m
    psi = spec.psi.values
    L = _interior_laplacian(g)
    size = L.shape[0]
    vals = np.empty(g.field_shape)
    vals[0] = psi[0] if spec.positive_everywhere else 0.0
    iters = []
    for n in range(1, g.nt):
        full = np.full(g.node_shape, spec.boundary_value, dtype=float)
        rhs = _inner(vals[n - 1]).ravel()
        ps = _inner(psi[n]).ravel()
        level_tol = (1e-10 * max(1.0, float(np.abs(vals[n - 1]).max()), spec.psi.sup)
                     if tol is None else tol)

        def phi(U):
            full[(slice(1, -1),) * g.dim] = U.reshape(g.interior_shape)
            R = U - g.dt * laplacian(full**m, g.h).ravel() - rhs
            return np.minimum(U - ps, R), R

        U = np.maximum(rhs, ps)
        F, R = phi(U)
        norm = float(np.abs(F).max())
        it = 0
        while norm > level_tol:
            if it >= MAX_ACTIVE_SET:
                raise SolverError(f"active-set iteration exceeded {MAX_ACTIVE_SET} steps", n)
            act = (U - ps) <= R
            D = sp.diags(m * (U + REG) ** (m - 1))
            J = (sp.identity(size) - g.dt * (L @ D)).tolil()
            rows = np.flatnonzero(act)
            J[rows, :] = 0
            J[rows, rows] = 1.0
            step = spsolve(J.tocsc(), -F)
            lam = 1.0
            for _ in range(31):
                trial = np.maximum(U + lam * step, 0.0)
                Ft, Rt = phi(trial)
                nt = float(np.abs(Ft).max())
                if nt < norm or nt <= level_tol:
                    break
                lam *= 0.5
            else:
                raise SolverError("projected line search failed", n)
            U, F, R, norm = trial, Ft, Rt, nt
            it += 1
        full[(slice(1, -1),) * g.dim] = U.reshape(g.interior_shape)
        vals[n] = full
        iters.append(it)
    u = Field(g, vals, "u_projected").check()
    contact = (np.abs(u.values - psi) <= spec.contact_tol) & spec.support() & g.active_cells()
    return ObstacleSolution(u, spec, "projected", contact, None, [{"active_set": iters}])


def solve_obstacle(spec: ObstacleSpec, backend: str = "projected", **kw) -> ObstacleSolution:
    if backend == "penalized":
        return solve_penalized(spec, **kw)
    if backend == "projected":
        return solve_projected(spec, **kw)
    raise ValueError(f"unknown backend {backend!r}")


def smooth_obstacle_eps(spec: ObstacleSpec, eps: float) -> ObstacleSpec:
    """``ψ_ε = (ψ^m + ε^m)^{1/m}``; positive everywhere, boundary data ``ε``."""
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    m = spec.m
    v = (spec.psi.values**m + eps**m) ** (1.0 / m)
    return ObstacleSpec(Field(spec.grid, v, f"psi_eps{eps:g}"), m, boundary_value=eps,
                        positive_everywhere=True)


def mollify(f: np.ndarray, passes: int = 3) -> np.ndarray:
    """Iterated (1, 2, 1)/4 averaging along every axis, edge values held."""
    out = f.copy()
    for _ in range(passes):
        for axis in range(out.ndim):
            a = np.moveaxis(out, axis, 0).copy()
            a[1:-1] = 0.25 * a[:-2] + 0.5 * a[1:-1] + 0.25 * a[2:]
            out = np.moveaxis(a, 0, axis)
    return out


def increasing_obstacle_sequence(psi: Field, count: int, m: float, passes: int = 3):
    """Smooth obstacles ``φ_j = f_j²`` with ``h_j <= f_j <= h_{j+1}``, ``h_j = (√ψ - 1/√j)_+``.

    ``f_j`` is the mollified band midpoint, clipped back into the band, so
    ``φ_j <= φ_{j+1} <= ψ`` holds at every node.
    """
    if count < 1:
        raise ValueError("count must be positive")
    root = np.sqrt(np.maximum(psi.values, 0.0))
    specs = []
    for j in range(1, count + 1):
        lo = np.maximum(root - 1 / np.sqrt(j), 0.0)
        hi = np.maximum(root - 1 / np.sqrt(j + 1), 0.0)
        f = np.clip(mollify(0.5 * (lo + hi), passes), lo, hi)
        specs.append(ObstacleSpec(Field(psi.grid, f**2, f"phi_{j}"), m))
    return specs


def reduite_via_increasing_obstacles(psi: Field, count: int, m: float,
                                     backend: str = "penalized", return_all: bool = False):
    """Réduite of ``ψ`` as the increasing limit of obstacle solutions ``w_j``."""
    specs = increasing_obstacle_sequence(psi, count, m)
    ws = [solve_obstacle(s, backend).u for s in specs]
    scale = max(1.0, psi.sup)
    for j in range(1, len(ws)):
        drop = float((ws[j - 1].values - ws[j].values).max())
        if drop > 1e-8 * scale:
            raise SolverError(f"réduite sequence not increasing at j={j + 1}: drop {drop:.3e}")
    out = Field(psi.grid, ws[-1].values, "reduite")
    return (out, ws) if return_all else out
