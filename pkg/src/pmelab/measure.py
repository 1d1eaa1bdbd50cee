"""Discrete Riesz measures: extraction, evaluation on sets, comparison."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import CompactSet, Field, Grid, laplacian


class GridMismatch(ValueError):
    pass


@dataclass
class DiscreteMeasure:
    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != self.grid.field_shape:
            raise ValueError("weights do not match the grid's cell layout")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("measure weights must be finite")

    @classmethod
    def zeros(cls, grid: Grid) -> "DiscreteMeasure":
        return cls(grid, np.zeros(grid.field_shape))

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def total_variation(self) -> float:
        return float(np.abs(self.weights).sum())

    @property
    def neg_tol(self) -> float:
        return 1e-8 * self.total_variation

    def is_nonnegative(self, tol: float | None = None) -> bool:
        tol = self.neg_tol if tol is None else tol
        return bool(self.weights.min(initial=0.0) >= -tol)

    def positive_part(self) -> "DiscreteMeasure":
        return DiscreteMeasure(self.grid, np.maximum(self.weights, 0.0))

    def restrict(self, cells) -> "DiscreteMeasure":
        mask = _cells(cells, self.grid)
        return DiscreteMeasure(self.grid, np.where(mask, self.weights, 0.0))

    def __mul__(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.grid, c * self.weights)

    __rmul__ = __mul__

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        _same_grid(self, other)
        return DiscreteMeasure(self.grid, self.weights + other.weights)

    def to_json(self) -> str:
        flat = self.weights.ravel()
        idx = np.flatnonzero(flat)
        return json.dumps({"grid": self.grid.to_dict(), "grid_key": self.grid.key(),
                           "cells": [[int(i), float(flat[i])] for i in idx]})

    @classmethod
    def from_json(cls, text: str, grid: Grid | None = None) -> "DiscreteMeasure":
        d = json.loads(text)
        g = Grid.from_dict(d["grid"])
        if grid is not None and grid.key() != d["grid_key"]:
            raise GridMismatch("measure was written for a different grid")
        flat = np.zeros(int(np.prod(g.field_shape)))
        for i, w in d["cells"]:
            flat[i] = w
        return cls(grid or g, flat.reshape(g.field_shape))


def _same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatch("measures live on different grids")


def _cells(S, grid: Grid) -> np.ndarray:
    if isinstance(S, CompactSet):
        if S.grid != grid:
            raise GridMismatch("set and measure live on different grids")
        return S.mask
    mask = np.asarray(S, dtype=bool)
    if mask.shape != grid.field_shape:
        raise GridMismatch("cell set shape does not match the measure's grid")
    return mask


def residual_rate(u: Field, m: float) -> np.ndarray:
    """``(u^n - u^{n-1})/dt - Δ_h (u^n)^m`` on active cells, zero elsewhere."""
    g = u.grid
    out = np.zeros(g.field_shape)
    inner = (slice(1, -1),) * g.dim
    v = u.values
    for n in range(1, g.nt):
        out[n][inner] = (v[n][inner] - v[n - 1][inner]) / g.dt - laplacian(v[n] ** m, g.h)
    return out


def extract_riesz(u: Field, m: float) -> DiscreteMeasure:
    """Riesz measure of a nodal field: cellwise residual times cell volume.

    Uses the solver's stencil and backward difference, so for grid test
    functions ``φ`` vanishing on the lateral boundary and after the last
    level, ``Σ φ·μ`` equals the summed-by-parts weak form.
    """
    if u.values.min() < -1e-12 * max(1.0, u.sup):
        raise ValueError("extract_riesz needs a nonnegative field")
    return DiscreteMeasure(u.grid, residual_rate(u, m) * u.grid.cell_volume)


def weak_form(u: Field, m: float, phi: np.ndarray) -> float:
    """Discrete ``∬ -u φ_t + ∇u^m·∇φ`` minus the initial pairing ``∫ u(0) φ``.

    ``φ`` is nodal, zero on the lateral boundary and at the final level.  With
    that, ``Σ φ·μ_u`` over cells equals this value exactly (summation by parts).
    """
    g = u.grid
    hd = g.h ** g.dim
    v = u.values
    total = -float(np.sum(v[0] * phi[1])) * hd
    for n in range(1, g.nt):
        if n < g.nt - 1:
            total -= float(np.sum(v[n] * (phi[n + 1] - phi[n]))) * hd
        total += _grad_pair(v[n] ** m, phi[n], g.h) * hd * g.dt
    return total


def _grad_pair(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """Σ over edges of forward differences ``∇a·∇b`` (no volume factor)."""
    s = 0.0
    for axis in range(a.ndim):
        da = np.diff(a, axis=axis) / h
        db = np.diff(b, axis=axis) / h
        s += float(np.sum(da * db))
    return s


def measure_of_set(mu: DiscreteMeasure, S) -> float:
    return float(mu.weights[_cells(S, mu.grid)].sum())


def dominates(mu_a: DiscreteMeasure, mu_b: DiscreteMeasure) -> bool:
    """True iff ``mu_b <= mu_a`` cellwise up to 1e-12 of the larger scale."""
    _same_grid(mu_a, mu_b)
    scale = max(1.0, float(np.abs(mu_a.weights).max(initial=0.0)),
                float(np.abs(mu_b.weights).max(initial=0.0)))
    return bool(np.all(mu_b.weights <= mu_a.weights + 1e-12 * scale))


def _tail_bounds(values) -> tuple[float, float]:
    """Finite-sequence estimates ``(liminf, limsup)`` of ``a_k``.

    Two readings of the tail (its second half) are combined: the tail's own
    range, and a fit of ``L + c/k`` widened by its largest residual.  Either
    one is evidence for the limit, so the tighter bound of the two is used on
    each side.  A sequence converging geometrically is bracketed by its tail
    range; one converging like ``1/k`` by the fit.
    """
    a = np.asarray(values, dtype=float)
    tail = a[min(a.size // 2, max(a.size - 2, 0)):]
    lo, hi = float(tail.min()), float(tail.max())
    if tail.size < 2 or np.ptp(tail) == 0:
        return lo, hi
    k = np.arange(a.size - tail.size + 1, a.size + 1, dtype=float)
    A = np.column_stack([np.ones_like(k), 1.0 / k])
    coef = np.linalg.lstsq(A, tail, rcond=None)[0]
    band = float(np.abs(A @ coef - tail).max())
    L = float(coef[0])
    return max(lo, L - band), min(hi, L + band)


def weak_convergence_check(mus, mu_limit: DiscreteMeasure, opens=(), compacts=()) -> dict:
    """Portmanteau checks of ``μ_k → μ`` on finitely many sets.

    Compact sets: ``limsup μ_k(K) <= μ(K) + tol``; open sets:
    ``μ(U) <= liminf μ_k(U) + tol``, with ``tol = 1e-6·scale``.  The limits of
    the finite sequence are estimated by ``_tail_bounds``.
    """
    if not mus:
        raise ValueError("need at least one measure in the sequence")
    for mu in mus:
        _same_grid(mu, mu_limit)
    scale = max(1.0, mu_limit.total_variation, *(mu.total_variation for mu in mus))
    tol = 1e-6 * scale
    compact_margins = []
    for K in compacts:
        _, sup = _tail_bounds([measure_of_set(mu, K) for mu in mus])
        compact_margins.append(sup - measure_of_set(mu_limit, K))
    open_margins = []
    for U in opens:
        inf, _ = _tail_bounds([measure_of_set(mu, U) for mu in mus])
        open_margins.append(measure_of_set(mu_limit, U) - inf)
    worst_c = max(compact_margins, default=-np.inf)
    worst_o = max(open_margins, default=-np.inf)
    return {"tol": tol, "compact_margins": compact_margins, "open_margins": open_margins,
            "worst_compact": float(worst_c), "worst_open": float(worst_o),
            "pass": bool(worst_c <= tol and worst_o <= tol)}
