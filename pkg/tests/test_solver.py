import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmelab.grid import CompactSet, Grid
from pmelab.reference import BarenblattParams, barenblatt_eval, barenblatt_field, barenblatt_problem
from pmelab.solver import (PMEProblem, SolverError, solve_cauchy_dirichlet, solve_jacobian,
                           solve_measure_data, step_implicit, truncation_horizon)

ms = st.sampled_from([1.5, 2.0, 3.0])


def smooth_data(g, seed, amp=1.0):
    rng = np.random.default_rng(seed)
    x = g.coords()
    out = np.zeros(g.node_shape)
    for k in range(1, 4):
        term = np.ones(g.node_shape)
        for xi, L in zip(x, [g.Lx, g.Ly]):
            term = term * np.sin(k * np.pi * xi / L)
        out += rng.uniform(0, 1) / k * term
    out = amp * np.abs(out)
    out[~g.spatial_interior()] = 0
    return out


def test_problem_validation():
    g = Grid.make(1, 8, 3)
    with pytest.raises(ValueError):
        PMEProblem(g, 1.0, 0.0)
    with pytest.raises(ValueError):
        PMEProblem(g, 2.0, -1.0)
    with pytest.raises(ValueError):
        PMEProblem(g, 2.0, 0.0, reg_floor=1e-3)


@pytest.mark.parametrize("dim", [1, 2])
def test_constants_and_zero(dim):
    g = Grid.make(dim, 6, 4)
    u, rep = solve_cauchy_dirichlet(PMEProblem(g, 2.0, 0.7, 0.7))
    assert np.allclose(u.values, 0.7, rtol=0, atol=1e-14) and rep.converged
    z, _ = solve_cauchy_dirichlet(PMEProblem(g, 2.0, 0.0))
    assert np.all(z.values == 0)


@given(st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_jacobian_solve_matches_dense(seed, dim):
    rng = np.random.default_rng(seed)
    n, h, dt = 5, 0.2, 0.05
    shape = (n,) * dim
    a = 1 + rng.random(shape)
    d = rng.random(shape) * (rng.random(shape) > 0.3)  # include degenerate zeros
    rhs = rng.normal(size=shape)
    N = a.size
    L1 = (np.diag(-2 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2
    L = L1 if dim == 1 else np.kron(L1, np.eye(n)) + np.kron(np.eye(n), L1)
    A = np.diag(a.ravel()) - dt * L @ np.diag(d.ravel())
    x = solve_jacobian(a, d, rhs, dt, h)
    assert np.allclose(x.ravel(), np.linalg.solve(A, rhs.ravel()), rtol=1e-8, atol=1e-10)
    assert N == a.size


def test_linear_heat_self_test():
    """m = 1 only exercises the linear solve: one implicit heat step against a dense solve."""
    n, h, dt = 7, 1 / 8, 0.01
    x = np.arange(1, 8) * h
    rhs = np.sin(np.pi * x)
    U = solve_jacobian(np.ones(n), np.ones(n), rhs, dt, h)
    L = (np.diag(-2 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2
    assert np.allclose(U, np.linalg.solve(np.eye(n) - dt * L, rhs), atol=1e-13)


@given(st.integers(0, 10**6), ms, st.sampled_from([1, 2]))
def test_max_principle_and_mass(seed, m, dim):
    g = Grid.make(dim, 10 if dim == 1 else 6, 6)
    init = smooth_data(g, seed, 2.0)
    u, rep = solve_cauchy_dirichlet(PMEProblem(g, m, init))
    assert u.values.min() >= 0
    assert u.sup <= init.max() * (1 + 1e-10)
    mass = u.values.reshape(g.nt, -1).sum(axis=1)
    assert np.all(np.diff(mass) <= 1e-10 * max(1, mass[0]))
    assert max(rep.max_residual) <= 1e-10 * max(1, init.max())


@given(st.integers(0, 10**6), ms)
def test_comparison_on_cylinders(seed, m):
    g = Grid.make(1, 12, 8)
    a = smooth_data(g, seed)
    b = a + smooth_data(g, seed + 1, 0.5)
    lat_a, lat_b = 0.1, 0.2
    a[~g.spatial_interior()] = lat_a
    b[~g.spatial_interior()] = lat_b
    u, _ = solve_cauchy_dirichlet(PMEProblem(g, m, a, lat_a))
    v, _ = solve_cauchy_dirichlet(PMEProblem(g, m, b, lat_b))
    scale = max(1, u.sup, v.sup)
    assert np.all(u.values <= v.values + 1e-8 * scale)


def test_source_mass_budget():
    g = Grid.make(1, 16, 8)
    init = smooth_data(g, 0)
    w = np.zeros(g.field_shape)
    w[3, 8] = 0.02
    u, _ = solve_cauchy_dirichlet(PMEProblem(g, 2.0, init, source=w / g.cell_volume))
    mass = u.values.sum(axis=1) * g.h
    assert mass[-1] <= mass[0] + w.sum() + 1e-12


def test_negative_source_rejected():
    g = Grid.make(1, 8, 3)
    src = np.zeros(g.field_shape)
    src[1, 4] = -100.0
    with pytest.raises(SolverError) as exc:
        solve_cauchy_dirichlet(PMEProblem(g, 2.0, 0.0, source=src))
    assert exc.value.level == 1


def test_step_out_of_range():
    g = Grid.make(1, 8, 3)
    p = PMEProblem(g, 2.0, 0.0)
    with pytest.raises(IndexError):
        step_implicit(np.zeros(9), p, 3)


def test_barenblatt_single_step():
    p = BarenblattParams(2.0)
    g = Grid.make(1, 400, 2, dt=1e-4)
    x = g.axes()[0]
    init = barenblatt_eval(p, x, 0.0)
    U, it, res, clamped = step_implicit(init, PMEProblem(g, 2.0, init), 1)
    B = barenblatt_eval(p, x, 1e-4)
    assert np.abs(U - B).max() <= 5e-3 * B.max()
    assert res <= 1e-10 * max(1, init.max())


def test_barenblatt_sup_time_l1_error():
    # frozen from a refinement study: 4.04e-4 (nx=100), 2.05e-4 (200), 1.03e-4 (400)
    p = BarenblattParams(2.0)
    g = Grid.make(1, 200, 21)
    u, _ = solve_cauchy_dirichlet(barenblatt_problem(p, g))
    B = barenblatt_field(p, g).values
    err = max(np.abs(u.values[n] - B[n]).sum() * g.h for n in range(g.nt))
    assert err == pytest.approx(2.0450595888278582e-4, rel=1e-6)
    assert err <= 2.5e-4


def test_measure_data_basic():
    g = Grid.make(1, 8, 4)
    assert np.all(solve_measure_data(g, 2.0, np.zeros(g.field_shape)).values == 0)
    bad = np.zeros(g.field_shape)
    bad[2, 3] = -1
    with pytest.raises(ValueError):
        solve_measure_data(g, 2.0, bad)
    off = np.zeros(g.field_shape)
    off[0, 3] = 1
    with pytest.raises(ValueError):
        solve_measure_data(g, 2.0, off)


@given(st.integers(0, 10**6), ms)
def test_measure_data_monotone_in_mu(seed, m):
    g = Grid.make(1, 10, 6)
    rng = np.random.default_rng(seed)
    w = np.where(g.active_cells() & (rng.random(g.field_shape) < 0.2),
                 rng.random(g.field_shape) * 0.01, 0.0)
    u1 = solve_measure_data(g, m, w)
    u2 = solve_measure_data(g, m, 2 * w)
    assert np.all(u1.values <= u2.values + 1e-12)


def dense_fixed_point_step(prev, src, dt, h, m, iters=500):
    """Kacanov iteration (I - dt L diag(U^{m-1})) U_new = prev + dt src on interior nodes."""
    n = prev.size
    L = (np.diag(-2 * np.ones(n)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)) / h**2
    U = prev.copy()
    for _ in range(iters):
        A = np.eye(n) - dt * L @ np.diag(np.maximum(U, 0) ** (m - 1))
        new = np.linalg.solve(A, prev + dt * src)
        if np.abs(new - U).max() < 1e-15:
            break
        U = new
    return U


def test_point_mass_against_dense_oracle():
    g = Grid.make(1, 8, 4)
    w = np.zeros(g.field_shape)
    w[1, 4] = 0.01
    u = solve_measure_data(g, 2.0, w)
    ref = np.zeros(g.field_shape)
    src = w / g.cell_volume
    for n in range(1, g.nt):
        ref[n, 1:-1] = dense_fixed_point_step(ref[n - 1, 1:-1], src[n, 1:-1], g.dt, g.h, 2.0)
    assert np.abs(u.values - ref).max() <= 1e-8


def test_truncation_horizon_examples():
    g = Grid.make(1, 16, 12)
    K = CompactSet.box(g, (4, 5), (6, 8))
    assert truncation_horizon(g, 2.0, K, math.inf) == 6
    assert truncation_horizon(g, 2.0, K, 0.01, check_extent=False) == 5 + math.ceil(100 / g.dt)
    assert truncation_horizon(g, 3.0, K, 0.01, check_extent=False) == 5 + math.ceil(1e4 / g.dt)
    with pytest.raises(ValueError):
        truncation_horizon(g, 2.0, K, 0.01)
    with pytest.raises(ValueError):
        truncation_horizon(g, 2.0, K, 0.0)
