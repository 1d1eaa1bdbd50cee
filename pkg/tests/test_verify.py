import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmelab.grid import CompactSet, Field, Grid, SpaceTimeUnion
from pmelab.measure import DiscreteMeasure, extract_riesz
from pmelab.solver import PMEProblem, solve_cauchy_dirichlet
from pmelab.verify import (bump_data, build_suite, compare_cylinder, compare_general_open,
                           compare_punctured, measure_domination, run_suite, scaling_residual_check,
                           solve_on_union, summarize, to_json_lines, worker_count)

G = Grid.make(1, 24, 20)


def solve(init, m=2.0):
    return solve_cauchy_dirichlet(PMEProblem(G, m, init))[0]


def bump(c=0.5, r=0.25, h=1.0):
    return bump_data(G, [c], r, h)


def test_cylinder_trivial_and_reversed():
    u, v = solve(bump()), solve(bump() + bump(0.4, 0.2, 0.5))
    assert compare_cylinder(u, u, 2.0)["status"] == "pass"
    assert compare_cylinder(u, v, 2.0)["status"] == "pass"
    rev = compare_cylinder(v, u, 2.0)
    assert rev["status"] == "rejected"
    assert rev["rejected_hypotheses"] == ["u_le_v_on_parabolic_boundary"]


def test_cylinder_non_solution_rejected():
    u = solve(bump())
    fake = Field(G, 0.9 * u.values)
    rep = compare_cylinder(fake, u, 2.0)
    assert "u_solution" in rep["rejected_hypotheses"]


def test_punctured_probe_and_equal():
    from pmelab.capacity import balayage
    K = CompactSet.box(G, (4, 6), (8, 11))
    u = balayage(K, 2.0)
    assert compare_punctured(u, u, K, 2.0)["status"] == "pass"
    half = Field(G, 0.5 * u.values)
    assert compare_punctured(u, half, K, 2.0)["status"] == "rejected"
    K2 = CompactSet.box(G, (4, 7), (7, 12))
    v = balayage(K2, 2.0)
    assert compare_punctured(u, v, K, 2.0)["status"] == "pass"


def test_general_open_constructed():
    E = SpaceTimeUnion(G, (((2, 14), (3, 12)), ((8, 19), (10, 20))))
    v = solve(bump())
    u = solve_on_union(E, 2.0, 0.8 * v.values)
    rep = compare_general_open(u, v, E, 2.0)
    assert rep["status"] == "pass" and "v_positive_on_boundary" in rep["waived"]
    bad = solve_on_union(E, 2.0, 1.1 * v.values)
    assert compare_general_open(bad, v, E, 2.0)["status"] == "rejected"


def test_solve_on_union_is_solution_inside():
    E = SpaceTimeUnion(G, (((2, 14), (3, 12)),))
    u = solve_on_union(E, 2.0, 0.5 * np.ones(G.field_shape))
    assert np.allclose(u.values, 0.5)
    with pytest.raises(ValueError):
        solve_on_union(E, 2.0, -np.ones(G.field_shape))


@pytest.mark.parametrize("m", [1.5, 2.0, 3.0])
def test_scaling_check(m):
    rep = scaling_residual_check(solve(bump(), m), m)
    assert rep["status"] == "pass"
    assert 8.0 <= rep["ratio"] <= 12.0
    zero = scaling_residual_check(solve(bump(), m), m, eps_list=(0.0,))
    assert zero["eps"][0]["max_error"] <= 1e-10 and zero["eps"][0]["sup_f"] == 0


def test_scaling_constant():
    rep = scaling_residual_check(Field(G, 0.4 * np.ones(G.field_shape)), 2.0)
    assert rep["status"] == "pass" and rep["ratio"] is None


@given(st.floats(0.0, 1.0), st.integers(0, 10**6))
def test_measure_domination(ratio, seed):
    rng = np.random.default_rng(seed)
    w = np.where(G.active_cells() & (rng.random(G.field_shape) < 0.05),
                 rng.random(G.field_shape) * 0.01, 0.0)
    mu = DiscreteMeasure(G, w)
    assert measure_domination(mu, ratio * mu, 2.0)["status"] == "pass"
    if w.sum() > 0:
        assert measure_domination(ratio * mu, mu + mu, 2.0)["status"] == "rejected"


def test_worker_count(monkeypatch):
    monkeypatch.setenv("PMELAB_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("PMELAB_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("PMELAB_THREADS")
    assert worker_count() >= 1


def test_suite_description_deterministic():
    a, b = build_suite("full", 7), build_suite("full", 7)
    assert a == b and len(a) == 55
    assert build_suite("full", 8) != a
    with pytest.raises(ValueError):
        build_suite("nope", 1)


def test_smoke_suite():
    r1 = run_suite("smoke", 3, workers=1)
    r2 = run_suite("smoke", 3, workers=2)
    assert to_json_lines(r1) == to_json_lines(r2)
    s = summarize(r1)
    assert s["ok"] and s["instances"] == 5 and s["probes_rejected"] == 2
