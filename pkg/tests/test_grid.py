import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pmelab.grid import (CompactSet, Field, Grid, MarginError, SpaceTimeUnion, boundary_nodes,
                         discrete_laplacian, laplacian, margin_mask, rle_decode, rle_encode,
                         shrink_neighborhoods)


def test_grid_invariants():
    g = Grid.make(1, 8, 5)
    assert g.h == 1 / 8 and g.dt == g.h
    assert g.field_shape == (5, 9)
    assert np.allclose(g.times, np.arange(5) / 8)
    with pytest.raises(ValueError):
        Grid.make(1, 1, 5)
    with pytest.raises(ValueError):
        Grid.make(1, 4, 1)
    with pytest.raises(ValueError):
        Grid(2, 4, 4, 0.1, Lx=1.0, ny=4, Ly=2.0)
    g2 = Grid.make(2, 4, 3, ny=8, Ly=2.0)
    assert g2.node_shape == (5, 9)


def test_grid_roundtrip_and_key():
    g = Grid.make(2, 6, 4, ny=3, Ly=0.5)
    assert Grid.from_dict(json.loads(json.dumps(g.to_dict()))) == g
    assert g.key() == Grid.from_dict(g.to_dict()).key()
    assert g.key() != Grid.make(2, 6, 5, ny=3, Ly=0.5).key()


def test_laplacian_examples():
    g = Grid.make(1, 4, 2)
    x = g.axes()[0]
    f = Field(g, np.stack([x**2, x**2]))
    assert discrete_laplacian(f, 1)[1] == pytest.approx(2.0, abs=1e-12)  # node x = 0.5
    c = Field(g, np.full(g.field_shape, 3.0))
    assert np.all(discrete_laplacian(c, 0) == 0)
    with pytest.raises(IndexError):
        discrete_laplacian(c, 2)
    h = 1 / 64
    xs = np.arange(65) * h
    lap = laplacian(np.sin(np.pi * xs), h)
    assert abs(lap[31] + np.pi**2) <= 3e-3 * np.pi**2


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_laplacian_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, 7, 6))
    lhs = laplacian(a * f + b * g, 0.1)
    rhs = a * laplacian(f, 0.1) + b * laplacian(g, 0.1)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_boundary_node_counts():
    g = Grid.make(1, 4, 3)
    assert boundary_nodes(g, "parabolic").sum() == 9
    assert boundary_nodes(g, "top").sum() == 3
    assert boundary_nodes(g, "top")[2].sum() == 3
    g2 = Grid.make(2, 2, 2)
    assert boundary_nodes(g2, "parabolic")[0].sum() == 9


def test_compact_margin_rule():
    g = Grid.make(1, 8, 6)
    with pytest.raises(MarginError):
        CompactSet.box(g, (0, 1), (3, 4))
    with pytest.raises(MarginError):
        CompactSet.box(g, (2, 5), (3, 4))
    with pytest.raises(MarginError):
        CompactSet.box(g, (2, 3), (0, 4))
    K = CompactSet.box(g, (2, 3), (3, 4))
    assert len(K) == 4 and not K.is_empty and K.last_level() == 3
    assert CompactSet.empty(g).is_empty


@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_rle_roundtrip(bits):
    mask = np.array(bits)
    assert np.array_equal(rle_decode(rle_encode(mask), mask.shape), mask)


def test_compact_json_roundtrip():
    g = Grid.make(2, 8, 6)
    K = CompactSet.box(g, (2, 3), (2, 4), (3, 5))
    K2 = CompactSet.from_dict(json.loads(json.dumps(K.to_dict())))
    assert K2.grid == g and np.array_equal(K2.mask, K.mask)


def test_shrink_single_cell():
    g = Grid.make(1, 16, 12)
    K = CompactSet.from_cells(g, [(6, 8)])
    E = shrink_neighborhoods(K, 3, radius=3)
    sizes = [e.sum() for e in E]
    assert sizes == [25, 9, 1]  # chessboard balls of radius 2, 1, 0
    with pytest.raises(MarginError):
        shrink_neighborhoods(CompactSet.from_cells(g, [(2, 8)]), 3)


@given(st.integers(4, 8), st.integers(4, 8), st.integers(1, 6))
def test_shrink_nested_contains_K(n, i, depth):
    g = Grid.make(1, 14, 13)
    K = CompactSet.box(g, (n, n + 1), (i, i + 1))
    E = shrink_neighborhoods(K, depth)
    for a, b in zip(E, E[1:]):
        assert not np.any(b & ~a)
    assert all(np.all(e[K.mask]) for e in E)


def test_shrink_intersection_is_K_2d():
    g = Grid.make(2, 32, 32)
    rng = np.random.default_rng(3)
    mask = np.zeros(g.field_shape, bool)
    mask[10:14, 12:15, 9:20] = True
    mask[16, 20, 20] = True
    mask &= rng.random(mask.shape) < 0.8
    K = CompactSet(g, mask)
    E = shrink_neighborhoods(K, 4)
    assert np.array_equal(np.logical_and.reduce(E), K.mask)


def test_union_single_box_pieces():
    g = Grid.make(1, 8, 6)
    E = SpaceTimeUnion(g, (((1, 4), (2, 6)),))
    p = E.pieces()
    assert p["bottom"][1, 3:6].all()
    total = p["lateral"] | p["top"] | p["bottom"]
    assert np.array_equal(total, E.boundary)
    assert not np.any(p["lateral"] & p["top"]) and not np.any(p["top"] & p["bottom"])
    assert E.interior.sum() == 2 * 3  # levels 2..3 x nodes 3..5
    assert p["top"][4, 3:6].all()


def test_union_L_shape_partition():
    g = Grid.make(1, 20, 16)
    E = SpaceTimeUnion(g, (((1, 14), (2, 8)), ((8, 14), (2, 17))))
    p = E.pieces()
    assert np.array_equal(p["lateral"] | p["top"] | p["bottom"], E.boundary)
    # the step in the L: nodes of the wide box's bottom edge outside the tall box
    assert p["bottom"][8, 9:17].all()
    # the shared node column inside the union is interior, not boundary
    assert E.interior[10, 8]
    assert not np.any(E.interior & ~E.closure)
