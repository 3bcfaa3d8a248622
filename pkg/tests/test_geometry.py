import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyrg.geometry import (
    BoundaryUndefinedError,
    DomainError,
    Grid,
    SiteField,
    TorusLattice,
    blocks_at_scale,
    directed_gradient_square,
    dilate,
    distance_field,
    forward_derivative,
    gradient_square,
    outer_boundary,
    torus_distance,
)


@pytest.fixture(scope="module")
def lat9():
    return TorusLattice(dim=2, L=3, N=2)  # 9x9


@pytest.fixture(scope="module")
def lat3():
    return TorusLattice(dim=2, L=3, N=1)  # 3x3


def brute_distance(lat, x, y):
    """BFS shortest path over the nearest-neighbor graph."""
    dist = {x: 0}
    frontier = [x]
    while frontier:
        nxt = []
        for s in frontier:
            for e in range(lat.n_directions):
                t = int(lat.shift_index(s, e))
                if t not in dist:
                    dist[t] = dist[s] + 1
                    nxt.append(t)
        frontier = nxt
    return dist[y]


def test_lattice_invariants(lat9):
    assert lat9.side == 9
    assert lat9.site_count == 81
    # every site has exactly 2d distinct neighbor slots under wrap
    for x in range(lat9.site_count):
        neigh = {int(lat9.shift_index(x, e)) for e in range(4)}
        assert len(neigh) == 4
        assert x not in neigh


def test_bad_parameters():
    with pytest.raises(ValueError):
        TorusLattice(dim=2, L=4, N=1)
    with pytest.raises(ValueError):
        TorusLattice(dim=1, L=3, N=1)
    with pytest.raises(ValueError):
        Grid(dim=2, side=8)


def test_canonical_coords_unique(lat9):
    # canonical form is unique per equivalence class mod side
    x = lat9.index_of(np.array([4, -4]))
    y = lat9.index_of(np.array([4 + 9 * 3, -4 - 9 * 2]))
    assert x == y
    assert np.array_equal(lat9.coords_of(x), [4, -4])


def test_torus_distance_examples(lat9):
    o = lat9.index_of(np.array([0, 0]))
    assert torus_distance(lat9, o, o) == 0
    a = lat9.index_of(np.array([4, 0]))
    b = lat9.index_of(np.array([-4, 0]))
    assert torus_distance(lat9, a, b) == 1  # wrap
    c = lat9.index_of(np.array([1, 2]))
    d = lat9.index_of(np.array([3, 7]))
    assert torus_distance(lat9, c, d) == 6
    assert torus_distance(lat9, c, d) == brute_distance(lat9, c, d)


def test_torus_distance_is_metric(lat3):
    n = lat3.site_count
    mat = np.array(
        [[torus_distance(lat3, x, y) for y in range(n)] for x in range(n)]
    )
    assert np.array_equal(mat, mat.T)
    assert np.all(np.diag(mat) == 0)
    assert np.all((mat == 0) == np.eye(n, dtype=bool))
    for x, y, z in itertools.product(range(n), repeat=3):
        assert mat[x, z] <= mat[x, y] + mat[y, z]


def test_distance_field_matches_pointwise(lat9):
    rng = np.random.default_rng(0)
    mask = lat9.empty_set()
    mask[rng.choice(81, size=5, replace=False)] = True
    dist = distance_field(lat9, mask)
    for x in range(81):
        expected = min(torus_distance(lat9, x, int(s)) for s in np.flatnonzero(mask))
        assert dist[x] == expected


def test_forward_derivative_basics(lat9):
    const = SiteField(lat9, np.full(81, 2.5))
    x = lat9.index_of(np.array([0, 0]))
    for e in range(4):
        assert forward_derivative(const, x, e) == 0.0
    linear = SiteField(lat9, lat9.coords[:, 0].astype(float))
    assert forward_derivative(linear, x, 0) == 1.0
    assert forward_derivative(linear, x, 2) == -1.0  # -e_1 direction


def test_forward_derivative_domain_error(lat9):
    domain = lat9.empty_set()
    x = lat9.index_of(np.array([0, 0]))
    domain[x] = True
    f = SiteField(lat9, np.zeros(81), domain)
    with pytest.raises(DomainError):
        forward_derivative(f, x, 0)  # x+e outside the domain


def test_gradient_square_edge_oracle(lat3):
    rng = np.random.default_rng(1)
    f = rng.normal(size=lat3.site_count)
    # undirected edge enumeration: each edge (x, x+e_k), k < d, once
    total = 0.0
    for x in range(lat3.site_count):
        for k in range(lat3.dim):
            total += (f[lat3.shift_index(x, k)] - f[x]) ** 2
    assert gradient_square(lat3, f) == pytest.approx(total, rel=1e-12)
    assert directed_gradient_square(lat3, f) == pytest.approx(2 * total, rel=1e-12)


def test_outer_boundary_single_site(lat9):
    x = lat9.index_of(np.array([1, -2]))
    mask = lat9.set_from_sites([x])
    bd = outer_boundary(lat9, mask)
    assert bd.sum() == 4
    assert not (bd & mask).any()
    expected = {int(lat9.shift_index(x, e)) for e in range(4)}
    assert set(np.flatnonzero(bd)) == expected


def test_outer_boundary_square_ring(lat9):
    sq = lat9.box([-1, -1], [1, 1])  # 3x3 square
    bd = outer_boundary(lat9, sq)
    # L1 ring: 12 sites, no diagonal corners
    assert bd.sum() == 12
    dist = distance_field(lat9, sq)
    assert np.array_equal(bd, dist == 1)


def test_outer_boundary_errors(lat9):
    with pytest.raises(BoundaryUndefinedError):
        outer_boundary(lat9, lat9.empty_set())
    with pytest.raises(BoundaryUndefinedError):
        outer_boundary(lat9, lat9.full_set())
    almost = lat9.full_set()
    almost[0] = False
    assert np.flatnonzero(outer_boundary(lat9, almost)) == [0]


def test_blocks_partition(lat9):
    for j in (0, 1, 2):
        blocks = blocks_at_scale(lat9, j)
        assert len(blocks) == 3 ** (2 * (2 - j))
        union = np.zeros(81, dtype=int)
        for b in blocks:
            assert b.sum() == 9**j
            union += b
        assert np.all(union == 1)
    assert len(blocks_at_scale(lat9, 0)) == 81
    assert len(blocks_at_scale(lat9, 2)) == 1
    with pytest.raises(ValueError):
        blocks_at_scale(lat9, 3)


def test_block_nesting(lat9):
    fine = blocks_at_scale(lat9, 0)
    coarse = blocks_at_scale(lat9, 1)
    for c in coarse:
        inside = [b for b in fine if (b & c).sum() == b.sum()]
        assert len(inside) == 9
        union = np.zeros(81, dtype=bool)
        for b in inside:
            union |= b
        assert np.array_equal(union, c)


def test_boundary_sites_have_neighbor_inside(lat9):
    rng = np.random.default_rng(3)
    for _ in range(10):
        mask = lat9.empty_set()
        mask[rng.choice(81, size=rng.integers(1, 40), replace=False)] = True
        bd = outer_boundary(lat9, mask)
        assert not (bd & mask).any()
        for x in np.flatnonzero(bd):
            assert any(mask[lat9.shift_index(x, e)] for e in range(4))


def test_dilate_linf_is_3x3_neighborhood(lat9):
    x = lat9.index_of(np.array([0, 0]))
    mask = lat9.set_from_sites([x])
    grown = dilate(lat9, mask)
    assert grown.sum() == 9
    offs = itertools.product((-1, 0, 1), repeat=2)
    expected = {int(lat9.index_of(np.array(o))) for o in offs}
    assert set(np.flatnonzero(grown)) == expected


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=80), min_size=1, max_size=30),
       st.lists(st.integers(min_value=0, max_value=80), min_size=1, max_size=30))
def test_set_algebra_properties(a_sites, b_sites):
    lat = TorusLattice(dim=2, L=3, N=2)
    a = lat.set_from_sites(a_sites)
    b = lat.set_from_sites(b_sites)
    assert np.array_equal(~(~a), a)
    assert np.array_equal(a | b, b | a)
    assert np.array_equal(a & b, b & a)
    assert np.array_equal(~(a | b), ~a & ~b)
