"""Scale-indexed polymer algebra.

A polymer at scale j is a union of j-blocks, stored as a bitset over the
block grid.  Connectivity and "touching" both use the 3^d (sup-norm)
neighborhood; two sets are strictly disjoint iff they do not touch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import TorusLattice, distance_field

__all__ = [
    "Polymer",
    "PolymerFamily",
    "EnumerationBudgetError",
    "connected_components",
    "is_small",
    "closure",
    "neighborhoods",
    "angle_bracket",
    "connected_polymers",
    "small_polymers_containing",
    "enumerate_reblocking_configs",
]


class EnumerationBudgetError(RuntimeError):
    """Raised when a combinatorial enumeration exceeds its budget."""


class _BlockGrid:
    """Shared per-(lattice, scale) tables for block-level set operations."""

    _cache: dict = {}

    def __new__(cls, lat, scale):
        key = (lat.dim, lat.L, lat.N, scale)
        hit = cls._cache.get(key)
        if hit is not None and hit.lat == lat:
            return hit
        self = super().__new__(cls)
        self.lat = lat
        self.scale = scale
        self.per_axis = lat.blocks_per_axis(scale)
        self.count = lat.block_count(scale)
        self.site_block = lat.block_index_of_sites(scale)
        self.block_sites = lat.block_site_sets(scale)
        self.neighbors = self._block_neighbors()
        cls._cache[key] = self
        return self

    def _block_neighbors(self):
        """neighbors[b] = sorted array of blocks touching block b (incl. b)."""
        nb, d = self.per_axis, self.lat.dim
        ranks = np.arange(self.count)
        coords = np.empty((self.count, d), dtype=np.int64)
        r = ranks.copy()
        for k in range(d - 1, -1, -1):
            coords[:, k] = r % nb
            r //= nb
        offsets = np.array(list(itertools.product((-1, 0, 1), repeat=d)))
        out = []
        for b in range(self.count):
            cc = (coords[b] + offsets) % nb
            flat = np.zeros(len(cc), dtype=np.int64)
            for k in range(d):
                flat = flat * nb + cc[:, k]
            out.append(np.unique(flat))
        return out


@dataclass(frozen=True)
class Polymer:
    """A union of j-blocks: scale plus a bitset over blocks_at_scale(j)."""

    lat: TorusLattice
    scale: int
    blocks: np.ndarray  # bool, length block_count(scale)

    def __post_init__(self):
        object.__setattr__(
            self, "blocks", np.asarray(self.blocks, dtype=bool).copy()
        )
        self.blocks.setflags(write=False)
        if self.blocks.shape != (self.lat.block_count(self.scale),):
            raise ValueError("block bitset has wrong length for scale")

    # -- constructors ----------------------------------------------------

    @classmethod
    def empty(cls, lat, scale):
        return cls(lat, scale, np.zeros(lat.block_count(scale), dtype=bool))

    @classmethod
    def from_blocks(cls, lat, scale, block_ids):
        bits = np.zeros(lat.block_count(scale), dtype=bool)
        bits[list(block_ids)] = True
        return cls(lat, scale, bits)

    @classmethod
    def from_sites(cls, lat, scale, site_mask):
        """Smallest scale-j polymer containing the given sites."""
        site_mask = np.asarray(site_mask, dtype=bool)
        grid = _BlockGrid(lat, scale)
        bits = np.zeros(grid.count, dtype=bool)
        bits[np.unique(grid.site_block[site_mask])] = True
        return cls(lat, scale, bits)

    # -- basic queries ----------------------------------------------------

    @property
    def block_count(self):
        """|X|_j, the number of blocks."""
        return int(self.blocks.sum())

    @property
    def site_count(self):
        return self.block_count * self.lat.block_side(self.scale) ** self.lat.dim

    def sites(self):
        grid = _BlockGrid(self.lat, self.scale)
        return self.blocks[grid.site_block]

    def is_empty(self):
        return not self.blocks.any()

    def block_ids(self):
        return np.flatnonzero(self.blocks)

    # -- set algebra -------------------------------------------------------

    def _check(self, other):
        if self.lat != other.lat or self.scale != other.scale:
            raise ValueError("polymers live on different block grids")

    def union(self, other):
        self._check(other)
        return Polymer(self.lat, self.scale, self.blocks | other.blocks)

    def intersection(self, other):
        self._check(other)
        return Polymer(self.lat, self.scale, self.blocks & other.blocks)

    def difference(self, other):
        self._check(other)
        return Polymer(self.lat, self.scale, self.blocks & ~other.blocks)

    def complement(self):
        return Polymer(self.lat, self.scale, ~self.blocks)

    def contains(self, other):
        self._check(other)
        return bool(np.all(other.blocks <= self.blocks))

    def __eq__(self, other):
        return (
            isinstance(other, Polymer)
            and self.lat == other.lat
            and self.scale == other.scale
            and np.array_equal(self.blocks, other.blocks)
        )

    def __hash__(self):
        return hash((self.scale, self.blocks.tobytes()))

    def touches(self, other):
        """True iff some pair of blocks is within sup-distance 1."""
        self._check(other)
        grid = _BlockGrid(self.lat, self.scale)
        for b in np.flatnonzero(self.blocks):
            if other.blocks[grid.neighbors[b]].any():
                return True
        return False

    def strictly_disjoint(self, other):
        return not self.touches(other)

    def __repr__(self):
        return (
            f"Polymer(scale={self.scale}, blocks={list(self.block_ids())})"
        )


@dataclass
class PolymerFamily:
    """A finite family of same-scale polymers with the disjointness indicator."""

    scale: int
    members: list

    def chi(self):
        """1 if all pairs are strictly disjoint, else 0."""
        for a, b in itertools.combinations(self.members, 2):
            if a.touches(b):
                return 0
        return 1

    def union(self):
        if not self.members:
            raise ValueError("union of an empty family needs a lattice")
        out = self.members[0]
        for p in self.members[1:]:
            out = out.union(p)
        return out


def connected_components(X: Polymer) -> PolymerFamily:
    """Maximal sup-norm-connected pieces of X, each again a polymer."""
    grid = _BlockGrid(X.lat, X.scale)
    seen = np.zeros(grid.count, dtype=bool)
    comps = []
    for b in np.flatnonzero(X.blocks):
        if seen[b]:
            continue
        stack = [b]
        seen[b] = True
        comp = []
        while stack:
            cur = stack.pop()
            comp.append(cur)
            for nb in grid.neighbors[cur]:
                if X.blocks[nb] and not seen[nb]:
                    seen[nb] = True
                    stack.append(int(nb))
        comps.append(Polymer.from_blocks(X.lat, X.scale, comp))
    return PolymerFamily(X.scale, comps)


def is_connected(X: Polymer) -> bool:
    if X.is_empty():
        return False
    return len(connected_components(X).members) == 1


def is_small(X: Polymer) -> bool:
    """Connected with at most 2^d blocks."""
    return X.block_count <= 2**X.lat.dim and is_connected(X)


def closure(X: Polymer) -> Polymer:
    """Smallest polymer at the next scale containing X."""
    if X.scale + 1 > X.lat.N:
        raise ValueError("closure would exceed the deepest scale")
    if X.is_empty():
        return Polymer.empty(X.lat, X.scale + 1)
    return Polymer.from_sites(X.lat, X.scale + 1, X.sites())


def hat(X: Polymer) -> Polymer:
    """Union of same-scale blocks touching X.  At scale 0 this is X itself."""
    if X.scale == 0 or X.is_empty():
        return X
    grid = _BlockGrid(X.lat, X.scale)
    bits = np.zeros(grid.count, dtype=bool)
    for b in np.flatnonzero(X.blocks):
        bits[grid.neighbors[b]] = True
    return Polymer(X.lat, X.scale, bits)


def _threshold_set(lat, site_mask, scale, denom):
    """Sites with denom * d(x, X) <= L^scale, by exact integer comparison."""
    dist = distance_field(lat, site_mask)
    return denom * dist <= lat.block_side(scale)


def neighborhoods(X: Polymer):
    """The graded neighborhoods of a polymer.

    Returns (hat, plus, ddot, dot): hat is the touching-blocks polymer; the
    other three are site masks at L1-distance thresholds L^j/3, L^j/6 and
    L^j/12.  At scale 0 all four degenerate to X.  The chain
    X <= dot <= ddot <= plus <= hat-sites always holds.
    """
    sites = X.sites()
    if X.scale == 0 or X.is_empty():
        return X, sites.copy(), sites.copy(), sites.copy()
    lat = X.lat
    plus = _threshold_set(lat, sites, X.scale, 3)
    ddot = _threshold_set(lat, sites, X.scale, 6)
    dot = _threshold_set(lat, sites, X.scale, 12)
    return hat(X), plus, ddot, dot


def plus_sites(X: Polymer):
    """X^+ as a site mask (threshold L^j/3)."""
    return neighborhoods(X)[1]


def angle_bracket(X: Polymer) -> Polymer:
    """Blocks B whose next-scale closure, dilated by L^{j+1}/3, meets hat(X).

    Empty input gives the empty polymer.
    """
    if X.scale + 1 > X.lat.N:
        raise ValueError("angle_bracket needs a next scale")
    if X.is_empty():
        return Polymer.empty(X.lat, X.scale)
    lat = X.lat
    hat_sites = hat(X).sites()
    grid_next = _BlockGrid(lat, X.scale + 1)
    # for each (j+1)-block D, does D^+ meet hat(X)?  All j-blocks of D share
    # the same closure, so the condition is per-D.
    qualifying_next = np.zeros(grid_next.count, dtype=bool)
    for D in range(grid_next.count):
        d_plus = _threshold_set(lat, grid_next.block_sites[D], X.scale + 1, 3)
        if (d_plus & hat_sites).any():
            qualifying_next[D] = True
    grid = _BlockGrid(lat, X.scale)
    # a j-block belongs iff its parent (j+1)-block qualifies
    parent = grid_next.site_block[grid.block_sites.argmax(axis=1)]
    bits = qualifying_next[parent]
    return Polymer(lat, X.scale, bits)


def block_parents(lat, scale):
    """parent[b] = flat index of the (scale+1)-block containing j-block b."""
    grid = _BlockGrid(lat, scale)
    grid_next = _BlockGrid(lat, scale + 1)
    rep_site = grid.block_sites.argmax(axis=1)
    return grid_next.site_block[rep_site]


def connected_polymers(lat, scale, max_blocks, budget=200_000, containing=None):
    """Enumerate connected polymers with at most max_blocks blocks.

    Each polymer is produced exactly once (standard rooted enumeration of
    connected subgraphs).  With containing=b only polymers through block b
    are produced.  Raises EnumerationBudgetError past the budget.
    """
    grid = _BlockGrid(lat, scale)
    out = []

    def grow(current, frontier, forbidden):
        if len(out) > budget:
            raise EnumerationBudgetError(
                f"more than {budget} connected polymers"
            )
        out.append(Polymer.from_blocks(lat, scale, current))
        if len(current) == max_blocks:
            return
        frontier = list(frontier)
        local_forbidden = set(forbidden)
        for i, cand in enumerate(frontier):
            if cand in local_forbidden:
                continue
            new_frontier = [c for c in frontier[i + 1 :]]
            for nb in grid.neighbors[cand]:
                nb = int(nb)
                if (
                    nb not in current
                    and nb != cand
                    and nb not in local_forbidden
                    and nb not in frontier
                ):
                    new_frontier.append(nb)
            grow(current | {cand}, new_frontier, local_forbidden)
            local_forbidden.add(cand)

    roots = range(grid.count) if containing is None else [containing]
    forbidden_roots = set()
    for root in roots:
        neigh = [int(n) for n in grid.neighbors[root] if n != root]
        grow({root}, neigh, set(forbidden_roots))
        forbidden_roots.add(root)
    return out


def small_polymers_containing(lat, scale, block_id, budget=200_000):
    """All small polymers (connected, <= 2^d blocks) containing a block."""
    return connected_polymers(
        lat, scale, 2**lat.dim, budget=budget, containing=block_id
    )


def large_connected_polymers(lat, scale, max_blocks, budget=200_000):
    """Connected polymers with more than 2^d and at most max_blocks blocks."""
    small = 2**lat.dim
    return [
        X
        for X in connected_polymers(lat, scale, max_blocks, budget=budget)
        if X.block_count > small
    ]


def _families(scale, catalog_large, catalog_pairs, budget):
    """Yield (family_of_large, list_of_(marked_block, small)) combinations.

    Members are pairwise strictly disjoint across both groups; families are
    produced as sorted-index combinations so each set appears once.
    """
    n_l, n_s = len(catalog_large), len(catalog_pairs)
    count = 0

    def extend(chosen_large, chosen_pairs, start_large, start_pair):
        nonlocal count
        count += 1
        if count > budget:
            raise EnumerationBudgetError("reblocking family budget exceeded")
        yield list(chosen_large), list(chosen_pairs)
        members = [x for x in chosen_large] + [y for _, y in chosen_pairs]
        for i in range(start_large, n_l):
            X = catalog_large[i]
            if all(X.strictly_disjoint(m) for m in members):
                yield from extend(
                    chosen_large + [X], chosen_pairs, i + 1, 0
                )
        for i in range(start_pair, n_s):
            b, Y = catalog_pairs[i]
            if all(Y.strictly_disjoint(m) for m in members):
                yield from extend(
                    chosen_large, chosen_pairs + [(b, Y)], n_l, i + 1
                )

    yield from extend([], [], 0, 0)


def enumerate_reblocking_configs(
    V: Polymer,
    catalog_large,
    catalog_small,
    budget=1_000_000,
):
    """Stream the (P, Q, Z, large-family, marked-small-family) tuples for V.

    V is a next-scale polymer; the catalogs list the connected large and the
    small polymers (at scale V.scale - 1) that may carry activity weight.
    Yields tuples (P, Q, Z, family_X, family_Y) of scale-j polymers / lists
    such that the closure of P | Q | Z | union(marked blocks) | union(large)
    equals V.  Tuples are produced for V nonempty only.
    """
    lat = V.lat
    if V.scale < 1:
        raise ValueError("V must live at scale >= 1")
    j = V.scale - 1
    if V.is_empty():
        return
    parent = block_parents(lat, j)
    v_parent_ok = V.blocks[parent]  # j-blocks whose parent block is in V

    pairs = []
    for Y in catalog_small:
        for b in Y.block_ids():
            if v_parent_ok[b]:
                pairs.append((int(b), Y))
    large_ok = [X for X in catalog_large if bool(np.all(v_parent_ok[X.blocks]))]

    produced = 0
    for fam_large, fam_pairs in _families(j, large_ok, pairs, budget):
        X = Polymer.empty(lat, j)
        for m in fam_large:
            X = X.union(m)
        for _, Y in fam_pairs:
            X = X.union(Y)
        hatX = hat(X)
        bracket = angle_bracket(X) if not X.is_empty() else X
        fixed = Polymer.empty(lat, j)
        for m in fam_large:
            fixed = fixed.union(m)
        for b, _ in fam_pairs:
            fixed = fixed.union(Polymer.from_blocks(lat, j, [b]))

        p_region = np.flatnonzero(hatX.blocks & ~X.blocks & v_parent_ok)
        q_region = np.flatnonzero(bracket.blocks & ~hatX.blocks & v_parent_ok)
        z_region = np.flatnonzero(~bracket.blocks & v_parent_ok)

        for p_bits in _all_subsets(p_region):
            P = Polymer.from_blocks(lat, j, p_bits)
            for q_bits in _all_subsets(q_region):
                Q = Polymer.from_blocks(lat, j, q_bits)
                for z_bits in _all_subsets(z_region):
                    Z = Polymer.from_blocks(lat, j, z_bits)
                    produced += 1
                    if produced > budget:
                        raise EnumerationBudgetError(
                            "reblocking tuple budget exceeded"
                        )
                    total = P.union(Q).union(Z).union(fixed)
                    if total.is_empty():
                        continue
                    if closure(total) == V:
                        yield P, Q, Z, fam_large, fam_pairs


def _all_subsets(ids):
    ids = list(ids)
    for r in range(len(ids) + 1):
        yield from itertools.combinations(ids, r)
