"""Discrete periodic lattices, site fields and block decompositions.

The torus is the cube [-(n-1)/2, (n-1)/2]^d of integer sites with periodic
identification, n = side length.  Sites are stored in canonical centered
coordinates; a site index is the row-major rank of the shifted coordinates,
which fixes a deterministic ordering for all operator matrices built on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid",
    "TorusLattice",
    "SiteField",
    "DomainError",
    "BoundaryUndefinedError",
    "torus_distance",
    "forward_derivative",
    "gradient_square",
    "directed_gradient_square",
    "outer_boundary",
    "blocks_at_scale",
    "dilate",
    "distance_field",
]


class DomainError(KeyError):
    """Raised when a field is evaluated outside its declared domain."""


class BoundaryUndefinedError(ValueError):
    """Raised for outer_boundary of the empty set or of the full torus."""


class Grid:
    """A d-dimensional periodic lattice of arbitrary odd side length.

    Provides index maps, wrap arithmetic, neighbor tables and directed shift
    permutations.  Directions are indexed 0..2d-1: direction k < d is +e_k,
    direction d+k is -e_k.
    """

    def __init__(self, dim, side):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if side < 3 or side % 2 == 0:
            raise ValueError("side must be an odd integer >= 3")
        self.dim = int(dim)
        self.side = int(side)
        self.site_count = self.side**self.dim
        self.half = (self.side - 1) // 2
        self.n_directions = 2 * self.dim
        self._coords = self._build_coords()
        self._shift = self._build_shifts()

    def _build_coords(self):
        # canonical coordinates of every site, shape (site_count, dim)
        ranks = np.arange(self.site_count)
        coords = np.empty((self.site_count, self.dim), dtype=np.int64)
        for k in range(self.dim - 1, -1, -1):
            coords[:, k] = ranks % self.side - self.half
            ranks //= self.side
        return coords

    def _build_shifts(self):
        shift = np.empty((self.n_directions, self.site_count), dtype=np.int64)
        for k in range(self.dim):
            step = np.zeros(self.dim, dtype=np.int64)
            step[k] = 1
            shift[k] = self.index_of(self.wrap(self._coords + step))
            shift[self.dim + k] = self.index_of(self.wrap(self._coords - step))
        return shift

    # -- coordinates ---------------------------------------------------

    def wrap(self, coords):
        """Reduce coordinates to the canonical centered window."""
        coords = np.asarray(coords, dtype=np.int64)
        return (coords + self.half) % self.side - self.half

    def index_of(self, coords):
        coords = self.wrap(coords)
        ranks = np.zeros(coords.shape[:-1], dtype=np.int64)
        for k in range(self.dim):
            ranks = ranks * self.side + (coords[..., k] + self.half)
        return ranks

    def coords_of(self, index):
        return self._coords[np.asarray(index, dtype=np.int64)]

    @property
    def coords(self):
        return self._coords

    def shift_index(self, index, direction):
        """Index of x+e for direction e (0..2d-1)."""
        return self._shift[direction][index]

    @property
    def shifts(self):
        """(2d, site_count) table: shifts[e][x] = index of x+e."""
        return self._shift

    def direction_vector(self, direction):
        v = np.zeros(self.dim, dtype=np.int64)
        k = direction % self.dim
        v[k] = 1 if direction < self.dim else -1
        return v

    # -- sets -----------------------------------------------------------

    def empty_set(self):
        return np.zeros(self.site_count, dtype=bool)

    def full_set(self):
        return np.ones(self.site_count, dtype=bool)

    def set_from_sites(self, sites):
        mask = self.empty_set()
        mask[np.asarray(sites, dtype=np.int64)] = True
        return mask

    def box(self, lo, hi):
        """Sites with lo_k <= x_k <= hi_k (canonical coordinates, no wrap)."""
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        keep = np.all((self._coords >= lo) & (self._coords <= hi), axis=1)
        return keep

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.dim == other.dim
            and self.side == other.side
        )

    def __hash__(self):
        return hash((self.dim, self.side))

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim}, side={self.side})"


class TorusLattice(Grid):
    """The L-adic torus: side = L^N with the block hierarchy of scales 0..N."""

    def __init__(self, dim, L, N):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        if L < 3 or L % 2 == 0:
            raise ValueError("L must be an odd integer >= 3")
        if N < 1:
            raise ValueError("N must be >= 1")
        self.L = int(L)
        self.N = int(N)
        side = self.L**self.N
        super().__init__(dim, side)

    def block_side(self, scale):
        if not 0 <= scale <= self.N:
            raise ValueError(f"scale {scale} out of range [0, {self.N}]")
        return self.L**scale

    def blocks_per_axis(self, scale):
        return self.L ** (self.N - scale)

    def block_count(self, scale):
        return self.blocks_per_axis(scale) ** self.dim

    def block_coords_of_sites(self, scale, index=None):
        """Per-axis block indices (0-based) of sites at a given scale."""
        b = self.block_side(scale)
        coords = self._coords if index is None else self.coords_of(index)
        return (coords + self.half) // b

    def block_index_of_sites(self, scale, index=None):
        """Flat block index (row-major over block coordinates) per site."""
        bc = self.block_coords_of_sites(scale, index)
        nb = self.blocks_per_axis(scale)
        ranks = np.zeros(bc.shape[:-1], dtype=np.int64)
        for k in range(self.dim):
            ranks = ranks * nb + bc[..., k]
        return ranks

    def block_site_sets(self, scale):
        """(block_count, site_count) bool array: row b = sites of block b."""
        labels = self.block_index_of_sites(scale)
        nb = self.block_count(scale)
        out = np.zeros((nb, self.site_count), dtype=bool)
        out[labels, np.arange(self.site_count)] = True
        return out


@dataclass
class SiteField:
    """Real-valued function on the lattice, or on an explicit subset of it.

    values is a full-length array; only entries inside domain are meaningful.
    Lookups outside an explicit domain raise DomainError rather than read
    stale storage.
    """

    lat: Grid
    values: np.ndarray
    domain: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.lat.site_count,):
            raise ValueError("values must have one entry per site")
        if self.domain is not None:
            self.domain = np.asarray(self.domain, dtype=bool)

    def defined_at(self, index):
        return self.domain is None or bool(self.domain[index])

    def value_at(self, index):
        if not self.defined_at(index):
            raise DomainError(f"site {index} outside field domain")
        return float(self.values[index])

    @classmethod
    def zeros(cls, lat, domain=None):
        return cls(lat, np.zeros(lat.site_count), domain)


def as_values(f):
    """Accept a SiteField or a plain array; return the raw value array."""
    if isinstance(f, SiteField):
        return f.values
    return np.asarray(f, dtype=float)


def torus_distance(lat, x, y):
    """L1 distance with per-coordinate wrap; equals shortest-path length."""
    cx = lat.coords_of(x) if np.isscalar(x) else lat.wrap(x)
    cy = lat.coords_of(y) if np.isscalar(y) else lat.wrap(y)
    delta = np.abs(np.asarray(cx) - np.asarray(cy))
    delta = np.minimum(delta, lat.side - delta)
    return int(delta.sum(axis=-1))


def forward_derivative(f, x, direction, lat=None):
    """f(x+e) - f(x) for a lattice direction e."""
    if isinstance(f, SiteField):
        lat = f.lat
    elif lat is None:
        raise ValueError("lat required when f is a raw array")
    xe = int(lat.shift_index(x, direction))
    if isinstance(f, SiteField):
        return f.value_at(xe) - f.value_at(x)
    vals = as_values(f)
    return float(vals[xe] - vals[x])


def directed_gradient_square(lat, f, mask=None):
    """sum_{x in X} sum_{e in E} (d_e f(x))^2 over all 2d directions."""
    vals = as_values(f)
    total = np.zeros(lat.site_count)
    for e in range(lat.n_directions):
        total += (vals[lat.shifts[e]] - vals) ** 2
    if mask is not None:
        return float(total[mask].sum())
    return float(total.sum())


def gradient_square(lat, f, mask=None):
    """(1/2) sum_{x in X} sum_e (d_e f(x))^2, the undirected convention."""
    return 0.5 * directed_gradient_square(lat, f, mask)


def distance_field(lat, mask):
    """L1 torus distance from every site to the set (multi-source BFS)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("distance to the empty set is undefined")
    dist = np.full(lat.site_count, -1, dtype=np.int64)
    frontier = np.flatnonzero(mask)
    dist[frontier] = 0
    level = 0
    while frontier.size:
        level += 1
        nxt = np.unique(lat.shifts[:, frontier])
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = level
        frontier = nxt
    return dist


def outer_boundary(lat, mask):
    """Sites at L1 distance exactly 1 from the set, disjoint from it."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise BoundaryUndefinedError("outer boundary of the empty set")
    if mask.all():
        raise BoundaryUndefinedError("outer boundary of the full torus")
    touched = np.zeros(lat.site_count, dtype=bool)
    for e in range(lat.n_directions):
        touched[lat.shifts[e][mask]] = True
    return touched & ~mask


def dilate(lat, mask, norm="linf"):
    """Set of sites within distance 1 of the set (including it).

    norm 'linf' uses the 3^d neighborhood (the touching/connectivity metric),
    norm 'l1' uses the 2d nearest neighbors.
    """
    mask = np.asarray(mask, dtype=bool)
    out = mask.copy()
    if norm == "l1":
        for e in range(lat.n_directions):
            out |= mask[lat.shifts[e]]
        return out
    if norm != "linf":
        raise ValueError("norm must be 'l1' or 'linf'")
    # separable per-axis dilation builds the full 3^d neighborhood
    for k in range(lat.dim):
        out = out | out[lat.shifts[k]] | out[lat.shifts[lat.dim + k]]
    return out


def blocks_at_scale(lat, scale):
    """The L^{d(N-j)} disjoint cubes of side L^j tiling the torus.

    Returned as a list of site masks ordered by flat block index.
    """
    sets = lat.block_site_sets(scale)
    return [sets[b] for b in range(sets.shape[0])]
