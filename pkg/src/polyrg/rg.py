"""One coarse-graining step as executable algebra.

An activity assigns a number to every polymer given the fields.  The step
is: split the per-block Gaussian weights, resum the polymer sum at the next
block scale (an exact pointwise identity for any choice of the new
constants), then integrate the fluctuation field conditionally on each
coarse component's exterior.  The linearization of the composed map at the
trivial fixed point splits into a large-set part, a Taylor-remainder part
and an explicit quadratic/constant ledger whose cancellation fixes the
coupling updates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .dipole import ModelParams
from .gaussian import GaussianSpec, RGSeed, sample_gff
from .geometry import TorusLattice, distance_field
from .kernels import CallableKernel, FieldKernel, QuadraticKernel, TrigKernel
from .operators import (
    dirichlet_green,
    harmonic_extension,
    poisson_kernel_full,
)
from .polymers import (
    Polymer,
    _families,
    angle_bracket,
    block_parents,
    closure,
    connected_components,
    connected_polymers,
    hat,
    neighborhoods,
    small_polymers_containing,
)

__all__ = [
    "RGState",
    "PolymerActivity",
    "DictActivity",
    "SiteProductActivity",
    "TaylorData",
    "GeometryError",
    "make_Ij",
    "block_weights",
    "extraction_reblocking",
    "conditional_expectation_step",
    "taylor2",
    "loc_operator",
    "alpha_extraction",
    "coupling_update",
    "linearization_split",
]


class GeometryError(ValueError):
    """Raised when the lattice is too small for a step's separation needs."""


@dataclass
class RGState:
    """Per-scale couplings plus the geometric context of the step."""

    lat: TorusLattice
    scale: int
    sigma: float
    e_accum: float = 0.0
    model: ModelParams = field(default_factory=ModelParams)

    @property
    def mass(self):
        return self.model.m

    def block_polymer(self, block_id):
        return Polymer.from_blocks(self.lat, self.scale, [block_id])


def _plus_mask(lat, poly):
    """Site mask of the graded + neighborhood of a polymer."""
    return neighborhoods(poly)[1]


def smoothed_field(lat, poly, m, phi, xi=None):
    """P_{X^+} phi (+ xi) for a polymer at its own scale; identity at 0."""
    phi = np.asarray(phi, dtype=float)
    if poly.scale == 0:
        out = phi.copy()
    else:
        out = harmonic_extension(lat, _plus_mask(lat, poly), m, phi)
    if xi is not None:
        out = out + np.asarray(xi, dtype=float)
    return out


class PolymerActivity:
    """Scale-indexed map from polymers to numbers, given the fields.

    Subclasses provide kernel(X) for connected X (None meaning zero) and a
    support catalog.  Values factorize over strictly-disjoint connected
    components; the empty polymer evaluates to 1.  field_mode declares how
    a kernel consumes fields: 'raw' kernels read phi + xi, 'smoothed'
    kernels read P_{X^+} phi + xi.
    """

    factorizes = True
    field_mode = "raw"

    def __init__(self, lat, scale):
        self.lat = lat
        self.scale = scale

    def kernel(self, X):
        raise NotImplementedError

    def support(self, budget=200_000):
        """Connected polymers where the activity may be nonzero."""
        raise NotImplementedError

    def supports(self, X):
        """Membership test against the support, without materializing it."""
        return any(X == Y for Y in self.support())

    def combined_field(self, X, phi, xi):
        if self.field_mode == "raw":
            out = np.asarray(phi, dtype=float)
            return out + xi if xi is not None else out
        return smoothed_field(self.lat, X, self.mass_for_fields, phi, xi)

    @property
    def mass_for_fields(self):
        return getattr(self, "mass", 0.0)

    def component_value(self, X, phi, xi):
        ker = self.kernel(X)
        if ker is None:
            return 0.0
        return ker.value(self.combined_field(X, phi, xi))

    def value(self, X, phi, xi=None):
        if X.is_empty():
            return 1.0
        comps = connected_components(X).members
        out = 1.0
        for comp in comps:
            out *= self.component_value(comp, phi, xi)
            if out == 0.0:
                return 0.0
        return out


class DictActivity(PolymerActivity):
    """Activity given by explicit kernels on a finite support."""

    def __init__(self, lat, scale, kernels, field_mode="raw", mass=0.0):
        super().__init__(lat, scale)
        self._kernels = {X.blocks.tobytes(): (X, k) for X, k in kernels.items()}
        self.field_mode = field_mode
        self.mass = mass

    def kernel(self, X):
        hit = self._kernels.get(X.blocks.tobytes())
        return hit[1] if hit is not None else None

    def support(self, budget=200_000):
        return [X for X, _ in self._kernels.values()]

    def supports(self, X):
        return X.blocks.tobytes() in self._kernels

    def map_kernels(self, fn, field_mode=None, scale=None, mass=None):
        out = {X: fn(X, k) for X, k in self._kernels.values()}
        act = DictActivity(
            self.lat,
            self.scale if scale is None else scale,
            out,
            field_mode=self.field_mode if field_mode is None else field_mode,
            mass=self.mass if mass is None else mass,
        )
        return act


class SiteProductActivity(PolymerActivity):
    """Scale-0 activity that factorizes over single sites.

    site_values(psi) returns the per-site factors and must accept batches
    (leading axes broadcast); the value on any polymer is the product of
    its sites' factors.
    """

    def __init__(self, lat, site_values, support_budget=200_000):
        super().__init__(lat, 0)
        self._raw_site_values = site_values
        self._cache = {}
        self._support_budget = support_budget

    def site_values(self, psi):
        psi = np.asarray(psi, dtype=float)
        if psi.ndim != 1:
            return self._raw_site_values(psi)
        key = psi.tobytes()
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = self._raw_site_values(psi)
        return self._cache[key]

    @classmethod
    def from_dipole(cls, params, lat):
        from .dipole import I0_K0

        def factors(psi):
            return I0_K0(params, lat, psi)[1]

        return cls(lat, factors)

    def kernel(self, X):
        sites = np.flatnonzero(X.sites())
        vals = self.site_values

        def fn(psi):
            return float(np.prod(vals(psi)[sites]))

        def batch(psis):
            return np.prod(vals(np.atleast_2d(psis))[:, sites], axis=1)

        return CallableKernel(fn, batch_fn=batch)

    def value(self, X, phi, xi=None):
        if X.is_empty():
            return 1.0
        psi = np.asarray(phi, dtype=float)
        if xi is not None:
            psi = psi + xi
        return float(np.prod(self.site_values(psi)[X.sites()]))

    def support(self, budget=None):
        return connected_polymers(
            self.lat, 0, max_blocks=self.lat.site_count,
            budget=budget or self._support_budget,
        )

    def supports(self, X):
        return True


class ZeroActivity(PolymerActivity):
    def kernel(self, X):
        return None

    def support(self, budget=200_000):
        return []

    def supports(self, X):
        return False


class CosineProductActivity(PolymerActivity):
    """Scale-0 activity of cosine class: products over sites of
    coefficient * (1/2) sum_e cos(frequency * d_e psi(x)).

    The activity-linear cosine representative of the dipole split at the
    untuned point; everything downstream of it (conditioning, localization,
    coupling extraction) is exact.
    """

    field_mode = "raw"

    def __init__(self, lat, frequency, coefficient):
        super().__init__(lat, 0)
        self.frequency = float(frequency)
        self.coefficient = float(coefficient)

    def _site_kernel(self, x):
        n = self.lat.site_count
        waves, coefs, phases = [], [], []
        for e in range(self.lat.n_directions):
            w = np.zeros(n)
            w[self.lat.shift_index(x, e)] += self.frequency
            w[x] -= self.frequency
            waves.append(w)
            coefs.append(0.5 * self.coefficient)
            phases.append(0.0)
        return TrigKernel(0.0, coefs, waves, phases)

    def kernel(self, X):
        out = None
        for x in np.flatnonzero(X.sites()):
            k = self._site_kernel(int(x))
            out = k if out is None else out.multiply(k)
        return out

    def support(self, budget=200_000):
        return connected_polymers(
            self.lat, 0, max_blocks=self.lat.site_count, budget=budget
        )

    def supports(self, X):
        return True


def make_Ij(state, block, phi, xi=None):
    """Per-block Gaussian weight exp(-(sigma/4) sum_{x in B, e}
    (d_e P_{B+} phi(x) + d_e xi(x))^2)."""
    lat = state.lat
    B = block if isinstance(block, Polymer) else state.block_polymer(block)
    u = smoothed_field(lat, B, state.mass, phi)
    if xi is not None:
        u = u + np.asarray(xi, dtype=float)
    mask = B.sites()
    total = 0.0
    for e in range(lat.n_directions):
        diff = u[lat.shifts[e]] - u
        total += float((diff[mask] ** 2).sum())
    return float(np.exp(-0.25 * state.sigma * total))


def block_weights(state, phi, xi, e_next, sigma_next):
    """Arrays (I, Itilde) over the scale-j blocks for given fields.

    I uses the block's own + smoothing and the current sigma; Itilde uses
    the parent block's + smoothing, the next sigma and the constant e_next.
    """
    lat = state.lat
    j = state.scale
    phi = np.asarray(phi, dtype=float)
    xi_arr = np.asarray(xi, dtype=float) if xi is not None else None
    n_blocks = lat.block_count(j)
    site_block = lat.block_index_of_sites(j)
    m = state.mass

    def grad_sq_per_block(u):
        per_site = np.zeros(lat.site_count)
        for e in range(lat.n_directions):
            per_site += (u[lat.shifts[e]] - u) ** 2
        return np.bincount(site_block, weights=per_site, minlength=n_blocks)

    if j == 0:
        u = phi if xi_arr is None else phi + xi_arr
        I = np.exp(-0.25 * state.sigma * grad_sq_per_block(u))
    else:
        I = np.empty(n_blocks)
        for b in range(n_blocks):
            B = state.block_polymer(b)
            u = smoothed_field(lat, B, m, phi, xi_arr)
            I[b] = np.exp(
                -0.25 * state.sigma * grad_sq_per_block(u)[b]
            )
    parents = block_parents(lat, j)
    Itilde = np.empty(n_blocks)
    for D_id in range(lat.block_count(j + 1)):
        D = Polymer.from_blocks(lat, j + 1, [D_id])
        u = smoothed_field(lat, D, m, phi, xi_arr)
        per_block = grad_sq_per_block(u)
        for b in np.flatnonzero(parents == D_id):
            Itilde[b] = np.exp(e_next - 0.25 * sigma_next * per_block[b])
    return I, Itilde


def coarse_block_weight(state, D_id, phi, xi, e_next, sigma_next):
    """The next-scale weight I'(D) = exp(-L^d e_next) prod_{B in D} Itilde(B)."""
    lat = state.lat
    j = state.scale
    D = Polymer.from_blocks(lat, j + 1, [D_id])
    u = smoothed_field(lat, D, state.mass, phi, xi)
    mask = D.sites()
    total = 0.0
    for e in range(lat.n_directions):
        diff = u[lat.shifts[e]] - u
        total += float((diff[mask] ** 2).sum())
    return float(np.exp(-0.25 * sigma_next * total))


class ReblockedActivity(PolymerActivity):
    """The next-scale polymer activity produced by extraction/reblocking.

    Evaluates the resummed sum: for each family of strictly-disjoint
    activity carriers (connected large polymers, and small polymers with a
    marked block), regions are classified relative to the carrier union
    and the per-coarse-block choice sums collapse into closed products.
    The defining property is the pointwise identity
        sum_X I^{Lambda \\ hat X} K(X)
          = exp(e_next |Lambda|_j) sum_U (I')^{Lambda \\ hat U} K#(U).
    """

    factorizes = True

    def __init__(self, state, K, e_next, sigma_next, budget=2_000_000):
        super().__init__(state.lat, state.scale + 1)
        if state.scale + 1 > state.lat.N:
            raise GeometryError("no coarser block scale available")
        self.state = state
        self.K = K
        self.e_next = float(e_next)
        self.sigma_next = float(sigma_next)
        self.budget = budget
        j = state.scale
        lat = state.lat
        self.parents = block_parents(lat, j)
        cat = K.support(budget)
        self.cat_large = [X for X in cat if X.block_count > 2**lat.dim]
        self.cat_small = [X for X in cat if X.block_count <= 2**lat.dim]
        self._weight_cache = {}

    field_mode = "raw"

    def _weights(self, phi, xi):
        key = (
            np.asarray(phi).tobytes(),
            None if xi is None else np.asarray(xi).tobytes(),
        )
        if key not in self._weight_cache:
            if len(self._weight_cache) > 8:
                self._weight_cache.clear()
            self._weight_cache[key] = block_weights(
                self.state, phi, xi, self.e_next, self.sigma_next
            )
        return self._weight_cache[key]

    def kernel(self, X):
        def fn(phi):
            return self.value(X, phi, None)

        return CallableKernel(fn)

    def support(self, budget=200_000):
        return connected_polymers(
            self.lat, self.scale,
            max_blocks=self.lat.block_count(self.scale),
            budget=budget,
        )

    def _skeleton(self, U):
        """Field-independent combinatorics of the resummation at U."""
        key = U.blocks.tobytes()
        hit = getattr(self, "_skeleton_cache", None)
        if hit is None:
            hit = self._skeleton_cache = {}
        if key in hit:
            return hit[key]
        lat = self.lat
        j = self.state.scale
        coarse_ids = U.block_ids()
        n_coarse = len(coarse_ids)
        comps = connected_components(U).members
        comp_masks = [
            np.array([int(D) in {int(c_) for c_ in c.block_ids()}
                      for D in coarse_ids])
            for c in comps
        ]
        blocks_by_D = [np.flatnonzero(self.parents == D) for D in coarse_ids]
        in_U_parent = U.blocks[self.parents]
        large_ok = [
            X for X in self.cat_large if bool(np.all(in_U_parent[X.blocks]))
        ]
        pairs = []
        for Y in self.cat_small:
            for b in Y.block_ids():
                if in_U_parent[b]:
                    pairs.append((int(b), Y))
        u_hat = hat(U)
        records = []
        count = 0
        for fam_large, fam_pairs in _families(j, large_ok, pairs, self.budget):
            count += 1
            if count > self.budget:
                raise RuntimeError("reblocking budget exceeded")
            members = [(Y, 1.0) for Y in fam_large]
            members += [(Y, 1.0 / Y.block_count) for _, Y in fam_pairs]
            X = Polymer.empty(lat, j)
            for m_ in fam_large:
                X = X.union(m_)
            for _, Y in fam_pairs:
                X = X.union(Y)
            nb = lat.block_count(j)
            if X.is_empty():
                x_mask = np.zeros(nb, dtype=bool)
                ring = np.zeros(nb, dtype=bool)
                z_region = np.ones(nb, dtype=bool)
            else:
                x_mask = X.blocks
                hat_mask = hat(X).blocks
                bracket_mask = angle_bracket(X).blocks
                # separation needed by the resummation: the bracket region
                # must stay inside the hat of U
                if not np.all(u_hat.blocks[self.parents[bracket_mask]]):
                    raise GeometryError(
                        "bracket region escapes the coarse hat; L too small"
                    )
                corridor = hat_mask & ~x_mask
                ring = bracket_mask & ~x_mask  # carries the e-constant
                z_region = ~bracket_mask
            fixed = np.zeros(nb, dtype=bool)
            for m_ in fam_large:
                fixed |= m_.blocks
            for b, _ in fam_pairs:
                fixed[b] = True
            if X.is_empty():
                corridor = np.zeros(nb, dtype=bool)
            sel_first = []
            sel_z = []
            ring_counts = np.empty(n_coarse, dtype=np.int64)
            forced = np.zeros(n_coarse, dtype=bool)
            for i in range(n_coarse):
                bs = blocks_by_D[i]
                sel_first.append(bs[(z_region | (ring & ~corridor))[bs]])
                sel_z.append(bs[z_region[bs]])
                ring_counts[i] = np.count_nonzero(ring[bs])
                forced[i] = bool(fixed[bs].any())
            records.append(
                {
                    "members": members,
                    "sel_first": sel_first,
                    "sel_z": sel_z,
                    "ring_counts": ring_counts,
                    "forced": forced,
                    "n_union": int(np.count_nonzero(in_U_parent | x_mask)),
                }
            )
        # admissible V subsets per forced-pattern are enumerated at
        # evaluation time; precompute the component constraint data
        skel = {"records": records, "comp_masks": comp_masks,
                "n_coarse": n_coarse}
        hit[key] = skel
        return skel

    def value(self, U, phi, xi=None):
        if U.is_empty():
            return 1.0
        I, Itilde = self._weights(phi, xi)
        e_pow = np.exp(self.e_next)
        skel = self._skeleton(U)
        comp_masks = skel["comp_masks"]
        n_coarse = skel["n_coarse"]
        kval_cache = {}

        def k_value(Y):
            key = Y.blocks.tobytes()
            if key not in kval_cache:
                kval_cache[key] = self.K.component_value(Y, phi, xi)
            return kval_cache[key]

        total = 0.0
        for rec in skel["records"]:
            k_prod = 1.0
            for Y, share in rec["members"]:
                k_prod *= k_value(Y) * share
                if k_prod == 0.0:
                    break
            if k_prod == 0.0:
                continue
            g = np.empty(n_coarse)
            h = np.empty(n_coarse)
            forced = rec["forced"]
            for i in range(n_coarse):
                first = float(np.prod(I[rec["sel_first"][i]]))
                tilde_prod = float(np.prod(Itilde[rec["sel_z"][i]]))
                ring_pow = e_pow ** int(rec["ring_counts"][i])
                empty_choice = ring_pow * tilde_prod
                g[i] = first - (0.0 if forced[i] else empty_choice)
                h[i] = (tilde_prod - e_pow ** len(rec["sel_z"][i])) * ring_pow
            e_comp = float(np.exp(-self.e_next * rec["n_union"]))
            v_sum = 0.0
            free = np.flatnonzero(~forced)
            for r in range(len(free) + 1):
                for extra in itertools.combinations(free, r):
                    v_mask = forced.copy()
                    v_mask[list(extra)] = True
                    if not v_mask.any():
                        continue
                    if any(not (v_mask & cm).any() for cm in comp_masks):
                        continue
                    v_sum += float(np.prod(g[v_mask])) * float(
                        np.prod(h[~v_mask])
                    )
            total += k_prod * e_comp * v_sum
        return float(total)


def extraction_reblocking(state, K, e_next, sigma_next, budget=2_000_000):
    """Resum the scale-j polymer expansion at scale j+1.

    Returns the next-scale activity; the identity holds pointwise in the
    fields for any choice of (e_next, sigma_next).
    """
    return ReblockedActivity(state, K, e_next, sigma_next, budget=budget)


def grand_sum_plan(state, K, budget=5_000_000):
    """Field-independent enumeration for the fine-scale polymer sum.

    Lists every polymer X with a possibly nonzero activity as a family of
    connected carriers, with the complement of its hat precomputed.
    """
    lat = state.lat
    j = state.scale
    cat = K.support()
    dil = []
    bits = []
    for X in cat:
        # dilate at block level for strict-disjointness tests
        dil.append(_mask_to_int(_block_dilation(lat, j, X.blocks)))
        bits.append(_mask_to_int(X.blocks))
    families = []

    def extend(chosen, occupied, occupied_dil, start):
        if len(families) > budget:
            raise RuntimeError("fine-scale family budget exceeded")
        for i in range(start, len(cat)):
            if dil[i] & occupied or bits[i] & occupied_dil:
                continue
            fam = chosen + (i,)
            families.append(fam)
            extend(fam, occupied | bits[i], occupied_dil | dil[i], i + 1)

    extend(tuple(), 0, 0, 0)
    comp_ids = []
    for fam in families:
        union = np.zeros(lat.block_count(j), dtype=bool)
        for i in fam:
            union |= cat[i].blocks
        hat_mask = hat(Polymer(lat, j, union)).blocks
        comp_ids.append(np.flatnonzero(~hat_mask))
    return {"catalog": cat, "families": families, "complements": comp_ids}


def _block_dilation(lat, scale, block_mask):
    from .polymers import _BlockGrid

    grid = _BlockGrid(lat, scale)
    out = np.zeros_like(block_mask)
    for b in np.flatnonzero(block_mask):
        out[grid.neighbors[b]] = True
    return out


def _mask_to_int(mask):
    return int.from_bytes(np.packbits(mask.astype(np.uint8)).tobytes(),
                          "little")


def grand_sum(state, K, phi, xi=None, plan=None):
    """sum_X I^{Lambda \\ hat X} K(X) over all polymers at the state's scale.

    Exhaustive over the activity's support; use small tori.  A precomputed
    plan (grand_sum_plan) amortizes the combinatorics across fields.
    """
    if plan is None:
        plan = grand_sum_plan(state, K)
    I, _ = block_weights(state, phi, xi, 0.0, state.sigma)
    cat = plan["catalog"]
    k_vals = [K.component_value(X, phi, xi) for X in cat]
    total = float(np.prod(I))  # X = empty, K = 1
    for fam, comp in zip(plan["families"], plan["complements"]):
        val = 1.0
        for i in fam:
            val *= k_vals[i]
            if val == 0.0:
                break
        if val:
            total += val * float(np.prod(I[comp]))
    return float(total)


def coarse_grand_sum(state, K_sharp, phi, xi=None):
    """exp(e|Lambda|_j) sum_U (I')^{Lambda \\ hat U} K#(U) at scale j+1."""
    lat = state.lat
    j = state.scale
    e_next = K_sharp.e_next
    sigma_next = K_sharp.sigma_next
    n_coarse = lat.block_count(j + 1)
    Iprime = np.array(
        [
            coarse_block_weight(state, D, phi, xi, e_next, sigma_next)
            for D in range(n_coarse)
        ]
    )
    total = 0.0
    for bits in itertools.product((False, True), repeat=n_coarse):
        U = Polymer(lat, j + 1, np.array(bits))
        hat_mask = hat(U).blocks if not U.is_empty() else U.blocks
        weight = float(np.prod(Iprime[~hat_mask]))
        total += weight * K_sharp.value(U, phi, xi)
    scale_factor = np.exp(e_next * lat.block_count(j))
    return float(scale_factor * total)


# ---------------------------------------------------------------------------
# conditional expectation step
# ---------------------------------------------------------------------------


def _dirichlet_cov_full(lat, mask, m):
    return dirichlet_green(lat, mask, m).embed_full(lat.site_count)


def conditional_expectation_step(K_sharp, state, samples=2000, seed=None,
                                 backend="auto"):
    """Integrate each coarse component's fluctuation field.

    Returns the next-scale activity K'(U) = prod_V E[K#(V) | (V+)^c] with
    V the connected components of U.  Exact when the input activity
    exposes quadratic or trigonometric kernels; otherwise each component
    expectation is a seeded Monte Carlo average over the Dirichlet field
    on V+ (the full-torus component integrates the free field itself).
    """
    lat = state.lat
    next_scale = state.scale + 1
    m = state.mass
    if backend == "auto":
        exact = isinstance(K_sharp, DictActivity) and all(
            K_sharp.kernel(X) is not None and K_sharp.kernel(X).exact
            for X in K_sharp.support()
        )
        backend = "exact" if exact else "mc"

    if backend == "exact":
        def condition(X, ker):
            plus = _plus_mask(lat, X)
            if plus.all():
                if m <= 0:
                    raise GeometryError("full-torus integration needs m > 0")
                cov = np.linalg.inv(
                    GaussianSpec.free_field(lat, m).precision
                )
            else:
                cov = _dirichlet_cov_full(lat, plus, m)
            pre = None
            if K_sharp.field_mode == "smoothed":
                pre = poisson_kernel_full(lat, _plus_mask(lat, X), m)
            return ker.shifted_expectation(cov, pre=pre)

        return K_sharp.map_kernels(condition, field_mode="smoothed",
                                   mass=m)

    seed = seed if seed is not None else RGSeed(0)

    class Stepped(PolymerActivity):
        factorizes = True
        field_mode = "raw"

        def __init__(self):
            super().__init__(lat, next_scale)

        def support(self, budget=200_000):
            return K_sharp.support(budget)

        def kernel(self, X):
            def fn(phi):
                return self.component_value(X, phi, None)

            return CallableKernel(fn)

        def component_value(self, V, phi, xi):
            plus = _plus_mask(lat, V)
            # independent deterministic stream per component
            stream = int.from_bytes(V.blocks.tobytes()[:6], "little")
            base = seed.seed if isinstance(seed, RGSeed) else int(seed)
            gen = RGSeed(base, stream).generator()
            if plus.all():
                if m <= 0:
                    raise GeometryError("full-torus integration needs m > 0")
                spec = GaussianSpec.free_field(lat, m)
                draws = sample_gff(spec, gen, samples)
                vals = [K_sharp.value(V, d, xi) for d in draws]
                return float(np.mean(vals))
            base = harmonic_extension(lat, plus, m, np.asarray(phi, float))
            spec = GaussianSpec.dirichlet(lat, plus, m)
            draws = sample_gff(spec, gen, samples)
            vals = [K_sharp.value(V, base + d, xi) for d in draws]
            return float(np.mean(vals))

    return Stepped()


# ---------------------------------------------------------------------------
# Taylor expansion, localization and coupling extraction
# ---------------------------------------------------------------------------


@dataclass
class TaylorData:
    """Second-order expansion data of a functional around the zero field."""

    kernel: FieldKernel

    def constant(self, n):
        return self.kernel.value(np.zeros(n))

    def leading(self, psi):
        return self.kernel.taylor2_value(np.asarray(psi, dtype=float))

    def remainder(self, psi):
        psi = np.asarray(psi, dtype=float)
        return self.kernel.value(psi) - self.leading(psi)


def taylor2(functional, n_sites=None):
    """Second-order Taylor data and remainder evaluator at the zero field."""
    if not isinstance(functional, FieldKernel):
        functional = CallableKernel(functional)
    return TaylorData(functional)


def conditioned_functional(state, K, X, U_plus_mask):
    """The kernel psi -> E_zeta[K(X, psi + pre zeta)] for zeta the
    Dirichlet field on U+, as an exact kernel when the class allows."""
    lat = state.lat
    m = state.mass
    ker = K.kernel(X)
    if ker is None:
        return QuadraticKernel.zero(lat.site_count)
    if U_plus_mask.all():
        if m <= 0:
            raise GeometryError("full-torus integration needs m > 0")
        cov = np.linalg.inv(GaussianSpec.free_field(lat, m).precision)
    else:
        cov = _dirichlet_cov_full(lat, U_plus_mask, m)
    pre = None
    if K.field_mode == "smoothed" and X.scale > 0:
        pre = poisson_kernel_full(lat, _plus_mask(lat, X), m)
    if ker.exact:
        return ker.shifted_expectation(cov, pre=pre)
    gen = RGSeed(977, X.blocks.tobytes().__hash__() % 2**32).generator()
    return ker.shifted_expectation(cov, pre=pre, rng=gen, samples=2000)


def chart_coordinates(lat, center_index, region_mask=None):
    """Coordinate functions on a patch chart around a site.

    Returns an array (2d, site_count): row k < d is the k-th relative
    coordinate, row d+k its negative (so that d_nu x_mu = delta_{nu,mu} -
    delta_{nu,-mu} away from the wrap seam).  With a region mask given,
    fails if the region (plus one layer) reaches the seam, where the chart
    stops being linear.
    """
    from .geometry import dilate

    rel = lat.wrap(lat.coords - lat.coords_of(center_index)).astype(float)
    if region_mask is not None:
        grown = dilate(lat, np.asarray(region_mask, dtype=bool))
        if np.abs(rel[grown]).max() >= lat.half:
            raise GeometryError("patch chart would wrap the torus")
    out = np.empty((2 * lat.dim, lat.site_count))
    for k in range(lat.dim):
        out[k] = rel[:, k]
        out[lat.dim + k] = -rel[:, k]
    return out


def localized_field(lat, charts, psi, z):
    """The linearization (1/2) sum_mu x_mu d_mu psi(z) of a field at z."""
    out = np.zeros(lat.site_count)
    for mu in range(lat.n_directions):
        d_mu = psi[lat.shift_index(z, mu)] - psi[z]
        out += 0.5 * charts[mu] * d_mu
    return out


def loc_operator(state, K, B, X, U, samples=2000):
    """Split the second-order data of the conditioned activity at a block.

    Returns (coefficients, loc evaluator, nonloc evaluator): coefficients
    is the (2d, 2d) matrix c[mu, nu] multiplying d_mu psi(z) d_nu psi(z);
    loc(psi) sums it over z in B; nonloc(psi) is the chart-replacement
    error, vanishing on fields with constant gradient.
    """
    lat = state.lat
    j = state.scale
    if X.scale != j or B.scale != j:
        raise ValueError("B and X must live at the state's scale")
    if not X.contains(B):
        raise ValueError("B must be a block of X")
    u_plus = _plus_mask(lat, U)
    cond = conditioned_functional(state, K, X, u_plus)
    b_sites = np.flatnonzero(B.sites())
    center = int(b_sites[len(b_sites) // 2])
    charts = chart_coordinates(lat, center, u_plus)
    zero = np.zeros(lat.site_count)
    n_dir = lat.n_directions
    coeff = np.empty((n_dir, n_dir))
    for mu in range(n_dir):
        for nu in range(mu, n_dir):
            c = cond.derivative(zero, [charts[mu], charts[nu]])
            coeff[mu, nu] = coeff[nu, mu] = c / (8.0 * len(b_sites))

    def loc(psi):
        psi = np.asarray(psi, dtype=float)
        total = 0.0
        for z in b_sites:
            grads = np.array(
                [psi[lat.shift_index(z, mu)] - psi[z] for mu in range(n_dir)]
            )
            total += grads @ coeff @ grads
        return float(total)

    def nonloc(psi):
        psi = np.asarray(psi, dtype=float)
        total = 0.0
        for z in b_sites:
            ell = localized_field(lat, charts, psi, int(z))
            delta = psi - ell
            total += 0.5 * (
                cond.derivative(zero, [delta, psi])
                + cond.derivative(zero, [delta, ell])
            )
        return float(total / len(b_sites))

    return coeff, loc, nonloc


@dataclass
class AlphaReport:
    matrix: np.ndarray          # c[mu, nu] at the central block
    alpha_gradsq: float         # scalar in the gradient-square basis
    symmetry_residual: float
    per_block: dict             # block id -> matrix
    backend: str


def alpha_extraction(state, K, D_id=None, samples=4000, seed=None,
                     max_carrier_blocks=None):
    """Quadratic coefficient of the localized conditioned activity.

    For each fine block B of a coarse block D, sums the second derivative
    of E[K(X, .)] over small polymers X containing B, probed along the
    chart coordinate pairs.  Exact on quadratic/trig kernels, seeded Monte
    Carlo otherwise.  The scalar alpha_gradsq matches the coefficient of
    (1/4) sum_{x,e} (d_e psi)^2 on linear fields, so the coupling update
    sigma' = sigma - alpha_gradsq removes the extracted quadratic part.
    max_carrier_blocks truncates the small-set sum (a documented
    approximation for measurement-only runs; exact runs leave it unset).
    """
    lat = state.lat
    j = state.scale
    if D_id is None:
        center = int(lat.index_of(np.zeros(lat.dim, dtype=int)))
        D_id = int(lat.block_index_of_sites(j + 1, center))
    D = Polymer.from_blocks(lat, j + 1, [D_id])
    d_plus = _plus_mask(lat, D)
    m = state.mass
    if d_plus.all():
        if m <= 0:
            raise GeometryError("full-torus integration needs m > 0")
        cov = np.linalg.inv(GaussianSpec.free_field(lat, m).precision)
    else:
        cov = _dirichlet_cov_full(lat, d_plus, m)

    fine_ids = np.flatnonzero(
        block_parents(lat, j) == D_id
    )
    n_dir = lat.n_directions
    per_block = {}
    backend = "exact"
    gen = (seed.generator() if isinstance(seed, RGSeed)
           else np.random.default_rng(seed))
    for b in fine_ids:
        B = state.block_polymer(int(b))
        b_sites = np.flatnonzero(B.sites())
        center = int(b_sites[len(b_sites) // 2])
        charts = chart_coordinates(lat, center)
        total = np.zeros((n_dir, n_dir))
        for X in small_polymers_containing(lat, j, int(b)):
            if max_carrier_blocks and X.block_count > max_carrier_blocks:
                continue
            if not K.supports(X):
                continue
            ker = K.kernel(X)
            if ker is None:
                continue
            chart_coordinates(lat, center, hat(X).sites())  # wrap guard
            pre = None
            if K.field_mode == "smoothed" and j > 0:
                pre = poisson_kernel_full(lat, _plus_mask(lat, X), m)
            if ker.exact:
                cond = ker.shifted_expectation(cov, pre=pre)
            else:
                backend = "mc"
                cond = ker.shifted_expectation(
                    cov, pre=pre, rng=gen, samples=samples
                )
            zero = np.zeros(lat.site_count)
            for mu in range(n_dir):
                for nu in range(mu, n_dir):
                    c = cond.derivative(zero, [charts[mu], charts[nu]])
                    total[mu, nu] += c
                    if nu > mu:
                        total[nu, mu] += c
        per_block[int(b)] = total / (8.0 * len(b_sites))

    center = int(lat.index_of(np.zeros(lat.dim, dtype=int)))
    center_block = int(lat.block_index_of_sites(j, center))
    mat = per_block.get(center_block)
    if mat is None:
        mat = per_block[int(fine_ids[len(fine_ids) // 2])]
    d = lat.dim
    # symmetry pattern: c[mu, nu] = (a/2)(delta_{mu nu} - delta_{mu, -nu})
    # in the signed-chart convention; on linear fields the localized
    # quadratic then equals (a) sum_{mu in E} v_mu^2 per site, which is
    # (4a) times the (1/4) sum_{x,e} (d_e psi)^2 normalization
    a = float(np.mean([mat[k, k] - mat[k, (k + d) % n_dir] for k in
                       range(n_dir)]))
    pattern = np.zeros((n_dir, n_dir))
    for mu in range(n_dir):
        pattern[mu, mu] = 0.5 * a
        pattern[mu, (mu + d) % n_dir] = -0.5 * a
    residual = float(np.abs(mat - pattern).max())
    return AlphaReport(
        matrix=mat,
        alpha_gradsq=4.0 * a,
        symmetry_residual=residual,
        per_block=per_block,
        backend=backend,
    )


def delta_E(state, b_id, D_id=None):
    """sum_{x in B, e} Var(d_e (P_{B+} zeta)(x)) for zeta the Dirichlet
    field on the parent's + neighborhood (exact trace)."""
    lat = state.lat
    j = state.scale
    if D_id is None:
        D_id = int(block_parents(lat, j)[b_id])
    D = Polymer.from_blocks(lat, j + 1, [D_id])
    d_plus = _plus_mask(lat, D)
    m = state.mass
    if d_plus.all():
        if m <= 0:
            raise GeometryError("full-torus integration needs m > 0")
        cov = np.linalg.inv(GaussianSpec.free_field(lat, m).precision)
    else:
        cov = _dirichlet_cov_full(lat, d_plus, m)
    B = state.block_polymer(int(b_id))
    if j == 0:
        P = np.eye(lat.site_count)
    else:
        P = poisson_kernel_full(lat, _plus_mask(lat, B), m)
    total = 0.0
    for x in np.flatnonzero(B.sites()):
        for e in range(lat.n_directions):
            row = P[lat.shift_index(x, e), :] - P[x, :]
            total += float(row @ cov @ row)
    return total


def taylor_constant(state, K, B_id, D_id=None, max_carrier_blocks=None):
    """sum over small X containing B of E[K(X, zeta)] / |X|_j, the constant
    part of the conditioned activity's expansion.  max_carrier_blocks
    truncates the small-set sum for measurement-only runs."""
    lat = state.lat
    j = state.scale
    if D_id is None:
        D_id = int(block_parents(lat, j)[B_id])
    D = Polymer.from_blocks(lat, j + 1, [D_id])
    d_plus = _plus_mask(lat, D)
    total = 0.0
    zero = np.zeros(lat.site_count)
    for X in small_polymers_containing(lat, j, int(B_id)):
        if max_carrier_blocks and X.block_count > max_carrier_blocks:
            continue
        if not K.supports(X):
            continue
        cond = conditioned_functional(state, K, X, d_plus)
        total += cond.value(zero) / X.block_count
    return total


def coupling_update(state, alpha_report, K, max_carrier_blocks=None):
    """Canonical next couplings: sigma' = sigma - alpha and the constant
    that cancels the explicit per-block linear contributions.

    e_next averages c_K(B) - (sigma/4) deltaE(B) over the fine blocks of
    the central coarse block; the full per-block tables are reported so
    translation non-invariance is visible.  The accumulator advances by
    e_next |Lambda|_j.  Neither coupling depends on the shift field.
    """
    lat = state.lat
    j = state.scale
    center = int(lat.index_of(np.zeros(lat.dim, dtype=int)))
    D_id = int(lat.block_index_of_sites(j + 1, center))
    fine_ids = np.flatnonzero(block_parents(lat, j) == D_id)
    contributions = {}
    for b in fine_ids:
        dE = delta_E(state, int(b), D_id)
        cK = taylor_constant(state, K, int(b), D_id,
                             max_carrier_blocks=max_carrier_blocks)
        contributions[int(b)] = {
            "delta_E": dE,
            "activity_constant": cK,
            "e_contribution": cK - 0.25 * state.sigma * dE,
        }
    e_next = float(
        np.mean([c["e_contribution"] for c in contributions.values()])
    )
    sigma_next = state.sigma - alpha_report.alpha_gradsq
    new_state = replace(
        state,
        scale=j + 1,
        sigma=sigma_next,
        e_accum=state.e_accum + e_next * lat.block_count(j),
    )
    report = {
        "sigma_next": sigma_next,
        "e_next": e_next,
        "per_block": contributions,
        "delta_E_center": contributions[int(fine_ids[len(fine_ids) // 2])][
            "delta_E"
        ],
    }
    return new_state, report


def linearization_split(state, K, U, phi, xi=None):
    """The three linear-response parts of the composed step at the trivial
    fixed point, evaluated at a coarse polymer and a field.

    part1 collects large connected carriers whose closure is U; part2 the
    Taylor remainders of small carriers (shared over their blocks); part3
    the Taylor leading terms (the sigma/e explicit terms vanish at the
    base point and are exposed separately via explicit_part).
    """
    lat = state.lat
    j = state.scale
    if U.scale != j + 1:
        raise ValueError("U must be a next-scale polymer")
    u_plus = _plus_mask(lat, U)
    psi = smoothed_field(lat, U, state.mass, phi, xi)
    support = K.support()
    part1 = 0.0
    for X in support:
        if X.block_count > 2**lat.dim and closure(X) == U:
            cond = conditioned_functional(state, K, X, u_plus)
            part1 += cond.value(psi)
    part2 = 0.0
    part3 = 0.0
    parents = block_parents(lat, j)
    small_keys = {
        X.blocks.tobytes(): X
        for X in support
        if X.block_count <= 2**lat.dim
    }
    for b in np.flatnonzero(U.blocks[parents]):
        for X in small_polymers_containing(lat, j, int(b)):
            hit = small_keys.get(X.blocks.tobytes())
            if hit is None:
                continue
            cond = conditioned_functional(state, K, hit, u_plus)
            tay = TaylorData(cond)
            share = 1.0 / hit.block_count
            part2 += share * tay.remainder(psi)
            part3 += share * tay.leading(psi)
    return {"large_sets": part1, "taylor_remainder": part2,
            "taylor_leading": part3,
            "total": part1 + part2 + part3}


def explicit_part(state, e_next, sigma_next, U, phi, xi=None):
    """The sigma/e explicit linear terms of the step at a coarse polymer:
    per fine block, -e_next - (sigma/4)(grad-square + deltaE) +
    (sigma_next/4) grad-square, with the gradient square of the coarse
    smoothed field."""
    lat = state.lat
    j = state.scale
    psi = smoothed_field(lat, U, state.mass, phi, xi)
    parents = block_parents(lat, j)
    total = 0.0
    site_block = lat.block_index_of_sites(j)
    per_site = np.zeros(lat.site_count)
    for e in range(lat.n_directions):
        per_site += (psi[lat.shifts[e]] - psi) ** 2
    per_block = np.bincount(site_block, weights=per_site,
                            minlength=lat.block_count(j))
    for b in np.flatnonzero(U.blocks[parents]):
        quad = per_block[b]
        dE = delta_E(state, int(b))
        total += (
            -e_next
            - 0.25 * state.sigma * (quad + dE)
            + 0.25 * sigma_next * quad
        )
    return float(total)
