"""Dipole-gas integrand: gradient energy V, cosine interaction W, the tuned
couplings, the shift field xi, the initial per-site split into I0/K0, and
the product-to-subset-sum identity behind it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Grid, SiteField, as_values
from .gaussian import GaussianSpec, RGSeed, sample_gff
from .operators import assemble_torus_laplacian, torus_covariance

__all__ = [
    "ModelParams",
    "TestFunctionSpec",
    "ExternalField",
    "local_V",
    "local_W",
    "build_xi",
    "I0_K0",
    "mayer_identity_check",
    "generating_function_mc",
    "read_field_file",
    "write_field_file",
]


@dataclass
class ModelParams:
    """Couplings of the lattice dipole model.

    epsilon = 1/(1+sigma0) is maintained exactly; sigma0 is the tuning of
    the Gaussian reference measure and z, beta the activity and the
    inverse-temperature-like constant in the cosine interaction.
    """

    z: float = 0.0
    beta: float = 1.0
    sigma0: float = 0.0
    m: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.sigma0 <= -1:
            raise ValueError("sigma0 must exceed -1")

    @property
    def epsilon(self):
        return 1.0 / (1.0 + self.sigma0)

    @property
    def cosine_frequency(self):
        """sqrt(beta (1 + sigma0)), the frequency seen by the combined field."""
        return float(np.sqrt(self.beta * (1.0 + self.sigma0)))


@dataclass
class TestFunctionSpec:
    """A smooth mean-zero periodic profile on the unit torus, plus the
    lattice scale at which it is sampled."""

    __test__ = False  # not a pytest case despite the name

    name: str = "sine"
    mode: tuple = (1, 0)
    amplitude: float = 1.0

    def continuum(self, points):
        """Evaluate the profile at points in [-1/2, 1/2]^d."""
        points = np.asarray(points, dtype=float)
        if self.name == "sine":
            phase = 2.0 * np.pi * points @ np.asarray(self.mode, dtype=float)
            return self.amplitude * np.sin(phase)
        if self.name == "cosine":
            phase = 2.0 * np.pi * points @ np.asarray(self.mode, dtype=float)
            return self.amplitude * np.cos(phase)
        raise ValueError(f"unknown test function {self.name!r}")

    def lattice_field(self, lat):
        """f(x) = side^{-(d+2)/2} f~(x / side) on the lattice, checked
        mean-zero."""
        side = lat.side
        scale = side ** (-(lat.dim + 2) / 2.0)
        vals = scale * self.continuum(lat.coords / side)
        mean = vals.mean()
        if abs(mean) > 1e-12 * max(np.abs(vals).max(), 1.0):
            vals = vals - mean
        return vals


@dataclass
class ExternalField:
    """The shift field and where it came from."""

    xi: np.ndarray
    f: np.ndarray
    params: ModelParams
    residual_inf: float = field(default=np.nan)


def local_V(lat, mask, psi):
    """Quarter of the directed gradient square over the set:
    (1/4) sum_{x in X, e} (d_e psi(x))^2."""
    vals = as_values(psi)
    mask = np.asarray(mask, dtype=bool)
    _require_neighborhood(lat, mask, psi)
    total = 0.0
    for e in range(lat.n_directions):
        diff = vals[lat.shifts[e]] - vals
        total += float((diff[mask] ** 2).sum())
    return 0.25 * total


def local_W(lat, mask, psi, beta):
    """sum_{x in X, e} cos(sqrt(beta) d_e psi(x))."""
    vals = as_values(psi)
    mask = np.asarray(mask, dtype=bool)
    _require_neighborhood(lat, mask, psi)
    root = np.sqrt(beta)
    total = 0.0
    for e in range(lat.n_directions):
        diff = vals[lat.shifts[e]] - vals
        total += float(np.cos(root * diff[mask]).sum())
    return total


def _require_neighborhood(lat, mask, psi):
    if isinstance(psi, SiteField) and psi.domain is not None:
        needed = mask.copy()
        for e in range(lat.n_directions):
            needed |= np.isin(np.arange(lat.site_count), lat.shifts[e][mask])
        if not np.all(psi.domain[needed]):
            raise ValueError("field not defined on the set and its neighbors")


def build_xi(spec, params, lat):
    """Solve (-sqrt(eps) Delta_m) xi = f for the shift field.

    m = 0 is allowed for mean-zero f (zero-mean pseudo-inverse).  The sup
    norms of xi and its gradient are available via sup_norms; size-scaling
    of those norms is compared across lattices by the caller.
    """
    f = spec.lattice_field(lat)
    root_eps = np.sqrt(params.epsilon)
    A_m = assemble_torus_laplacian(lat, params.m).matrix
    if params.m > 0:
        xi = np.linalg.solve(root_eps * A_m, f)
    else:
        if abs(f.mean()) > 1e-12 * max(np.abs(f).max(), 1e-300):
            raise ValueError("m = 0 requires mean-zero f")
        C = torus_covariance(lat, 0.0).matrix
        xi = C @ f / root_eps
    residual = np.abs(root_eps * (A_m @ xi) - f).max()
    return ExternalField(xi=xi, f=f, params=params, residual_inf=residual)


def sup_norms(lat, xi):
    """(sup |xi|, sup |grad xi|) over the lattice."""
    xi = as_values(xi)
    grad = 0.0
    for e in range(lat.n_directions):
        grad = max(grad, float(np.abs(xi[lat.shifts[e]] - xi).max()))
    return float(np.abs(xi).max()), grad


def I0_K0(params, lat, psi):
    """Per-site factors of the initial split of the integrand.

    Returns (i0, k0): i0[x] = exp(-(sigma0/4) sum_e (d_e psi(x))^2) and
    k0[x] = i0[x] (exp(z W({x}, psi / sqrt(eps))) - 1).  Subset values
    multiply: K0(X) = prod_{x in X} k0[x].  Accepts field batches with the
    site axis last.
    """
    vals = as_values(psi)
    grad_sq = np.zeros_like(vals)
    w_site = np.zeros_like(vals)
    freq = params.cosine_frequency
    for e in range(lat.n_directions):
        diff = vals[..., lat.shifts[e]] - vals
        grad_sq += diff**2
        w_site += np.cos(freq * diff)
    i0 = np.exp(-0.25 * params.sigma0 * grad_sq)
    k0 = i0 * np.expm1(params.z * w_site)
    return i0, k0


def mayer_identity_check(params, lat, psi):
    """Pointwise product-to-subset-sum identity on a small torus.

    Checks exp(z W(Lambda) - sigma V(Lambda)) = sum_X I0(Lambda\\X) K0(X)
    by exhaustive enumeration of the 2^|Lambda| subsets; returns the
    relative residual.
    """
    n = lat.site_count
    if n > 16:
        raise ValueError("exhaustive subset sum limited to 16 sites")
    vals = as_values(psi)
    i0, k0 = I0_K0(params, lat, vals)
    lhs = np.exp(
        params.z * local_W(lat, lat.full_set(), vals / np.sqrt(params.epsilon),
                           params.beta)
        - params.sigma0 * local_V(lat, lat.full_set(), vals)
    )
    # subset products by binary dynamic programming
    prod_i = _subset_products(i0)
    prod_k = _subset_products(k0)
    full = (1 << n) - 1
    total = 0.0
    for X in range(1 << n):
        total += prod_i[full ^ X] * prod_k[X]
    return abs(total - lhs) / abs(lhs)


def _subset_products(site_values):
    n = len(site_values)
    out = np.ones(1 << n)
    for mask in range(1, 1 << n):
        low = mask & -mask
        out[mask] = out[mask ^ low] * site_values[low.bit_length() - 1]
    return out


def generating_function_mc(spec, params, lat, samples, rng,
                           include_prefactor=True):
    """Monte Carlo for the tilted-to-untilted partition ratio.

    Samples the free field with covariance (-Delta+m^2)^{-1} and uses the
    same draws for numerator and denominator (common random numbers):
        ratio = E[exp(-sigma V(phi+xi) + z W((phi+xi)/sqrt(eps)))]
              / E[exp(-sigma V(phi)    + z W(phi/sqrt(eps)))].
    Returns the ratio with a linearized standard error, the assembled
    generating value including the Gaussian prefactor
    exp((1/2) sum f (-eps Delta_m)^{-1} f), and the exact z = 0 reference
    when requested.
    """
    if params.m <= 0:
        raise ValueError("sampling needs m > 0")
    xi_field = build_xi(spec, params, lat)
    xi = xi_field.xi
    f = xi_field.f
    spec_g = GaussianSpec.free_field(lat, params.m)
    fields = sample_gff(spec_g, rng, samples)
    root_eps = np.sqrt(params.epsilon)

    def integrand(batch, shift):
        out = np.empty(len(batch))
        for i, phi in enumerate(batch):
            psi = phi + shift
            out[i] = np.exp(
                -params.sigma0 * local_V(lat, lat.full_set(), psi)
                + params.z
                * local_W(lat, lat.full_set(), psi / root_eps, params.beta)
            )
        return out

    num = integrand(fields, xi)
    den = integrand(fields, np.zeros(lat.site_count))
    ratio = num.mean() / den.mean()
    # delta-method standard error with common random numbers
    r = num / num.mean() - den / den.mean()
    stderr = float(ratio * r.std(ddof=1) / np.sqrt(samples))
    out = {"ratio": float(ratio), "stderr": stderr, "samples": samples}
    if include_prefactor:
        A = assemble_torus_laplacian(lat, params.m).matrix
        pref = float(np.exp(0.5 * f @ np.linalg.solve(params.epsilon * A, f)))
        out["prefactor"] = pref
        out["generating_value"] = pref * float(ratio)
    return out


def exact_ratio_z0(spec, params, lat):
    """Closed form of the ratio at z = 0 (purely Gaussian integrals).

    E[e^{-sigma V(phi+xi)}]/E[e^{-sigma V(phi)}] with V = (1/2) phi^T
    (-Delta) phi: completing the square in the tilted Gaussian gives
    exp(-(sigma/2) xi^T B xi + (sigma^2/2) (B xi)^T (A + sigma B)^{-1}
    (B xi)) with A the massive precision and B = -Delta.
    """
    xi = build_xi(spec, params, lat).xi
    A = assemble_torus_laplacian(lat, params.m).matrix
    B = assemble_torus_laplacian(lat, 0.0, dense=True).matrix
    sig = params.sigma0
    M = A + sig * B
    b = B @ xi
    val = -0.5 * sig * (xi @ b) + 0.5 * sig**2 * (b @ np.linalg.solve(M, b))
    return float(np.exp(val))


FIELD_FILE_MAGIC = "dipole-field v1"


def write_field_file(path, lat, values):
    values = as_values(values)
    with open(path, "w") as fh:
        fh.write(f"{FIELD_FILE_MAGIC} d={lat.dim} side={lat.side}\n")
        for v in values:
            fh.write(f"{float(v)!r}\n")


def read_field_file(path, lat=None):
    """Read a plain-text field file; returns (grid, values)."""
    with open(path) as fh:
        header = fh.readline().strip()
        parts = header.split()
        if " ".join(parts[:2]) != FIELD_FILE_MAGIC:
            raise ValueError(f"bad field file header: {header!r}")
        meta = dict(p.split("=", 1) for p in parts[2:])
        dim = int(meta["d"])
        side = int(meta["side"])
        grid = lat if lat is not None else Grid(dim, side)
        if grid.dim != dim or grid.side != side:
            raise ValueError("field file does not match the lattice")
        values = np.array([float(line) for line in fh if line.strip()])
    if len(values) != grid.site_count:
        raise ValueError("field file has the wrong number of values")
    return grid, values
