"""Massive lattice Laplacians, Green's functions, Poisson kernels and the
discrete-harmonic-function measurements built on them.

Dense operators are used up to a few thousand unknowns; larger domains go
through sparse factorizations or FFT diagonalization (periodic case).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Grid, distance_field, outer_boundary

__all__ = [
    "LinearMap",
    "EdgeCoefficients",
    "SingularOperatorError",
    "assemble_torus_laplacian",
    "torus_covariance",
    "torus_green_fft",
    "dirichlet_green",
    "poisson_kernel",
    "harmonic_extension",
    "variable_coefficient_green",
    "harmonic_gradient_bound_check",
    "mean_value_bound_check",
    "caccioppoli_check",
    "greens_decay_fit",
    "periodization_tail_check",
]

DENSE_LIMIT = 7000  # unknown count above which solves go sparse/column-wise


class SingularOperatorError(np.linalg.LinAlgError):
    """Raised for non-invertible operator requests (e.g. m = 0 on the torus)."""


@dataclass
class LinearMap:
    """Dense operator between site-index subspaces of a lattice."""

    matrix: np.ndarray
    row_sites: np.ndarray
    col_sites: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.row_sites = np.asarray(self.row_sites, dtype=np.int64)
        self.col_sites = np.asarray(self.col_sites, dtype=np.int64)
        if self.matrix.shape != (len(self.row_sites), len(self.col_sites)):
            raise ValueError("matrix shape does not match index spaces")

    def symmetry_defect(self):
        if len(self.row_sites) != len(self.col_sites):
            return np.inf
        a = self.matrix
        scale = max(np.abs(a).max(), 1e-300)
        return float(np.abs(a - a.T).max() / scale)

    def embed_full(self, site_count):
        """Zero-padded site_count x site_count matrix."""
        out = np.zeros((site_count, site_count))
        out[np.ix_(self.row_sites, self.col_sites)] = self.matrix
        return out

    def apply(self, full_vector):
        return self.matrix @ np.asarray(full_vector)[self.col_sites]


@dataclass
class EdgeCoefficients:
    """One weight per directed edge (x, x+e_k), k < dim; symmetric use.

    weights has shape (dim, site_count): weights[k, x] is the coefficient of
    the undirected edge between x and x+e_k.
    """

    lat: Grid
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.lat.dim, self.lat.site_count):
            raise ValueError("need one weight per (axis, site)")

    @classmethod
    def constant(cls, lat, value=1.0):
        return cls(lat, np.full((lat.dim, lat.site_count), float(value)))

    def ellipticity_bounds(self):
        return float(self.weights.min()), float(self.weights.max())

    def check_elliptic(self):
        lo, hi = self.ellipticity_bounds()
        if lo <= 0:
            raise ValueError(f"non-elliptic edge coefficients (min {lo})")
        return lo, hi


def _laplacian_sparse(lat, m, coeffs=None):
    """Periodic (-div a grad + m^2) as a sparse matrix."""
    n = lat.site_count
    rows, cols, vals = [], [], []
    diag = np.full(n, float(m) ** 2)
    idx = np.arange(n)
    for k in range(lat.dim):
        w = coeffs.weights[k] if coeffs is not None else np.ones(n)
        nb = lat.shifts[k]
        diag += w
        rows.append(idx)
        cols.append(nb)
        vals.append(-w)
        rows.append(nb)
        cols.append(idx)
        vals.append(-w)
        np.add.at(diag, nb, w)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat += sp.diags(diag)
    return mat


def assemble_torus_laplacian(lat, m, coeffs=None, dense=True):
    """(-Delta + m^2) with periodic wrap; row sums equal m^2.

    With edge coefficients, the divergence-form operator
    (Delta_a f)(x) = sum_e a_e (f(x+e) - f(x)) is used instead of Delta.
    """
    mat = _laplacian_sparse(lat, m, coeffs)
    if not dense:
        return mat
    return LinearMap(mat.toarray(), np.arange(lat.site_count),
                     np.arange(lat.site_count))


def torus_covariance(lat, m):
    """Dense (-Delta + m^2)^{-1} on the torus; m = 0 gives the zero-mean
    pseudo-inverse."""
    A = assemble_torus_laplacian(lat, m).matrix
    n = lat.site_count
    if m > 0:
        C = np.linalg.inv(A)
    else:
        # invert on the mean-zero subspace
        P = np.eye(n) - np.full((n, n), 1.0 / n)
        C = P @ np.linalg.pinv(A, hermitian=True) @ P
    return LinearMap(C, np.arange(n), np.arange(n))


def torus_green_fft(lat, m, pinned=False):
    """Green's function column C_m(x, 0) via FFT diagonalization.

    Returns the full translation-invariant column as a d-dimensional array
    indexed by canonical coordinates shifted to start at -half.  With
    pinned=True the value at 0 is subtracted (the d = 2 convention).
    m = 0 drops the zero mode (zero-mean inverse).
    """
    n = lat.side
    d = lat.dim
    k = np.arange(n)
    sym = 2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)
    lam = np.zeros((n,) * d)
    for axis in range(d):
        shape = [1] * d
        shape[axis] = n
        lam = lam + sym.reshape(shape)
    lam = lam + float(m) ** 2
    if m > 0:
        inv = 1.0 / lam
    else:
        inv = np.zeros_like(lam)
        mask = lam > 1e-14
        inv[mask] = 1.0 / lam[mask]
    col = np.fft.ifftn(inv).real * 1.0
    # col[delta] is C(x) for x = delta in 0..n-1 coordinates (wrap aware)
    if pinned:
        col = col - col[(0,) * d]
    return col


def green_value(col, coords):
    """Look up C(x) in an FFT column by canonical coordinates."""
    coords = np.asarray(coords, dtype=np.int64)
    n = col.shape[0]
    idx = tuple((coords[..., k]) % n for k in range(coords.shape[-1]))
    return col[idx]


def _interior_operator(lat, mask, m, coeffs=None):
    sites = np.flatnonzero(mask)
    A = _laplacian_sparse(lat, m, coeffs)
    return A[np.ix_(sites, sites)], sites


def dirichlet_green(lat, mask, m, coeffs=None):
    """Inverse of the mask-restricted operator with zero exterior data.

    Symmetric positive definite for any m >= 0 as long as the set is a
    proper subset of the torus.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty domain")
    if mask.all():
        if m <= 0:
            raise SingularOperatorError(
                "full-torus operator is singular at m = 0"
            )
        return torus_covariance(lat, m)
    sub, sites = _interior_operator(lat, mask, m, coeffs)
    n_u = len(sites)
    if n_u <= DENSE_LIMIT:
        G = np.linalg.inv(sub.toarray())
    else:
        lu = spla.splu(sub.tocsc())
        G = lu.solve(np.eye(n_u))
    return LinearMap(G, sites, sites)


def dirichlet_solver(lat, mask, m, coeffs=None):
    """Factorized solver u |-> (restricted operator)^{-1} u on the set."""
    sub, sites = _interior_operator(lat, mask, m, coeffs)
    lu = spla.splu(sub.tocsc())

    def solve(rhs_on_sites):
        return lu.solve(np.asarray(rhs_on_sites))

    return solve, sites


def poisson_kernel(lat, mask, m):
    """Harmonic-extension operator: boundary values to interior values.

    Returned as a LinearMap from values on the outer boundary to values on
    the set; off the set the extension is the identity by convention.  For
    the full torus with m > 0 the kernel is zero (the conditional mean with
    nothing fixed).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        if m <= 0:
            raise SingularOperatorError("no boundary data and m = 0")
        sites = np.flatnonzero(mask)
        return LinearMap(np.zeros((len(sites), 0)), sites,
                         np.zeros(0, dtype=np.int64))
    bd = np.flatnonzero(outer_boundary(lat, mask))
    sites = np.flatnonzero(mask)
    A = _laplacian_sparse(lat, m)
    sub = A[np.ix_(sites, sites)]
    coupling = -A[np.ix_(sites, bd)].toarray()
    if len(sites) <= DENSE_LIMIT:
        W = np.linalg.solve(sub.toarray(), coupling)
    else:
        lu = spla.splu(sub.tocsc())
        W = lu.solve(coupling)
    return LinearMap(W, sites, bd)


def harmonic_extension(lat, mask, m, f):
    """P_U f: replace f inside the set by its harmonic extension."""
    out = np.asarray(f, dtype=float).copy()
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        if m <= 0:
            raise SingularOperatorError("no boundary data and m = 0")
        out[:] = 0.0
        return out
    P = poisson_kernel(lat, mask, m)
    out[P.row_sites] = P.matrix @ out[P.col_sites]
    return out


def poisson_kernel_full(lat, mask, m):
    """The kernel as a full site_count x site_count matrix (identity off set)."""
    n = lat.site_count
    P = np.eye(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        if m <= 0:
            raise SingularOperatorError("no boundary data and m = 0")
        return np.zeros((n, n))
    K = poisson_kernel(lat, mask, m)
    P[K.row_sites, :] = 0.0
    P[np.ix_(K.row_sites, K.col_sites)] = K.matrix
    return P


def variable_coefficient_green(lat, mask, coeffs, m=0.0):
    """Dirichlet Green's function of the divergence-form operator."""
    coeffs.check_elliptic()
    return dirichlet_green(lat, mask, m, coeffs=coeffs)


# ---------------------------------------------------------------------------
# measurement routines
# ---------------------------------------------------------------------------


def _ball_mask(lat, radius, center=None):
    """Euclidean ball {|x| < radius} around a center site."""
    coords = lat.coords.astype(float)
    if center is not None:
        delta = lat.wrap(lat.coords - lat.coords_of(center))
        coords = delta.astype(float)
    return (coords**2).sum(axis=1) < radius**2


def harmonic_gradient_bound_check(lat, radii, trials=20, seed=0, m=0.0):
    """Measured constants in the gradient bounds for lattice-harmonic
    functions on balls.

    For each radius R: c_any = max |d_e g(0)| R / sup |g| over harmonic g
    (random boundary extensions), and c_pos = max |d_e f(0)| R / f(0) over
    the nonnegative kernel columns f = P(., y).
    """
    rng = np.random.default_rng(seed)
    center = int(lat.index_of(np.zeros(lat.dim, dtype=int)))
    report = {}
    for R in radii:
        if R < 3:
            raise ValueError("radius must be >= 3")
        mask = _ball_mask(lat, R)
        K = poisson_kernel(lat, mask, m)
        row = np.flatnonzero(K.row_sites == center)[0]
        c_any = 0.0
        for _ in range(trials):
            data = rng.normal(size=len(K.col_sites))
            g = np.zeros(lat.site_count)
            g[K.col_sites] = data
            g[K.row_sites] = K.matrix @ data
            sup = np.abs(g[mask]).max()
            grad = max(
                abs(g[lat.shift_index(center, e)] - g[center])
                for e in range(lat.n_directions)
            )
            c_any = max(c_any, grad * R / sup)
        c_pos = 0.0
        interior_index = {int(s): i for i, s in enumerate(K.row_sites)}
        for col in range(len(K.col_sites)):
            f_center = K.matrix[row, col]
            if f_center <= 0:
                continue
            grad = 0.0
            for e in range(lat.n_directions):
                xe = int(lat.shift_index(center, e))
                f_xe = (
                    K.matrix[interior_index[xe], col]
                    if xe in interior_index
                    else 0.0
                )
                grad = max(grad, abs(f_xe - f_center))
            c_pos = max(c_pos, grad * R / f_center)
        report[R] = {"c_any": c_any, "c_pos": c_pos}
    return report


def _cube_mask(lat, half_width, center=None):
    delta = lat.coords
    if center is not None:
        delta = lat.wrap(lat.coords - lat.coords_of(center))
    return np.all(np.abs(delta) <= half_width, axis=1)


def mean_value_bound_check(lat, R, r, s, trials=20, seed=0, m=0.0):
    """Measured constants in the annulus mean-value bounds for harmonic u.

    |u(x)| <= c1 R^{-d} sum_{annulus} |u| and u(x)^2 <= c2 R^{-d} sum u^2,
    for x in the inner cube at distance > s R from its boundary.
    """
    if not (0 < 3 * s < r < 1):
        raise ValueError("need 0 < 3s < r < 1")
    rng = np.random.default_rng(seed)
    outer = _cube_mask(lat, R)
    inner = _cube_mask(lat, int(np.floor(r * R)))
    annulus = outer & ~inner
    margin = distance_field(lat, ~inner)
    eligible = inner & (margin > s * R)
    if not eligible.any():
        raise ValueError("no eligible evaluation points; enlarge R")
    K = poisson_kernel(lat, outer, m)
    c1 = c2 = 0.0
    d = lat.dim
    for _ in range(trials):
        data = rng.normal(size=len(K.col_sites))
        u = np.zeros(lat.site_count)
        u[K.col_sites] = data
        u[K.row_sites] = K.matrix @ data
        sum_abs = np.abs(u[annulus]).sum()
        sum_sq = (u[annulus] ** 2).sum()
        amax = np.abs(u[eligible]).max()
        c1 = max(c1, amax * R**d / sum_abs)
        c2 = max(c2, amax**2 * R**d / sum_sq)
    return {"c_abs": c1, "c_sq": c2, "annulus_size": int(annulus.sum())}


def caccioppoli_check(lat, mask, coeffs, pole, inner_half, outer_half,
                      center=None, m=0.0):
    """Energy-versus-amplitude ratio for a Green's column away from its pole.

    Builds u = G_a(., pole) on the set, a trapezoid cutoff phi equal to 1 on
    the inner cube and 0 outside the outer cube, and returns
    ratio = sum phi(x)^2 (d_e u)^2 / sum (d_e phi)^2 u(x)^2 together with
    the ellipticity bound 4 (max a / min a)^2.
    """
    lo, hi = coeffs.check_elliptic()
    inner = _cube_mask(lat, inner_half, center)
    outer = _cube_mask(lat, outer_half, center)
    if inner[pole] or outer[pole]:
        raise ValueError("pole inside the cutoff support")
    G = dirichlet_green(lat, mask, m, coeffs=coeffs)
    u = np.zeros(lat.site_count)
    col = np.flatnonzero(G.col_sites == pole)
    if len(col) == 0:
        raise ValueError("pole must lie inside the domain")
    u[G.row_sites] = G.matrix[:, col[0]]
    # trapezoid cutoff: 1 inside, linear decay to 0 at the outer shell
    width = outer_half - inner_half
    if width < 1:
        raise ValueError("need outer_half > inner_half")
    dist = distance_field(lat, inner)
    phi = np.clip(1.0 - dist / (width + 1), 0.0, 1.0)
    phi[~outer] = 0.0
    num = den = 0.0
    for e in range(lat.n_directions):
        du = u[lat.shifts[e]] - u
        dphi = phi[lat.shifts[e]] - phi
        num += float((phi**2 * du**2).sum())
        den += float((dphi**2 * u**2).sum())
    ratio = num / den if den > 0 else np.inf
    return {"ratio": ratio, "bound": 4.0 * (hi / lo) ** 2,
            "passes": ratio <= 4.0 * (hi / lo) ** 2}


def _fit_loglog(xs, ys):
    """Least-squares slope/intercept of log y against log x, with a simple
    slope standard error."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    slope, intercept = coef
    n = len(lx)
    if n > 2:
        resid = ly - A @ coef
        s2 = float(resid @ resid) / (n - 2)
        var = s2 / float(((lx - lx.mean()) ** 2).sum())
        stderr = float(np.sqrt(var))
    else:
        stderr = np.inf
    return float(slope), float(intercept), stderr


EULER_GAMMA = 0.5772156649015329
TWO_D_ADDITIVE_CONSTANT = (2.0 * EULER_GAMMA + np.log(8.0)) / np.pi


def greens_decay_fit(dim, side, m, r_min=2, r_max=None, proxy_factor=4):
    """Decay exponents of the torus Green's function and its gradient.

    Fits |d_e C_m(x)| ~ |x|^p along many directions (p should be -(d-1))
    and, for d = 2, the additive constant k in C(0) - C(x) ~ a log|x| + k
    measured on a proxy torus proxy_factor times larger (to suppress
    periodization).  Distances are restricted to [r_min, r_max].
    """
    if r_max is None:
        r_max = side // 8
    lat = Grid(dim, side)
    col = torus_green_fft(lat, m)
    # gradient decay along the first axis direction
    xs, ys = [], []
    for rad in range(r_min, r_max + 1):
        pts = []
        for axis in range(dim):
            v = np.zeros(dim, dtype=int)
            v[axis] = rad
            pts.append(v.copy())
        diag = np.full(dim, max(1, int(round(rad / np.sqrt(dim)))))
        pts.append(diag)
        vals = []
        for p in pts:
            e0 = np.zeros(dim, dtype=int)
            e0[0] = 1
            g = abs(green_value(col, p + e0) - green_value(col, p))
            if g > 0:
                vals.append(g)
        if vals:
            xs.append(rad)
            ys.append(float(np.mean(vals)))
    grad_slope, _, grad_err = _fit_loglog(xs, ys)

    out = {
        "grad_exponent": grad_slope,
        "grad_exponent_stderr": grad_err,
        "power_law_rejected": bool(grad_slope < -float(dim)),
        "side": side,
        "m": m,
    }
    if dim == 2:
        # the pinned difference in walk normalization, 2d (C(0) - C(x)),
        # grows like (2/pi) log|x| + k; measure k on a larger proxy torus
        # so periodization does not pollute the constant
        proxy = Grid(dim, _odd(side * proxy_factor))
        pcol = torus_green_fft(proxy, m)
        rads, diffs = [], []
        for rad in range(r_min, r_max + 1):
            p = np.array([rad, 0])
            val = green_value(pcol, np.zeros(2, dtype=int)) - green_value(pcol, p)
            rads.append(rad)
            diffs.append(2.0 * dim * float(val))
        rads = np.asarray(rads, dtype=float)
        diffs = np.asarray(diffs)
        k_est = float(np.mean(diffs - (2.0 / np.pi) * np.log(rads)))
        out["k_estimate"] = k_est
        out["k_reference"] = TWO_D_ADDITIVE_CONSTANT
        out["log_coefficient_fit"] = float(np.polyfit(np.log(rads), diffs, 1)[0])
    return out


def _odd(n):
    return n if n % 2 == 1 else n + 1


def periodization_tail_check(dim, L, N_values, m, x_fraction=0.25,
                             proxy_factor=16):
    """Torus-minus-free gradient difference across torus sizes.

    The difference d_e C_m^{torus}(x) - d_e G_m(x) is the period sum over
    nonzero images.  Its worst-case magnitude over the torus scales like
    side^{-(d-1)}, attained for x a fixed fraction of the side (at small
    fixed x extra cancellations make it decay faster).  The free function
    is approximated on a torus proxy_factor times larger than the biggest
    requested one.
    """
    e0 = np.zeros(dim, dtype=int)
    e0[0] = 1
    sides = [L**N for N in N_values]
    proxy = Grid(dim, _odd(max(sides) * proxy_factor))
    pcol = torus_green_fft(proxy, m)
    tails = {}
    points = {}
    for N, side in zip(N_values, sides):
        x = np.zeros(dim, dtype=int)
        x[0] = int(round(x_fraction * side))
        x[min(1, dim - 1)] = int(round(0.5 * x_fraction * side))
        lat = Grid(dim, side)
        col = torus_green_fft(lat, m)
        torus_grad = green_value(col, x + e0) - green_value(col, x)
        free_grad = green_value(pcol, x + e0) - green_value(pcol, x)
        tails[N] = float(abs(torus_grad - free_grad))
        points[N] = x.tolist()
    ratios = {}
    ns = sorted(tails)
    for a, b in zip(ns, ns[1:]):
        ratios[(a, b)] = tails[a] / tails[b] if tails[b] else np.inf
    # symmetric-point control: at x = 0 the images cancel pairwise
    lat0 = Grid(dim, sides[0])
    col0 = torus_green_fft(lat0, m)
    zero = np.zeros(dim, dtype=int)
    tail_origin = float(
        abs(
            (green_value(col0, e0) - green_value(col0, zero))
            - (green_value(pcol, e0) - green_value(pcol, zero))
        )
    )
    return {"tails": tails, "points": points, "ratios": ratios,
            "expected_ratio": float(L ** (dim - 1)),
            "tail_at_origin": tail_origin}
