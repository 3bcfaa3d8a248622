"""Field norms, derivative norms of functionals, and probe-based checks of
the analytic bounds used to control the coarse-graining step.

Supremum norms over infinite test-function balls are replaced by closed
forms where the functional class allows and by randomized probe lower
bounds elsewhere; every report labels which.  Probe values never decrease
with more probes, and an inequality check can only fail honestly (a probe
is a lower bound of the left-hand supremum).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import GaussianSpec, RegulatorParams, RGSeed, regulator_value, sample_gff
from .geometry import distance_field, outer_boundary
from .kernels import CallableKernel, FieldKernel, mixed_directional_derivative
from .operators import harmonic_extension, poisson_kernel
from .polymers import Polymer, neighborhoods

__all__ = [
    "FieldNormSpec",
    "ActivityNormReport",
    "field_norm",
    "polymer_field_norm",
    "harmonic_probe_directions",
    "derivative_norm_probe",
    "linear_functional_dual_norm_lp",
    "gaussian_weight_norm_check",
    "cosine_weight_norm_check",
    "initial_activity_norm_check",
    "largest_passing_activity",
    "initial_activity_sigma_derivative_check",
    "regulator_polynomial_absorption_check",
]


@dataclass
class FieldNormSpec:
    """Scale, base constant and evaluation sets for the field norm."""

    lat: object
    scale: int
    h: float
    X: np.ndarray
    Y: np.ndarray
    m: float = 0.0
    mode: str = "plain"  # or "harmonic" (test directions restricted)

    @property
    def h_j(self):
        d = self.lat.dim
        return self.h * float(self.lat.L) ** (-(d - 2) * self.scale / 2.0)

    @property
    def length(self):
        return float(self.lat.L) ** self.scale


def field_norm(spec, f, lam=0.0, xi=None):
    """h_j^{-1} sup_{x in X, e} |L^j d_e(P_Y f(x) + lam xi(x))|.

    At scale 0 the smoothing is the identity.  The xi-free norm is the
    lam = 0 case.
    """
    lat = spec.lat
    f = np.asarray(f, dtype=float)
    if spec.scale == 0 or spec.Y.all():
        g = f.copy()
    else:
        g = harmonic_extension(lat, spec.Y, spec.m, f)
    if xi is not None and lam:
        g = g + lam * np.asarray(xi, dtype=float)
    best = 0.0
    idx = np.flatnonzero(spec.X)
    for e in range(lat.n_directions):
        diff = np.abs(g[lat.shifts[e][idx]] - g[idx])
        if diff.size:
            best = max(best, float(diff.max()))
    return spec.length * best / spec.h_j


def polymer_field_norm(lat, X, h, f, lam=0.0, xi=None, m=0.0):
    """The norm with the polymer convention: sup over the dot set, smoothing
    over the + set."""
    _, plus, _, dot = neighborhoods(X)
    spec = FieldNormSpec(lat, X.scale, h, dot, plus, m=m)
    return field_norm(spec, f, lam, xi)


def harmonic_probe_directions(spec, rng, count, xi=None, lam_scale=1.0):
    """Unit-norm test directions: harmonic extensions of random boundary
    data plus a random multiple of the shift field, normalized in the
    field norm.  Returns a list of (direction, lam) with direction the
    effective field part (already smoothed)."""
    lat = spec.lat
    out = []
    if spec.Y.all() or spec.scale == 0:
        bd = None
    else:
        bd = np.flatnonzero(outer_boundary(lat, spec.Y))
    for _ in range(count):
        g = np.zeros(lat.site_count)
        if bd is None:
            g = rng.normal(size=lat.site_count)
        else:
            data = rng.normal(size=len(bd))
            g[bd] = data
            g = harmonic_extension(lat, spec.Y, spec.m, g)
        lam = rng.normal() * lam_scale if xi is not None else 0.0
        norm = field_norm(spec, g, lam, xi)
        if norm == 0:
            continue
        out.append((g / norm, lam / norm))
    return out


def probe_t_norm(kernel, psi, directions, orders=(0, 1, 2, 3, 4)):
    """sum_n (1/n!) |F^(n)(psi; d, ..., d)| maximized over the probes.

    Each probe uses one direction in all derivative slots, which keeps the
    per-probe value a lower bound of the triangle-inequality-summed norm.
    Returns (best_total, per_order_best).
    """
    import math

    per_order = {n: 0.0 for n in orders}
    best = 0.0
    for d in directions:
        total = 0.0
        for n in orders:
            if n == 0:
                val = abs(kernel.value(psi))
            else:
                val = abs(kernel.derivative(psi, [d] * n))
            per_order[n] = max(per_order[n], val / math.factorial(n))
            total += val / math.factorial(n)
        best = max(best, total)
    return best, per_order


@dataclass
class ActivityNormReport:
    """Probe-based norm data for one polymer activity value."""

    per_order: dict
    total: float
    regulator_normalized: float
    a_weighted: float
    probes: int
    lower_bound_only: bool = field(default=True)


def derivative_norm_probe(kernel, psi, spec, order, probes, rng, xi=None):
    """Probe lower bound of the order-n derivative norm at a field.

    For order 1 on linear functionals the exact value is available via
    linear_functional_dual_norm_lp; this routine is the generic sampler.
    """
    dirs = harmonic_probe_directions(spec, rng, probes, xi=xi)
    best = 0.0
    history = []
    for g, lam in dirs:
        d = g + (lam * xi if xi is not None else 0.0)
        if order == 0:
            val = abs(kernel.value(psi))
        else:
            val = abs(kernel.derivative(psi, [d] * order))
        best = max(best, val)
        history.append(best)
    return {"value": best, "running_max": history, "lower_bound": True}


def linear_functional_dual_norm_lp(lat, spec, site, direction, xi=None):
    """Exact dual norm of f -> d_e(P_Y f)(site) over the unit field ball.

    Solved as a linear program in the boundary data (plus the xi weight
    when a shift field participates).
    """
    from scipy.optimize import linprog

    if spec.scale == 0 or spec.Y.all():
        raise ValueError("dual norm LP needs a proper smoothing set")
    P = poisson_kernel(lat, spec.Y, spec.m)
    n_bd = len(P.col_sites)
    full_rows = {int(s): i for i, s in enumerate(P.row_sites)}

    def row_of(x, e):
        """Row vector of the boundary-data map for d_e(P f)(x)."""
        xe = int(lat.shift_index(x, e))
        row = np.zeros(n_bd + (1 if xi is not None else 0))
        for point, sign in ((xe, 1.0), (int(x), -1.0)):
            if point in full_rows:
                row[:n_bd] += sign * P.matrix[full_rows[point]]
            else:
                col = np.flatnonzero(P.col_sites == point)
                if len(col):
                    row[col[0]] += sign
        if xi is not None:
            row[-1] = xi[xe] - xi[int(x)]
        return row

    scale = spec.length / spec.h_j
    cons = []
    for x in np.flatnonzero(spec.X):
        for e in range(lat.n_directions):
            cons.append(scale * row_of(x, e))
    A = np.vstack(cons)
    objective = row_of(site, direction)
    res = linprog(
        -objective,
        A_ub=np.vstack([A, -A]),
        b_ub=np.ones(2 * len(A)),
        bounds=[(None, None)] * A.shape[1],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"dual norm LP failed: {res.message}")
    return float(-res.fun)


# ---------------------------------------------------------------------------
# probe checks of the analytic estimates
# ---------------------------------------------------------------------------


def _exp_weight_kernel(lat, mask, sigma, base, xi):
    """psi-direction functional exp(-(sigma/2) D_B(base + sum t_i d_i)).

    base is the already-smoothed field (plus shift); derivative directions
    are taken in the effective psi variables.
    """
    idx = np.flatnonzero(mask)

    def dsum(u):
        total = 0.0
        for e in range(lat.n_directions):
            diff = u[lat.shifts[e][idx]] - u[idx]
            total += float((diff @ diff))
        return total

    def fn(u):
        return float(np.exp(-0.5 * sigma * dsum(u)))

    return CallableKernel(fn, fd_step=5e-3), dsum


def gaussian_weight_norm_check(lat, block, sigma, kappa, h, m, xi=None,
                               samples=20, probes=12, seed=0,
                               threshold=2.0, scale=0):
    """Probe the derivative-norm bounds for the block Gaussian weight.

    Checks, on sampled fields and unit probe tuples,
        ||exp(-(sigma/2) D_B(.))||_probe <= 2 exp((kappa/4) D_B(smoothed))
    and the subtracted variant
        ||exp(...) - 1||_probe <= 4 c^{-1} h^2 |sigma| exp((kappa/4) ...);
    requires sigma/kappa < c and h^2 sigma < c for the configured
    threshold c.  Returns worst margins (negative margin = violation).
    """
    if sigma / kappa >= threshold or h**2 * sigma >= threshold:
        raise ValueError("smallness hypotheses violated by configuration")
    rng = RGSeed(seed).generator()
    mask = block.sites()
    plus = neighborhoods(block)[1]
    spec_field = GaussianSpec.free_field(lat, max(m, 1e-2))
    fields = sample_gff(spec_field, rng, samples)
    norm_spec = FieldNormSpec(lat, max(scale, 0), h, mask, plus, m=m)
    worst_I = np.inf
    worst_I1 = np.inf
    for phi in fields:
        smoothed = (
            phi.copy() if scale == 0 else harmonic_extension(lat, plus, m, phi)
        )
        base = smoothed + (xi if xi is not None else 0.0)
        kernel, dsum = _exp_weight_kernel(lat, mask, sigma, base, xi)
        dirs = harmonic_probe_directions(norm_spec, rng, probes, xi=xi)
        eff = [g + (lam * xi if xi is not None else 0.0) for g, lam in dirs]
        lhs_I, _ = probe_t_norm(kernel, base, eff)
        rhs_I = 2.0 * np.exp(0.25 * kappa * dsum(smoothed))
        worst_I = min(worst_I, rhs_I - lhs_I)

        def fn_minus(u, _k=kernel):
            return _k.value(u) - 1.0

        k_minus = CallableKernel(fn_minus, fd_step=5e-3)
        lhs_I1, _ = probe_t_norm(k_minus, base, eff)
        rhs_I1 = (4.0 / threshold) * h**2 * abs(sigma) * np.exp(
            0.25 * kappa * dsum(smoothed)
        )
        worst_I1 = min(worst_I1, rhs_I1 - lhs_I1)
    return {
        "margin_weight": float(worst_I),
        "margin_weight_minus_one": float(worst_I1),
        "passes": bool(worst_I >= 0 and worst_I1 >= 0),
    }


def _site_gradients(lat, x, phi):
    """The 2d directed differences of a field at one site."""
    return np.array(
        [phi[lat.shift_index(x, e)] - phi[x] for e in range(lat.n_directions)]
    )


def cosine_weight_norm_check(lat, site, h, kappa, u, m_orders=(0, 1, 2),
                             samples=20, probes=10, seed=0):
    """Probe the derivative bounds for the per-site cosine interaction.

    For each m in m_orders checks
      sum_{n<=4} (1/n!) sup_{|df(x)| <= h} |d_t^n d_u^m W(x, phi + t f)|
        <= d (2h)^m e^{h u} exp((kappa/2) sum_e (d_e phi(x))^2).
    Requires kappa >= 1/h.  Returns the worst margin per order.
    """
    if kappa < 1.0 / h:
        raise ValueError("hypothesis kappa >= 1/h violated")
    rng = RGSeed(seed).generator()
    d = lat.dim
    import math

    def w_m(phi, m):
        diffs = _site_gradients(lat, site, phi)
        if m % 4 == 0:
            trig = np.cos(u * diffs)
        elif m % 4 == 1:
            trig = -np.sin(u * diffs)
        elif m % 4 == 2:
            trig = -np.cos(u * diffs)
        else:
            trig = np.sin(u * diffs)
        return 0.5 * float((trig * diffs**m).sum())

    margins = {}
    for m in m_orders:
        worst = np.inf
        for _ in range(samples):
            phi = rng.normal(size=lat.site_count)
            grad_sq = float((_site_gradients(lat, site, phi) ** 2).sum())
            rhs = d * (2.0 * h) ** m * np.exp(h * u) * np.exp(0.5 * kappa * grad_sq)
            total = 0.0
            for n in range(5):
                best = 0.0
                for _ in range(probes if n else 1):
                    f = rng.normal(size=lat.site_count)
                    gmax = max(
                        abs(f[lat.shift_index(site, e)] - f[site])
                        for e in range(lat.n_directions)
                    )
                    if gmax == 0:
                        continue
                    f = f * (h / gmax)
                    if n == 0:
                        val = abs(w_m(phi, m))
                    else:
                        val = abs(
                            mixed_directional_derivative(
                                lambda p: w_m(p, m), phi, [f] * n, step=1e-2
                            )
                        )
                    best = max(best, val)
                total += best / math.factorial(n)
            worst = min(worst, rhs - total)
        margins[m] = float(worst)
    return {"margins": margins, "passes": bool(min(margins.values()) >= 0)}


def initial_activity_norm_check(params, lat, site, h, samples=20, probes=10,
                                seed=0):
    """Probe the flat norm of the per-site exponential interaction:
    sum_{n<=4}(1/n!)|d^n exp(z Wятия({x}))| <= 2 over sampled fields and
    unit-gradient probes."""
    rng = RGSeed(seed).generator()
    z = params.z
    u = params.cosine_frequency
    import math

    # exp(z W({x})) with W the full directed cosine sum at the site
    def e_zw_full(phi):
        diffs = _site_gradients(lat, site, phi)
        return float(np.exp(z * np.cos(u * diffs).sum()))

    worst = 0.0
    for _ in range(samples):
        phi = rng.normal(size=lat.site_count)
        total = abs(e_zw_full(phi))
        for n in range(1, 5):
            best = 0.0
            for _ in range(probes):
                f = rng.normal(size=lat.site_count)
                gmax = max(
                    abs(f[lat.shift_index(site, e)] - f[site])
                    for e in range(lat.n_directions)
                )
                if gmax == 0:
                    continue
                f = f * (h / gmax)
                best = max(
                    best,
                    abs(
                        mixed_directional_derivative(
                            e_zw_full, phi, [f] * n, step=1e-2
                        )
                    ),
                )
            total += best / math.factorial(n)
        worst = max(worst, total)
    return {"norm_probe": float(worst), "passes": bool(worst <= 2.0)}


def largest_passing_activity(params, lat, site, h, z_max=0.5, tol=1e-3,
                             **kw):
    """Largest |z| at which the flat-norm probe stays below 2 (bisection)."""
    from dataclasses import replace

    lo, hi = 0.0, z_max
    if initial_activity_norm_check(replace(params, z=z_max), lat, site, h,
                                   **kw)["passes"]:
        return z_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ok = initial_activity_norm_check(replace(params, z=mid), lat, site,
                                         h, **kw)["passes"]
        lo, hi = (mid, hi) if ok else (lo, mid)
    return lo


def initial_activity_sigma_derivative_check(params, lat, X_sites, psi,
                                            fd_step=1e-5):
    """Analytic tuning-derivative of the initial activity vs finite
    differences.

    d/dsigma of prod_x i0 (e^{zW} - 1): each site contributes the quartic
    gradient term from i0 and the chain-rule cosine term through the
    frequency sqrt(beta(1+sigma)).
    """
    from dataclasses import replace

    from .dipole import I0_K0

    def k_product(sigma0):
        p = replace(params, sigma0=sigma0)
        _, k0 = I0_K0(p, lat, psi)
        return float(np.prod(k0[X_sites]))

    s = params.sigma0
    fd = (k_product(s + fd_step) - k_product(s - fd_step)) / (2 * fd_step)

    _, k0 = I0_K0(params, lat, psi)
    u = params.cosine_frequency
    du_dsigma = np.sqrt(params.beta) / (2.0 * np.sqrt(1.0 + params.sigma0))
    analytic = 0.0
    base = float(np.prod(k0[X_sites]))
    for x in X_sites:
        diffs = _site_gradients(lat, x, psi)
        grad_sq = float((diffs**2).sum())
        w = float(np.cos(u * diffs).sum())
        dw_du = float((-np.sin(u * diffs) * diffs).sum())
        i0x = np.exp(-0.25 * params.sigma0 * grad_sq)
        ex = np.exp(params.z * w)
        k0x = i0x * (ex - 1.0)
        dk0x = i0x * (
            -0.25 * grad_sq * (ex - 1.0)
            + ex * params.z * dw_du * du_dsigma
        )
        if k0x != 0:
            analytic += base / k0x * dk0x
    return {
        "fd": float(fd),
        "analytic": float(analytic),
        "abs_error": float(abs(fd - analytic)),
    }


def regulator_polynomial_absorption_check(lat, kappa, h, m, samples=30,
                                          seed=0, amplitudes=(1.0, 2.0, 4.0)):
    """Measured constant in the polynomial-absorption inequality
    (2 + ||phi||)^3 G(inner, U+) <= q G(wider, U+).

    Needs L >= 5 so the graded neighborhoods do not collapse; refuses
    smaller L.  Returns the measured q over sampled fields plus a ray
    sweep in growing amplitude.
    """
    if lat.L < 5:
        raise ValueError(
            "graded corridors collapse at L < 5; run this check at L = 5"
        )
    if lat.N < 2:
        raise ValueError("need at least two block scales")
    rng = RGSeed(seed).generator()
    center = int(lat.index_of(np.zeros(lat.dim, dtype=int)))
    B = Polymer.from_blocks(lat, 0, [center])
    X = B  # a small fine polymer
    U = Polymer.from_blocks(
        lat, 1, [int(lat.block_index_of_sites(1, center))]
    )
    _, u_plus, u_ddot, _ = neighborhoods(U)
    _, _, x_ddot, x_dot = neighborhoods(X)
    spec = FieldNormSpec(lat, 1, h, x_dot, u_plus, m=m)
    par_inner = RegulatorParams(kappa, x_ddot, u_plus)
    par_outer = RegulatorParams(kappa, u_ddot, u_plus)
    free = GaussianSpec.free_field(lat, max(m, 1e-2))
    fields = sample_gff(free, rng, samples)
    ratios = []
    for phi in fields:
        lhs = (2.0 + field_norm(spec, phi)) ** 3 * regulator_value(
            lat, par_inner, m, phi
        )
        rhs = regulator_value(lat, par_outer, m, phi)
        ratios.append(lhs / rhs)
    ray = []
    base = fields[0]
    for a in amplitudes:
        phi = a * base
        lhs = (2.0 + field_norm(spec, phi)) ** 3 * regulator_value(
            lat, par_inner, m, phi
        )
        rhs = regulator_value(lat, par_outer, m, phi)
        ray.append(lhs / rhs)
    return {
        "q_measured": float(max(ratios)),
        "q_at_zero_field": 8.0,
        "ray_ratios": [float(r) for r in ray],
        "ray_bounded": bool(max(ray) < np.inf and max(ray) <= 1e6),
    }
