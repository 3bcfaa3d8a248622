import numpy as np
import pytest

from polyrg.geometry import TorusLattice, distance_field
from polyrg.gaussian import (
    GaussianSpec,
    RegulatorParams,
    RGSeed,
    covariance_scaling_check,
    decompose_conditional,
    gaussian_quadratic_expectation,
    gradient_square_matrix,
    quadratic_form_identity_residual,
    regulator_integration_check,
    regulator_scale0,
    regulator_value,
    sample_gff,
)
from polyrg.operators import (
    assemble_torus_laplacian,
    dirichlet_green,
    harmonic_extension,
    torus_covariance,
)


@pytest.fixture(scope="module")
def lat9():
    return TorusLattice(dim=2, L=3, N=2)


def square(lat, half, center=(0, 0)):
    delta = lat.wrap(lat.coords - np.asarray(center))
    return np.all(np.abs(delta) <= half, axis=1)


def test_seed_reproducibility(lat9):
    spec = GaussianSpec.free_field(lat9, m=0.5)
    a = sample_gff(spec, RGSeed(42, 1), n=3)
    b = sample_gff(spec, RGSeed(42, 1), n=3)
    c = sample_gff(spec, RGSeed(42, 2), n=3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_single_site_variance():
    lat = TorusLattice(2, 3, 1)
    x = int(lat.index_of(np.array([0, 0])))
    spec = GaussianSpec(lat, np.array([[5.0]]), np.array([x]))
    fields = sample_gff(spec, RGSeed(7), n=200_000)
    var = fields[:, x].var()
    stderr = 0.2 * np.sqrt(2.0 / 200_000)
    assert abs(var - 0.2) < 5 * stderr


def test_non_spd_precision_rejected():
    lat = TorusLattice(2, 3, 1)
    spec = GaussianSpec(lat, -np.eye(2), np.array([0, 1]))
    with pytest.raises(ValueError):
        sample_gff(spec, RGSeed(0), n=1)


def test_empirical_covariance_4x4():
    lat = TorusLattice(2, 3, 1)  # 9 sites keeps this cheap; same content
    m = 1.0
    spec = GaussianSpec.free_field(lat, m)
    C = torus_covariance(lat, m).matrix
    n = 100_000
    fields = sample_gff(spec, RGSeed(11), n=n)
    emp = fields.T @ fields / n
    stderr = np.sqrt((np.outer(np.diag(C), np.diag(C)) + C**2) / n)
    assert np.all(np.abs(emp - C) < 5 * stderr)


def test_decompose_conditional_identity(lat9):
    rng = np.random.default_rng(3)
    U = square(lat9, 2)
    m = 0.2
    for _ in range(20):
        phi = rng.normal(size=81)
        assert quadratic_form_identity_residual(lat9, U, m, phi) < 1e-10


def test_decompose_conditional_harmonic_input(lat9):
    U = square(lat9, 2)
    m = 0.2
    rng = np.random.default_rng(4)
    phi = harmonic_extension(lat9, U, m, rng.normal(size=81))
    harm, spec = decompose_conditional(lat9, U, m, phi)
    assert np.abs(phi - harm).max() < 1e-12


def test_conditional_matches_schur_oracle(lat9):
    m = 0.3
    U = square(lat9, 2)
    sites = np.flatnonzero(U)
    comp = np.flatnonzero(~U)
    C = torus_covariance(lat9, m).matrix
    schur_cov = C[np.ix_(sites, sites)] - C[np.ix_(sites, comp)] @ np.linalg.solve(
        C[np.ix_(comp, comp)], C[np.ix_(comp, sites)]
    )
    G = dirichlet_green(lat9, U, m)
    assert np.abs(schur_cov - G.matrix).max() < 1e-10
    rng = np.random.default_rng(5)
    phi = rng.normal(size=81)
    schur_mean = C[np.ix_(sites, comp)] @ np.linalg.solve(
        C[np.ix_(comp, comp)], phi[comp]
    )
    harm, _ = decompose_conditional(lat9, U, m, phi)
    assert np.abs(schur_mean - harm[sites]).max() < 1e-10


def test_quadratic_expectation_closed_forms():
    assert gaussian_quadratic_expectation(np.zeros((3, 3))) == 1.0
    t = 0.5
    val = gaussian_quadratic_expectation(np.array([[t]]))
    assert val == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        gaussian_quadratic_expectation(np.array([[1.5]]))


def test_quadratic_expectation_trace_series(lat9):
    X = square(lat9, 1)
    S = gradient_square_matrix(lat9, X)
    T = 0.5 * S / np.abs(np.linalg.eigvalsh(S)).max()
    det_val, series_val = gaussian_quadratic_expectation(T, series_tol=1e-14)
    assert det_val == pytest.approx(series_val, rel=1e-8)


def test_quadratic_expectation_against_mc(lat9):
    rng = np.random.default_rng(6)
    X = square(lat9, 1)
    S = gradient_square_matrix(lat9, X)
    T = 0.4 * S / np.abs(np.linalg.eigvalsh(S)).max()
    exact = gaussian_quadratic_expectation(T)
    n = 200_000
    psi = rng.standard_normal(size=(n, 81))
    vals = np.exp(0.5 * np.einsum("ij,jk,ik->i", psi, T, psi))
    mc = vals.mean()
    stderr = vals.std(ddof=1) / np.sqrt(n)
    assert abs(exact - mc) < 3 * stderr


def test_gradient_square_matrix_oracle(lat9):
    from polyrg.geometry import directed_gradient_square

    rng = np.random.default_rng(7)
    X = square(lat9, 2)
    S = gradient_square_matrix(lat9, X)
    for _ in range(5):
        phi = rng.normal(size=81)
        direct = sum(
            (phi[lat9.shift_index(x, e)] - phi[x]) ** 2
            for x in np.flatnonzero(X)
            for e in range(4)
        )
        assert phi @ S @ phi == pytest.approx(direct, rel=1e-12)


class TestRegulator:
    m = 0.1
    kappa = 0.1

    def params(self, lat):
        X = square(lat, 1)
        Y = square(lat, 3)
        return RegulatorParams(self.kappa, X, Y)

    def test_value_at_zero_field(self, lat9):
        par = self.params(lat9)
        assert regulator_value(lat9, par, self.m, np.zeros(81)) == pytest.approx(1.0)

    def test_two_routes_agree(self, lat9):
        par = self.params(lat9)
        rng = np.random.default_rng(8)
        for _ in range(20):
            phi = rng.normal(size=81)
            a = regulator_value(lat9, par, self.m, phi, route="minimizer")
            b = regulator_value(lat9, par, self.m, phi, route="determinant")
            assert a == pytest.approx(b, rel=1e-9)

    def test_disjoint_factorization(self):
        lat = TorusLattice(2, 3, 3)
        X1 = square(lat, 1, center=(-9, -9))
        Y1 = square(lat, 3, center=(-9, -9))
        X2 = square(lat, 1, center=(5, 5))
        Y2 = square(lat, 3, center=(5, 5))
        rng = np.random.default_rng(9)
        phi = rng.normal(size=lat.site_count)
        g1 = regulator_value(lat, RegulatorParams(self.kappa, X1, Y1), self.m, phi)
        g2 = regulator_value(lat, RegulatorParams(self.kappa, X2, Y2), self.m, phi)
        g12 = regulator_value(
            lat, RegulatorParams(self.kappa, X1 | X2, Y1 | Y2), self.m, phi
        )
        assert g1 * g2 == pytest.approx(g12, rel=1e-10)

    def test_monotone_in_X_and_sandwich(self, lat9):
        rng = np.random.default_rng(10)
        Y = square(lat9, 3)
        X_small = square(lat9, 1)
        X_big = square(lat9, 2)
        from polyrg.gaussian import _RegulatorCore

        for _ in range(10):
            phi = rng.normal(size=81)
            g_small = regulator_value(
                lat9, RegulatorParams(self.kappa, X_small, Y), self.m, phi
            )
            g_big = regulator_value(
                lat9, RegulatorParams(self.kappa, X_big, Y), self.m, phi
            )
            assert g_big >= g_small - 1e-12
            par = RegulatorParams(self.kappa, X_small, Y)
            core = _RegulatorCore(lat9, par, self.m)
            psi1 = core.minimizer_tilted(phi)
            psi2 = core.minimizer_plain(phi)
            lower = np.exp(0.5 * self.kappa * (psi2 @ core.S @ psi2))
            upper = np.exp(0.5 * self.kappa * (psi1 @ core.S @ psi1))
            g = regulator_value(lat9, par, self.m, phi)
            assert lower - 1e-12 <= g <= upper + 1e-12

    def test_kappa_threshold_certified(self, lat9):
        X = square(lat9, 2)
        Y = square(lat9, 3)
        with pytest.raises(ValueError):
            regulator_value(lat9, RegulatorParams(5.0, X, Y), self.m, np.zeros(81))

    def test_scale0_evaluator(self, lat9):
        X = square(lat9, 1)
        rng = np.random.default_rng(11)
        phi = rng.normal(size=81)
        S = gradient_square_matrix(lat9, X)
        expected = np.exp(0.5 * 0.05 * phi @ S @ phi)
        assert regulator_scale0(lat9, 0.05, X, phi) == pytest.approx(expected)


def test_integration_check_trace_formula(lat9):
    X = square(lat9, 1)
    Y = distance_field(lat9, X) <= 2
    U = distance_field(lat9, X) <= 3
    out = regulator_integration_check(lat9, 0.05, X, Y, U, m=0.1)
    assert out["trace_direct"] == pytest.approx(out["trace_via_kernel"], abs=1e-9)


def test_integration_check_empty_is_trivial(lat9):
    # X empty: the regulator is constant 1 and the ratio is 1
    X = lat9.empty_set()
    Y = square(lat9, 1)
    U = square(lat9, 2)
    out = regulator_integration_check(lat9, 0.05, X | square(lat9, 0), Y, U, m=0.1)
    # a single-site X has no gradient-free content but checks the plumbing
    assert np.isfinite(out["log_ratio"])


def test_integration_check_mc_agrees(lat9):
    X = square(lat9, 1)
    Y = distance_field(lat9, X) <= 2
    U = distance_field(lat9, X) <= 3
    out = regulator_integration_check(
        lat9, 0.05, X, Y, U, m=0.1, seed=RGSeed(21), mc_samples=4000
    )
    assert abs(out["mc_mean"] - out["exact_mean"]) < 3 * out["mc_stderr"]


def test_tower_property_quadratic():
    # nested conditional expectations of a quadratic equal the one-shot
    # expectation under the composed law
    lat = TorusLattice(2, 3, 2)
    m = 0.2
    U = square(lat, 3)
    X = square(lat, 1)
    rng = np.random.default_rng(12)
    Q = rng.normal(size=(81, 81))
    Q = Q + Q.T
    phi = rng.normal(size=81)
    from polyrg.operators import poisson_kernel_full

    P_U = poisson_kernel_full(lat, U, m)
    P_X = poisson_kernel_full(lat, X, m)
    C_U = dirichlet_green(lat, U, m).embed_full(81)
    C_X = dirichlet_green(lat, X, m).embed_full(81)

    # inner step: E_{zeta_X}[q(P_X psi + zeta_X)] = q(P_X psi) + tr(Q C_X)
    # outer step applied to psi = P_U phi + zeta_U
    mean_inner = P_X @ P_U @ phi
    lhs = (
        mean_inner @ Q @ mean_inner
        + np.trace(Q @ (P_X @ C_U @ P_X.T))
        + np.trace(Q @ C_X)
    )
    # composed law: mean P_U phi (kernels collapse), covariance
    # P_X C_U P_X^T + C_X
    mean = P_U @ phi
    cov = P_X @ C_U @ P_X.T + C_X
    rhs = mean @ Q @ mean + np.trace(Q @ cov)
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert np.abs(P_X @ P_U - P_U).max() < 1e-10


def test_covariance_scaling_exponent():
    lat = TorusLattice(2, 3, 3)
    rep = covariance_scaling_check(lat, 3, [1, 2], m=1e-3)
    assert abs(rep["exponents"][(1, 2)] + 2.0) < 0.4


def test_integration_per_site_exponent_shrinks():
    lat = TorusLattice(2, 3, 3)
    t = {}
    for j, half, cdist in [(0, 1, 2), (1, 4, 6)]:
        X = np.all(np.abs(lat.coords) <= half, axis=1)
        Y = distance_field(lat, X) <= cdist
        out = regulator_integration_check(lat, 0.05, X, Y, lat.full_set(), m=0.1)
        t[j] = out["per_site_exponent"]
    ratio = t[1] / t[0]
    assert 1 / 27 <= ratio <= 1 / 3
