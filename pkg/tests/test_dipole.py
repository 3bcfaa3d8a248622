import numpy as np
import pytest

from polyrg.geometry import SiteField, TorusLattice
from polyrg.gaussian import RGSeed
from polyrg.dipole import (
    ExternalField,
    ModelParams,
    TestFunctionSpec,
    I0_K0,
    build_xi,
    exact_ratio_z0,
    generating_function_mc,
    local_V,
    local_W,
    mayer_identity_check,
    read_field_file,
    sup_norms,
    write_field_file,
)


@pytest.fixture(scope="module")
def lat3():
    return TorusLattice(2, 3, 1)


@pytest.fixture(scope="module")
def lat9():
    return TorusLattice(2, 3, 2)


def test_params_epsilon_exact():
    p = ModelParams(sigma0=0.25)
    assert p.epsilon == pytest.approx(1 / 1.25)
    assert 1.0 / p.epsilon - 1.0 == pytest.approx(0.25)
    with pytest.raises(ValueError):
        ModelParams(sigma0=-1.5)


def test_local_V_basics(lat9):
    assert local_V(lat9, lat9.full_set(), np.ones(81)) == 0.0
    # linear field: every site contributes two unit +-e1 terms
    x = int(lat9.index_of(np.array([0, 0])))
    mask = lat9.set_from_sites([x])
    linear = lat9.coords[:, 0].astype(float)
    # pick an interior site so the wrap jump is avoided
    assert local_V(lat9, mask, linear) == pytest.approx(0.5)


def test_local_V_edge_oracle(lat3):
    rng = np.random.default_rng(0)
    psi = rng.normal(size=9)
    direct = 0.0
    for x in range(9):
        for k in range(2):  # undirected edges once
            direct += (psi[lat3.shift_index(x, k)] - psi[x]) ** 2
    assert local_V(lat3, lat3.full_set(), psi) == pytest.approx(
        0.5 * direct, rel=1e-12
    )


def test_local_V_domain_guard(lat9):
    x = int(lat9.index_of(np.array([0, 0])))
    mask = lat9.set_from_sites([x])
    dom = mask.copy()  # neighbors missing
    f = SiteField(lat9, np.zeros(81), dom)
    with pytest.raises(ValueError):
        local_V(lat9, mask, f)


def test_local_W_values(lat9):
    x = int(lat9.index_of(np.array([1, 1])))
    mask = lat9.set_from_sites([x])
    assert local_W(lat9, mask, np.zeros(81), beta=1.0) == pytest.approx(4.0)
    rng = np.random.default_rng(1)
    psi = rng.normal(size=81)
    assert local_W(lat9, mask, psi, beta=0.0) == pytest.approx(4.0)
    full = local_W(lat9, lat9.full_set(), psi, beta=1.3)
    assert -4 * 81 <= full <= 4 * 81
    direct = sum(
        np.cos(np.sqrt(1.3) * (psi[lat9.shift_index(x, e)] - psi[x]))
        for x in range(81)
        for e in range(4)
    )
    assert full == pytest.approx(direct, rel=1e-12)


def test_build_xi_zero_rhs(lat9):
    spec = TestFunctionSpec(amplitude=0.0)
    out = build_xi(spec, ModelParams(m=0.3), lat9)
    assert np.abs(out.xi).max() == 0.0


def test_build_xi_residual(lat9):
    spec = TestFunctionSpec(name="sine", mode=(1, 0))
    params = ModelParams(sigma0=0.1, m=1e-3)
    out = build_xi(spec, params, lat9)
    assert out.residual_inf < 1e-9
    assert abs(out.f.mean()) < 1e-13


def test_xi_gradient_scaling_across_sizes():
    # sup |grad xi| should shrink by about L^{-d/2} = 1/3 per refinement
    spec = TestFunctionSpec(name="sine", mode=(1, 0))
    params = ModelParams(sigma0=0.1, m=1e-3)
    grads = {}
    for N in (2, 3):
        lat = TorusLattice(2, 3, N)
        out = build_xi(spec, params, lat)
        grads[N] = sup_norms(lat, out.xi)[1]
    ratio = grads[3] / grads[2]
    assert abs(ratio - 1 / 3) < 0.3 * (1 / 3)


def test_I0_K0_limits(lat3):
    rng = np.random.default_rng(2)
    psi = rng.normal(size=9)
    i0, k0 = I0_K0(ModelParams(sigma0=0.0, z=0.1), lat3, psi)
    assert np.allclose(i0, 1.0)
    i0z, k0z = I0_K0(ModelParams(sigma0=0.2, z=0.0), lat3, psi)
    assert np.allclose(k0z, 0.0)


def test_K0_matches_direct_formula(lat3):
    rng = np.random.default_rng(3)
    psi = rng.normal(size=9)
    params = ModelParams(sigma0=0.1, z=0.05, beta=1.0)
    i0, k0 = I0_K0(params, lat3, psi)
    for x in range(9):
        mask = lat3.set_from_sites([x])
        v = local_V(lat3, mask, psi)
        w = local_W(lat3, mask, psi / np.sqrt(params.epsilon), params.beta)
        # V over a single site includes both +-e contributions: the factor
        # exp(-sigma V) with V = (1/4) sum_e matches i0 directly
        assert i0[x] == pytest.approx(np.exp(-params.sigma0 * v), rel=1e-12)
        assert k0[x] == pytest.approx(
            np.exp(-params.sigma0 * v) * (np.exp(params.z * w) - 1.0), rel=1e-12
        )


def test_K0_factorizes_over_components(lat3):
    rng = np.random.default_rng(4)
    psi = rng.normal(size=9)
    params = ModelParams(sigma0=0.1, z=0.05)
    _, k0 = I0_K0(params, lat3, psi)
    sites = [0, 3, 7]
    prod = np.prod(k0[sites])
    assert prod == pytest.approx(np.prod([k0[s] for s in sites]))


@pytest.mark.parametrize("sigma0", [0.0, 0.1])
@pytest.mark.parametrize("z", [0.0, 0.05])
def test_mayer_identity(lat3, sigma0, z):
    rng = np.random.default_rng(5)
    params = ModelParams(sigma0=sigma0, z=z, beta=1.0)
    for _ in range(5):
        psi = rng.normal(size=9)
        assert mayer_identity_check(params, lat3, psi) < 1e-12


def test_mayer_identity_with_shift(lat3):
    rng = np.random.default_rng(6)
    params = ModelParams(sigma0=0.1, z=0.05, beta=1.0, m=0.5)
    xi = build_xi(TestFunctionSpec(), params, lat3).xi
    psi = rng.normal(size=9) + xi
    assert mayer_identity_check(params, lat3, psi) < 1e-12


def test_mayer_size_guard():
    lat = TorusLattice(2, 3, 2)
    with pytest.raises(ValueError):
        mayer_identity_check(ModelParams(), lat, np.zeros(81))


def test_generating_ratio_trivial(lat3):
    params = ModelParams(sigma0=0.0, z=0.0, m=0.5)
    spec = TestFunctionSpec(amplitude=0.0)
    out = generating_function_mc(spec, params, lat3, samples=50, rng=RGSeed(1))
    assert out["ratio"] == pytest.approx(1.0)
    assert out["prefactor"] == pytest.approx(1.0)


def test_generating_ratio_z0_exact_oracle(lat3):
    params = ModelParams(sigma0=0.15, z=0.0, m=0.5)
    spec = TestFunctionSpec(name="sine", mode=(1, 0), amplitude=1.0)
    exact = exact_ratio_z0(spec, params, lat3)
    out = generating_function_mc(
        spec, params, lat3, samples=40_000, rng=RGSeed(2)
    )
    assert abs(out["ratio"] - exact) < 3 * out["stderr"]


def test_tuning_change_of_variables(lat3):
    # the tilted-measure and rescaled-measure integrands agree sample by
    # sample under phi -> phi / sqrt(eps); with common random numbers the
    # two ratio estimators coincide exactly
    rng = np.random.default_rng(7)
    params = ModelParams(sigma0=0.2, z=0.05, beta=1.0, m=0.4)
    eps = params.epsilon
    f = TestFunctionSpec().lattice_field(lat3)
    from polyrg.gaussian import GaussianSpec, sample_gff

    spec_g = GaussianSpec.free_field(lat3, params.m)
    phi = sample_gff(spec_g, RGSeed(8), 200)

    def route_rescaled(ph):
        return np.exp(
            f @ ph / np.sqrt(eps)
            - params.sigma0 * local_V(lat3, lat3.full_set(), ph)
            + params.z
            * local_W(lat3, lat3.full_set(), ph / np.sqrt(eps), params.beta)
        )

    def route_tilted(ph_eps):
        return np.exp(
            f @ ph_eps
            + (eps - 1.0) * local_V(lat3, lat3.full_set(), ph_eps)
            + params.z * local_W(lat3, lat3.full_set(), ph_eps, params.beta)
        )

    a = np.array([route_rescaled(p) for p in phi])
    b = np.array([route_tilted(p / np.sqrt(eps)) for p in phi])
    assert np.allclose(a, b, rtol=1e-12)


def test_field_file_roundtrip(tmp_path, lat9):
    rng = np.random.default_rng(9)
    vals = rng.normal(size=81)
    path = tmp_path / "field.txt"
    write_field_file(path, lat9, vals)
    grid, back = read_field_file(path)
    assert grid.side == 9 and grid.dim == 2
    assert np.array_equal(vals, back)
    bad = tmp_path / "bad.txt"
    bad.write_text("wrong header\n")
    with pytest.raises(ValueError):
        read_field_file(bad)
