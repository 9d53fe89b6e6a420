"""Karhunen-Loeve construction, correlated pairs and the mixed field."""

import numpy as np
import pytest
import scipy.linalg as sla

from fracbayes.fem import ScalarField, StructuredMesh, assemble_mass
from fracbayes.randfield import (CorrelatedFieldSet, CovarianceKernel,
                                 MixedFieldSpec, build_kl, load_kl_basis,
                                 project_coefficients, realize_correlated,
                                 realize_field, realize_mixed, save_kl_basis)


@pytest.fixture(scope="module")
def mesh():
    return StructuredMesh(12, 12)


@pytest.fixture(scope="module")
def gauss_basis(mesh):
    return build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4, 1.5), 8)


def test_kernel_validation():
    with pytest.raises(ValueError):
        CovarianceKernel("cubic", 0.1, 0.1)
    with pytest.raises(ValueError):
        CovarianceKernel("gaussian", -0.1, 0.1)
    with pytest.raises(ValueError):
        CovarianceKernel("exponential", 0.1, 0.1, exponent_form="weird")


def test_exponential_kernel_uses_printed_exponent():
    k = CovarianceKernel("exponential", 0.5, 0.5, 2.0)
    pts = np.array([[0.0, 0.0], [0.3, 0.0]])
    val = k(pts, pts)[0, 1]
    # printed form: |dx| / (2 l^2)
    assert val == pytest.approx(2.0 * np.exp(-0.3 / (2 * 0.25)), rel=1e-14)
    k2 = CovarianceKernel("exponential", 0.5, 0.5, 2.0, exponent_form="per_l")
    assert k2(pts, pts)[0, 1] == pytest.approx(2.0 * np.exp(-0.3 / 0.5), rel=1e-14)


def test_sigma2_scaling_doubles_eigenvalues(mesh):
    b1 = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4, 1.0), 6)
    b2 = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4, 2.0), 6)
    assert np.allclose(b2.eigenvalues, 2.0 * b1.eigenvalues, rtol=1e-10)
    # eigenvectors unchanged up to sign, and the sign convention fixes them
    assert np.allclose(b2.modes, b1.modes, atol=1e-8)


def test_separable_kernel_tensor_product_oracle():
    """2-D eigenvalues are products of 1-D eigenvalues on a tensor grid."""
    nx, ny, lx, ly, s2 = 10, 8, 0.25, 0.35, 1.3
    mesh = StructuredMesh(nx, ny)
    basis = build_kl(mesh, CovarianceKernel("gaussian", lx, ly, s2), 12)

    def one_d_spectrum(n, ell, sig2):
        # 1-D linear elements on [0,1]: mass matrix and collocated kernel
        h = 1.0 / n
        xs = np.linspace(0.0, 1.0, n + 1)
        M = np.zeros((n + 1, n + 1))
        for e in range(n):
            M[e:e + 2, e:e + 2] += h * np.array([[2, 1], [1, 2]]) / 6.0
        C = sig2 * np.exp(-(xs[:, None] - xs[None, :]) ** 2 / (2 * ell ** 2))
        lam = sla.eigh(M @ C @ M, M, eigvals_only=True)
        return np.sort(lam)[::-1]

    lx_spec = one_d_spectrum(nx, lx, s2)
    ly_spec = one_d_spectrum(ny, ly, 1.0)
    products = np.sort(np.outer(lx_spec, ly_spec).ravel())[::-1]
    assert np.allclose(basis.eigenvalues, products[:12], rtol=1e-8)


def test_energy_ratio_monotone_and_bounded(mesh):
    kernel = CovarianceKernel("gaussian", 0.3, 0.4, 2.0)
    ratios = [build_kl(mesh, kernel, n).energy_ratio for n in (2, 5, 9)]
    assert ratios == sorted(ratios)
    assert ratios[-1] <= 1.0 + 1e-8


def test_orthonormality_residual(mesh, gauss_basis):
    M = assemble_mass(mesh, 1.0)
    gram = gauss_basis.modes.T @ (M @ gauss_basis.modes)
    assert np.abs(gram - np.eye(gauss_basis.n_modes)).max() <= 1e-8


def test_mode_sign_convention(gauss_basis):
    # first component of nonnegligible magnitude is positive per mode
    for j in range(gauss_basis.n_modes):
        col = gauss_basis.modes[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        assert col[nz[0]] > 0.0


def test_truncation_and_validation(mesh):
    with pytest.raises(ValueError, match="node count"):
        build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.3), mesh.n_nodes + 1)


def test_realize_zero_gives_mean(mesh):
    basis = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4), 5,
                     mean=0.7)
    field = realize_field(basis, np.zeros(5))
    assert np.allclose(field.values, 0.7, atol=1e-14)


def test_realize_unit_vector_is_weighted_mode(gauss_basis):
    z = np.zeros(gauss_basis.n_modes)
    z[3] = 1.0
    field = realize_field(gauss_basis, z)
    expected = np.sqrt(gauss_basis.eigenvalues[3]) * gauss_basis.modes[:, 3]
    assert np.allclose(field.values - gauss_basis.mean, expected, atol=1e-13)


def test_realize_project_roundtrip(gauss_basis):
    rng = np.random.default_rng(4)
    z = rng.standard_normal(gauss_basis.n_modes)
    field = realize_field(gauss_basis, z)
    back = project_coefficients(gauss_basis, field)
    assert np.abs(back - z).max() <= 1e-8


def test_realize_length_mismatch(gauss_basis):
    with pytest.raises(ValueError, match="coefficients"):
        realize_field(gauss_basis, np.zeros(3))


def _pair(mesh, rho, mode):
    b1 = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4, 1.0), 4)
    b2 = build_kl(mesh, CovarianceKernel("gaussian", 0.5, 0.2, 1.0), 3,
                  mean=1.0)
    return CorrelatedFieldSet([b1, b2], [1.2, 0.7], rho, mode)


def test_identity_correlation_decouples(mesh):
    fset = _pair(mesh, 0.0, "cholesky")
    rng = np.random.default_rng(6)
    z = rng.standard_normal(fset.n_z)
    f1, f2 = realize_correlated(fset, z)
    own1 = fset.bases[0].weighted_modes() @ z[:4]
    own2 = fset.bases[1].weighted_modes() @ z[4:]
    assert np.allclose(f1.values, 1.2 * own1, atol=1e-13)
    assert np.allclose(f2.values, 1.0 + 0.7 * own2, atol=1e-13)


def test_lead_second_form_with_own_block_zeroed(mesh):
    # zeroing the leader block leaves the follower with only its own modes
    fset = _pair(mesh, -0.4, "lead_second")
    rng = np.random.default_rng(7)
    z = rng.standard_normal(fset.n_z)
    z[4:] = 0.0          # kill the second field's block
    f1, f2 = realize_correlated(fset, z)
    assert np.allclose(f2.values, fset.bases[1].mean, atol=1e-13)
    own1 = fset.bases[0].weighted_modes() @ z[:4]
    assert np.allclose(f1.values, 1.2 * np.sqrt(1 - 0.4 ** 2) * own1, atol=1e-13)


def test_cholesky_factor_reproduces_correlation(mesh):
    rho = np.array([[1.0, -0.4], [-0.4, 1.0]])
    fset = _pair(mesh, -0.4, "cholesky")
    assert np.abs(fset.chol @ fset.chol.T - rho).max() <= 1e-12


def test_empirical_cross_correlation(mesh):
    fset = _pair(mesh, 0.6, "lead_first")
    rng = np.random.default_rng(11)
    node = mesh.node_index(5, 7)
    v1, v2 = [], []
    w1 = fset.bases[0].weighted_modes()[node]
    w2 = fset.bases[1].weighted_modes()[node]
    for _ in range(10000):
        z = rng.standard_normal(fset.n_z)
        s1 = w1 @ z[:4]
        s2 = w2 @ z[4:]
        v1.append(s1)
        v2.append(0.6 * s1 + np.sqrt(1 - 0.36) * s2)
    corr = np.corrcoef(v1, v2)[0, 1]
    # the sampled construction realizes the configured correlation
    f1, f2 = realize_correlated(fset, rng.standard_normal(fset.n_z))
    assert abs(corr - 0.6) <= 0.05


def test_correlation_validation(mesh):
    with pytest.raises(ValueError, match="positive definite"):
        _pair(mesh, 1.5, "cholesky")
    b1 = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4), 2)
    with pytest.raises(ValueError, match="two fields"):
        CorrelatedFieldSet([b1], [1.0], 0.5, "lead_first")
    fset = _pair(mesh, 0.5, "cholesky")
    with pytest.raises(ValueError, match="coefficients"):
        realize_correlated(fset, np.zeros(2))


def _layers(mesh, rho=0.8):
    b1 = build_kl(mesh, CovarianceKernel("gaussian", 0.2, 0.2, 1.0), 3)
    b2 = build_kl(mesh, CovarianceKernel("gaussian", 0.1, 0.4, 1.0), 4)
    fset = CorrelatedFieldSet([b1, b2], [0.4, 1.0], rho, "lead_first")
    regions = [[[0.0, 1.0, 0.0, 0.25], [0.0, 1.0, 0.75, 1.0]],
               [[0.0, 1.0, 0.25, 0.75]]]
    return MixedFieldSpec(mesh, regions, fset)


def test_mixed_single_subdomain_equals_plain_field(mesh):
    basis = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.4, 1.0), 3)
    fset = CorrelatedFieldSet([basis, basis], [1.0, 1.0], 0.0, "cholesky")
    spec = MixedFieldSpec(mesh, [[[0.0, 1.0, 0.0, 1.0]], []], fset)
    rng = np.random.default_rng(13)
    z = rng.standard_normal(spec.n_z)
    stitched = realize_mixed(spec, z)
    plain = realize_correlated(fset, z)[0]
    assert stitched.kind == "element"
    assert np.allclose(stitched.values, plain.element_values(), atol=1e-13)


def test_mixed_two_constants(mesh):
    spec = _layers(mesh)
    fields = [ScalarField.constant(mesh, c) for c in (2.0, 5.0)]
    import fracbayes.randfield as rf
    orig = rf.realize_correlated
    try:
        rf.realize_correlated = lambda fset, z: fields
        stitched = realize_mixed(spec, np.zeros(spec.n_z))
    finally:
        rf.realize_correlated = orig
    vals = np.unique(stitched.values)
    assert np.allclose(vals, [2.0, 5.0])
    # geometry: middle band carries the second value
    mids = mesh.element_midpoints
    middle = (mids[:, 1] > 0.25) & (mids[:, 1] < 0.75)
    assert np.all(stitched.values[middle] == 5.0)
    assert np.all(stitched.values[~middle] == 2.0)


def test_mixed_jumps_only_across_interfaces(mesh):
    spec = _layers(mesh)
    rng = np.random.default_rng(17)
    stitched = realize_mixed(spec, rng.standard_normal(spec.n_z))
    subfields = realize_correlated(spec.field_set,
                                   rng.standard_normal(spec.n_z))
    # oracle: per-element label lookup agrees with the stitch
    per_elem = np.vstack([f.element_values() for f in subfields])
    labels = spec.labels
    mids = mesh.element_midpoints
    expect = np.where((mids[:, 1] > 0.25) & (mids[:, 1] < 0.75), 1, 0)
    assert np.array_equal(labels, expect)


def test_mixed_coverage_validation(mesh):
    b = build_kl(mesh, CovarianceKernel("gaussian", 0.3, 0.3), 2)
    fset = CorrelatedFieldSet([b, b], [1.0, 1.0], 0.5, "cholesky")
    with pytest.raises(ValueError, match="not covered"):
        MixedFieldSpec(mesh, [[[0.0, 1.0, 0.0, 0.25]],
                              [[0.0, 1.0, 0.75, 1.0]]], fset)
    with pytest.raises(ValueError, match="covered by subdomains"):
        MixedFieldSpec(mesh, [[[0.0, 1.0, 0.0, 0.5]],
                              [[0.0, 1.0, 0.25, 1.0]]], fset)


def test_kl_serialization_roundtrip(tmp_path, gauss_basis):
    save_kl_basis(gauss_basis, tmp_path / "kl")
    back = load_kl_basis(tmp_path / "kl")
    assert np.allclose(back.eigenvalues, gauss_basis.eigenvalues)
    assert np.allclose(back.modes, gauss_basis.modes)
    assert np.allclose(back.mean, gauss_basis.mean)
    assert back.energy_ratio == pytest.approx(gauss_basis.energy_ratio)
    assert back.kernel == gauss_basis.kernel
