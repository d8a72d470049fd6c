import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from currentglm.bases import (basis_hk_gram, build_basis, coefficient_matrix, coefficients,
                              covariance_basis, field_coefficients, kernel_basis,
                              kernel_spectrum, load_basis, mixed_basis, reconstruction_errors,
                              save_basis)
from currentglm.errors import DataError
from currentglm.rkhs import (CurrentRepr, KernelSpec, build_grid, hk_inner, l2_inner,
                             represent_values)


def l2_gram(F, grid):
    return grid.weight * np.einsum("ina,jna->ij", F, F)


# ---------------------------------------------------------------- kernel basis

def test_single_point_kernel_basis():
    g = build_grid([0, 0, 0], [1, 1, 1], 1.0)
    assert g.n == 1 and g.weight == 1.0
    b = kernel_basis(g, KernelSpec(1.0), 3)
    np.testing.assert_allclose(b.spectrum.eigenvalues, [1, 1, 1])
    np.testing.assert_allclose(b.elements.reshape(3, 3), np.eye(3))
    with pytest.raises(DataError, match="exceeds"):
        kernel_basis(g, KernelSpec(1.0), 4)


def test_kernel_basis_relations(grid64, kernel):
    b = kernel_basis(grid64, kernel, 30)
    psi = b.spectrum.eigenvectors[:30]
    lam = b.spectrum.eigenvalues[:30]
    np.testing.assert_allclose(l2_gram(psi, grid64), np.eye(30), atol=1e-8)
    H = b.kspec.hk_gram(psi)
    np.testing.assert_allclose(H * lam[None, :], np.eye(30), atol=1e-6)
    np.testing.assert_array_equal(basis_hk_gram(b), np.eye(30))
    # eigenvalues come in triplets, descending
    np.testing.assert_array_equal(lam[0::3], lam[1::3])
    assert np.all(np.diff(lam[::3]) <= 0)


def test_kernel_basis_hk_gram_by_representers(grid64, kernel):
    # independent route: hk_inner of representer expansions of rho_l
    b = kernel_basis(grid64, kernel, 6)
    reps = [represent_values(e, grid64, kernel, ridge=0.0) for e in b.elements]
    G = np.array([[hk_inner(p, q) for q in reps] for p in reps])
    np.testing.assert_allclose(G, np.eye(6), atol=1e-6)


def test_near_constant_kernel_rank_one_limit():
    g = build_grid([0, 0, 0], [3, 3, 3], 1.0)
    k = KernelSpec(200.0)
    ks = kernel_spectrum(g, k)
    lam = ks.operator_values
    assert lam[0] == pytest.approx(g.weight * g.n, rel=1e-3)
    assert lam[0] >= 10 * lam[1]


def test_kernel_coefficient_of_basis_element(grid64, kernel):
    b = kernel_basis(grid64, kernel, 7)
    rho3 = represent_values(b.elements[2], grid64, kernel, ridge=0.0)
    e3 = np.zeros(7)
    e3[2] = 1
    np.testing.assert_allclose(coefficients(rho3, b), e3, atol=1e-8)


def test_zero_field_coefficients(grid64, kernel, sample40):
    zero = CurrentRepr(grid64, kernel, np.zeros((grid64.n, 3)))
    np.testing.assert_array_equal(coefficients(zero, kernel_basis(grid64, kernel, 5)), 0)
    cb = covariance_basis(sample40, grid64, kernel, 5)
    want = -grid64.weight * np.einsum("na,lna->l", cb.sample_mean, cb.elements)
    np.testing.assert_allclose(coefficients(zero, cb), want, rtol=1e-12)


# ---------------------------------------------------------------- covariance basis

def test_two_field_covariance_rank_one(grid64, kernel, rng):
    F = rng.normal(size=(2, grid64.n, 3))
    b = covariance_basis(F, grid64, kernel, 1)
    assert b.spectrum.numerical_rank == 1
    d = (F[0] - F[1]).ravel()
    v = b.elements[0].ravel()
    cos = abs(v @ d) / np.linalg.norm(v) / np.linalg.norm(d)
    assert cos == pytest.approx(1.0, abs=1e-12)
    # eigenvalue = w * |d/2|^2 (two samples at +-d/2, 1/n normalization)
    assert b.spectrum.eigenvalues[0] == pytest.approx(grid64.weight * (d @ d) / 4, rel=1e-12)
    with pytest.raises(DataError, match="rank"):
        covariance_basis(F, grid64, kernel, 2)


def test_rank_one_gram_two_paths(grid64, kernel, rng):
    F = rng.normal(size=(2, grid64.n, 3))
    b = covariance_basis(F, grid64, kernel, 1)
    g1 = basis_hk_gram(b)[0, 0]
    rep = represent_values(b.elements[0], grid64, kernel, ridge=0.0)
    assert g1 == pytest.approx(hk_inner(rep, rep), rel=1e-6)


def test_covariance_basis_properties(grid64, kernel, sample40):
    b = covariance_basis(sample40, grid64, kernel, 12)
    np.testing.assert_allclose(l2_gram(b.elements, grid64), np.eye(12), atol=1e-10)
    C = coefficient_matrix(sample40, b)
    # coefficients are centered, with variance equal to the eigenvalues
    np.testing.assert_allclose(C.mean(0), 0, atol=1e-10 * np.abs(C).max())
    np.testing.assert_allclose(C.var(0), b.spectrum.eigenvalues[:12], rtol=1e-9)
    cov = np.cov(C.T, bias=True)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() <= 1e-9 * cov.max()


def test_covariance_reconstruction_full_rank(grid64, kernel, sample40):
    full = covariance_basis(sample40, grid64, kernel, 39)
    err = reconstruction_errors(sample40, full)
    assert np.all(np.diff(err) <= 1e-12)
    scale = np.mean([np.sqrt(l2_inner(c.values(), c.values(), grid64)) for c in sample40])
    assert err[-1] <= 1e-8 * scale


def test_sample_too_small(grid64, kernel, sample40):
    with pytest.raises(DataError, match="n ≥ 2"):
        covariance_basis(sample40[:1], grid64, kernel, 1)
    with pytest.raises(DataError, match="identical"):
        mixed_basis([sample40[0]] * 3, grid64, kernel, 1)


def test_sample_grid_mismatch(kernel, sample40):
    other = build_grid([0, 0, 0], [4, 4, 4], 2.0)
    with pytest.raises(DataError):
        covariance_basis(sample40, other, kernel, 2)


# ---------------------------------------------------------------- mixed basis

def test_mixed_gram_identity(grid64, kernel, sample40):
    b = mixed_basis(sample40, grid64, kernel, 10)
    np.testing.assert_allclose(basis_hk_gram(b), np.eye(10), atol=1e-6)


def test_mixed_basis_diagonalizes_covariance(grid64, kernel, sample40):
    b = mixed_basis(sample40, grid64, kernel, 10)
    X = np.array([c.values() for c in sample40]) - b.sample_mean
    n, w = len(X), grid64.weight
    # <u_i, L_Gamma u_j>_L2 = (w^2 / n) sum_k <X_k, u_i> <X_k, u_j>
    P = np.einsum("kna,ina->ki", X, b.elements)
    M = (w**2 / n) * P.T @ P
    eta = b.spectrum.eigenvalues[:10]
    np.testing.assert_allclose(M, np.diag(eta), atol=1e-6 * eta[0])


def test_mixed_expansion_in_span(grid64, kernel, sample40, rng):
    b = mixed_basis(sample40, grid64, kernel, 39)
    xi = rng.normal(size=39)
    f = b.sample_mean + np.einsum("l,lna->na", xi, b.elements)
    np.testing.assert_allclose(field_coefficients(f, b), xi, rtol=1e-6, atol=1e-6)


def test_mixed_reconstruction_monotone(grid64, kernel, sample40):
    b = mixed_basis(sample40, grid64, kernel, 20)
    err = reconstruction_errors(sample40, b)
    assert np.all(np.diff(err) <= 1e-12)


def test_aligned_sample_matches_kernel_basis(kernel):
    # sample whose centered covariance is proportional to the kernel matrix;
    # unequal box sides keep the leading scalar eigenvalues simple
    grid = build_grid([0, 0, 0], [5, 4, 3], 1.0)
    ks = kernel_spectrum(grid, kernel)
    root = ks.U * np.sqrt(ks.scalar_values)
    F = []
    for i in range(root.shape[1]):
        for a in range(3):
            f = np.zeros((grid.n, 3))
            f[:, a] = root[:, i]
            F += [f, -f]
    F = np.array(F)
    kb = kernel_basis(grid, kernel, 15)
    mb = mixed_basis(F, grid, kernel, 15)
    ang = subspace_angles(kb.elements.reshape(15, -1).T, mb.elements.reshape(15, -1).T)
    assert ang.max() <= 1e-6


# ---------------------------------------------------------------- dispatch, io

def test_build_basis_dispatch(grid64, kernel, sample40):
    for kind in ("kernel", "covariance", "mixed"):
        b = build_basis(kind, sample40, grid64, kernel, 4)
        assert b.kind == kind and b.r == 4 and b.elements.shape == (4, grid64.n, 3)
    with pytest.raises(DataError, match="unknown"):
        build_basis("spline", sample40, grid64, kernel, 4)


def test_truncate_is_prefix(grid64, kernel, sample40):
    b = mixed_basis(sample40, grid64, kernel, 8)
    t = b.truncate(3)
    np.testing.assert_array_equal(t.elements, b.elements[:3])
    np.testing.assert_array_equal(coefficients(sample40[1], t), coefficients(sample40[1], b)[:3])
    with pytest.raises(DataError):
        b.truncate(9)


@pytest.mark.parametrize("kind", ["kernel", "covariance", "mixed"])
def test_save_load_roundtrip(tmp_path, grid64, kernel, sample40, kind):
    b = build_basis(kind, sample40, grid64, kernel, 5)
    p = tmp_path / f"{kind}.npz"
    save_basis(b, p)
    back = load_basis(p, grid=grid64)
    np.testing.assert_array_equal(back.elements, b.elements)
    np.testing.assert_array_equal(coefficients(sample40[3], back), coefficients(sample40[3], b))


def test_basis_sign_convention_deterministic(grid64, kernel, sample40):
    a = mixed_basis(sample40, grid64, kernel, 6)
    b = mixed_basis(list(reversed(sample40)), grid64, kernel, 6)
    np.testing.assert_allclose(a.elements, b.elements, atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(3, 12))
@settings(max_examples=15, deadline=None)
def test_kl_variance_order(seed, n):
    rng = np.random.default_rng(seed)
    g = build_grid([0, 0, 0], [2, 2, 2], 1.0)
    k = KernelSpec(1.0)
    F = rng.normal(size=(n, g.n, 3)) * rng.uniform(0.1, 3, size=(1, g.n, 3))
    b = covariance_basis(F, g, k, min(n - 1, 6))
    v = coefficient_matrix([CurrentRepr(g, k, f) for f in np.linalg.solve(
        g.kernel_matrix(k), F)], b).var(0)
    assert np.all(np.diff(v) <= 1e-9 * v[0])
