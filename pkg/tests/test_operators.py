import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monospde.operators import (
    GridOperator,
    SmoothingFamily,
    build_laplacian_1d,
    laplacian_eigenpairs,
    node_coordinates,
    op_resolvent,
    op_yosida,
    smoothing_apply,
    zero_operator,
)


@pytest.fixture
def lap():
    return build_laplacian_1d(24, 2.0)


def test_stencil_small():
    A = build_laplacian_1d(3, 4.0)
    assert A.h == 1.0
    assert np.array_equal(A.matrix, [[2, -1, 0], [-1, 2, -1], [0, -1, 2]])


def test_eigenvalues_small_against_dense_solver():
    A = build_laplacian_1d(3, 4.0)
    closed = np.sort(2 - 2 * np.cos(np.arange(1, 4) * np.pi / 4))
    assert np.allclose(closed, [2 - np.sqrt(2), 2, 2 + np.sqrt(2)])
    assert np.allclose(np.linalg.eigvalsh(A.matrix), closed)


def test_closed_form_eigenpairs():
    A = build_laplacian_1d(17, 1.5)
    vals, vecs = laplacian_eigenpairs(17, 1.5)
    assert np.allclose(A.matrix @ vecs, vecs * vals)
    assert np.allclose(vecs.T @ vecs, np.eye(17))


def test_constant_vector_boundary_entries():
    A = build_laplacian_1d(6, 7.0)
    out = A.apply(np.ones(6))
    assert np.allclose(out[1:-1], 0.0)
    assert np.allclose(out[[0, -1]], 1.0 / A.h**2)


def test_rejects_bad_sizes():
    with pytest.raises(ValueError):
        build_laplacian_1d(1)
    with pytest.raises(ValueError):
        build_laplacian_1d(4, 0.0)


def test_rejects_nonsymmetric_and_indefinite():
    with pytest.raises(ValueError, match="symmetric"):
        GridOperator(np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0)
    with pytest.raises(ValueError, match="semidefinite"):
        GridOperator(np.diag([1.0, -1.0]), 1.0)


def test_coercivity_and_positive_definite(lap):
    assert lap.coercivity == 1.0
    assert lap.min_eigenvalue() > 0
    v = np.random.default_rng(0).standard_normal((50, lap.dim))
    assert np.allclose(lap.inner(lap.apply(v), v), lap.v_norm(v) ** 2)


def test_symmetry_on_random_pairs(lap):
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal((2, 100, lap.dim))
    assert np.allclose(lap.inner(lap.apply(u), v), lap.inner(u, lap.apply(v)))


def test_resolvent_small_lambda(lap):
    v = np.sin(np.linspace(0, 3, lap.dim))
    y = op_resolvent(lap, 1e-12, v)
    assert np.linalg.norm(y - v) / np.linalg.norm(v) < 1e-8


def test_resolvent_eigenvector(lap):
    vals, vecs = laplacian_eigenpairs(lap.dim, lap.length)
    for k in (0, 5, 23):
        y = op_resolvent(lap, 0.01, vecs[:, k])
        assert np.allclose(y, vecs[:, k] / (1 + 0.01 * vals[k]))


def test_resolvent_zero_and_validation(lap):
    assert np.array_equal(op_resolvent(lap, 0.5, np.zeros(lap.dim)), np.zeros(lap.dim))
    with pytest.raises(ValueError):
        op_resolvent(lap, 0.0, np.ones(lap.dim))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(1e-4, 10.0))
def test_resolvent_contraction_in_H(seed, lam):
    A = build_laplacian_1d(12)
    v = np.random.default_rng(seed).standard_normal(12)
    assert A.h_norm(op_resolvent(A, lam, v)) <= A.h_norm(v) * (1 + 1e-12)


def test_thomas_matches_dense_solve(lap):
    rng = np.random.default_rng(2)
    rhs = rng.standard_normal((5, 3, lap.dim))
    m = np.eye(lap.dim) + 0.3 * lap.matrix
    ref = np.linalg.solve(m, rhs.reshape(-1, lap.dim).T).T.reshape(rhs.shape)
    assert np.allclose(op_resolvent(lap, 0.3, rhs), ref)


def test_dense_fallback():
    rng = np.random.default_rng(3)
    b = rng.standard_normal((6, 6))
    A = GridOperator(b @ b.T, 0.1)
    assert not A.tridiagonal
    v = rng.standard_normal(6)
    assert np.allclose(op_resolvent(A, 0.7, v), np.linalg.solve(np.eye(6) + 0.7 * A.matrix, v))


def test_yosida_eigenvector(lap):
    vals, vecs = laplacian_eigenpairs(lap.dim, lap.length)
    k = 3
    out = op_yosida(lap, 0.02, vecs[:, k])
    assert np.allclose(out, vals[k] / (1 + 0.02 * vals[k]) * vecs[:, k])
    assert np.array_equal(op_yosida(lap, 0.02, np.zeros(lap.dim)), np.zeros(lap.dim))


def test_yosida_consistency_small_lambda(lap):
    v = np.sin(np.pi * node_coordinates(lap) / lap.length)
    errs = [np.linalg.norm(op_yosida(lap, lam, v) - lap.apply(v)) for lam in (1e-2, 1e-4, 1e-6)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] / np.linalg.norm(lap.apply(v)) < 1e-4


def test_yosida_energy_identity(lap):
    rng = np.random.default_rng(4)
    for lam in (1e-3, 0.1, 1.0):
        v = rng.standard_normal((100, lap.dim))
        J = op_resolvent(lap, lam, v)
        Al = op_yosida(lap, lam, v)
        lhs = lap.inner(Al, v)
        rhs = lap.inner(lap.apply(J), J) + lam * lap.inner(Al, Al)
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=0)


def test_maximum_principle(lap):
    inv = np.linalg.inv(np.eye(lap.dim) + 0.05 * lap.matrix)
    assert np.all(inv >= -1e-15)


def test_smoothing_sub_markov(lap):
    F = SmoothingFamily(lap, m=2, n_index=3)
    out = smoothing_apply(F, np.ones(lap.dim))
    assert np.all((out >= 0) & (out <= 1))
    rng = np.random.default_rng(5)
    f = rng.uniform(0, 1, (20, lap.dim))
    out = smoothing_apply(F, f)
    assert np.all((out >= -1e-15) & (out <= 1 + 1e-15))


def test_smoothing_eigenvector_m1(lap):
    vals, vecs = laplacian_eigenpairs(lap.dim, lap.length)
    F = SmoothingFamily(lap, m=1, n_index=7)
    assert np.allclose(smoothing_apply(F, vecs[:, 2]), vecs[:, 2] / (1 + vals[2] / 7))


def test_smoothing_strong_convergence(lap):
    v = np.sin(np.pi * node_coordinates(lap) / lap.length)
    F = SmoothingFamily(lap)
    errs = [np.linalg.norm(smoothing_apply(F.at(n), v) - v) / np.linalg.norm(v)
            for n in (4, 16, 64, 256, 4096)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 0.01


def test_smoothing_uniformly_bounded(lap):
    for n in (1, 4, 16, 64, 256):
        m = np.linalg.matrix_power(np.linalg.inv(np.eye(lap.dim) + lap.matrix / n), 2)
        assert np.linalg.norm(m, 2) <= 1 + 1e-12


def test_smoothing_commutes_with_A(lap):
    v = np.random.default_rng(6).standard_normal(lap.dim)
    F = SmoothingFamily(lap, n_index=16)
    left = smoothing_apply(F, lap.apply(v))
    right = lap.apply(smoothing_apply(F, v))
    assert np.allclose(left, right, rtol=0, atol=1e-10 * np.abs(right).max())


def test_smoothing_validation(lap):
    with pytest.raises(ValueError):
        SmoothingFamily(lap, m=0)


def test_zero_operator_allowed():
    A = zero_operator(4)
    assert np.allclose(op_resolvent(A, 1.0, np.arange(4.0)), np.arange(4.0))
