"""Finite-dimensional variational triple on a 1-D grid.

``H`` is ``R^n`` with inner product ``h * sum(u * v)``; the discrete V-norm is
``<A v, v>^{1/2}`` so the coercivity constant is exactly one.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class _Tridiagonal:
    """Thomas factorisation of a tridiagonal matrix, solves along the last axis."""

    def __init__(self, sub, diag, sup):
        n = diag.size
        self.sub = np.asarray(sub, dtype=float)
        self.cp = np.empty(max(n - 1, 0))
        self.inv = np.empty(n)
        self.inv[0] = 1.0 / diag[0]
        for i in range(n):
            if i > 0:
                denom = diag[i] - sub[i - 1] * self.cp[i - 1]
                self.inv[i] = 1.0 / denom
            if i < n - 1:
                self.cp[i] = sup[i] * self.inv[i]
        self.n = n

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        y = np.empty_like(rhs)
        y[..., 0] = rhs[..., 0] * self.inv[0]
        for i in range(1, self.n):
            y[..., i] = (rhs[..., i] - self.sub[i - 1] * y[..., i - 1]) * self.inv[i]
        for i in range(self.n - 2, -1, -1):
            y[..., i] -= self.cp[i] * y[..., i + 1]
        return y


class _Dense:
    def __init__(self, matrix):
        self.factor = cho_factor(matrix)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        flat = rhs.reshape(-1, rhs.shape[-1]).T
        return cho_solve(self.factor, flat).T.reshape(rhs.shape)


def _is_tridiagonal(m):
    n = m.shape[0]
    band = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= 1
    return not np.any(m[~band])


@dataclass(frozen=True, eq=False)
class GridOperator:
    """Symmetric nonnegative matrix standing in for ``A: V -> V'``.

    Parameters
    ----------
    matrix : ndarray, shape (n, n)
    h : float
        Quadrature weight of the ``H`` inner product (the mesh size).
    length : float
        Domain length, kept for reports.
    """

    matrix: np.ndarray
    h: float
    length: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("matrix must be symmetric")
        if np.linalg.eigvalsh(m)[0] < -1e-10 * max(1.0, np.abs(m).max()):
            raise ValueError("matrix must be positive semidefinite")
        if not self.h > 0:
            raise ValueError("h must be positive")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def coercivity(self) -> float:
        return 1.0

    @property
    def tridiagonal(self) -> bool:
        return _is_tridiagonal(self.matrix)

    def apply(self, v):
        return np.asarray(v, dtype=float) @ self.matrix.T

    def inner(self, u, v):
        return self.h * np.sum(np.asarray(u) * np.asarray(v), axis=-1)

    def h_norm(self, v):
        return np.sqrt(self.inner(v, v))

    def v_norm_sq(self, v):
        return self.inner(self.apply(v), v)

    def v_norm(self, v):
        return np.sqrt(np.maximum(self.v_norm_sq(v), 0.0))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def eigen(self):
        """Dense eigendecomposition ``(values, vectors)``, columns orthonormal."""
        return np.linalg.eigh(self.matrix)

    def shifted_solver(self, lam):
        """Factorisation of ``I + lam A``, cached per ``lam``."""
        key = float(lam)
        solver = self._cache.get(key)
        if solver is None:
            m = np.eye(self.dim) + key * self.matrix
            if self.tridiagonal:
                solver = _Tridiagonal(np.diag(m, -1).copy(), np.diag(m).copy(),
                                      np.diag(m, 1).copy())
            else:
                solver = _Dense(m)
            self._cache[key] = solver
        return solver

    def to_config(self) -> dict:
        return {"n": self.dim, "length": self.length}


def build_laplacian_1d(n, length=1.0) -> GridOperator:
    """Dirichlet finite-difference Laplacian on ``n`` interior nodes."""
    if n < 2:
        raise ValueError("need at least 2 interior nodes")
    if not length > 0:
        raise ValueError("length must be positive")
    dx = length / (n + 1)
    m = (2.0 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / dx**2
    return GridOperator(m, h=dx, length=length)


def zero_operator(n, length=1.0) -> GridOperator:
    """``A = 0``; allowed for tests of the drift and noise parts alone."""
    return GridOperator(np.zeros((n, n)), h=length / (n + 1), length=length)


def laplacian_eigenpairs(n, length=1.0):
    """Closed-form eigenpairs of :func:`build_laplacian_1d`, Euclidean-normalised."""
    dx = length / (n + 1)
    k = np.arange(1, n + 1)
    values = (2.0 - 2.0 * np.cos(k * np.pi / (n + 1))) / dx**2
    i = np.arange(1, n + 1)
    vectors = np.sin(np.outer(i, k) * np.pi / (n + 1)) * np.sqrt(2.0 / (n + 1))
    return values, vectors


def node_coordinates(op: GridOperator):
    return op.h * np.arange(1, op.dim + 1)


def op_resolvent(A: GridOperator, lam, v):
    """``(I + lam A)^{-1} v``."""
    if not lam > 0:
        raise ValueError("lam must be positive")
    return A.shifted_solver(lam).solve(v)


def op_yosida(A: GridOperator, lam, v):
    """``A_lam v = A (I + lam A)^{-1} v``."""
    return A.apply(op_resolvent(A, lam, v))


@dataclass(frozen=True)
class SmoothingFamily:
    """``T_n = (I + A / n)^{-m}``; sub-Markovian for the Dirichlet Laplacian."""

    base: GridOperator
    m: int = 2
    n_index: int = 1

    def __post_init__(self):
        if self.m < 1 or self.n_index < 1:
            raise ValueError("m and n_index must be >= 1")

    def at(self, n_index) -> "SmoothingFamily":
        return SmoothingFamily(self.base, self.m, n_index)


def smoothing_apply(F: SmoothingFamily, v):
    out = np.asarray(v, dtype=float)
    solver = F.base.shifted_solver(1.0 / F.n_index)
    for _ in range(F.m):
        out = solver.solve(out)
    return out
