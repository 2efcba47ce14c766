import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monospde.integrator import (
    OVERFLOW_GUARD,
    AdditiveNoise,
    MultiplicativeNoise,
    NonContractionError,
    PicardDivergence,
    SegmentLimitError,
    StopRule,
    extend_solution,
    predicted_segments,
    solve_limit,
    solve_multiplicative,
    solve_regularized,
)
from monospde.monotone import LIBRARY, builtin_graph
from monospde.noise import MarkLaw, SemimartingaleSpec, sample_path, uniform_grid
from monospde.operators import build_laplacian_1d, laplacian_eigenpairs, zero_operator


def quiet(k, steps, T=1.0):
    return sample_path(SemimartingaleSpec(k_dim=k), uniform_grid(T, steps), 0)


def noisy(k, steps, seed=0, variance=1.0, rate=0.0):
    spec = SemimartingaleSpec(k_dim=k, wiener_cov=variance * np.eye(k), jump_rate=rate,
                              marks=MarkLaw("normal", (0.0,), 0.5))
    return sample_path(spec, uniform_grid(1.0, steps), seed)


def h_dist(A, a, b):
    return np.sqrt(A.h * np.sum((a - b) ** 2, axis=-1))


# ---------------------------------------------------------------- additive

@pytest.mark.parametrize("scheme", ["limit", "implicit", "explicit"])
def test_heat_eigenvector_first_order(scheme):
    A = build_laplacian_1d(16)
    vals, vecs = laplacian_eigenpairs(16, 1.0)
    w = vecs[:, 0] / math.sqrt(A.h)
    g = builtin_graph("zero")
    errs = []
    for N in (256, 512, 1024):
        Z = quiet(16, N)
        if scheme == "limit":
            sol = solve_limit(A, g, np.zeros((16, 16)), Z, w)
        else:
            sol = solve_regularized(A, g, 0.1, np.zeros((16, 16)), Z, w, drift=scheme)
        errs.append(float(h_dist(A, sol.x[-1], math.exp(-vals[0]) * w)))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_linear_ode_small_lambda():
    A = zero_operator(3)
    x0 = np.array([1.0, -2.0, 0.5])
    Z = quiet(3, 4096)
    sol = solve_regularized(A, builtin_graph("identity"), 1e-8, np.zeros((3, 3)), Z, x0)
    assert np.allclose(sol.x[-1], math.exp(-1.0) * x0, rtol=1e-3)


@pytest.mark.parametrize("scheme", ["limit", "implicit", "explicit"])
def test_pure_integral(scheme):
    A = zero_operator(2)
    Z = noisy(2, 64, rate=3.0)
    x0 = np.array([0.3, -0.1])
    g = builtin_graph("zero")
    if scheme == "limit":
        sol = solve_limit(A, g, np.eye(2), Z, x0)
    else:
        sol = solve_regularized(A, g, 0.5, np.eye(2), Z, x0, drift=scheme)
    assert np.allclose(sol.x, x0 + Z.values(), rtol=0, atol=1e-14)


def test_identity_limit_matches_lambda_dt():
    A = build_laplacian_1d(12)
    x0 = np.sin(np.linspace(0, 3, 12))
    diffs = []
    for N in (128, 256, 512):
        Z = noisy(12, N, seed=3)
        g = builtin_graph("identity")
        a = solve_limit(A, g, 0.2 * np.eye(12), Z, x0)
        b = solve_regularized(A, g, 1.0 / N, 0.2 * np.eye(12), Z, x0)
        diffs.append(float(np.max(h_dist(A, a.x, b.x))))
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 0.01


def test_exponential_decreasing_scalar():
    A = zero_operator(1)
    Z = quiet(1, 200, T=5.0)
    sol = solve_limit(A, builtin_graph("exponential"), np.zeros((1, 1)), Z, [1.0])
    x = sol.x[:, 0]
    assert np.all(np.diff(x) < 0) and np.all(x > 0)
    # scalar implicit-Euler oracle x_{k+1} + dt (exp(x_{k+1}) - 1) = x_k
    from scipy.optimize import brentq
    y = 1.0
    for _ in range(200):
        y = brentq(lambda s: s + 0.025 * math.expm1(s) - y, -1, 2, xtol=1e-15)
    assert x[-1] == pytest.approx(y, rel=1e-10)


def test_zero_initial_zero_noise():
    A = build_laplacian_1d(10)
    for name, params in LIBRARY:
        sol = solve_limit(A, builtin_graph(name, **params), np.zeros((10, 1)), quiet(1, 16),
                          np.zeros(10))
        assert np.array_equal(sol.x, np.zeros_like(sol.x))
        assert np.allclose(sol.xi, 0.0)


@pytest.mark.parametrize("name,params", LIBRARY)
def test_membership_and_positive_duality(name, params):
    A = build_laplacian_1d(16)
    g = builtin_graph(name, **params)
    Z = noisy(16, 128, seed=5, rate=2.0)
    x0 = np.sin(np.pi * np.arange(1, 17) / 17)
    sol = solve_limit(A, g, 0.5 * np.eye(16), Z, x0)
    tol = 1e-8 * np.maximum(1.0, np.abs(sol.x[1:]))
    assert np.all(g.contains(sol.x[1:], sol.xi[1:], tol))
    assert np.all(np.diff(sol.xi_energy) >= -1e-12)


def test_ensemble_equals_single_runs():
    A = build_laplacian_1d(8)
    g = builtin_graph("power", p=3)
    spec = SemimartingaleSpec.wiener(8, 0.5)
    from monospde.noise import sample_ensemble
    ens = sample_ensemble(spec, uniform_grid(1.0, 32), [1, 2])
    both = solve_limit(A, g, np.eye(8), ens, np.ones(8))
    for i in range(2):
        one = solve_limit(A, g, np.eye(8), ens[i], np.ones(8))
        assert np.array_equal(both.x[i], one.x)


def test_explicit_overflow_guard():
    A = build_laplacian_1d(8)
    Z = noisy(8, 64)
    sol = solve_regularized(A, builtin_graph("exponential"), 1e-4, np.eye(8), Z,
                            np.full(8, 20.0), drift="explicit")
    assert np.all(np.isfinite(sol.x))
    assert np.all(np.sqrt(sol.norm_sq()) <= OVERFLOW_GUARD)


def test_regularized_validation():
    A = build_laplacian_1d(4)
    Z = quiet(4, 8)
    with pytest.raises(ValueError):
        solve_regularized(A, builtin_graph("identity"), 0.0, np.eye(4), Z, np.zeros(4))
    with pytest.raises(ValueError):
        solve_regularized(A, builtin_graph("identity"), 0.1, np.eye(4), Z, np.zeros(4),
                          drift="midpoint")
    with pytest.raises(ValueError):
        solve_limit(A, builtin_graph("identity"), np.eye(3), quiet(3, 8), np.zeros(4))
    with pytest.raises(ValueError, match="grid"):
        solve_limit(A, builtin_graph("identity"), np.zeros((5, 4, 4)), Z, np.zeros(4))


def test_time_dependent_G():
    A = zero_operator(1)
    Z = noisy(1, 16, seed=2)
    G = np.linspace(0, 1, 17)[:, None, None] * np.ones((1, 1))
    sol = solve_limit(A, builtin_graph("zero"), AdditiveNoise(G), Z, [0.0])
    assert np.allclose(sol.x[-1, 0], np.sum(G[:-1, 0, 0] * Z.dZ[:, 0]))


def test_direct_system_restriction():
    A = build_laplacian_1d(8)
    g = builtin_graph("heaviside-filled")
    Z = noisy(8, 64, seed=9, rate=1.0)
    full = solve_limit(A, g, np.eye(8), Z, np.ones(8))
    part = solve_limit(A, g, np.eye(8), Z.truncate(40), np.ones(8))
    cut = full.restrict(40)
    assert np.array_equal(part.x, cut.x) and np.array_equal(part.xi, cut.xi)
    assert np.array_equal(part.xi_energy, cut.xi_energy)


# ---------------------------------------------------------------- multiplicative

def test_constant_coefficient_one_step_fixed_point():
    A = build_laplacian_1d(6)
    g = builtin_graph("power", p=3)
    G0 = 0.3 * np.eye(6)
    Z = noisy(6, 64, seed=1)
    sol, tau, its = solve_multiplicative(A, g, MultiplicativeNoise.constant(G0), Z, np.ones(6))
    ref = solve_limit(A, g, G0, Z, np.ones(6))
    assert tau == 64
    assert its == 2  # the second sweep confirms the first
    assert np.array_equal(sol.x, ref.x)


def test_sine_coefficient_contracts():
    A = build_laplacian_1d(16)
    g = builtin_graph("exponential")
    Z = noisy(16, 256, seed=4, variance=0.05)
    sol, tau, its = solve_multiplicative(A, g, MultiplicativeNoise.sine_diagonal(0.1), Z,
                                         np.sin(np.linspace(0, 3, 16)))
    info = sol.picard[0]
    assert its <= 25
    assert info["distances"][-1] < 1e-10
    assert max(info["ratios"]) < 1
    assert 0 < tau <= 256


def test_zero_initial_stays_zero():
    A = build_laplacian_1d(8)
    sol, _, _ = solve_multiplicative(A, builtin_graph("sinh"), MultiplicativeNoise.sine_diagonal(0.3),
                                     noisy(8, 64), np.zeros(8))
    assert np.array_equal(sol.x, np.zeros_like(sol.x))


def test_localized_uniqueness():
    A = build_laplacian_1d(8)
    g = builtin_graph("identity")
    noise = MultiplicativeNoise.sine_diagonal(0.2)
    Z = noisy(8, 128, seed=6, variance=0.05)
    x0 = np.linspace(-1, 1, 8)
    a, tau, _ = solve_multiplicative(A, g, noise, Z, x0, tol=1e-10)
    Y0 = np.random.default_rng(0).standard_normal((tau + 1, 8))
    b, tau_b, _ = solve_multiplicative(A, g, noise, Z, x0, tol=1e-10, Y0=Y0)
    assert tau == tau_b
    assert np.max(h_dist(A, a.x, b.x)) < 10 * 1e-10


def test_non_contraction_reported():
    A = build_laplacian_1d(8)
    # misdeclared Lipschitz constant: the budget never stops a strong coefficient
    noise = MultiplicativeNoise(lambda u: 50 * np.sin(u)[..., None] * np.eye(8), 0.0)
    with pytest.raises(NonContractionError, match="smaller alpha"):
        solve_multiplicative(A, builtin_graph("exponential"), noise, noisy(8, 64), np.ones(8))


def test_picard_divergence():
    A = build_laplacian_1d(8)
    with pytest.raises(PicardDivergence):
        solve_multiplicative(A, builtin_graph("identity"), MultiplicativeNoise.sine_diagonal(0.1),
                             noisy(8, 64), np.ones(8), max_picard=2)


def test_multiplicative_needs_single_path():
    from monospde.noise import sample_ensemble
    A = build_laplacian_1d(4)
    ens = sample_ensemble(SemimartingaleSpec.wiener(4), uniform_grid(1.0, 8), [0, 1])
    with pytest.raises(ValueError):
        solve_multiplicative(A, builtin_graph("identity"), MultiplicativeNoise.sine_diagonal(), ens,
                             np.ones(4))


def test_stop_rule():
    with pytest.raises(ValueError):
        StopRule(alpha=1.0)
    with pytest.raises(ValueError):
        StopRule(kind="sometime")
    C = np.full(11, 4.0)
    L = np.linspace(0, 1, 11)
    assert StopRule(0.25).first_index(0, C=C, L=L) == 1
    assert StopRule(0.25).first_index(0, C=C, L=0.1 * L) == 7
    assert StopRule(0.25).first_index(3, C=C, L=np.zeros(11)) == 10
    assert StopRule(kind="fixed-time", index=4).first_index(0) == 4
    assert StopRule(kind="norm-cap", level=2.0).first_index(0, norms=[0, 1, 3, 1]) == 2


def test_extend_single_segment_when_L_constant():
    A = build_laplacian_1d(8)
    sol = extend_solution(A, builtin_graph("identity"), MultiplicativeNoise.constant(np.eye(8)),
                          noisy(8, 64), np.ones(8))
    assert sol.segments == (0, 64)


def test_extend_without_noise_matches_limit():
    A = build_laplacian_1d(8)
    g = builtin_graph("floor")
    Z = quiet(8, 64)
    x0 = np.linspace(0, 2, 8)
    ext = extend_solution(A, g, MultiplicativeNoise.sine_diagonal(0.3), Z, x0)
    ref = solve_limit(A, g, np.zeros((8, 8)), Z, x0)
    assert np.allclose(ext.x, ref.x, rtol=0, atol=1e-12)


def test_extend_reaches_horizon():
    A = build_laplacian_1d(16)
    Z = noisy(16, 1024, seed=2, variance=0.05)
    sol = extend_solution(A, builtin_graph("exponential"), MultiplicativeNoise.sine_diagonal(0.3), Z,
                          np.sin(np.linspace(0, 3, 16)))
    assert sol.segments[0] == 0 and sol.segments[-1] == 1024
    assert all(a <= b for a, b in zip(sol.segments, sol.segments[1:]))
    assert len(sol.segments) - 1 > 1
    seg_end = list(sol.segments[1:])
    assert all(1 <= info["iterations"] <= 25 for info in sol.picard)
    assert seg_end[-1] == 1024


def test_extend_segment_limit():
    A = build_laplacian_1d(4)
    with pytest.raises(SegmentLimitError):
        extend_solution(A, builtin_graph("identity"), MultiplicativeNoise.sine_diagonal(0.5),
                        noisy(4, 64), np.ones(4), max_segments=2)


def test_predicted_segments_linear_budget():
    # L(t) = t, C = 4: segments of length alpha / 4
    assert predicted_segments(lambda t: 4.0, lambda t: t, 0.25, 1.0) == 16
    assert predicted_segments(lambda t: 4.0, lambda t: 0.0, 0.25, 1.0) == 1


@settings(max_examples=15, deadline=None)
@given(c=st.floats(4.0, 20.0), slope=st.floats(0.1, 2.0), alpha=st.floats(0.05, 0.9))
def test_predicted_segments_closed_form(c, slope, alpha):
    count = predicted_segments(lambda t: c, lambda t: slope * t, alpha, 1.0)
    assert abs(count - c * slope / alpha) <= 1.0 + 1e-9
