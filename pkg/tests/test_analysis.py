import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monospde.analysis import (
    CSV_COLUMNS,
    StudyReport,
    apriori_monitor,
    apriori_rhs,
    apriori_study,
    dependence_study,
    energy_ledger,
    gronwall_study,
    heat_study,
    ito_residual,
    lambda_study,
    mean_se,
    residual_norms,
    uniform_integrability_diag,
)
from monospde.integrator import solve_limit, solve_regularized
from monospde.monotone import builtin_graph, builtin_potential
from monospde.noise import MarkLaw, SemimartingaleSpec, sample_ensemble, sample_path, uniform_grid
from monospde.operators import build_laplacian_1d, laplacian_eigenpairs, zero_operator


def mixed(k, variance=0.5, rate=2.0):
    return SemimartingaleSpec(k_dim=k, wiener_cov=variance * np.eye(k), jump_rate=rate,
                              marks=MarkLaw("normal", (0.0,), 0.5))


def quiet(k, steps):
    return sample_path(SemimartingaleSpec(k_dim=k), uniform_grid(1.0, steps), 0)


# ---------------------------------------------------------------- residual

def test_residual_dissipative_first_order():
    A = build_laplacian_1d(16)
    x0 = np.sin(np.pi * np.arange(1, 17) / 17)
    G = np.zeros((16, 1))
    peaks = []
    for N in (256, 512, 1024):
        sol = solve_limit(A, builtin_graph("zero"), G, quiet(1, N), x0)
        r = ito_residual(sol, G, quiet(1, N))
        assert np.all(r <= 1e-14)
        assert np.all(np.diff(r) <= 1e-14)
        peaks.append(residual_norms(r)[0])
    for a, b in zip(peaks, peaks[1:]):
        assert 1.6 <= a / b <= 2.4


def test_residual_zero_data():
    A = build_laplacian_1d(8)
    Z = sample_path(mixed(2), uniform_grid(1.0, 64), 1)
    G = np.zeros((8, 2))
    sol = solve_limit(A, builtin_graph("exponential"), G, Z, np.zeros(8))
    assert np.array_equal(ito_residual(sol, G, Z), np.zeros(65))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_residual_pure_integral_identity(seed):
    A = zero_operator(3)
    Z = sample_path(mixed(3), uniform_grid(1.0, 32), seed)
    x0 = np.random.default_rng(seed).standard_normal(3)
    sol = solve_limit(A, builtin_graph("zero"), np.eye(3), Z, x0)
    r = ito_residual(sol, np.eye(3), Z)
    assert np.max(np.abs(r)) <= 1e-12 * max(1.0, np.max(sol.norm_sq()))


def test_ledger_columns_cumulative():
    A = build_laplacian_1d(8)
    Z = sample_path(mixed(8), uniform_grid(1.0, 64), 2)
    sol = solve_limit(A, builtin_graph("power", p=3), np.eye(8), Z, np.ones(8))
    led = energy_ledger(sol, np.eye(8), Z)
    for col in (led.a_energy, led.xi_energy, led.half_bracket):
        assert col[0] == 0 and np.all(np.diff(col) >= -1e-14)


# ---------------------------------------------------------------- a priori

def test_apriori_zero_solution():
    A = build_laplacian_1d(8)
    sol = solve_limit(A, builtin_graph("sinh"), np.zeros((8, 1)), quiet(1, 16), np.zeros(8))
    assert apriori_monitor(sol) == (0.0, 0.0, 0.0)


def test_apriori_heat_oracle():
    A = build_laplacian_1d(16)
    vals, vecs = laplacian_eigenpairs(16, 1.0)
    w = vecs[:, 0] / math.sqrt(A.h)
    mu = vals[0]
    out = []
    for N in (512, 1024):
        sol = solve_limit(A, builtin_graph("zero"), np.zeros((16, 1)), quiet(1, N), w)
        sup, venergy, xe = apriori_monitor(sol)
        assert sup == pytest.approx(1.0, rel=1e-12)
        assert xe == 0.0
        out.append(abs(venergy - (1 - math.exp(-2 * mu)) / 2))
    assert out[1] < out[0] and out[1] < 0.02


def test_apriori_third_component_positive():
    A = build_laplacian_1d(8)
    Z = sample_path(mixed(8), uniform_grid(1.0, 64), 3)
    sol = solve_limit(A, builtin_graph("exponential"), 0.3 * np.eye(8), Z, np.ones(8))
    assert apriori_monitor(sol)[2] > 0


@pytest.mark.parametrize("scheme", ["limit", "implicit"])
def test_apriori_inequality_holds(scheme):
    A = build_laplacian_1d(8)
    Z = sample_ensemble(mixed(8), uniform_grid(1.0, 64), range(20))
    g = builtin_graph("exponential")
    if scheme == "limit":
        sol = solve_limit(A, g, np.eye(8), Z, np.ones(8))
    else:
        sol = solve_regularized(A, g, 0.01, np.eye(8), Z, np.ones(8))
    sup, va, xe = apriori_monitor(sol)
    assert np.all(xe >= -1e-12)
    assert np.all(sup + va + xe <= 64 * apriori_rhs(sol, np.eye(8), Z))


def test_apriori_study_report():
    A = build_laplacian_1d(8)
    rep = apriori_study(A, builtin_graph("identity"), np.eye(8), mixed(8), np.ones(8),
                        n_paths=50, steps=64)
    assert rep.passed and rep.value("fraction_ok") == 1.0


# ---------------------------------------------------------------- uniform integrability

def test_ui_zero_family():
    rep = uniform_integrability_diag([np.zeros(100)] * 3, builtin_potential("power", p=2))
    assert rep["pass"] and rep["worst_tail"] == 0.0


def test_ui_adversarial_family():
    family = []
    for n in (10, 100, 1000):
        g = np.zeros(1000)
        g[: 1000 // n] = n
        family.append(g)
    p = builtin_potential("power", p=2)
    # the conjugate of x^2/2 is y^2/2: mean j* grows like n
    rep = uniform_integrability_diag(family, p, bound=10.0)
    assert not rep["bounded"] and not rep["pass"]


def test_ui_selection_family():
    A = build_laplacian_1d(16)
    Z = sample_ensemble(mixed(16), uniform_grid(1.0, 64), range(5))
    g = builtin_graph("exponential")
    sols = [solve_regularized(A, g, lam, np.eye(16), Z, np.ones(16)) for lam in (1e-2, 1e-3)]
    family = [s.xi for s in sols]
    rep = uniform_integrability_diag(family, builtin_potential("exponential"))
    assert rep["pass"] and math.isfinite(rep["R"])


# ---------------------------------------------------------------- lambda study

def test_lambda_linear_first_order():
    A = build_laplacian_1d(8)
    rep = lambda_study(A, builtin_graph("identity"), np.eye(8), mixed(8), np.ones(8),
                       lambdas=(1e-1, 1e-2, 1e-3), n_paths=5, steps=128)
    e = [rep.value(f"e_lambda[{lam:g}]") for lam in (1e-1, 1e-2, 1e-3)]
    assert rep.passed
    assert 7 < e[0] / e[1] < 13 and 7 < e[1] / e[2] < 13


def test_lambda_same_value_twice():
    A = build_laplacian_1d(8)
    Z = sample_ensemble(mixed(8), uniform_grid(1.0, 64), range(3))
    g = builtin_graph("heaviside-filled")
    a = solve_regularized(A, g, 1e-3, np.eye(8), Z, np.ones(8))
    b = solve_regularized(A, g, 1e-3, np.eye(8), Z, np.ones(8))
    assert np.array_equal(a.x, b.x)


# ---------------------------------------------------------------- dependence

def test_dependence_zero_perturbation():
    A = build_laplacian_1d(8)
    rep = dependence_study(A, builtin_graph("exponential"), np.eye(8), mixed(8), np.ones(8),
                           deltas=(0.0,), n_paths=10, steps=32)
    assert rep.value("ratio[0]") == 0.0


def test_dependence_linear_contracts():
    A = build_laplacian_1d(8)
    rep = dependence_study(A, builtin_graph("identity"), np.eye(8), mixed(8), np.ones(8),
                           n_paths=10, steps=64)
    for d in (1e-1, 1e-2, 1e-3):
        assert rep.value(f"ratio[{d:g}]") <= 1.0 + 1e-9
    assert rep.passed


def test_dependence_G_mode():
    A = build_laplacian_1d(8)
    rep = dependence_study(A, builtin_graph("power", p=3), np.eye(8), mixed(8), np.ones(8),
                           mode="G", n_paths=20, steps=64)
    assert rep.passed and rep.value("ratio[0.1]") > 0


# ---------------------------------------------------------------- reports

def test_report_csv(tmp_path):
    rep = StudyReport("demo", steps=64, seed_base=3)
    rep.add("alpha", 0.1, 0.01, 10)
    rep.add("beta", 1 / 3)
    path = tmp_path / f"{rep.stem}.csv"
    rep.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1] == ["alpha", "0.1", "0.01", "10", "3"]
    assert float(rows[2][1]) == 1 / 3
    assert rep.stem == "demo_N64_seed3"
    with pytest.raises(KeyError):
        rep.value("gamma")


def test_report_bitwise_reproducible(tmp_path):
    for i in range(2):
        rep = gronwall_study(n_pairs=20, n_paths=50, seed_base=4)
        rep.write_csv(tmp_path / f"{i}.csv")
        rep.write_json(tmp_path / f"{i}.json")
    assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()
    assert (tmp_path / "0.json").read_bytes() == (tmp_path / "1.json").read_bytes()


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1 / math.sqrt(3))
    assert mean_se([5.0])[1] == 0.0


def test_heat_study_passes():
    rep = heat_study(n=32, steps=256)
    assert rep.passed
    assert rep.value("sup_error") <= rep.value("tolerance")
