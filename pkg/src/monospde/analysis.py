"""Energy residuals, a priori monitors, uniform integrability checks and
the study drivers behind the acceptance reports."""

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from monospde.integrator import (
    AdditiveNoise,
    MultiplicativeNoise,
    SolutionPath,
    extend_solution,
    predicted_segments,
    solve_limit,
    solve_regularized,
)
from monospde.monotone import ConvexPotential, builtin_graph, conjugate
from monospde.noise import (
    MarkLaw,
    SemimartingaleSpec,
    bounded_path_integrand,
    constant_integrand,
    control_process,
    first_passage,
    fixed_time,
    gronwall_bound,
    lambda_functional,
    mp_inequality_audit,
    quadratic_variation,
    sample_ensemble,
    stochastic_integral,
    uniform_grid,
)
from monospde.operators import build_laplacian_1d, node_coordinates

SCHEMA_VERSION = 1
CSV_COLUMNS = ("quantity", "estimate", "std_error", "n_paths", "seed_base")


# --------------------------------------------------------------------------
# reports

@dataclass
class StudyReport:
    """Table of Monte Carlo estimates with a pass flag.

    ``rows`` holds ``(quantity, estimate, std_error, n_paths, seed_base)``.
    """

    kind: str
    rows: list = field(default_factory=list)
    passed: bool = True
    tolerance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    runtime: float = 0.0
    steps: Optional[int] = None
    seed_base: int = 0

    def add(self, quantity, estimate, std_error=0.0, n_paths=1):
        self.rows.append((str(quantity), float(estimate), float(std_error), int(n_paths),
                          int(self.seed_base)))

    def value(self, quantity):
        for row in self.rows:
            if row[0] == quantity:
                return row[1]
        raise KeyError(quantity)

    @property
    def stem(self):
        steps = "na" if self.steps is None else str(self.steps)
        return f"{self.kind}_N{steps}_seed{self.seed_base}"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for q, est, se, n, s in self.rows:
                w.writerow([q, repr(est), repr(se), n, s])

    def summary(self, with_runtime=False) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "passed": bool(self.passed),
            "tolerance": self.tolerance,
            "details": self.details,
            "steps": self.steps,
            "seed_base": self.seed_base,
        }
        if with_runtime:
            out["runtime_seconds"] = self.runtime
        return out

    def write_json(self, path, with_runtime=False):
        with open(path, "w") as fh:
            json.dump(self.summary(with_runtime), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serialisable: {type(obj)}")


def mean_se(samples):
    """Mean and standard error along the first axis."""
    s = np.asarray(samples, dtype=float)
    n = s.shape[0]
    se = np.std(s, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(s.shape[1:])
    return np.mean(s, axis=0), se


# --------------------------------------------------------------------------
# energy identity

@dataclass(frozen=True, eq=False)
class EnergyLedger:
    """Terms of the Ito formula for the square, all shaped ``(..., N+1)``."""

    half_norm_sq: np.ndarray
    a_energy: np.ndarray
    xi_energy: np.ndarray
    half_bracket: np.ndarray
    cross: np.ndarray

    @property
    def residual(self):
        return (self.half_norm_sq + self.a_energy + self.xi_energy
                - self.half_norm_sq[..., :1] - self.half_bracket - self.cross)


def energy_ledger(sol: SolutionPath, G, Z) -> EnergyLedger:
    """Rebuild the Ito-formula terms from the stored states and the noise.

    The stochastic integral, its bracket and ``(X_- G) . Z`` are recomputed
    here rather than taken from the solver.
    """
    h = sol.h
    G = np.asarray(sol.G if G is None else G, dtype=float)
    GZ = stochastic_integral(G, Z)
    bracket = quadratic_variation(GZ, weight=h)
    steps = Z.steps
    Gg = G if G.ndim == 2 else G[..., :steps, :, :]
    # row functional v -> <x_k, G_k v>_H
    Y = h * np.einsum("...jn,...jnk->...jk", sol.x[..., :steps, :],
                      np.broadcast_to(Gg, sol.x.shape[:-2] + (steps,) + Gg.shape[-2:]))
    cross = stochastic_integral(Y[..., None, :], Z)[..., 0]
    return EnergyLedger(0.5 * sol.norm_sq(), sol.a_energy, sol.xi_energy, 0.5 * bracket, cross)


def ito_residual(sol: SolutionPath, G=None, Z=None):
    """Residual series of the discrete Ito identity for ``|X|^2 / 2``."""
    return energy_ledger(sol, G, Z).residual


def residual_norms(r):
    """``(max_t |r|, |r(T)|)`` per path."""
    r = np.asarray(r)
    return np.max(np.abs(r), axis=-1), np.abs(r[..., -1])


def apriori_monitor(sol: SolutionPath):
    """``(sup |x|^2, sum dt |x|_V^2, sum dt <xi, x>)`` per path."""
    return np.max(sol.norm_sq(), axis=-1), sol.a_energy[..., -1], sol.xi_energy[..., -1]


def apriori_rhs(sol: SolutionPath, G, Z):
    """``|x0|^2 + lambda^C_T(G) + [G.Z, G.Z]_T`` per path."""
    C = control_process(Z)
    lam = lambda_functional(C, G, index=-1, weight=sol.h)
    GZ = stochastic_integral(G, Z)
    bracket = quadratic_variation(GZ, weight=sol.h)[..., -1]
    return sol.norm_sq()[..., 0] + lam + bracket


# --------------------------------------------------------------------------
# uniform integrability

def _superlinear_radius(p, M, sign, r_max=2.0**60):
    """Smallest ``r >= 0`` on one ray with ``j*(sign r) / r >= M``; ``inf`` if none."""
    f = lambda r: float(conjugate(p, np.float64(sign * r))) / r
    hi = 1.0
    while f(hi) < M:
        hi *= 2.0
        if hi > r_max:
            return math.inf
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == 0.0 or f(mid) >= M:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return hi


def uniform_integrability_diag(samples, p: ConvexPotential, eps=0.1, bound=None):
    """Quantitative uniform-integrability check driven by ``j*``.

    With ``B`` a bound on ``mean j*(g)`` over the family, ``M = 2B/eps``
    and ``R`` such that ``j*(r) >= M |r|`` for ``|r| >= R``, every set of
    relative measure ``delta = eps/(2R)`` carries at most ``eps`` of the
    mean of ``|g|``. The worst such set of each sample is checked directly.

    ``bound=None`` takes ``B`` from the family itself.
    """
    family = [np.ravel(np.asarray(s, dtype=float)) for s in samples]
    with np.errstate(over="ignore", invalid="ignore"):
        means = np.array([float(np.mean(conjugate(p, s))) for s in family])
    sup_mean = float(np.max(means)) if means.size else 0.0
    B = sup_mean if bound is None else float(bound)
    bounded = bool(np.isfinite(sup_mean) and sup_mean <= B)
    M = 2.0 * max(B, 1e-300) / eps
    R = max(_superlinear_radius(p, M, 1.0), _superlinear_radius(p, M, -1.0))
    superlinear = math.isfinite(R)
    delta = min(1.0, eps / (2.0 * R)) if superlinear and R > 0 else 1.0
    worst = 0.0
    for s in family:
        m = s.size
        take = int(math.floor(delta * m))
        top = np.sort(np.abs(s))[::-1]
        worst = max(worst, float(np.sum(top[:take])) / m if take else 0.0)
    ok = bounded and superlinear and worst <= eps * (1.0 + 1e-12)
    return {"eps": eps, "delta": delta, "R": R, "M": M, "bound": B, "sup_mean": sup_mean,
            "worst_tail": worst, "superlinear": superlinear, "bounded": bounded, "pass": ok}


# --------------------------------------------------------------------------
# studies

def _seeds(seed_base, n_paths):
    return range(seed_base, seed_base + n_paths)


def heat_study(n=64, T=1.0, steps=1024, seed_base=0, factor=5.0):
    """Deterministic heat decay of ``sin(pi x)`` against the exact solution."""
    t0 = time.perf_counter()
    A = build_laplacian_1d(n)
    x0 = heat_x0(A)
    Z = sample_ensemble(SemimartingaleSpec.wiener(1, 0.0), uniform_grid(T, steps), [seed_base])[0]
    sol = solve_limit(A, builtin_graph("zero"), np.zeros((n, 1)), Z, x0)
    exact = np.exp(-(np.pi / A.length) ** 2 * Z.times)[:, None] * x0
    err = float(np.max(np.abs(sol.x - exact)))
    tol = factor * (T / steps + A.h**2)
    rep = StudyReport("heat", steps=steps, seed_base=seed_base)
    rep.add("sup_error", err)
    rep.add("tolerance", tol)
    rep.passed = err <= tol
    rep.tolerance = {"factor": factor}
    rep.runtime = time.perf_counter() - t0
    return rep


def audit_cells():
    """The 12 (noise, integrand, stop rule) cells of the maximal-inequality matrix."""
    specs = {
        "wiener": SemimartingaleSpec.wiener(1, 1.0),
        "poisson": SemimartingaleSpec(k_dim=1, jump_rate=1.0, marks=MarkLaw("constant", (1.0,), 0.0)),
        "mixed": SemimartingaleSpec(k_dim=1, wiener_cov=np.eye(1), jump_rate=2.0,
                                    marks=MarkLaw("normal", (0.5,), 1.0), drift=np.array([0.3])),
    }
    integrands = {"constant": constant_integrand([[1.0]]),
                  "path-bounded": bounded_path_integrand([[1.0]])}
    stops = {"fixed-time": fixed_time(), "first-passage": first_passage(1.0)}
    return [(f"{s}/{i}/{r}", specs[s], integrands[i], stops[r])
            for s in specs for i in integrands for r in stops]


def mp_audit_study(n_paths=10_000, seed_base=0, steps=256, T=1.0):
    t0 = time.perf_counter()
    rep = StudyReport("mp_audit", steps=steps, seed_base=seed_base)
    grid = uniform_grid(T, steps)
    for name, spec, Y, stop in audit_cells():
        out = mp_inequality_audit(spec, Y, stop, n_paths, seed_base, grid)
        for variant in ("square", "sqrt"):
            r = out[variant]
            rep.add(f"{name}/{variant}/lhs", r["lhs"], r["lhs_se"], n_paths)
            rep.add(f"{name}/{variant}/rhs", r["rhs"], r["rhs_se"], n_paths)
            rep.details[f"{name}/{variant}"] = r["pass"]
            rep.passed &= r["pass"]
    rep.runtime = time.perf_counter() - t0
    return rep


def residual_study(A, g, G, spec, x0, *, n_paths=50, seed_base=0, T=1.0, finest=1024,
                   levels=3, band=(1.6, 2.4)):
    """Mean ``max |r|`` of the limit scheme on nested dyadic grids.

    ``band=None`` only asks for a monotone decrease.
    """
    t0 = time.perf_counter()
    Z = sample_ensemble(spec, uniform_grid(T, finest), _seeds(seed_base, n_paths))
    rep = StudyReport("residual", steps=finest, seed_base=seed_base)
    means = []
    for lev in range(levels):
        factor = 2 ** (levels - 1 - lev)
        Zc = Z.coarsen(factor)
        sol = solve_limit(A, g, G, Zc, x0)
        mx, term = residual_norms(ito_residual(sol, G, Zc))
        m, se = mean_se(mx)
        mt, set_ = mean_se(term)
        rep.add(f"max_residual[N={Zc.steps}]", m, se, n_paths)
        rep.add(f"terminal_residual[N={Zc.steps}]", mt, set_, n_paths)
        means.append(float(m))
    ratios = [means[i] / means[i + 1] for i in range(len(means) - 1)]
    for i, r in enumerate(ratios):
        rep.add(f"ratio[{i}]", r)
    decreasing = all(means[i + 1] < means[i] for i in range(len(means) - 1))
    rep.passed = decreasing and (band is None or all(band[0] <= r <= band[1] for r in ratios))
    rep.tolerance = {"band": band}
    rep.details = {"graph": g.name, "ratios": ratios}
    rep.runtime = time.perf_counter() - t0
    return rep


def apriori_study(A, g, G, spec, x0, *, kappa=64.0, n_paths=1000, seed_base=0, T=1.0,
                  steps=256, quota=0.99, scheme="limit", lam=None):
    """Fraction of paths obeying the discrete a priori inequality with constant ``kappa``."""
    t0 = time.perf_counter()
    Z = sample_ensemble(spec, uniform_grid(T, steps), _seeds(seed_base, n_paths))
    sol = (solve_limit(A, g, G, Z, x0) if scheme == "limit"
           else solve_regularized(A, g, lam, G, Z, x0))
    sup, va, xe = apriori_monitor(sol)
    lhs = sup + va + xe
    rhs = apriori_rhs(sol, G, Z)
    ok = lhs <= kappa * rhs
    frac = float(np.mean(ok))
    rep = StudyReport("apriori", steps=steps, seed_base=seed_base)
    for name, arr in (("sup_norm_sq", sup), ("v_energy", va), ("xi_energy", xe),
                      ("lhs_over_rhs", lhs / rhs)):
        m, se = mean_se(arr)
        rep.add(name, m, se, n_paths)
    rep.add("fraction_ok", frac, 0.0, n_paths)
    rep.add("min_xi_energy", float(np.min(xe)), 0.0, n_paths)
    rep.passed = frac >= quota and float(np.min(xe)) >= -1e-9
    rep.tolerance = {"kappa": kappa, "quota": quota}
    rep.details = {"graph": g.name}
    rep.runtime = time.perf_counter() - t0
    return rep


def _sup_h(A, d):
    return np.max(A.h * np.sum(d**2, axis=-1), axis=-1)


def lambda_study(A, g, G, spec, x0, lambdas=(1e-1, 1e-2, 1e-3, 1e-4), *, n_paths=20,
                 seed_base=0, T=1.0, steps=1024):
    """Cauchy diagnostics of regularized solutions as ``lam -> 0``.

    ``e_lam = sup_k |x^lam_k - x^{lam/2}_k|`` must decrease strictly along the
    ladder; distances to the limit scheme are reported alongside.
    """
    t0 = time.perf_counter()
    Z = sample_ensemble(spec, uniform_grid(T, steps), _seeds(seed_base, n_paths))
    limit = solve_limit(A, g, G, Z, x0)
    rep = StudyReport("lambda", steps=steps, seed_base=seed_base)
    e_means, lim_means = [], []
    dt = np.diff(Z.times)
    for lam in lambdas:
        xa = solve_regularized(A, g, lam, G, Z, x0).x
        xb = solve_regularized(A, g, lam / 2.0, G, Z, x0).x
        e = np.sqrt(_sup_h(A, xa - xb))
        m, se = mean_se(e)
        rep.add(f"e_lambda[{lam:g}]", m, se, n_paths)
        e_means.append(float(m))
        dl = xa - limit.x
        m2, se2 = mean_se(np.sqrt(_sup_h(A, dl)))
        rep.add(f"sup_dist_limit[{lam:g}]", m2, se2, n_paths)
        l2 = np.sqrt(np.sum(dt * A.h * np.sum(dl[..., 1:, :] ** 2, axis=-1), axis=-1))
        m3, se3 = mean_se(l2)
        rep.add(f"l2_dist_limit[{lam:g}]", m3, se3, n_paths)
        lim_means.append(float(m2))
    dec = all(e_means[i + 1] < e_means[i] for i in range(len(e_means) - 1))
    cauchy = all(lim_means[i + 1] < lim_means[i] for i in range(len(lim_means) - 1))
    rep.passed = dec and cauchy
    rep.details = {"graph": g.name, "e_decreasing": dec, "limit_distance_decreasing": cauchy}
    rep.runtime = time.perf_counter() - t0
    return rep


def dependence_study(A, g, G, spec, x0, deltas=(1e-1, 1e-2, 1e-3), *, mode="x0",
                     direction=None, n_paths=200, seed_base=0, T=1.0, steps=256,
                     spread_max=4.0):
    """Continuous dependence on ``x0`` (``mode="x0"``) or on ``G`` (``mode="G"``).

    For each ``delta`` two ratios are estimated under same-seed coupling:
    ``ratio = E sup |dX|^2 / D`` and
    ``ratio_full = (E sup |dX|^2 + E int |dX|_V^2) / D`` with
    ``D = E |dx0|^2 + E lambda^C_T(dG)``. Each must agree across the ladder
    within a factor ``spread_max``.
    """
    t0 = time.perf_counter()
    Z = sample_ensemble(spec, uniform_grid(T, steps), _seeds(seed_base, n_paths))
    base = solve_limit(A, g, G, Z, x0)
    C = control_process(Z)
    rep = StudyReport(f"dependence_{mode}", steps=steps, seed_base=seed_base)
    ratios, fulls = [], []
    x0 = np.asarray(x0, dtype=float)
    G = np.asarray(G, dtype=float)
    if direction is None:
        direction = np.ones_like(x0) if mode == "x0" else np.ones_like(G)
    dt = np.diff(Z.times)
    for delta in deltas:
        if mode == "x0":
            x1, G1 = x0 + delta * direction, G
        else:
            x1, G1 = x0, G + delta * direction
        other = solve_limit(A, g, G1, Z, x1)
        d = other.x - base.x
        sup = _sup_h(A, d)
        venergy = np.sum(dt * A.v_norm_sq(d[..., 1:, :]), axis=-1)
        den = A.h * float(np.sum((x1 - x0) ** 2))
        if mode == "G":
            den = den + float(np.mean(lambda_functional(C, G1 - G, index=-1, weight=A.h)))
        rep.add(f"denominator[{delta:g}]", den, 0.0, n_paths)
        for label, samples, store in (("ratio", sup, ratios), ("ratio_full", sup + venergy, fulls)):
            num, num_se = mean_se(samples)
            r = float(num) / den if den > 0 else 0.0
            rep.add(f"{label}[{delta:g}]", r, float(num_se) / den if den > 0 else 0.0, n_paths)
            store.append(r)
    spreads = []
    for label, values in (("spread", ratios), ("spread_full", fulls)):
        positive = [r for r in values if r > 0]
        spreads.append(max(positive) / min(positive) if positive else 1.0)
        rep.add(label, spreads[-1])
    rep.passed = max(spreads) <= spread_max
    rep.tolerance = {"spread_max": spread_max}
    rep.details = {"graph": g.name, "ratios": ratios, "ratios_full": fulls}
    rep.runtime = time.perf_counter() - t0
    return rep


def picard_study(A, g, strength, variance, x0, *, alpha=0.25, n_paths=3, seed_base=0, T=1.0,
                 steps=1024, max_picard=25, tol=1e-10):
    """Picard iteration and segment counts for ``B(u) = s diag(sin u)``, Wiener noise.

    With Wiener noise the control process is deterministic, so the budget
    recurrence predicts the number of segments.
    """
    t0 = time.perf_counter()
    n = A.dim
    spec = SemimartingaleSpec.wiener(n, variance)
    noise = MultiplicativeNoise.sine_diagonal(strength)
    rate = spec.bracket_rate
    c_of_t = lambda t: 8.0 * rate * t + 4.0
    predicted = predicted_segments(c_of_t, lambda t: noise.lip_sq * c_of_t(t), alpha, T)
    Z = sample_ensemble(spec, uniform_grid(T, steps), _seeds(seed_base, n_paths))
    rep = StudyReport("picard", steps=steps, seed_base=seed_base)
    ok = True
    max_ratio, max_it, counts = 0.0, 0, []
    for p in range(n_paths):
        sol = extend_solution(A, g, noise, Z[p], x0, alpha, max_picard, tol)
        ratios = [r for info in sol.picard for r in info["ratios"]]
        its = [info["iterations"] for info in sol.picard]
        max_ratio = max([max_ratio] + ratios)
        max_it = max([max_it] + its)
        segs = len(sol.segments) - 1
        counts.append(segs)
        ok &= (sol.segments[-1] == steps) and (predicted / 2 <= segs <= 2 * predicted)
    rep.add("max_picard_ratio", max_ratio, 0.0, n_paths)
    rep.add("max_iterations", max_it, 0.0, n_paths)
    m, se = mean_se(counts)
    rep.add("segments", m, se, n_paths)
    rep.add("predicted_segments", predicted)
    rep.passed = ok and max_ratio < 1.0 and max_it <= max_picard
    rep.tolerance = {"alpha": alpha, "tol": tol, "max_picard": max_picard}
    rep.details = {"graph": g.name, "segment_counts": counts}
    rep.runtime = time.perf_counter() - t0
    return rep


def gronwall_pairs(a, b, ell, n_paths, steps, rng, stop=None):
    """Synthetic ``(phi, A)`` satisfying the Gronwall hypothesis pathwise.

    ``A`` increases to at most ``ell`` through random increments and
    ``phi_j = theta (a + b sum_{i<j} phi_{i-1} dA_i)`` with a random
    ``theta`` in ``(0, 1]`` chosen at time zero. Returns ``phi(tau-)``.
    """
    inc = rng.exponential(1.0 / steps, size=(n_paths, steps)) * rng.uniform(0.5, 3.0, (n_paths, 1))
    Aproc = ell * -np.expm1(-np.concatenate([np.zeros((n_paths, 1)),
                                            np.cumsum(inc, axis=1)], axis=1))
    dA = np.diff(Aproc, axis=1)
    theta = np.where(rng.uniform(size=n_paths) < 0.5, 1.0, rng.uniform(0.2, 1.0, n_paths))
    phi = np.empty((n_paths, steps))
    phi[:, 0] = theta * a
    acc = np.zeros(n_paths)
    for j in range(1, steps):
        acc += phi[:, j - 1] * dA[:, j - 1]
        phi[:, j] = theta * (a + b * acc)
    tau = np.full(n_paths, steps) if stop is None else stop(Aproc)
    return phi[np.arange(n_paths), np.maximum(tau, 1) - 1]


def gronwall_study(n_pairs=1000, n_paths=200, steps=64, seed_base=0, q_range=(1.0, 6.0)):
    """Realised ``E phi(tau-)`` against the bound for random ``(a, b, ell)``."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed_base)
    rep = StudyReport("gronwall", steps=steps, seed_base=seed_base)
    worst = 0.0
    fails = 0
    for _ in range(n_pairs):
        a = rng.uniform(0.1, 2.0)
        ell = rng.uniform(0.5, 3.0)
        q = rng.uniform(*q_range)
        b = q / (2.0 * ell)
        stop = _random_stop(rng.uniform(0.3, 1.0) * ell)
        realized = float(np.mean(gronwall_pairs(a, b, ell, n_paths, steps, rng, stop)))
        bound = gronwall_bound(a, b, ell)
        worst = max(worst, realized / bound)
        fails += realized > bound
    rep.add("max_realized_over_bound", worst, 0.0, n_pairs)
    rep.add("violations", fails, 0.0, n_pairs)
    rep.passed = fails == 0
    rep.tolerance = {"q_range": list(q_range)}
    rep.runtime = time.perf_counter() - t0
    return rep


def _random_stop(level):
    """First index with ``A >= level``, else the horizon."""
    def stop(Aproc):
        hit = Aproc[:, 1:] >= level
        first = np.argmax(hit, axis=1) + 1
        return np.where(hit.any(axis=1), first, Aproc.shape[1] - 1)
    return stop


def heat_x0(A):
    return np.sin(np.pi * node_coordinates(A) / A.length)


__all__ = [
    "EnergyLedger", "StudyReport", "apriori_monitor", "apriori_rhs", "apriori_study",
    "audit_cells", "dependence_study", "energy_ledger", "gronwall_pairs", "gronwall_study",
    "heat_study", "ito_residual", "lambda_study", "mean_se", "mp_audit_study", "picard_study",
    "residual_norms", "residual_study", "uniform_integrability_diag",
]
