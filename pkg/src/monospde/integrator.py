"""Time stepping for ``dX + A X dt + beta(t, X) dt ∋ B dZ``.

Three schemes share one step kernel:

``limit``
    Noise, then ``(I + dt A)^{-1}``, then the exact proximal step of
    ``beta``. The drift selection ``xi = (z - x) / dt`` lies in ``beta(x)``.
``implicit``
    The same splitting with ``beta`` replaced by its Yosida approximation
    ``beta_lam`` and the drift solved implicitly; stable for any ``lam``.
``explicit``
    Yosida drift at the left endpoint; guarded against overflow by local
    step halving.

All solvers accept ensembles: leading axes of the noise path index paths.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from monospde.monotone import ProxFailure, ScalarGraph, resolvent, yosida
from monospde.noise import ControlPath, LipschitzProcess, SemimartingalePath, control_process
from monospde.operators import GridOperator

OVERFLOW_GUARD = 1e12
MAX_HALVINGS = 30
MEMBERSHIP_TOL = 1e-8
MAX_SEGMENTS = 10**6


class NonContractionError(RuntimeError):
    """Picard iterates stopped contracting; a smaller ``alpha`` may help."""


class PicardDivergence(RuntimeError):
    """Picard iteration hit ``max_picard`` before reaching ``tol``."""


class SegmentLimitError(RuntimeError):
    """The stopping-time sequence did not reach the horizon."""


class OverflowAbort(RuntimeError):
    """The explicit drift kept overflowing after repeated step halving."""


# --------------------------------------------------------------------------
# noise coefficients

@dataclass(frozen=True, eq=False)
class AdditiveNoise:
    """Coefficient ``G`` independent of the solution.

    ``G`` is ``(n, k)`` for a constant operator, or carries a time axis of
    length ``N`` or ``N + 1`` (optionally behind path axes).
    """

    G: np.ndarray
    kind: str = field(default="additive", init=False)

    def __post_init__(self):
        object.__setattr__(self, "G", np.asarray(self.G, dtype=float))
        if self.G.ndim < 2:
            raise ValueError("G must be at least two-dimensional")

    def on_grid(self, steps):
        G = self.G
        if G.ndim == 2:
            return G
        if G.shape[-3] not in (steps, steps + 1):
            raise ValueError("G is defined on a different grid")
        return G[..., :steps, :, :]

    def increments(self, path: SemimartingalePath):
        """``G(t_k) dZ_{k+1}`` for every step, shape ``(..., N, n)``."""
        return _apply(self.on_grid(path.steps), path.dZ)

    def to_config(self):
        return {"kind": "additive", "shape": list(self.G.shape)}


def _apply(G, dZ):
    if G.ndim == 2:
        return dZ @ G.T
    return (G @ dZ[..., None])[..., 0]


@dataclass(frozen=True, eq=False)
class MultiplicativeNoise:
    """Coefficient ``B(t, u) = rule(u(t-))`` with ``|B(u) - B(v)|^2 <= lip_sq |u - v|^2``.

    The attached Lipschitz process is ``L = lip_sq * C``, ``C`` the control
    process of the driving noise.
    """

    rule: Callable
    lip_sq: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    kind: str = field(default="multiplicative", init=False)

    @classmethod
    def sine_diagonal(cls, strength=0.1):
        """``B(u) = s diag(sin u)``; ``K = R^n``."""
        s = float(strength)
        return cls(lambda u: s * _diag(np.sin(u)), s * s, "sine_diagonal", {"strength": s})

    @classmethod
    def constant(cls, G0):
        G0 = np.asarray(G0, dtype=float)
        return cls(lambda u: np.broadcast_to(G0, np.shape(u)[:-1] + G0.shape),
                   0.0, "constant", {"shape": list(G0.shape)})

    def __call__(self, u):
        return self.rule(np.asarray(u, dtype=float))

    def lipschitz(self, C: ControlPath) -> LipschitzProcess:
        return LipschitzProcess(self.lip_sq * C.values)

    def to_config(self):
        return {"kind": "multiplicative", "name": self.name, **self.params}


def _diag(v):
    n = v.shape[-1]
    return v[..., :, None] * np.eye(n)


# --------------------------------------------------------------------------
# solution container

@dataclass(frozen=True, eq=False)
class SolutionPath:
    """Discrete solution with its energy ledger.

    Attributes
    ----------
    x : ndarray, shape (..., N+1, n)
    xi : ndarray, shape (..., N+1, n)
        Drift selections. ``xi[..., 0, :]`` is a selection at ``x0``.
    noise_incr : ndarray, shape (..., N, n)
        ``G(t_k) dZ_{k+1}``.
    a_energy, xi_energy : ndarray, shape (..., N+1)
        Cumulative ``sum dt <A x, x>`` and ``sum dt <xi, x>`` in ``H``.
    """

    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    noise_incr: np.ndarray
    a_energy: np.ndarray
    xi_energy: np.ndarray
    h: float
    scheme: str
    lam: Optional[float] = None
    G: Optional[np.ndarray] = None
    segments: tuple = ()
    picard: tuple = ()

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def norm_sq(self):
        return self.h * np.sum(self.x**2, axis=-1)

    def restrict(self, steps) -> "SolutionPath":
        G = self.G
        if G is not None and G.ndim > 2:
            G = G[..., :steps, :, :]
        return SolutionPath(
            self.times[:steps + 1], self.x[..., :steps + 1, :], self.xi[..., :steps + 1, :],
            self.noise_incr[..., :steps, :], self.a_energy[..., :steps + 1],
            self.xi_energy[..., :steps + 1], self.h, self.scheme, self.lam, G,
            tuple(t for t in self.segments if t <= steps), self.picard)

    def rows(self, verbosity=1):
        """CSV rows for a single path; node values only at ``verbosity >= 2``."""
        if self.x.ndim != 2:
            raise ValueError("rows() needs a single path")
        n = self.x.shape[-1]
        header = ["t", "x_norm_sq", "xi_norm_sq", "a_energy", "xi_energy"]
        if verbosity >= 2:
            header += [f"x_{i}" for i in range(n)]
        xi_sq = self.h * np.sum(self.xi**2, axis=-1)
        out = []
        for j in range(self.steps + 1):
            row = [self.times[j], self.norm_sq()[j], xi_sq[j], self.a_energy[j], self.xi_energy[j]]
            if verbosity >= 2:
                row += list(self.x[j])
            out.append(row)
        return header, out

    def manifest(self) -> dict:
        dt = np.diff(self.times)
        return {
            "scheme": self.scheme,
            "lam": self.lam,
            "dt": float(dt[0]) if dt.size and np.allclose(dt, dt[0]) else None,
            "steps": self.steps,
            "segments": list(self.segments),
        }


# --------------------------------------------------------------------------
# step kernel

def _split_step(A, g, x, inc, dt, t_next, scheme, lam):
    """One noise / linear / drift step; returns ``(x_next, xi_next)``."""
    z = A.shifted_solver(dt).solve(x + inc)
    if scheme == "limit":
        x_next = resolvent(g, dt, z, t_next)
        xi = (z - x_next) / dt
        return x_next, xi
    mu = lam + dt
    w = resolvent(g, mu, z, t_next)
    return (lam * z + dt * w) / mu, (z - w) / mu


def _explicit_step(A, g, x, inc, dt, t, lam, depth=0):
    """Left-point Yosida step with local halving on overflow."""
    b = yosida(g, lam, x, t)
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = A.shifted_solver(dt).solve(x - dt * b + inc)
        bad = ~np.all(np.isfinite(x_next), axis=-1)
        bad |= np.sqrt(A.h * np.sum(np.where(np.isfinite(x_next), x_next, 0.0) ** 2, axis=-1)) \
            > OVERFLOW_GUARD
    if not np.any(bad):
        return x_next, b, dt * A.inner(b, x)
    if depth >= MAX_HALVINGS:
        raise OverflowAbort(f"explicit step overflowed after {depth} halvings at t={t}")
    # redo only the offending rows with two half steps and half increments
    x_next = np.array(x_next)
    energy = dt * A.inner(b, x)
    xb, ib = x[bad], inc[bad]
    mid, _, e1 = _explicit_step(A, g, xb, 0.5 * ib, 0.5 * dt, t, lam, depth + 1)
    end, _, e2 = _explicit_step(A, g, mid, 0.5 * ib, 0.5 * dt, t + 0.5 * dt, lam, depth + 1)
    x_next[bad] = end
    energy = np.array(energy)
    energy[bad] = e1 + e2
    return x_next, b, energy


def _march(A: GridOperator, g: ScalarGraph, x0, times, incs, scheme, lam=None, *,
           t_offset=0, check_membership=True):
    """Run a scheme over precomputed noise increments ``incs`` of shape ``(..., N, n)``."""
    steps = incs.shape[-2]
    n = A.dim
    if incs.shape[-1] != n:
        raise ValueError("noise coefficient does not map into the state space")
    batch = incs.shape[:-2]
    x = np.broadcast_to(np.asarray(x0, dtype=float), batch + (n,)).copy()
    xs = np.empty(batch + (steps + 1, n))
    xis = np.empty(batch + (steps + 1, n))
    a_en = np.zeros(batch + (steps + 1,))
    xi_en = np.zeros(batch + (steps + 1,))
    xs[..., 0, :] = x
    if scheme == "limit":
        xis[..., 0, :] = g.selection(x, times[0])
    else:
        xis[..., 0, :] = yosida(g, lam, x, times[0])
    dts = np.diff(times)
    for k in range(steps):
        dt = float(dts[k])
        inc = incs[..., k, :]
        if scheme == "explicit":
            x_next, xi, xe = _explicit_step(A, g, x, inc, dt, times[k], lam)
            xi_next = yosida(g, lam, x_next, times[k + 1])
        else:
            x_next, xi_next = _split_step(A, g, x, inc, dt, times[k + 1], scheme, lam)
            xe = dt * A.inner(xi_next, x_next)
            if scheme == "limit" and check_membership:
                ok = g.contains(x_next, xi_next, MEMBERSHIP_TOL * np.maximum(1.0, np.abs(x_next)),
                                times[k + 1])
                if not np.all(ok):
                    bad = np.argwhere(~ok)[0]
                    raise ProxFailure(
                        f"drift selection left the graph at step {k + 1 + t_offset}, "
                        f"index {tuple(int(i) for i in bad)}")
        a_en[..., k + 1] = a_en[..., k] + dt * A.inner(A.apply(x_next), x_next)
        xi_en[..., k + 1] = xi_en[..., k] + xe
        x = x_next
        xs[..., k + 1, :] = x
        xis[..., k + 1, :] = xi_next
    return xs, xis, a_en, xi_en


def _noise_increments(noise, path):
    if isinstance(noise, AdditiveNoise):
        return noise.increments(path), noise.G
    G = np.asarray(noise, dtype=float)
    return AdditiveNoise(G).increments(path), G


# --------------------------------------------------------------------------
# additive noise

def solve_regularized(A: GridOperator, g: ScalarGraph, lam, noise, Z: SemimartingalePath, x0,
                      *, drift="implicit") -> SolutionPath:
    """Scheme for the equation with ``beta`` replaced by ``beta_lam``.

    ``drift="implicit"`` (default) solves ``x + dt beta_lam(x) = z`` exactly
    through one resolvent at ``lam + dt``. ``drift="explicit"`` uses
    ``beta_lam(t_k, x_k)`` and halves the step locally whenever the new
    state exceeds ``1e12`` in norm.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    if drift not in ("implicit", "explicit"):
        raise ValueError("drift must be 'implicit' or 'explicit'")
    incs, G = _noise_increments(noise, Z)
    xs, xis, a_en, xi_en = _march(A, g, x0, Z.times, incs, drift, float(lam))
    return SolutionPath(Z.times, xs, xis, incs, a_en, xi_en, A.h, f"regularized-{drift}",
                        float(lam), G)


def solve_limit(A: GridOperator, g: ScalarGraph, noise, Z: SemimartingalePath, x0) -> SolutionPath:
    """Proximal splitting scheme for the equation with ``beta`` itself.

    Raises
    ------
    ProxFailure
        If a resolvent does not converge or a selection leaves the graph.
    """
    incs, G = _noise_increments(noise, Z)
    xs, xis, a_en, xi_en = _march(A, g, x0, Z.times, incs, "limit")
    return SolutionPath(Z.times, xs, xis, incs, a_en, xi_en, A.h, "limit", None, G)


# --------------------------------------------------------------------------
# multiplicative noise

@dataclass(frozen=True)
class StopRule:
    """Grid stopping rule.

    ``control-budget``: first ``j > start`` with ``C_j (L_j - L_start) >= alpha``.
    ``norm-cap``: first ``j > start`` with ``|x_j| > level``.
    ``fixed-time``: the grid index ``index``.
    Each returns the last grid index when the event never happens.
    """

    alpha: float = 0.25
    kind: str = "control-budget"
    index: Optional[int] = None
    level: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.kind not in ("control-budget", "norm-cap", "fixed-time"):
            raise ValueError(f"unknown stop rule {self.kind!r}")

    def first_index(self, start, *, C=None, L=None, norms=None, steps=None) -> int:
        if self.kind == "fixed-time":
            return int(self.index)
        if self.kind == "control-budget":
            c, l_ = np.asarray(C), np.asarray(L)
            budget = c[start + 1:] * (l_[start + 1:] - l_[start])
            hit = np.flatnonzero(budget >= self.alpha)
            last = c.size - 1
        else:
            nr = np.asarray(norms)
            hit = np.flatnonzero(nr[start + 1:] > self.level)
            last = nr.size - 1
        return int(start + 1 + hit[0]) if hit.size else last


def _picard_segment(A, g, noise, Z, x_start, start, stop, max_picard, tol, Y0=None):
    """Fixed point of ``Y -> solve_limit(G = B(Y))`` on grid indices ``[start, stop]``."""
    times = Z.times[start:stop + 1]
    dZ = Z.dZ[start:stop]
    n = A.dim
    if Y0 is None:
        Y = np.broadcast_to(np.asarray(x_start, float), (stop - start + 1, n)).copy()
    else:
        Y = np.asarray(Y0, dtype=float)
        if Y.shape != (stop - start + 1, n):
            raise ValueError("initial Picard iterate has the wrong shape")
    distances, ratios = [], []
    streak = 0
    for it in range(1, max_picard + 1):
        G = noise(Y[:-1])  # left endpoints; Y[0] is x at the segment start
        incs = _apply_stack(G, dZ)
        xs, xis, a_en, xi_en = _march(A, g, x_start, times, incs, "limit", t_offset=start)
        d = float(np.max(np.sqrt(A.h * np.sum((xs - Y) ** 2, axis=-1))))
        if distances:
            r = d / distances[-1] if distances[-1] > 0 else 0.0
            ratios.append(r)
            streak = streak + 1 if r >= 1.0 else 0
            if streak >= 3:
                raise NonContractionError(
                    f"Picard distance ratio >= 1 for 3 iterations on [{start}, {stop}] "
                    f"(last ratios {ratios[-3:]}); try a smaller alpha")
        distances.append(d)
        Y = xs
        if d < tol:
            info = {"start": start, "stop": stop, "iterations": it,
                    "distances": distances, "ratios": ratios}
            return xs, xis, incs, G, a_en, xi_en, info
    raise PicardDivergence(
        f"Picard iteration on [{start}, {stop}] reached {max_picard} iterations "
        f"with distance {distances[-1]:.3e} > tol {tol:.1e}")


def _apply_stack(G, dZ):
    return (G @ dZ[..., None])[..., 0]


def _check_single(Z):
    if Z.batch_shape != ():
        raise ValueError("multiplicative solvers work path by path")


def solve_multiplicative(A: GridOperator, g: ScalarGraph, noise: MultiplicativeNoise,
                         Z: SemimartingalePath, x0, alpha=0.25, max_picard=25, tol=1e-10,
                         *, Y0=None):
    """Picard construction on ``[0, tau]`` with the control-budget stop.

    Returns
    -------
    (SolutionPath, tau, iterations)
    """
    _check_single(Z)
    C = control_process(Z)
    L = noise.lipschitz(C)
    tau = StopRule(alpha).first_index(0, C=C.values, L=L.values)
    xs, xis, incs, G, a_en, xi_en, info = _picard_segment(
        A, g, noise, Z, x0, 0, tau, max_picard, tol, Y0)
    sol = SolutionPath(Z.times[:tau + 1], xs, xis, incs, a_en, xi_en, A.h, "multiplicative",
                       None, G, (0, tau), (info,))
    return sol, tau, info["iterations"]


def extend_solution(A: GridOperator, g: ScalarGraph, noise: MultiplicativeNoise,
                    Z: SemimartingalePath, x0, alpha=0.25, max_picard=25, tol=1e-10,
                    *, max_segments=MAX_SEGMENTS) -> SolutionPath:
    """Concatenate Picard segments ``[tau_n, tau_{n+1}]`` up to the horizon.

    The budget restarts from ``L(tau_n)``. If ``|X(tau_n)| > n`` the next
    stop equals ``tau_n`` (an empty segment). ``segments`` records every
    ``tau_n`` including repeats.
    """
    _check_single(Z)
    C = control_process(Z)
    L = noise.lipschitz(C)
    rule = StopRule(alpha)
    N = Z.steps
    n = A.dim
    x = np.empty((N + 1, n))
    xi = np.empty((N + 1, n))
    incs = np.zeros((N, n))
    Gs = None
    a_en = np.zeros(N + 1)
    xi_en = np.zeros(N + 1)
    x[0] = np.asarray(x0, dtype=float)
    xi[0] = g.selection(x[0], Z.times[0])
    taus = [0]
    infos = []
    start, count = 0, 0
    while start < N:
        count += 1
        if count > max_segments:
            raise SegmentLimitError(f"horizon not reached within {max_segments} segments")
        if math.sqrt(A.h * float(np.sum(x[start] ** 2))) > count:
            taus.append(start)
            continue
        stop = rule.first_index(start, C=C.values, L=L.values)
        seg = _picard_segment(A, g, noise, Z, x[start], start, stop, max_picard, tol)
        xs, xis, inc, G, ae, xe, info = seg
        if Gs is None:
            Gs = np.zeros((N,) + G.shape[1:])
        x[start:stop + 1] = xs
        xi[start + 1:stop + 1] = xis[1:]
        incs[start:stop] = inc
        Gs[start:stop] = G
        a_en[start:stop + 1] = a_en[start] + ae
        xi_en[start:stop + 1] = xi_en[start] + xe
        taus.append(stop)
        infos.append(info)
        start = stop
    return SolutionPath(Z.times, x, xi, incs, a_en, xi_en, A.h, "multiplicative", None, Gs,
                        tuple(taus), tuple(infos))


def predicted_segments(C_of_t, L_of_t, alpha, T, *, tol=1e-12, max_segments=MAX_SEGMENTS):
    """Segment count of the continuous budget recurrence ``C(t)(L(t) - L(t_n)) = alpha``.

    ``C_of_t`` and ``L_of_t`` are deterministic, continuous and nondecreasing.
    """
    from scipy.optimize import brentq

    t, count = 0.0, 0
    while t < T:
        count += 1
        if count > max_segments:
            raise SegmentLimitError("budget recurrence does not reach T")
        l0 = L_of_t(t)
        f = lambda s: C_of_t(s) * (L_of_t(s) - l0) - alpha
        if f(T) < 0:
            break
        t = brentq(f, t, T, xtol=tol)
    return count
