"""Jump-diffusion semimartingales on a time grid, their control processes and
left-endpoint stochastic integrals.

Every path quantity is an array whose time axis sits just before the value
axes; any leading axes index independent paths of an ensemble.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np


# --------------------------------------------------------------------------
# specification

@dataclass(frozen=True)
class MarkLaw:
    """Law of a single jump mark in ``R^k``.

    ``constant``: the mark is ``loc``; ``normal``: ``loc + scale * N(0, I)``;
    ``symmetric``: ``+loc`` or ``-loc`` with probability one half.
    """

    kind: str = "normal"
    loc: tuple = (0.0,)
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "normal", "symmetric"):
            raise ValueError(f"unknown mark law {self.kind!r}")

    def _loc(self, k):
        return np.broadcast_to(np.asarray(self.loc, dtype=float), (k,))

    def sample(self, rng, count, k):
        loc = self._loc(k)
        if self.kind == "constant":
            return np.tile(loc, (count, 1))
        if self.kind == "normal":
            return loc + self.scale * rng.standard_normal((count, k))
        signs = rng.choice((-1.0, 1.0), size=(count, 1))
        return signs * loc

    def mean(self, k):
        return np.zeros(k) if self.kind == "symmetric" else self._loc(k).copy()

    def second_moment(self, k) -> float:
        """``E |mark|^2``."""
        m = float(np.sum(self._loc(k) ** 2))
        return m + k * self.scale**2 if self.kind == "normal" else m


@dataclass(frozen=True, eq=False)
class SemimartingaleSpec:
    """``Z = W_Q + (compound Poisson) + drift * t`` in ``K = R^k``."""

    k_dim: int = 1
    wiener_cov: Optional[np.ndarray] = None
    jump_rate: float = 0.0
    marks: MarkLaw = field(default_factory=MarkLaw)
    drift: Optional[np.ndarray] = None

    def __post_init__(self):
        k = self.k_dim
        if k < 1:
            raise ValueError("k_dim must be >= 1")
        q = np.zeros((k, k)) if self.wiener_cov is None else np.atleast_2d(
            np.asarray(self.wiener_cov, dtype=float))
        if q.shape != (k, k):
            raise ValueError(f"wiener_cov must have shape ({k}, {k})")
        if not np.allclose(q, q.T):
            raise ValueError("wiener_cov must be symmetric")
        w, u = np.linalg.eigh(q)
        if w[0] < -1e-12 * max(1.0, abs(w[-1])):
            raise ValueError("wiener_cov must be positive semidefinite")
        if self.jump_rate < 0:
            raise ValueError("jump_rate must be >= 0")
        b = np.zeros(k) if self.drift is None else np.broadcast_to(
            np.asarray(self.drift, dtype=float), (k,)).copy()
        object.__setattr__(self, "wiener_cov", q)
        object.__setattr__(self, "drift", b)
        object.__setattr__(self, "_root", u * np.sqrt(np.maximum(w, 0.0)))

    @classmethod
    def wiener(cls, k_dim=1, variance=1.0):
        return cls(k_dim=k_dim, wiener_cov=variance * np.eye(k_dim))

    @property
    def compensator_rate(self):
        """``nu = rate * E[mark]``, drift of the raw compound Poisson part."""
        return self.jump_rate * self.marks.mean(self.k_dim)

    @property
    def bracket_rate(self) -> float:
        """Slope of the predictable bracket ``<M, M>``."""
        return float(np.trace(self.wiener_cov)) + self.jump_rate * self.marks.second_moment(self.k_dim)

    @property
    def variation_rate(self) -> float:
        """Slope of the variation of the finite-variation part."""
        return float(np.linalg.norm(self.drift + self.compensator_rate))

    def to_config(self) -> dict:
        return {
            "k_dim": self.k_dim,
            "wiener_cov": self.wiener_cov.tolist(),
            "jump_rate": self.jump_rate,
            "mark_law": self.marks.kind,
            "mark_loc": list(np.broadcast_to(np.asarray(self.marks.loc, float), (self.k_dim,))),
            "mark_scale": self.marks.scale,
            "drift": self.drift.tolist(),
        }


def uniform_grid(T=1.0, steps=256):
    if steps < 1 or not T > 0:
        raise ValueError("need T > 0 and at least one step")
    return np.linspace(0.0, T, steps + 1)


# --------------------------------------------------------------------------
# paths

@dataclass(frozen=True, eq=False)
class SemimartingalePath:
    """One trajectory (or a stacked ensemble) of ``Z`` on a grid.

    ``dW`` and ``dJ`` hold the Wiener increments and the summed jump marks
    snapped to the right end of each step; ``jump_sq`` is the squared size of
    the jump at each grid point.
    """

    spec: SemimartingaleSpec
    times: np.ndarray
    dW: np.ndarray
    dJ: np.ndarray
    jump_sq: np.ndarray
    jump_count: np.ndarray
    active: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def batch_shape(self):
        return self.dW.shape[:-2]

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def clock(self):
        """Time increments seen by the drift; zero after a stop."""
        return self.dt if self.active is None else self.dt * self.active

    @property
    def dV(self):
        """Increments of the finite-variation part ``(drift + nu) dt``."""
        rate = self.spec.drift + self.spec.compensator_rate
        return self.clock[..., None] * rate

    @property
    def dM(self):
        """Martingale increments: Wiener plus compensated jumps."""
        return self.dW + self.dJ - self.clock[..., None] * self.spec.compensator_rate

    @property
    def dZ(self):
        return self.dW + self.dJ + self.clock[..., None] * self.spec.drift

    def values(self):
        """``Z(t_j)`` with ``Z(0) = 0``."""
        return _cumulative(self.dZ, axis=-2)

    def predictable_bracket(self):
        """``<M, M>(t_j)``; deterministic for this class of noise."""
        return self.spec.bracket_rate * _cumulative(self.clock, axis=-1)

    def jump_bracket(self):
        """``[M_jump, M_jump](t_j) = sum of squared jumps up to t_j``."""
        return _cumulative(self.jump_sq, axis=-1)

    def variation(self):
        return self.spec.variation_rate * _cumulative(self.clock, axis=-1)

    def coarsen(self, factor: int) -> "SemimartingalePath":
        """Same trajectory on the grid keeping every ``factor``-th point."""
        if factor < 1 or self.steps % factor:
            raise ValueError("factor must divide the number of steps")
        if factor == 1:
            return self
        if self.active is not None:
            raise ValueError("cannot coarsen a stopped path")

        def block(a, axis):
            shape = list(a.shape)
            n = shape[axis]
            shape[axis:axis + 1] = [n // factor, factor]
            return a.reshape(shape).sum(axis=axis + 1 if axis >= 0 else axis)

        dJ = block(self.dJ, self.dJ.ndim - 2)
        return replace(
            self,
            times=self.times[::factor].copy(),
            dW=block(self.dW, self.dW.ndim - 2),
            dJ=dJ,
            jump_sq=np.sum(dJ**2, axis=-1),
            jump_count=block(self.jump_count, self.jump_count.ndim - 1),
        )

    def truncate(self, steps: int) -> "SemimartingalePath":
        """Restriction to the first ``steps`` steps."""
        if not 0 < steps <= self.steps:
            raise ValueError("steps out of range")
        return replace(
            self,
            times=self.times[:steps + 1].copy(),
            dW=self.dW[..., :steps, :].copy(),
            dJ=self.dJ[..., :steps, :].copy(),
            jump_sq=self.jump_sq[..., :steps].copy(),
            jump_count=self.jump_count[..., :steps].copy(),
            active=None if self.active is None else self.active[..., :steps].copy(),
        )

    def __getitem__(self, idx) -> "SemimartingalePath":
        """Select paths of an ensemble."""
        return replace(self, dW=self.dW[idx], dJ=self.dJ[idx],
                       jump_sq=self.jump_sq[idx], jump_count=self.jump_count[idx],
                       active=None if self.active is None else self.active[idx])

    def stopped(self, tau) -> "SemimartingalePath":
        """``Z^{tau-}``: increments from step ``tau`` on are removed.

        On the grid ``Z^{tau-}(t_j) = Z(t_{min(j, tau-1)})`` for ``tau >= 1``
        and ``Z^{0-} = Z(0)``.
        """
        keep = _step_mask(tau, self.steps, self.batch_shape)
        if self.active is not None:
            keep = keep * self.active
        return replace(
            self,
            dW=self.dW * keep[..., None],
            dJ=self.dJ * keep[..., None],
            jump_sq=self.jump_sq * keep,
            jump_count=(self.jump_count * keep).astype(self.jump_count.dtype),
            active=keep,
        )


def _cumulative(incr, axis):
    incr = np.asarray(incr, dtype=float)
    out = np.cumsum(incr, axis=axis)
    pad = [(0, 0)] * incr.ndim
    pad[axis if axis >= 0 else incr.ndim + axis] = (1, 0)
    return np.pad(out, pad)


def _step_mask(tau, steps, batch_shape):
    """``mask[..., i]`` is 1 for 0-based steps ``i < tau - 1``."""
    tau = np.asarray(tau)
    idx = np.arange(steps)
    mask = (idx < (tau[..., None] - 1)).astype(float)
    return np.broadcast_to(mask, tuple(batch_shape) + (steps,))


def _check_grid(grid):
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("time grid must contain at least two points")
    if np.any(np.diff(times) <= 0) or times[0] != 0.0:
        raise ValueError("time grid must start at 0 and increase strictly")
    return times


def _draw(spec, times, rng):
    n, k = times.size - 1, spec.k_dim
    dt = np.diff(times)
    dW = (rng.standard_normal((n, k)) @ spec._root.T) * np.sqrt(dt)[:, None]
    dJ = np.zeros((n, k))
    counts = np.zeros(n, dtype=np.int64)
    T = times[-1]
    count = rng.poisson(spec.jump_rate * T) if spec.jump_rate > 0 else 0
    if count:
        when = rng.uniform(0.0, T, size=count)
        marks = spec.marks.sample(rng, count, k)
        # nearest grid point, never t_0: a jump belongs to the step ending there
        pos = np.searchsorted(times, when)
        pos = np.clip(pos, 1, n)
        closer_left = (pos > 1) & (when - times[pos - 1] < times[pos] - when)
        pos = np.where(closer_left, pos - 1, pos)
        np.add.at(dJ, pos - 1, marks)
        np.add.at(counts, pos - 1, 1)
    return dW, dJ, counts


def sample_path(spec: SemimartingaleSpec, grid, seed: int) -> SemimartingalePath:
    """Reproducible trajectory: same ``(spec, grid, seed)`` gives identical bits."""
    times = _check_grid(grid)
    dW, dJ, counts = _draw(spec, times, np.random.default_rng(seed))
    return SemimartingalePath(spec, times, dW, dJ, np.sum(dJ**2, axis=-1), counts)


def sample_ensemble(spec: SemimartingaleSpec, grid, seeds) -> SemimartingalePath:
    """Stack of :func:`sample_path` over ``seeds`` (leading axis = path)."""
    times = _check_grid(grid)
    draws = [_draw(spec, times, np.random.default_rng(int(s))) for s in seeds]
    dW = np.stack([d[0] for d in draws])
    dJ = np.stack([d[1] for d in draws])
    counts = np.stack([d[2] for d in draws])
    return SemimartingalePath(spec, times, dW, dJ, np.sum(dJ**2, axis=-1), counts)


# --------------------------------------------------------------------------
# control processes

@dataclass(frozen=True, eq=False)
class ControlPath:
    """Nondecreasing control ``C(t_j)`` together with its left limits ``C(t_j-)``."""

    values: np.ndarray
    left: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.values, axis=-1) < -1e-12):
            raise ValueError("control path must be nondecreasing")

    @property
    def increments(self):
        return np.diff(self.values, axis=-1)

    @classmethod
    def continuous(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(values, values.copy())


@dataclass(frozen=True, eq=False)
class LipschitzProcess:
    """Increasing, nonnegative, right-continuous ``L(t_j)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0) or np.any(np.diff(v, axis=-1) < -1e-12):
            raise ValueError("Lipschitz process must be nonnegative and nondecreasing")
        object.__setattr__(self, "values", v)


def control_process(path: SemimartingalePath) -> ControlPath:
    """``C = 8 (<M, M> + [M_jump, M_jump]) + 2 max(2, |V|)``."""
    jumps = path.jump_bracket()
    values = 8.0 * (path.predictable_bracket() + jumps) + 2.0 * np.maximum(2.0, path.variation())
    jump_part = _cumulative(path.jump_sq, axis=-1)
    jump_part = jump_part - np.concatenate(
        [jump_part[..., :1], jump_part[..., :-1]], axis=-1)
    return ControlPath(values, values - 8.0 * jump_part)


def stopped_control(C: ControlPath, tau) -> ControlPath:
    """``C^{tau-}``: frozen at the left limit ``C(t_tau-)`` from ``t_tau`` on.

    ``tau=None`` (or beyond the grid) means no stop.
    """
    if tau is None:
        return C
    n = C.values.shape[-1]
    tau = np.asarray(tau)
    if np.any(tau < 0):
        raise ValueError("tau must be a grid index")
    if np.all(tau >= n):
        return C
    t_idx = np.minimum(tau, n - 1)
    frozen = np.take_along_axis(
        np.broadcast_to(C.left, np.broadcast_shapes(C.left.shape, t_idx.shape + (n,))),
        np.broadcast_to(t_idx[..., None], np.broadcast_shapes(C.left.shape[:-1], t_idx.shape) + (1,)),
        axis=-1)
    j = np.arange(n)
    before = j < tau[..., None]
    values = np.where(before, C.values, frozen)
    left = np.where(j <= tau[..., None], C.left, frozen)
    return ControlPath(values, left)


# --------------------------------------------------------------------------
# integrals

def op_norm_sq(Y, weight=1.0):
    """Squared Frobenius norm of ``Y`` over its last two axes.

    ``weight`` is the quadrature weight of the target space; the weighted
    Frobenius norm dominates the operator norm into that space.
    """
    Y = np.asarray(Y, dtype=float)
    return weight * np.sum(Y**2, axis=(-2, -1))


def _as_grid_integrand(Y, steps):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 2:
        return Y
    if Y.ndim < 3 or Y.shape[-3] not in (steps, steps + 1):
        raise ValueError(
            f"integrand lives on a grid with {Y.shape[-3] if Y.ndim >= 3 else '?'} points; "
            f"path has {steps + 1}")
    return Y[..., :steps, :, :]


def integrate_increments(Y, dZ):
    """``sum_{i<j} Y(t_i) dZ_{i+1}`` for ``j = 0..N``."""
    dZ = np.asarray(dZ, dtype=float)
    steps = dZ.shape[-2]
    Y = _as_grid_integrand(Y, steps)
    incr = (Y @ dZ[..., None])[..., 0]
    return _cumulative(incr, axis=-2)


def stochastic_integral(Y, path: SemimartingalePath):
    """Left-endpoint integral ``(Y . Z)(t_j)``.

    ``Y`` has shape ``(..., N+1, g, k)`` (value at the last point unused),
    ``(..., N, g, k)``, or ``(g, k)`` for a constant integrand. ``Y(t_i)`` must
    be built from information strictly before ``t_{i+1}``.
    """
    return integrate_increments(Y, path.dZ)


def quadratic_variation(W, weight=1.0):
    """Discrete bracket ``[W, W](t_j) = sum of weight * |dW|^2``."""
    W = np.asarray(W, dtype=float)
    d = np.diff(W, axis=-2)
    return _cumulative(weight * np.sum(d**2, axis=-1), axis=-1)


def _norm_sq_series(Y, steps, weight, norm_sq):
    if norm_sq is not None:
        ns = np.asarray(norm_sq, dtype=float)
        if ns.ndim == 0:
            return np.full(steps, float(ns))
        return ns[..., :steps]
    Y = _as_grid_integrand(Y, steps)
    if Y.ndim == 2:
        return np.full(steps, float(op_norm_sq(Y, weight)))
    return op_norm_sq(Y, weight)


def lambda_functional(C: ControlPath, Y=None, index=None, *, weight=1.0, norm_sq=None):
    """``lambda^C_t(Y) = C_t * sum_{s<=t} |Y(s-)|^2 dC(s)`` on the grid.

    Returns the whole series, or its value at grid ``index``.
    """
    steps = C.values.shape[-1] - 1
    ns = _norm_sq_series(Y, steps, weight, norm_sq)
    stieltjes = _cumulative(ns * C.increments, axis=-1)
    series = C.values * stieltjes
    return series if index is None else series[..., index]


def lambda_left(C: ControlPath, tau, Y=None, *, weight=1.0, norm_sq=None):
    """``lambda^C_{tau-}(Y) = C(tau-) * int_{]0, tau[} |Y|^2 dC`` per path."""
    steps = C.values.shape[-1] - 1
    ns = np.broadcast_to(_norm_sq_series(Y, steps, weight, norm_sq),
                         np.broadcast_shapes(C.increments.shape,
                                             np.shape(_norm_sq_series(Y, steps, weight, norm_sq))))
    incr = np.broadcast_to(C.increments, ns.shape)
    stieltjes = _cumulative(ns * incr, axis=-1)
    tau = np.broadcast_to(np.asarray(tau), ns.shape[:-1])
    t = tau[..., None]
    c_left = np.take_along_axis(np.broadcast_to(C.left, stieltjes.shape), t, axis=-1)[..., 0]
    c_val = np.take_along_axis(np.broadcast_to(C.values, stieltjes.shape), t, axis=-1)[..., 0]
    s_val = np.take_along_axis(stieltjes, t, axis=-1)[..., 0]
    last = np.take_along_axis(ns, np.maximum(t - 1, 0), axis=-1)[..., 0]
    inner = s_val - np.where(tau > 0, last * (c_val - c_left), 0.0)
    return np.where(tau > 0, c_left * inner, 0.0)


# --------------------------------------------------------------------------
# audit of the maximal inequality

def constant_integrand(u):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return lambda path: u


def bounded_path_integrand(u):
    """``Y(t_i) = u cos(|Z(t_i)|)``: predictable, path-dependent, bounded by ``|u|``."""
    u = np.atleast_2d(np.asarray(u, dtype=float))

    def rule(path):
        z = np.linalg.norm(path.values(), axis=-1)
        return np.cos(z)[..., None, None] * u

    return rule


def fixed_time(index=None):
    def rule(path):
        tau = path.steps if index is None else index
        return np.full(path.batch_shape, tau, dtype=np.int64)
    return rule


def first_passage(level):
    """First grid index with ``|Z| >= level``; the horizon when never reached."""
    def rule(path):
        z = np.linalg.norm(path.values(), axis=-1)
        hit = z >= level
        first = np.argmax(hit, axis=-1)
        return np.where(hit.any(axis=-1), first, path.steps).astype(np.int64)
    return rule


def sup_before(I, tau, Y, dJ):
    """``sup_{t < t_tau} |I_t|^2`` including the left limit ``I(t_tau-)``."""
    steps = I.shape[-2] - 1
    sq = np.sum(I**2, axis=-1)
    j = np.arange(steps + 1)
    tau = np.asarray(tau)
    grid_part = np.max(np.where(j < tau[..., None], sq, 0.0), axis=-1)
    Yg = _as_grid_integrand(Y, steps)
    if Yg.ndim == 2:
        jump_term = (Yg @ dJ[..., None])[..., 0]
    else:
        jump_term = (Yg @ dJ[..., None])[..., 0]
    t = np.maximum(tau, 1)[..., None, None]
    at_tau = np.take_along_axis(I, np.broadcast_to(t, tau.shape + (1, I.shape[-1])), axis=-2)[..., 0, :]
    jt = np.take_along_axis(jump_term, np.broadcast_to(t - 1, tau.shape + (1, I.shape[-1])),
                            axis=-2)[..., 0, :]
    left_lim = np.sum((at_tau - jt) ** 2, axis=-1)
    return np.where(tau > 0, np.maximum(grid_part, left_lim), 0.0)


def mp_inequality_audit(spec: SemimartingaleSpec, Y_rule, stop_rule, n_paths: int, seed: int,
                        grid=None, *, weight=1.0, min_paths=1000):
    """Monte Carlo audit of the control-process maximal inequalities.

    Checks ``E sup_{t<tau} |(Y.Z)_t|^2 <= E lambda^C_{tau-}(Y)`` and the
    concave variant ``E sup_{t<tau} |(Y.Z)_t| <= 2 E lambda^C_{tau-}(Y)^{1/2}``,
    each with a three-standard-error allowance.
    """
    if n_paths < min_paths:
        raise ValueError(f"n_paths must be >= {min_paths}")
    grid = uniform_grid() if grid is None else grid
    path = sample_ensemble(spec, grid, range(seed, seed + n_paths))
    Y = Y_rule(path)
    tau = stop_rule(path)
    I = stochastic_integral(Y, path)
    C = control_process(path)
    sup_sq = sup_before(I, tau, Y, path.dJ)
    lam = lambda_left(C, tau, Y, weight=weight)
    return {
        "square": _compare(sup_sq, lam, 1.0),
        "sqrt": _compare(np.sqrt(sup_sq), np.sqrt(lam), 2.0),
        "n_paths": n_paths,
        "seed_base": seed,
    }


def _compare(lhs_samples, rhs_samples, factor):
    n = lhs_samples.size
    lhs = float(np.mean(lhs_samples))
    rhs = factor * float(np.mean(rhs_samples))
    lhs_se = float(np.std(lhs_samples, ddof=1) / math.sqrt(n))
    rhs_se = factor * float(np.std(rhs_samples, ddof=1) / math.sqrt(n))
    if rhs > 0:
        rel = math.hypot(lhs_se, rhs_se) / rhs
        ok = lhs <= rhs * (1.0 + 3.0 * rel)
    else:
        ok = lhs <= 0.0
    return {"lhs": lhs, "lhs_se": lhs_se, "rhs": rhs, "rhs_se": rhs_se, "pass": bool(ok)}


def gronwall_bound(a, b, ell) -> float:
    """``a * sum_{k=0}^{floor(2 b ell)} (2 b ell)^k``."""
    if a < 0 or b < 0 or ell < 0:
        raise ValueError("a, b, ell must be nonnegative")
    q = 2.0 * b * ell
    return a * sum(q**k for k in range(int(math.floor(q)) + 1))
