"""Scalar maximal monotone graphs and their convex calculus.

A graph is stored through the two one-sided limits of an increasing
function ``gamma0``; the filled graph is ``beta(x) = [gamma0(x-), gamma0(x+)]``.
Every routine is vectorised over numpy arrays and pure.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]

PROX_TOL = 1e-12
PROX_MAX_ITER = 200
GOLDEN_ITERS = 120
_EPS = np.finfo(float).eps
_EXP_CAP = 700.0


class ProxFailure(RuntimeError):
    """The resolvent iteration did not converge."""


@dataclass(frozen=True, eq=False)
class ScalarGraph:
    """Maximal monotone graph on the real line obtained by filling jumps.

    Parameters
    ----------
    name : str
        Library name, echoed into configs and reports.
    lower, upper : callable
        Vectorised left and right limits of the generating function.
    slope : callable, optional
        Derivative of the generating function where it is differentiable.
        Enables Newton refinement inside :func:`resolvent`.
    jump_near : callable, optional
        Map ``y -> nearest jump abscissa``; used to land exactly on a jump.
    params : dict
        Parameters needed to rebuild the graph from a config block.
    modulation : callable, optional
        Bounded positive factor ``t -> g(t)``; the graph at time ``t`` is
        ``g(t) * beta``.
    """

    name: str
    lower: ArrayFn
    upper: ArrayFn
    slope: Optional[ArrayFn] = None
    jump_near: Optional[ArrayFn] = None
    params: dict = field(default_factory=dict)
    modulation: Optional[Callable[[float], float]] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.lower(x), self.upper(x)

    def scale(self, t=None) -> float:
        if self.modulation is None or t is None:
            return 1.0
        return float(self.modulation(t))

    def selection(self, x, t=None):
        """Minimal-norm selection of ``beta(t, x)``."""
        lo, hi = self(x)
        return self.scale(t) * np.clip(0.0, lo, hi)

    def contains(self, x, y, tol=1e-9, t=None):
        """``y in beta(t, x)`` up to ``tol`` in both coordinates."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = self.scale(t)
        with np.errstate(over="ignore", invalid="ignore"):
            lo = c * self.lower(x - tol) - tol
            hi = c * self.upper(x + tol) + tol
        return (lo <= y) & (y <= hi)

    def is_single_valued(self) -> bool:
        return self.jump_near is None

    def with_modulation(self, fn):
        return replace(self, modulation=fn)

    def to_config(self) -> dict:
        return {"name": self.name, **self.params}


@dataclass(frozen=True, eq=False)
class ConvexPotential:
    """Convex ``j >= 0`` with ``j(0) = 0`` whose subdifferential is ``graph``.

    ``conj`` is an optional closed form of the convex conjugate. It is used
    only for graphs with jumps, where the conjugate is piecewise affine;
    elsewhere :func:`conjugate` goes through the inverse graph.
    ``symmetry_bound`` stores ``limsup j(x) / j(-x)``; ``inf`` records that
    the potential is not symmetry-comparable.
    """

    name: str
    j: ArrayFn
    graph: ScalarGraph
    conj: Optional[ArrayFn] = None
    symmetry_bound: float = math.inf

    def __call__(self, x):
        return self.j(np.asarray(x, dtype=float))

    def convexity_gap(self, x, y, theta):
        """``theta j(x) + (1-theta) j(y) - j(theta x + (1-theta) y)``; >= 0."""
        x, y, theta = (np.asarray(a, dtype=float) for a in (x, y, theta))
        mix = theta * x + (1.0 - theta) * y
        return theta * self.j(x) + (1.0 - theta) * self.j(y) - self.j(mix)

    def symmetry_ratio(self, x_big=50.0, count=200):
        """Largest sampled ``j(x)/j(-x)`` over ``x_big <= |x| <= 4 x_big``."""
        xs = np.linspace(x_big, 4.0 * x_big, count)
        xs = np.concatenate([xs, -xs])
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ratio = self.j(xs) / self.j(-xs)
        ratio = np.where(np.isnan(ratio), math.inf, ratio)
        return float(np.max(ratio))

    def fenchel_young_gap(self, x, y):
        """``j(x) + j*(y) - x y``; nonnegative, zero exactly on the graph."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.j(x) + conjugate(self, y) - x * y


# --------------------------------------------------------------------------
# construction

def _offset(x):
    return 1e-12 * np.maximum(1.0, np.abs(x))


def fill_jumps(gamma0, left=None, right=None, *, name="custom", slope=None,
               jump_near=None, probe=None) -> ScalarGraph:
    """Maximal monotone graph ``x -> [gamma0(x-), gamma0(x+)]``.

    When the one-sided limits are not supplied they are estimated by
    evaluating ``gamma0`` at a relative offset of ``1e-12``.

    Raises
    ------
    ValueError
        If ``gamma0`` is not finite or not nondecreasing on the probe
        points, or if ``0`` is not in ``beta(0)``.
    """
    probe = np.linspace(-50.0, 50.0, 4001) if probe is None else np.asarray(probe, float)
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.asarray(gamma0(probe), dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("gamma0 must be finite at every point of the real line")
    if np.any(np.diff(values) < 0):
        raise ValueError("gamma0 must be nondecreasing")

    if left is None:
        def left(x, _g=gamma0):
            x = np.asarray(x, dtype=float)
            return np.asarray(_g(x - _offset(x)), dtype=float)
    if right is None:
        def right(x, _g=gamma0):
            x = np.asarray(x, dtype=float)
            return np.asarray(_g(x + _offset(x)), dtype=float)

    lo0, hi0 = float(left(np.float64(0.0))), float(right(np.float64(0.0)))
    if not lo0 <= 0.0 <= hi0:
        raise ValueError(f"0 must belong to beta(0) = [{lo0}, {hi0}]")
    return ScalarGraph(name=name, lower=left, upper=right, slope=slope,
                       jump_near=jump_near)


def _zero_graph():
    f = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    return ScalarGraph("zero", f, f, slope=f)


def _identity_graph():
    f = lambda x: np.asarray(x, dtype=float)
    return ScalarGraph("identity", f, f, slope=lambda x: np.ones_like(np.asarray(x, float)))


def _power_graph(p):
    if p < 1:
        raise ValueError("power graph needs p >= 1")

    def f(x):
        x = np.asarray(x, dtype=float)
        return x * np.abs(x) ** (p - 1)

    def df(x):
        return p * np.abs(np.asarray(x, dtype=float)) ** (p - 1)

    return ScalarGraph("power", f, f, slope=df, params={"p": p})


def _exponential_graph():
    def f(x):
        return np.expm1(np.minimum(np.asarray(x, dtype=float), _EXP_CAP))

    def df(x):
        return np.exp(np.minimum(np.asarray(x, dtype=float), _EXP_CAP))

    return ScalarGraph("exponential", f, f, slope=df)


def _sinh_graph():
    def f(x):
        return np.sinh(np.clip(np.asarray(x, dtype=float), -_EXP_CAP, _EXP_CAP))

    def df(x):
        return np.cosh(np.clip(np.asarray(x, dtype=float), -_EXP_CAP, _EXP_CAP))

    return ScalarGraph("sinh", f, f, slope=df)


def _heaviside_graph():
    lower = lambda x: (np.asarray(x, dtype=float) > 0).astype(float)
    upper = lambda x: (np.asarray(x, dtype=float) >= 0).astype(float)
    near = lambda y: np.zeros_like(np.asarray(y, dtype=float))
    return ScalarGraph("heaviside-filled", lower, upper, jump_near=near)


def _floor_graph():
    lower = lambda x: np.ceil(np.asarray(x, dtype=float)) - 1.0
    upper = lambda x: np.floor(np.asarray(x, dtype=float))
    near = lambda y: np.round(np.asarray(y, dtype=float))
    return ScalarGraph("floor", lower, upper, jump_near=near)


_GRAPHS = {
    "zero": _zero_graph,
    "identity": _identity_graph,
    "power": _power_graph,
    "exponential": _exponential_graph,
    "sinh": _sinh_graph,
    "heaviside-filled": _heaviside_graph,
    "floor": _floor_graph,
}

# (name, params) pairs making up the standard test library
LIBRARY = (
    ("identity", {}),
    ("power", {"p": 2}),
    ("power", {"p": 3}),
    ("power", {"p": 5}),
    ("exponential", {}),
    ("sinh", {}),
    ("heaviside-filled", {}),
    ("floor", {}),
)


def graph_names():
    return sorted(_GRAPHS)


def builtin_graph(name, **params) -> ScalarGraph:
    try:
        factory = _GRAPHS[name]
    except KeyError:
        raise KeyError(f"unknown graph name {name!r}") from None
    return factory(**params)


def _floor_antiderivative(x):
    k = np.floor(x)
    return k * (k - 1.0) / 2.0 + k * (x - k)


def _floor_conjugate(y):
    m = np.ceil(y)
    return m * y - m * (m - 1.0) / 2.0


def _heaviside_conjugate(y):
    y = np.asarray(y, dtype=float)
    return np.where((y >= 0.0) & (y <= 1.0), 0.0, math.inf)


def builtin_potential(name, **params) -> ConvexPotential:
    """Potential ``j`` whose subdifferential is ``builtin_graph(name)``."""
    graph = builtin_graph(name, **params)
    if name == "zero":
        zero = lambda x: np.zeros_like(np.asarray(x, float))
        indicator = lambda y: np.where(np.asarray(y, float) == 0.0, 0.0, math.inf)
        return ConvexPotential(name, zero, graph, conj=indicator, symmetry_bound=1.0)
    if name == "identity":
        return ConvexPotential(name, lambda x: 0.5 * np.asarray(x, float) ** 2, graph,
                               symmetry_bound=1.0)
    if name == "power":
        p = params["p"]
        return ConvexPotential(name, lambda x: np.abs(np.asarray(x, float)) ** (p + 1) / (p + 1),
                               graph, symmetry_bound=1.0)
    if name == "exponential":
        # e^x - 1 - x is not comparable to its reflection as x -> +inf
        def j(x):
            x = np.minimum(np.asarray(x, float), _EXP_CAP)
            return np.expm1(x) - x
        return ConvexPotential(name, j, graph, symmetry_bound=math.inf)
    if name == "sinh":
        def j(x):
            x = np.clip(np.asarray(x, float), -_EXP_CAP, _EXP_CAP)
            return np.cosh(x) - 1.0
        return ConvexPotential(name, j, graph, symmetry_bound=1.0)
    if name == "heaviside-filled":
        return ConvexPotential(name, lambda x: np.maximum(np.asarray(x, float), 0.0), graph,
                               conj=_heaviside_conjugate, symmetry_bound=math.inf)
    if name == "floor":
        return ConvexPotential(name, lambda x: _floor_antiderivative(np.asarray(x, float)),
                               graph, conj=_floor_conjugate, symmetry_bound=2.0)
    raise KeyError(f"unknown potential name {name!r}")


def potential_from_graph(graph: ScalarGraph, name=None) -> ConvexPotential:
    """Potential ``j(x) = int_0^x gamma0`` by adaptive quadrature."""
    from scipy.integrate import quad

    def j(x):
        x = np.asarray(x, dtype=float)
        flat = [quad(lambda s: float(graph.upper(np.float64(s))), 0.0, v, limit=200)[0]
                for v in x.ravel()]
        return np.asarray(flat).reshape(x.shape)

    return ConvexPotential(name or graph.name, j, graph)


# --------------------------------------------------------------------------
# resolvent calculus

def resolvent(g: ScalarGraph, lam, x, t=None, *, tol=PROX_TOL, max_iter=PROX_MAX_ITER):
    """Proximal map ``(I + lam beta(t, .))^{-1} x``.

    Safeguarded Newton on the bracket ``[min(x, 0), max(x, 0)]``, which
    always contains the answer because ``0 in beta(0)``. Steps leaving the
    bracket, and all steps on graphs without a slope, fall back to
    bisection of ``y -> y + lam beta(y)``.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    lam_eff = lam * g.scale(t)
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    lo = np.minimum(x, 0.0)
    hi = np.maximum(x, 0.0)
    y = 0.5 * (lo + hi)
    done = np.zeros(x.shape, dtype=bool)

    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            dn = y + lam_eff * g.lower(y)
            up = y + lam_eff * g.upper(y)
            right = up < x
            left = dn > x
            active = ~done
            lo = np.where(right & active, y, lo)
            hi = np.where(left & active, y, hi)
            width_tol = tol + 8.0 * _EPS * np.maximum(np.abs(lo), np.abs(hi))
            done |= active & (~(right | left) | (hi - lo <= width_tol))
            if done.all():
                break
            mid = 0.5 * (lo + hi)
            if g.slope is not None:
                cand = y - (dn - x) / (1.0 + lam_eff * g.slope(y))
                ok = np.isfinite(cand) & (cand >= lo) & (cand <= hi)
                nxt = np.where(ok, cand, mid)
                small = ok & (np.abs(cand - y) <= width_tol)
            else:
                nxt = mid
                small = np.zeros_like(done)
            y = np.where(done, y, nxt)
            done |= small
        else:
            bad = int(np.count_nonzero(~done))
            raise ProxFailure(f"resolvent did not converge at {bad} point(s) "
                              f"after {max_iter} iterations (lam={lam})")

        if g.jump_near is not None:
            c = g.jump_near(y)
            snap = ((np.abs(c - y) <= 1e3 * (tol + _EPS * np.abs(y)))
                    & (c + lam_eff * g.lower(c) <= x) & (x <= c + lam_eff * g.upper(c)))
            y = np.where(snap, c, y)

    return float(y[0]) if scalar else y


def yosida(g: ScalarGraph, lam, x, t=None, **kw):
    """Yosida approximation ``(x - J_lam x) / lam``; (1/lam)-Lipschitz."""
    x = np.asarray(x, dtype=float)
    out = (x - resolvent(g, lam, x, t, **kw)) / lam
    return float(out) if np.ndim(out) == 0 else out


def moreau(p: ConvexPotential, lam, x):
    """Moreau envelope ``inf_s |x - s|^2 / (2 lam) + j(s)``.

    Evaluated by golden-section search of the convex objective on
    ``[min(x, 0), max(x, 0)]``; no resolvent is involved, so the envelope
    identity ``j_lam(x) = j(J x) + |x - J x|^2 / (2 lam)`` is a genuine
    cross-check.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)

    def obj(s):
        return (x - s) ** 2 / (2.0 * lam) + p.j(s)

    a = np.minimum(x, 0.0)
    b = np.maximum(x, 0.0)
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(GOLDEN_ITERS):
        keep_left = fc < fd
        b = np.where(keep_left, d, b)
        a = np.where(keep_left, a, c)
        # both probes recomputed: avoids drift between reused and fresh points
        c = b - inv_phi * (b - a)
        d = a + inv_phi * (b - a)
        fc, fd = obj(c), obj(d)
    m = 0.5 * (a + b)
    val = np.minimum(np.minimum(obj(m), obj(a)), obj(b))
    return float(val[0]) if scalar else val


def inverse_graph(g: ScalarGraph, y, *, tol=PROX_TOL, max_expand=60, max_iter=PROX_MAX_ITER):
    """Some ``x`` with ``y in beta(x)``; ``nan`` where ``y`` is outside the range."""
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    x = np.zeros_like(y)
    with np.errstate(over="ignore", invalid="ignore"):
        pos = y > g.upper(np.zeros(1))[0]
        neg = y < g.lower(np.zeros(1))[0]
        for side, mask in ((1.0, pos), (-1.0, neg)):
            if not mask.any():
                continue
            yy = y[mask]
            # reached: gamma0 on the ray has passed yy
            def reached(v):
                return g.upper(v) >= yy if side > 0 else g.lower(v) <= yy
            near = np.zeros_like(yy)
            far = np.full_like(yy, side)
            found = reached(far)
            for _ in range(max_expand):
                if found.all():
                    break
                near = np.where(found, near, far)
                far = np.where(found, far, 2.0 * far)
                found = reached(far)
            for _ in range(max_iter):
                mid = 0.5 * (near + far)
                hit = reached(mid)
                far = np.where(hit, mid, far)
                near = np.where(hit, near, mid)
                if np.all(np.abs(far - near) <= tol + 8 * _EPS * np.abs(far)):
                    break
            x[mask] = np.where(found, far, np.nan)
    return float(x[0]) if scalar else x


def _ray_supremum(p, y, sign):
    """``sup_x x y - j(x)`` along a ray when the sup is not attained."""
    ks = 2.0 ** np.arange(0, 61)
    xs = sign * ks
    with np.errstate(over="ignore", invalid="ignore"):
        vals = np.array([xv * y - float(p.j(np.float64(xv))) for xv in xs])
    vals = np.where(np.isnan(vals), -math.inf, vals)
    tail = vals[-3:]
    if np.all(np.diff(tail) > 0) and tail[-1] > 1e6:
        return math.inf
    return float(np.max(vals))


def conjugate(p: ConvexPotential, y):
    """Convex conjugate ``j*(y) = sup_x x y - j(x)``.

    Jump graphs use the stored piecewise-affine closed form. Otherwise the
    supremum is evaluated at a solution of ``y in beta(x)``; when no such
    ``x`` exists the supremum is taken along the ray and ``inf`` flags a
    divergent one.
    """
    y = np.asarray(y, dtype=float)
    if p.conj is not None:
        out = np.asarray(p.conj(y), dtype=float)
        return float(out) if out.ndim == 0 else out
    shape = y.shape
    y = y.ravel()
    x = np.atleast_1d(inverse_graph(p.graph, y))
    with np.errstate(over="ignore", invalid="ignore"):
        out = x * y - p.j(x)
    for i in np.flatnonzero(np.isnan(x)):
        sign = 1.0 if y[i] > 0 else -1.0
        out[i] = _ray_supremum(p, float(y[i]), sign)
    return float(out[0]) if not shape else out.reshape(shape)


def membership(p: ConvexPotential, x, y, tol) -> np.ndarray:
    """``y in beta(x)`` through the equality case of Fenchel-Young.

    ``y`` is also probed at a distance ``tol / (2 max(1, |x|))`` on both
    sides, so that a rounding error pushing ``y`` just outside the domain
    of a piecewise-affine ``j*`` is not mistaken for non-membership.
    """
    tol = np.asarray(tol, dtype=float)
    if not np.all(tol > 0):
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    shift = tol / (2.0 * np.maximum(1.0, np.abs(x)))
    with np.errstate(invalid="ignore"):
        gap = np.min([np.abs(x * yy - p.j(x) - conjugate(p, yy))
                      for yy in (y, y - shift, y + shift)], axis=0)
    out = np.isfinite(gap) & (gap <= tol)
    return bool(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# time modulation and text blocks

def sine_modulation(seed, amplitude=0.5, frequency=1.0):
    """Bounded positive factor ``1 + a sin(2 pi f t + phase)``, phase drawn from ``seed``."""
    if not 0 <= amplitude < 1:
        raise ValueError("amplitude must lie in [0, 1)")
    phase = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)

    def g(t):
        return 1.0 + amplitude * math.sin(2.0 * math.pi * frequency * t + phase)

    return g


def format_block(config: dict) -> str:
    """Serialise a ``to_config`` dict as ``key = value`` lines."""
    lines = [f"name = {config['name']}"]
    lines += [f"{k} = {v}" for k, v in sorted(config.items()) if k != "name"]
    return "\n".join(lines) + "\n"


def parse_block(text: str) -> dict:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed line {raw!r}")
        key, value = key.strip(), value.strip()
        try:
            out[key] = int(value)
        except ValueError:
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out


def graph_from_block(text: str) -> ScalarGraph:
    cfg = parse_block(text)
    name = cfg.pop("name")
    return builtin_graph(name, **cfg)
