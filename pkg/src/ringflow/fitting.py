"""Nonlinear least-squares estimation of injection, distribution and
accumulation parameters.

Every fit is a bounded multi-start search: a list of start vectors is drawn
from a seeded generator (plus optional caller-supplied starts), each start is
refined with a bounded trust-region least-squares solver, and the winner is
the lowest objective, ties broken by start index. Start ``i`` depends only on
``seed`` and ``i``, so asking for more starts can only lower the objective.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .analytic import ChannelParams
from .errors import ConfigError, DomainError, GridMismatchError, NormalizationError
from .signal import (
    AccumulationParams,
    DEFAULT_TAIL_FRACTION,
    InjectionParams,
    IntensityTrace,
    MixtureParams,
    derivative,
    injection_profile,
    mixture_response,
    model_acc,
)

__all__ = [
    "SearchSpace",
    "FitResult",
    "injection_space",
    "dist_space",
    "acc_space",
    "fit_injection",
    "fit_dist",
    "fit_acc",
    "rmse",
    "select_best",
    "objective_injection",
    "objective_dist",
    "objective_acc",
    "dist_model_values",
    "nested_start",
    "DEFAULT_DIST_STARTS",
    "DEFAULT_SCALAR_STARTS",
]

DEFAULT_DIST_STARTS = 64
DEFAULT_SCALAR_STARTS = 8

# relative distance to a bound below which a parameter is reported as pinned
_BOUND_RTOL = 1e-6
# the d_rx fraction stays strictly below 1 so that d_rx < l_eff
_FRAC_MAX = 1.0 - 1e-9
# local solver budget; converging starts need well under this
_NFEV_PER_PARAM = 25
_MIN_TAIL_RATIO = 1e-9


@dataclass(frozen=True)
class SearchSpace:
    """Closed interval ``(lower, upper)`` per named parameter.

    For distribution fits the ``d_rx`` interval's upper end is capped by the
    component's own ``l_eff`` at evaluation time.
    """

    bounds: dict

    def __post_init__(self):
        clean = {}
        for name, (lo, hi) in self.bounds.items():
            lo, hi = float(lo), float(hi)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigError(f"bad interval for {name}: ({lo}, {hi})")
            clean[name] = (lo, hi)
        object.__setattr__(self, "bounds", clean)

    def __getitem__(self, name):
        return self.bounds[name]

    def require(self, names, positive=()):
        for name in names:
            if name not in self.bounds:
                raise ConfigError(f"search space lacks an interval for {name!r}")
        for name in positive:
            if self.bounds[name][0] <= 0:
                raise ConfigError(f"{name} must have a positive lower bound")

    def contains(self, name, value):
        lo, hi = self.bounds[name]
        return lo <= value <= hi


def injection_space(t_w=(0.1, 30.0), t_0=(0.0, 30.0)):
    return SearchSpace({"t_w": t_w, "t_0": t_0})


def dist_space(d_eff=(1e-12, 1e-3), v_eff=(1e-6, 0.1), l_eff=(1e-3, 0.2), d_rx=(1e-5, 0.2)):
    return SearchSpace({"d_eff": d_eff, "v_eff": v_eff, "l_eff": l_eff, "d_rx": d_rx})


def acc_space(a=(1e-3, 1.0), b=(1e-6, 1.0)):
    return SearchSpace({"a": a, "b": b})


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of a multi-start fit.

    ``objective`` is the plain sum of squared residuals of the fitted model
    and ``rmse`` the root-mean-square error of the undifferentiated traces.
    """

    kind: str
    params: object
    objective: float
    rmse: float
    n_starts: int
    converged: bool
    model: IntensityTrace
    seed: int
    start_index: int
    at_bound: bool = False
    warnings: tuple = field(default_factory=tuple)


# -- RMSE --------------------------------------------------------------------


def _as_values(trace):
    if isinstance(trace, IntensityTrace):
        return trace.samples
    return np.asarray(trace, dtype=float)


def rmse(measured, modeled):
    """Root-mean-square error over samples ``i = 0 .. N``.

    The squared residuals of all ``N + 1`` samples are divided by ``N``.
    """
    if isinstance(measured, IntensityTrace) and isinstance(modeled, IntensityTrace):
        if not measured.same_grid(modeled):
            raise GridMismatchError("measured and modelled traces differ in grid")
    m = _as_values(measured)
    h = _as_values(modeled)
    if m.shape != h.shape:
        raise GridMismatchError(f"sample counts differ: {m.size} vs {h.size}")
    n = m.size - 1
    if n < 1:
        raise DomainError("rmse needs at least 2 samples")
    d = m - h
    return math.sqrt(float(np.dot(d, d)) / n)


# -- parameterizations --------------------------------------------------------


class _Injection:
    names = ("t_w", "t_0")

    def __init__(self, space):
        space.require(self.names, positive=("t_w",))
        self.space = space
        self.lower = np.array([space["t_w"][0], space["t_0"][0]])
        self.upper = np.array([space["t_w"][1], space["t_0"][1]])

    def params(self, theta):
        return InjectionParams(t_w=theta[0], t_0=theta[1])

    def vector(self, p):
        return np.array([p.t_w, p.t_0])

    def random_start(self, rng):
        return rng.uniform(self.lower, self.upper)


class _Accumulation:
    names = ("a", "b")

    def __init__(self, space):
        space.require(self.names, positive=("a", "b"))
        self.space = space
        self.lower = np.array([space["a"][0], math.log(space["b"][0])])
        self.upper = np.array([space["a"][1], math.log(space["b"][1])])

    def params(self, theta):
        return AccumulationParams(a=theta[0], b=math.exp(theta[1]))

    def vector(self, p):
        return np.array([p.a, math.log(p.b)])

    def random_start(self, rng):
        return np.array([
            rng.uniform(self.lower[0], self.upper[0]),
            rng.uniform(self.lower[1], self.upper[1]),
        ])


class _Mixture:
    """Vector layout: ``n - 1`` stick-breaking fractions, then per component
    ``(log d_eff, log v_eff, l_eff, u)`` with ``d_rx = lo + u * (l_eff - lo)``.
    """

    names = ("d_eff", "v_eff", "l_eff", "d_rx")

    def __init__(self, space, n):
        space.require(self.names, positive=("d_eff", "v_eff", "l_eff"))
        if n < 1:
            raise DomainError(f"component count must be >= 1, got {n}")
        self.space = space
        self.n = n
        self.d_min = space["d_rx"][0]
        if self.d_min >= space["l_eff"][0]:
            raise ConfigError("d_rx lower bound must be below the l_eff lower bound")
        comp_lo = [math.log(space["d_eff"][0]), math.log(space["v_eff"][0]), space["l_eff"][0], 0.0]
        comp_hi = [math.log(space["d_eff"][1]), math.log(space["v_eff"][1]), space["l_eff"][1], _FRAC_MAX]
        self.lower = np.array([0.0] * (n - 1) + comp_lo * n)
        self.upper = np.array([1.0] * (n - 1) + comp_hi * n)

    def _d_rx_hi(self, l_eff):
        return min(l_eff, self.space["d_rx"][1])

    def weights(self, fracs):
        w = []
        rest = 1.0
        for s in fracs:
            a = rest * s
            w.append(a)
            rest -= a
        w.append(max(0.0, 1.0 - sum(w)))
        return w

    def params(self, theta):
        n = self.n
        w = self.weights(theta[: n - 1])
        comps = []
        for j in range(n):
            ld, lv, L, u = theta[n - 1 + 4 * j : n - 1 + 4 * (j + 1)]
            d_rx = self.d_min + u * (self._d_rx_hi(L) - self.d_min)
            comps.append((w[j], ChannelParams(math.exp(ld), math.exp(lv), L, min(d_rx, L * _FRAC_MAX))))
        return MixtureParams(tuple(comps))

    def vector(self, p):
        if p.n > self.n:
            raise DomainError(f"cannot embed {p.n} components into {self.n}")
        comps = list(p.components)
        # pad with zero-weight duplicates of the last component
        while len(comps) < self.n:
            comps.append((0.0, comps[-1][1]))
        fracs = []
        rest = 1.0
        for a, _ in comps[:-1]:
            fracs.append(min(1.0, a / rest) if rest > 0 else 0.0)
            rest -= a
        vec = list(fracs)
        for _, q in comps:
            span = self._d_rx_hi(q.l_eff) - self.d_min
            u = (q.d_rx - self.d_min) / span if span > 0 else 0.0
            vec += [math.log(q.d_eff), math.log(q.v_eff), q.l_eff, u]
        return np.clip(np.array(vec), self.lower, self.upper)

    def random_start(self, rng):
        theta = np.empty(self.lower.size)
        for i in range(self.lower.size):
            theta[i] = rng.uniform(self.lower[i], self.upper[i])
        return theta


def nested_start(p, n):
    """Embed a fitted mixture into ``n`` components by zero-weight duplication."""
    comps = list(p.components)
    while len(comps) < n:
        comps.append((0.0, comps[-1][1]))
    return MixtureParams(tuple(comps))


# -- model evaluation ----------------------------------------------------------


def dist_model_values(p, inj, dt, n_samples, tail_fraction=DEFAULT_TAIL_FRACTION):
    """Normalized mixture model samples; zeros if the signal never arrives."""
    raw = mixture_response(p, inj, dt, n_samples)
    n_tail = max(1, int(math.ceil(tail_fraction * raw.size)))
    level = float(np.mean(raw[-n_tail:]))
    # a tail far below the peak means the pulse has not settled in the window
    if not (math.isfinite(level) and level > _MIN_TAIL_RATIO * float(np.max(raw))):
        return np.zeros_like(raw)
    with np.errstate(over="ignore", invalid="ignore"):
        out = raw / level
    if not np.all(np.isfinite(out)):
        return np.zeros_like(raw)
    return out


def _backward_diff(values, dt):
    d = np.empty_like(values)
    d[0] = values[0] / dt
    d[1:] = np.diff(values) / dt
    return d


def objective_injection(f_inj_measured, p):
    r = f_inj_measured.samples - injection_profile(p, f_inj_measured.dt * np.arange(len(f_inj_measured)))
    return float(np.dot(r, r))


def objective_dist(trace, p, inj, tail_fraction=DEFAULT_TAIL_FRACTION):
    model = dist_model_values(p, inj, trace.dt, len(trace), tail_fraction)
    r = derivative(trace).samples - _backward_diff(model, trace.dt)
    return float(np.dot(r, r))


def objective_acc(trace, p):
    r = trace.samples - model_acc(p, trace.dt, len(trace)).samples
    return float(np.dot(r, r))


# -- multi-start driver -----------------------------------------------------------


def _solve(residual, theta0, lower, upper):
    theta0 = np.clip(theta0, lower, upper)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = least_squares(
            residual,
            theta0,
            bounds=(lower, upper),
            method="trf",
            x_scale="jac",
            max_nfev=_NFEV_PER_PARAM * (theta0.size + 1),
        )
    return sol


def _pinned(theta, lower, upper):
    span = upper - lower
    return bool(np.any((theta - lower <= _BOUND_RTOL * span) | (upper - theta <= _BOUND_RTOL * span)))


def _multistart(residual, param, starts, threads):
    def run(item):
        index, theta0 = item
        sol = _solve(residual, theta0, param.lower, param.upper)
        r = residual(sol.x)
        return float(np.dot(r, r)), index, sol

    items = list(enumerate(starts))
    threads = threads or os.cpu_count() or 1
    if threads == 1 or len(items) == 1:
        outcomes = [run(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, items))
    best = min(outcomes, key=lambda o: (o[0], o[1]))
    return best, outcomes


def _draw_starts(param, n_random, seed, fixed=()):
    rng = np.random.default_rng(seed)
    starts = [np.asarray(s, dtype=float) for s in fixed]
    for _ in range(n_random):
        starts.append(param.random_start(rng))
    return starts


def fit_injection(f_inj_measured, space=None, starts=DEFAULT_SCALAR_STARTS, seed=0, threads=None):
    """Fit the raised-cosine injection model to a measured injection rate.

    The input is the backward-difference derivative of the mean intensity.
    Start 0 is a moment estimate from the data when the trace has positive
    mass; the remaining starts are uniform over the search space.
    """
    trace = f_inj_measured
    if not isinstance(trace, IntensityTrace):
        raise DomainError("expected an IntensityTrace")
    if not np.all(np.isfinite(trace.samples)):
        raise DomainError("trace contains non-finite samples")
    param = _Injection(space or injection_space())
    t = trace.dt * np.arange(len(trace))
    y = trace.samples
    notes = []

    fixed = []
    pos = np.clip(y, 0.0, None)
    mass = pos.sum()
    if mass > 0:
        centre = float(np.dot(t, pos) / mass)
        var = float(np.dot((t - centre) ** 2, pos) / mass)
        width = math.sqrt(var / (1.0 / 12.0 - 1.0 / (2.0 * math.pi**2)))
        fixed.append(np.clip([width, centre - width / 2], param.lower, param.upper))
    else:
        notes.append("trace has no positive samples")
    n_random = max(0, int(starts) - len(fixed))

    def residual(theta):
        return y - injection_profile(InjectionParams(theta[0], theta[1]), t)

    (obj, index, sol), _ = _multistart(residual, param, _draw_starts(param, n_random, seed, fixed), threads)
    p = param.params(sol.x)
    model = trace.with_samples(injection_profile(p, t))
    at_bound = _pinned(sol.x, param.lower, param.upper)
    if at_bound:
        notes.append("estimate on search-space boundary")
    return FitResult(
        kind="injection",
        params=p,
        objective=objective_injection(trace, p),
        rmse=rmse(trace, model),
        n_starts=len(fixed) + n_random,
        converged=bool(sol.status > 0 and mass > 0),
        model=model,
        seed=int(seed),
        start_index=index,
        at_bound=at_bound,
        warnings=tuple(notes),
    )


def fit_dist(
    trace,
    n,
    inj,
    space=None,
    starts=DEFAULT_DIST_STARTS,
    seed=0,
    threads=None,
    include=(),
    tail_fraction=DEFAULT_TAIL_FRACTION,
):
    """Fit an ``n``-component ring mixture to a normalized distribution trace.

    Residuals are taken between backward-difference derivatives of the
    measured and modelled traces; the reported RMSE compares the traces
    themselves.

    Parameters
    ----------
    trace : IntensityTrace
        Distribution-phase intensity, normalized to a unit steady state.
    n : int
        Number of ring components.
    inj : InjectionParams
        Injection dynamics, typically from :func:`fit_injection`.
    space : SearchSpace, optional
        Defaults to :func:`dist_space`.
    starts : int
        Number of random starts (drawn after any ``include`` starts).
    seed : int
    threads : int, optional
    include : sequence of MixtureParams
        Extra starts evaluated first; mixtures with fewer than ``n``
        components are embedded with zero-weight duplicates, which makes the
        ``n``-component fit at least as good as the embedded one.
    """
    n = int(n)
    if n < 1:
        raise DomainError(f"component count must be >= 1, got {n}")
    if not np.all(np.isfinite(trace.samples)):
        raise DomainError("trace contains non-finite samples")
    param = _Mixture(space or dist_space(), n)
    notes = []
    n_tail = max(1, int(math.ceil(tail_fraction * len(trace))))
    level = float(np.mean(trace.samples[-n_tail:]))
    if abs(level - 1.0) > 0.05:
        notes.append(f"trace steady-state level is {level:.4g}, expected 1")

    dt, size = trace.dt, len(trace)
    target = derivative(trace).samples

    def residual(theta):
        try:
            p = param.params(theta)
        except DomainError:
            return np.full(size, 1e6)
        return target - _backward_diff(dist_model_values(p, inj, dt, size, tail_fraction), dt)

    fixed = [param.vector(p) for p in include]
    start_list = _draw_starts(param, int(starts), seed, fixed)
    (obj, index, sol), _ = _multistart(residual, param, start_list, threads)
    p = param.params(sol.x)
    values = dist_model_values(p, inj, dt, size, tail_fraction)
    model = IntensityTrace(dt=dt, samples=values, kind="dist", t0=trace.t0, metadata=dict(trace.metadata))
    at_bound = _pinned(sol.x[n - 1:], param.lower[n - 1:], param.upper[n - 1:])
    if at_bound:
        notes.append("estimate on search-space boundary")
    return FitResult(
        kind=f"dist-{n}",
        params=p,
        objective=objective_dist(trace, p, inj, tail_fraction),
        rmse=rmse(trace.samples, values),
        n_starts=len(start_list),
        converged=bool(sol.status > 0),
        model=model,
        seed=int(seed),
        start_index=index,
        at_bound=at_bound,
        warnings=tuple(notes),
    )


def fit_acc(trace, space=None, starts=DEFAULT_SCALAR_STARTS, seed=0, threads=None):
    """Fit ``1 - a exp(-b t)`` to an accumulation-phase trace.

    Sample ``i`` is taken at ``t = i * dt`` regardless of the trace's
    absolute start time. Start 0 is a log-linear estimate from the data.
    """
    if not np.all(np.isfinite(trace.samples)):
        raise DomainError("trace contains non-finite samples")
    param = _Accumulation(space or acc_space())
    t = trace.dt * np.arange(len(trace))
    y = trace.samples
    notes = []

    fixed = []
    gap = 1.0 - y
    ok = gap > 1e-12
    if ok.sum() >= 2:
        slope, icept = np.polyfit(t[ok], np.log(gap[ok]), 1)
        if slope < 0:
            fixed.append(np.clip([math.exp(icept), math.log(-slope)], param.lower, param.upper))
    if len(y) >= 2 and y[-1] < y[0]:
        notes.append("trace is decreasing")
    n_random = max(0, int(starts) - len(fixed))

    def residual(theta):
        return y - (1.0 - theta[0] * np.exp(-math.exp(theta[1]) * t))

    (obj, index, sol), _ = _multistart(residual, param, _draw_starts(param, n_random, seed, fixed), threads)
    p = param.params(sol.x)
    model = model_acc(p, trace.dt, len(trace))
    model = IntensityTrace(dt=trace.dt, samples=model.samples, kind="acc", t0=trace.t0, metadata=dict(trace.metadata))
    at_bound = _pinned(sol.x, param.lower, param.upper)
    if at_bound:
        notes.append("estimate on search-space boundary")
    return FitResult(
        kind="acc",
        params=p,
        objective=objective_acc(trace, p),
        rmse=rmse(trace.samples, model.samples),
        n_starts=len(fixed) + n_random,
        converged=bool(sol.status > 0 and "trace is decreasing" not in notes),
        model=model,
        seed=int(seed),
        start_index=index,
        at_bound=at_bound,
        warnings=tuple(notes),
    )


def select_best(results, rule="min"):
    """Pick fits by RMSE.

    ``rule="min"`` returns the single lowest-RMSE result. ``rule=("quantile",
    q)`` returns every result whose RMSE is at or below the threshold
    ``tau(q)``, the ``ceil(q * n)``-th smallest RMSE; results tied with the
    threshold are all included.
    """
    results = list(results)
    if not results:
        raise DomainError("no results to select from")
    if rule == "min":
        return min(enumerate(results), key=lambda ir: (ir[1].rmse, ir[0]))[1]
    if isinstance(rule, tuple) and len(rule) == 2 and rule[0] == "quantile":
        q = float(rule[1])
        if not 0 < q <= 1:
            raise DomainError(f"quantile must lie in (0, 1], got {q}")
        ordered = sorted(r.rmse for r in results)
        k = max(1, math.ceil(q * len(ordered) - 1e-9))
        tau = ordered[k - 1]
        return [r for r in results if r.rmse <= tau]
    raise DomainError(f"unknown selection rule {rule!r}")
