"""Forward signal models and trace preprocessing.

An observed intensity trace is split into a distribution part (transient
plus steady state) and an accumulation part. The distribution part is
modelled as the injection rate convolved in time with a weighted sum of
ring-channel responses; the accumulation part as a saturating exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .analytic import ChannelParams, wrapped_concentration
from .errors import DomainError, GridMismatchError, NormalizationError

__all__ = [
    "InjectionParams",
    "MixtureParams",
    "AccumulationParams",
    "IntensityTrace",
    "TRACE_KINDS",
    "time_grid",
    "injection_profile",
    "model_basic",
    "model_dist",
    "model_acc",
    "derivative",
    "cumulative",
    "normalize_steady",
    "subtract_reference",
    "split_phases",
    "DEFAULT_TAIL_FRACTION",
]

DEFAULT_TAIL_FRACTION = 0.2
TRACE_KINDS = ("raw", "dist", "acc")


@dataclass(frozen=True)
class InjectionParams:
    """Raised-cosine injection: duration ``t_w`` starting at ``t_0`` (s)."""

    t_w: float
    t_0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "t_w", float(self.t_w))
        object.__setattr__(self, "t_0", float(self.t_0))
        if not (math.isfinite(self.t_w) and self.t_w > 0):
            raise DomainError(f"t_w must be positive, got {self.t_w}")
        if not (math.isfinite(self.t_0) and self.t_0 >= 0):
            raise DomainError(f"t_0 must be >= 0, got {self.t_0}")


@dataclass(frozen=True)
class MixtureParams:
    """Weighted superposition of ring channels.

    ``components`` is a sequence of ``(weight, ChannelParams)`` pairs whose
    weights lie in [0, 1] and sum to one.
    """

    components: tuple

    def __post_init__(self):
        comps = tuple((float(a), q) for a, q in self.components)
        if not comps:
            raise DomainError("a mixture needs at least one component")
        for a, q in comps:
            if not isinstance(q, ChannelParams):
                raise DomainError("mixture components must be ChannelParams")
            if not 0.0 <= a <= 1.0:
                raise DomainError(f"mixture weight {a} outside [0, 1]")
        total = sum(a for a, _ in comps)
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"mixture weights sum to {total}, expected 1")
        object.__setattr__(self, "components", comps)

    @classmethod
    def single(cls, q):
        return cls(((1.0, q),))

    @property
    def n(self):
        return len(self.components)

    @property
    def weights(self):
        return tuple(a for a, _ in self.components)

    @property
    def channels(self):
        return tuple(q for _, q in self.components)


@dataclass(frozen=True)
class AccumulationParams:
    """Saturating accumulation ``1 - a * exp(-b * t)``."""

    a: float
    b: float

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if not 0.0 < self.a <= 1.0:
            raise DomainError(f"a must lie in (0, 1], got {self.a}")
        if not (math.isfinite(self.b) and self.b > 0):
            raise DomainError(f"b must be positive, got {self.b}")


@dataclass(frozen=True, eq=False)
class IntensityTrace:
    """Uniformly sampled time series.

    Sample ``i`` is taken at ``t0 + i * dt``. ``metadata`` holds the
    measurement context (``egg``, ``roi``, ``ded``, ``d_inj``, ...) and any
    further keys, which are carried through unchanged.
    """

    dt: float
    samples: np.ndarray
    kind: str = "raw"
    t0: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dt = float(self.dt)
        if not (math.isfinite(dt) and dt > 0):
            raise DomainError(f"dt must be positive, got {self.dt}")
        samples = np.array(self.samples, dtype=float)
        if samples.ndim != 1 or samples.size < 2:
            raise DomainError("a trace needs at least 2 samples in one dimension")
        if self.kind not in TRACE_KINDS:
            raise DomainError(f"kind must be one of {TRACE_KINDS}, got {self.kind!r}")
        samples.setflags(write=False)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self):
        return self.samples.size

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def duration(self):
        return self.dt * (self.samples.size - 1)

    def with_samples(self, samples, **changes):
        return replace(self, samples=samples, **changes)

    def same_grid(self, other):
        return (
            len(self) == len(other)
            and self.dt == other.dt
            and self.t0 == other.t0
        )

    def __eq__(self, other):
        if not isinstance(other, IntensityTrace):
            return NotImplemented
        return (
            self.same_grid(other)
            and self.kind == other.kind
            and self.metadata == other.metadata
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def time_grid(dt, n_samples):
    """Times ``i * dt`` for ``i = 0 .. n_samples - 1``."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    return dt * np.arange(int(n_samples))


def injection_profile(p, t):
    """Raised-cosine injection rate (1/s); integrates to one."""
    ta = np.asarray(t, dtype=float)
    s = ta - p.t_0
    inside = (s > 0) & (s < p.t_w)
    out = np.where(inside, (1.0 - np.cos(2.0 * np.pi * s / p.t_w)) / p.t_w, 0.0)
    if np.ndim(t) == 0:
        return float(out)
    return out


def _kernel(q, dt, n):
    # channel response sampled at i*dt; the t = 0 delta is replaced by t = dt/2
    t = dt * np.arange(n, dtype=float)
    t[0] = 0.5 * dt
    return wrapped_concentration(q, q.d_rx, t)


def _convolve(rate, kernel, dt):
    return np.convolve(rate, kernel)[: rate.size] * dt


def _tail_mean(samples, tail_fraction):
    n_tail = max(1, int(math.ceil(tail_fraction * samples.size)))
    return float(np.mean(samples[-n_tail:]))


def mixture_response(p, inj, dt, n_samples):
    """Un-normalized mixture output: injection rate convolved with the
    weighted channel responses (rectangle rule on the shared grid)."""
    n = int(n_samples)
    if n < 2:
        raise DomainError("need at least 2 samples")
    kernel = np.zeros(n)
    for a, q in p.components:
        kernel = kernel + a * _kernel(q, dt, n)
    rate = injection_profile(inj, time_grid(dt, n))
    return _convolve(rate, kernel, dt)


def model_dist(p, inj, dt, n_samples, tail_fraction=DEFAULT_TAIL_FRACTION):
    """Distribution-phase intensity for a mixture of ring channels.

    Parameters
    ----------
    p : MixtureParams
    inj : InjectionParams
    dt : float
        Sampling interval (s); the grid is ``i * dt``, ``i = 0 .. n_samples-1``.
    n_samples : int
    tail_fraction : float
        Fraction of final samples whose mean is scaled to one.

    Returns
    -------
    IntensityTrace
        ``kind="dist"``, normalized to unit steady-state level.

    Raises
    ------
    NormalizationError
        If the modelled signal has not reached the receiver by the tail
        window (tail mean is zero).
    """
    if isinstance(p, ChannelParams):
        p = MixtureParams.single(p)
    raw = mixture_response(p, inj, dt, n_samples)
    trace = IntensityTrace(dt=dt, samples=raw, kind="dist")
    return normalize_steady(trace, tail_fraction)


def model_basic(q, inj, dt, n_samples, tail_fraction=DEFAULT_TAIL_FRACTION):
    """Single-channel model; identical to a one-component mixture."""
    return model_dist(MixtureParams.single(q), inj, dt, n_samples, tail_fraction)


def model_acc(p, dt, n_samples):
    """Accumulation-phase intensity ``1 - a * exp(-b * t)`` on ``i * dt``."""
    t = time_grid(dt, n_samples)
    return IntensityTrace(dt=dt, samples=1.0 - p.a * np.exp(-p.b * t), kind="acc")


def derivative(trace):
    """Backward difference with zero pre-history, same length as the input."""
    x = trace.samples
    d = np.empty_like(x)
    d[0] = x[0] / trace.dt
    d[1:] = np.diff(x) / trace.dt
    return trace.with_samples(d)


def cumulative(trace):
    """Running sum times ``dt``; the exact discrete inverse of ``derivative``."""
    return trace.with_samples(np.cumsum(trace.samples) * trace.dt)


def normalize_steady(trace, tail_fraction=DEFAULT_TAIL_FRACTION):
    """Divide a trace by the mean of its final ``tail_fraction`` of samples."""
    if not 0.0 < tail_fraction <= 0.5:
        raise DomainError(f"tail_fraction must lie in (0, 0.5], got {tail_fraction}")
    level = _tail_mean(trace.samples, tail_fraction)
    if not (math.isfinite(level) and level > 0):
        raise NormalizationError(f"steady-state tail mean is {level}, must be positive")
    return trace.with_samples(trace.samples / level)


def subtract_reference(trace, reference):
    """Pointwise ``trace - reference``, clamped at zero."""
    if not trace.same_grid(reference):
        raise GridMismatchError("trace and reference are sampled on different grids")
    return trace.with_samples(np.maximum(trace.samples - reference.samples, 0.0))


def split_phases(trace, t_acc):
    """Split at ``t_acc`` into (distribution, accumulation) traces.

    Samples with ``t <= t_acc`` go to the distribution part, the rest to the
    accumulation part. Each part keeps its absolute start time in ``t0``.
    """
    times = trace.times
    if not times[0] < t_acc < times[-1]:
        raise DomainError(f"t_acc={t_acc} must lie strictly inside ({times[0]}, {times[-1]})")
    # index of the first sample strictly after t_acc, with a relative guard
    # against rounding in t0 + i*dt
    split = int(np.searchsorted(times, t_acc * (1 + 1e-12) + 1e-15, side="right"))
    if split < 1 or split >= times.size:
        raise DomainError(f"t_acc={t_acc} leaves an empty phase")
    head = trace.samples[:split]
    tail = trace.samples[split:]
    # a phase may hold a single sample, below the 2-sample trace minimum
    dist = _phase(trace, head, "dist", trace.t0)
    acc = _phase(trace, tail, "acc", trace.t0 + split * trace.dt)
    return dist, acc


def _phase(trace, samples, kind, t0):
    out = object.__new__(IntensityTrace)
    arr = np.array(samples, dtype=float)
    arr.setflags(write=False)
    object.__setattr__(out, "dt", trace.dt)
    object.__setattr__(out, "samples", arr)
    object.__setattr__(out, "kind", kind)
    object.__setattr__(out, "t0", t0)
    object.__setattr__(out, "metadata", dict(trace.metadata))
    return out
