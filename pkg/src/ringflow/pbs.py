"""Particle-based simulation of a looped cylinder with laminar flow.

Particles start uniformly on the disc at ``x = 0`` and take Euler-Maruyama
steps: independent Gaussian increments ``sqrt(2 D dt)`` per axis plus axial
drift ``2 v_eff (1 - (r/r0)^2) dt`` evaluated at the pre-step radius. The
lateral wall reflects specularly in the radial coordinate and the axial
coordinate wraps modulo the cylinder length, closing the loop.

Random streams
--------------
Realization ``j`` draws from ``numpy.random.Philox`` keyed by
``numpy.random.SeedSequence(master_seed, spawn_key=(j,))``. Streams are
independent of scheduling, so results do not depend on the thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import CapacityError, ConfigError, DomainError
from .signal import IntensityTrace

__all__ = [
    "PbsConfig",
    "PbsResult",
    "run_pbs",
    "reflect_lateral",
    "observe_bin",
    "realization_rng",
    "MAX_PARTICLE_STEPS",
    "RNG_NAME",
]

MAX_PARTICLE_STEPS = 10**11
RNG_NAME = "numpy.random.Philox(SeedSequence(master_seed, spawn_key=(j,)))"


@dataclass(frozen=True)
class PbsConfig:
    """Geometry, physics and sampling of one simulation campaign.

    ``bin_width`` defaults to ``l_eff / 100`` and must tile the loop evenly.
    ``sample_interval`` (default ``dt``) must be a whole number of steps.
    """

    l_eff: float
    r0: float
    d_molecular: float
    v_eff: float
    n_particles: int
    dt: float
    t_end: float
    n_realizations: int = 1
    master_seed: int = 0
    bin_width: float | None = None
    sample_interval: float | None = None

    def __post_init__(self):
        for name in ("l_eff", "r0", "d_molecular", "dt", "t_end"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be positive, got {value!r}")
            object.__setattr__(self, name, value)
        v = float(self.v_eff)
        if not (math.isfinite(v) and v >= 0):
            raise ConfigError(f"v_eff must be >= 0, got {self.v_eff!r}")
        object.__setattr__(self, "v_eff", v)
        if int(self.n_particles) < 1 or int(self.n_particles) != self.n_particles:
            raise ConfigError(f"n_particles must be a positive integer, got {self.n_particles!r}")
        if int(self.n_realizations) < 1 or int(self.n_realizations) != self.n_realizations:
            raise ConfigError(f"n_realizations must be a positive integer, got {self.n_realizations!r}")
        object.__setattr__(self, "n_particles", int(self.n_particles))
        object.__setattr__(self, "n_realizations", int(self.n_realizations))
        seed = int(self.master_seed)
        if not 0 <= seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master_seed", seed)

        width = self.l_eff / 100.0 if self.bin_width is None else float(self.bin_width)
        if not (math.isfinite(width) and 0 < width <= self.l_eff):
            raise ConfigError(f"bin_width must lie in (0, l_eff], got {width!r}")
        n_bins = round(self.l_eff / width)
        if abs(n_bins * width - self.l_eff) > 1e-9 * self.l_eff:
            raise ConfigError("bin_width must divide l_eff into a whole number of bins")
        object.__setattr__(self, "bin_width", self.l_eff / n_bins)

        if v > 0 and not self.dt < width / (2.0 * v):
            raise ConfigError(
                f"dt={self.dt} lets a particle skip a bin; need dt < bin_width/(2 v_eff)"
                f" = {width / (2.0 * v)}"
            )
        # a 6-sigma diffusive step must stay well inside the tube radius so a
        # single reflection per step suffices
        if 6.0 * math.sqrt(2.0 * self.d_molecular * self.dt) >= self.r0:
            raise ConfigError("dt too large: diffusive step is comparable to r0")

        interval = self.dt if self.sample_interval is None else float(self.sample_interval)
        every = round(interval / self.dt)
        if every < 1 or abs(every * self.dt - interval) > 1e-9 * interval:
            raise ConfigError("sample_interval must be a positive multiple of dt")
        object.__setattr__(self, "sample_interval", every * self.dt)
        if self.n_steps < every:
            raise ConfigError("t_end is shorter than one sample interval")

    @property
    def n_bins(self):
        return round(self.l_eff / self.bin_width)

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    @property
    def record_every(self):
        return int(round(self.sample_interval / self.dt))

    @property
    def particle_steps(self):
        return self.n_particles * self.n_steps * self.n_realizations


@dataclass(frozen=True, eq=False)
class PbsResult:
    """Binned particle concentrations over time.

    ``counts[i, b]`` is the number of particles in bin ``b`` at ``times[i]``
    summed over all realizations; ``concentration`` is that count divided by
    ``n_realizations * n_particles * bin_width`` (1/m).
    """

    times: np.ndarray
    counts: np.ndarray
    concentration: np.ndarray
    n_realizations: int
    master_seed: int
    n_particles: int
    bin_width: float
    l_eff: float
    sample_interval: float

    @property
    def n_bins(self):
        return self.counts.shape[1]

    def bin_index(self, x):
        if not 0 <= x <= self.l_eff:
            raise DomainError(f"x must lie in [0, l_eff={self.l_eff}], got {x}")
        # round first so positions on a bin edge are not lost to x / w rounding
        idx = int(math.floor(round(x / self.bin_width, 9)))
        return idx % self.n_bins

    def bin_center(self, x):
        return (self.bin_index(x) + 0.5) * self.bin_width


def realization_rng(master_seed, j):
    """Generator for realization ``j`` of a campaign."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(int(j),))
    return np.random.Generator(np.random.Philox(seq))


def reflect_lateral(position, r0):
    """Specular reflection of points outside the tube radius.

    ``position`` holds ``(x, y, z)`` with ``x`` axial; an array of shape
    ``(..., 3)`` is accepted. Points with radial distance ``rho > r0`` are
    moved to ``2 r0 - rho`` at the same azimuth and axial coordinate.
    """
    p = np.array(position, dtype=float)
    rho = np.hypot(p[..., 1], p[..., 2])
    outside = rho > r0
    factor = np.where(outside, (2.0 * r0 - rho) / np.where(outside, rho, 1.0), 1.0)
    p[..., 1] *= factor
    p[..., 2] *= factor
    return p


@numba.njit(nogil=True, cache=True)
def _simulate(rng, n, n_steps, record_every, dt, d_mol, v_eff, l_eff, r0, n_bins, width):
    x = np.zeros(n)
    y = np.empty(n)
    z = np.empty(n)
    for i in range(n):
        r = r0 * np.sqrt(rng.random())
        phi = 2.0 * np.pi * rng.random()
        y[i] = r * np.cos(phi)
        z[i] = r * np.sin(phi)

    counts = np.zeros((n_steps // record_every, n_bins), np.int64)
    sigma = np.sqrt(2.0 * d_mol * dt)
    inv_r02 = 1.0 / (r0 * r0)
    for k in range(n_steps):
        for i in range(n):
            yi = y[i]
            zi = z[i]
            drift = 2.0 * v_eff * (1.0 - (yi * yi + zi * zi) * inv_r02) * dt
            xi = x[i] + drift + sigma * rng.standard_normal()
            yi += sigma * rng.standard_normal()
            zi += sigma * rng.standard_normal()
            rho = np.sqrt(yi * yi + zi * zi)
            if rho > r0:
                f = (2.0 * r0 - rho) / rho
                yi *= f
                zi *= f
            xi = xi % l_eff
            if xi >= l_eff:
                xi -= l_eff
            x[i] = xi
            y[i] = yi
            z[i] = zi
        if (k + 1) % record_every == 0:
            row = (k + 1) // record_every - 1
            for i in range(n):
                b = int(x[i] / width)
                if b >= n_bins:
                    b = n_bins - 1
                counts[row, b] += 1
    return counts


def _run_one(cfg, j):
    return _simulate(
        realization_rng(cfg.master_seed, j),
        cfg.n_particles,
        cfg.n_steps,
        cfg.record_every,
        cfg.dt,
        cfg.d_molecular,
        cfg.v_eff,
        cfg.l_eff,
        cfg.r0,
        cfg.n_bins,
        cfg.bin_width,
    )


def run_pbs(cfg, threads=None):
    """Run all realizations of ``cfg`` and pool their bin counts.

    Parameters
    ----------
    cfg : PbsConfig
    threads : int, optional
        Worker threads; defaults to the number of available cores. The
        result is bit-identical for any thread count.

    Returns
    -------
    PbsResult
    """
    if not isinstance(cfg, PbsConfig):
        raise ConfigError("expected a PbsConfig")
    if cfg.particle_steps > MAX_PARTICLE_STEPS:
        raise CapacityError(
            f"{cfg.particle_steps:.3g} particle-steps exceeds the budget of "
            f"{MAX_PARTICLE_STEPS:.0e}"
        )
    threads = threads or os.cpu_count() or 1
    idx = range(cfg.n_realizations)
    if threads == 1 or cfg.n_realizations == 1:
        per_run = [_run_one(cfg, j) for j in idx]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_run = list(pool.map(lambda j: _run_one(cfg, j), idx))

    counts = np.zeros_like(per_run[0])
    for c in per_run:
        counts += c
    n_total = cfg.n_realizations * cfg.n_particles
    times = cfg.sample_interval * np.arange(1, counts.shape[0] + 1)
    return PbsResult(
        times=times,
        counts=counts,
        concentration=counts / (n_total * cfg.bin_width),
        n_realizations=cfg.n_realizations,
        master_seed=cfg.master_seed,
        n_particles=cfg.n_particles,
        bin_width=cfg.bin_width,
        l_eff=cfg.l_eff,
        sample_interval=cfg.sample_interval,
    )


def observe_bin(result, x, normalization="none"):
    """Concentration trace of the bin containing ``x``.

    ``normalization="steady-state"`` multiplies by ``l_eff`` so the uniform
    steady state reads 1.
    """
    b = result.bin_index(x)
    values = result.concentration[:, b]
    if normalization == "steady-state":
        values = values * result.l_eff
    elif normalization != "none":
        raise DomainError(f"unknown normalization {normalization!r}")
    if values.size < 2:
        raise DomainError("simulation produced fewer than 2 samples")
    return IntensityTrace(
        dt=result.sample_interval,
        samples=values,
        kind="raw",
        t0=float(result.times[0]),
        metadata={
            "source": "pbs",
            "x": repr(float(x)),
            "bin_center": repr(result.bin_center(x)),
            "bin_width": repr(result.bin_width),
            "normalization": normalization,
            "seed": str(result.master_seed),
            "realizations": str(result.n_realizations),
            "particles": str(result.n_particles),
        },
    )
