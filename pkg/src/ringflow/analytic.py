"""Closed-form advection-diffusion solutions on the line and on a ring.

The ring channel is a closed loop of circumference ``l_eff`` in which an
impulse released at ``x = 0, t = 0`` drifts with ``v_eff`` and spreads with
``d_eff``. On the infinite line this gives a normal density; on the ring the
same density wrapped onto the circle (a wrapped normal distribution).

All quantities are SI: metres, seconds, m^2/s, m/s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "ChannelParams",
    "DispersionInputs",
    "normal_concentration",
    "wrapped_concentration",
    "peak_times",
    "dispersion_coefficient",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-12

# Above this wrapped standard deviation (radians) the image sum is replaced
# by its Fourier dual, which needs only a handful of terms there.
_FOURIER_SWITCH = 2.0 * math.pi


@dataclass(frozen=True)
class ChannelParams:
    """Physical parameters of one ring channel.

    Parameters
    ----------
    d_eff : float
        Effective diffusion coefficient (m^2/s).
    v_eff : float
        Effective flow velocity (m/s). A negative value is folded onto the
        canonical orientation: ``v_eff -> -v_eff`` and
        ``d_rx -> l_eff - d_rx``.
    l_eff : float
        Loop circumference (m).
    d_rx : float
        Arc distance of the receiver downstream of the release point (m).
    """

    d_eff: float
    v_eff: float
    l_eff: float
    d_rx: float

    def __post_init__(self):
        for name in ("d_eff", "v_eff", "l_eff", "d_rx"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.d_eff <= 0:
            raise DomainError(f"d_eff must be positive, got {self.d_eff}")
        if self.l_eff <= 0:
            raise DomainError(f"l_eff must be positive, got {self.l_eff}")
        if not 0 <= self.d_rx < self.l_eff:
            raise DomainError(
                f"d_rx must lie in [0, l_eff={self.l_eff}), got {self.d_rx}"
            )
        if self.v_eff < 0:
            object.__setattr__(self, "v_eff", -self.v_eff)
            if self.d_rx > 0:
                object.__setattr__(self, "d_rx", self.l_eff - self.d_rx)

    @property
    def scale(self):
        """Angle per unit length on the ring, ``2*pi / l_eff``."""
        return 2.0 * math.pi / self.l_eff

    def variance(self, t):
        """Spatial variance ``2 * d_eff * t`` of the released pulse."""
        return 2.0 * self.d_eff * np.asarray(t, dtype=float)

    def mean(self, t):
        """Centre of mass ``v_eff * t`` of the pulse on the unwrapped line."""
        return self.v_eff * np.asarray(t, dtype=float)


@dataclass(frozen=True)
class DispersionInputs:
    """Molecular diffusivity, vessel radius and mean flow velocity."""

    d_molecular: float
    r0: float
    v_eff: float

    def __post_init__(self):
        for name in ("d_molecular", "r0", "v_eff"):
            value = float(getattr(self, name))
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"{name} must be positive and finite, got {value!r}")
            object.__setattr__(self, name, value)


def dispersion_coefficient(d):
    """Effective axial diffusion coefficient under laminar shear flow.

    ``D_eff = D * (1 + (r0 * v / D)**2 / 48)``.
    """
    if not isinstance(d, DispersionInputs):
        raise TypeError("expected DispersionInputs")
    peclet = d.r0 * d.v_eff / d.d_molecular
    return d.d_molecular * (1.0 + peclet * peclet / 48.0)


def _check_times(t):
    if not np.all(t > 0):
        raise DomainError("t must be strictly positive (release is at t = 0)")


def _maybe_scalar(out, *inputs):
    if all(np.ndim(a) == 0 for a in inputs):
        return float(out)
    return out


def normal_concentration(q, x, t):
    """Free-space (infinite tube) concentration per unit length.

    Normal density in ``x`` with mean ``v_eff * t`` and variance
    ``2 * d_eff * t``. Broadcasts over ``x`` and ``t``.
    """
    xa = np.asarray(x, dtype=float)
    ta = np.asarray(t, dtype=float)
    _check_times(ta)
    var = 2.0 * q.d_eff * ta
    out = np.exp(-((xa - q.v_eff * ta) ** 2) / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)
    return _maybe_scalar(out, x, t)


def _image_sum(delta, sbar, tol):
    # delta in [-pi, pi), sbar > 0; returns sum_k exp(-(delta + 2 pi k)^2 / (2 sbar^2))
    two_pi = 2.0 * math.pi
    k0 = int(math.ceil(4.0 * float(sbar.max()) / two_pi)) + 2
    ks = np.arange(-k0, k0 + 1, dtype=float)
    inv = 1.0 / (2.0 * sbar * sbar)
    total = np.exp(-((delta[:, None] + two_pi * ks[None, :]) ** 2) * inv[:, None]).sum(axis=1)
    edge = np.exp(-((delta + two_pi * k0) ** 2) * inv) + np.exp(-((delta - two_pi * k0) ** 2) * inv)
    k = k0
    # strict comparison: an underflowed (all-zero) sum is already converged
    while np.any(edge > tol * total):
        k += 1
        edge = np.exp(-((delta + two_pi * k) ** 2) * inv) + np.exp(-((delta - two_pi * k) ** 2) * inv)
        total = total + edge
    return total


def _fourier_sum(delta, sbar, tol):
    # 1 + 2 sum_m exp(-m^2 sbar^2 / 2) cos(m delta); same function as the image sum
    # (up to the factor sqrt(2 pi) / sbar) by Poisson summation.
    half_var = 0.5 * sbar * sbar
    total = np.ones_like(delta)
    m = 0
    while True:
        m += 1
        damp = np.exp(-m * m * half_var)
        total = total + 2.0 * damp * np.cos(m * delta)
        if np.all(2.0 * damp < tol * total):
            return total


def wrapped_concentration(q, x, t, tol=DEFAULT_TOL):
    """Ring-channel concentration per unit length (wrapped normal density).

    Parameters
    ----------
    q : ChannelParams
    x : float or array_like
        Position along the loop, ``0 <= x <= l_eff``.
    t : float or array_like
        Time since release, ``t > 0``.
    tol : float
        Relative truncation tolerance of the infinite sum.

    Returns
    -------
    float or ndarray
        ``p_wn(x, t)`` in 1/m, broadcast over ``x`` and ``t``.

    Notes
    -----
    For narrow pulses the image sum over k is truncated adaptively; once the
    wrapped standard deviation exceeds ``2*pi`` the equivalent Fourier series
    ``(1/L) * (1 + 2 sum exp(-m^2 sbar^2 / 2) cos(m * delta))`` is summed
    instead. ``x = l_eff`` is mapped to ``x = 0`` before summation so both ends
    of the loop give identical values.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    xa, ta = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    _check_times(ta)
    L = q.l_eff
    if np.any((xa < 0) | (xa > L)) or np.any(np.isnan(xa)):
        raise DomainError(f"x must lie in [0, l_eff={L}]")

    shape = xa.shape
    xf = xa.ravel()
    tf = ta.ravel()
    xf = np.where(xf >= L, 0.0, xf)
    # offset from the pulse centre, reduced to [-L/2, L/2)
    offset = np.mod(xf - q.v_eff * tf, L)
    offset = np.where(offset >= 0.5 * L, offset - L, offset)
    delta = q.scale * offset
    sbar = q.scale * np.sqrt(2.0 * q.d_eff * tf)

    out = np.empty_like(delta)
    narrow = sbar <= _FOURIER_SWITCH
    if np.any(narrow):
        s = sbar[narrow]
        out[narrow] = math.sqrt(2.0 * math.pi) / (L * s) * _image_sum(delta[narrow], s, tol)
    if not np.all(narrow):
        wide = ~narrow
        out[wide] = _fourier_sum(delta[wide], sbar[wide], tol) / L
    np.maximum(out, 0.0, out=out)
    return _maybe_scalar(out.reshape(shape), x, t)


def peak_times(q, k_max):
    """Arrival times of successive concentration peaks at the receiver.

    The k-th peak is the time maximum of the free-space density at distance
    ``d_rx + k * l_eff``, i.e. after ``k`` full circulations.

    Returns
    -------
    list of float
        Peak times for ``k = 0 .. k_max``.
    """
    if q.v_eff == 0:
        raise DomainError("peak times are undefined for v_eff = 0")
    k_max = int(k_max)
    if k_max < 0:
        raise DomainError(f"k_max must be >= 0, got {k_max}")
    D, v = q.d_eff, q.v_eff
    out = []
    for k in range(k_max + 1):
        dist = q.d_rx + k * q.l_eff
        u = (v * dist / D) ** 2
        # sqrt(1 + u) - 1 without cancellation for small u
        out.append((D / (v * v)) * u / (1.0 + math.sqrt(1.0 + u)))
    return out
