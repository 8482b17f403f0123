import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ringflow.analytic import (
    ChannelParams,
    DispersionInputs,
    dispersion_coefficient,
    normal_concentration,
    peak_times,
    wrapped_concentration,
)
from ringflow.errors import DomainError

L = 1e-3
V = 50e-6
D_SLOW = 1.25e-9 * (1 + 16 / 48)


def channel(d_eff=D_SLOW, v_eff=V, l_eff=L, d_rx=0.39e-3):
    return ChannelParams(d_eff, v_eff, l_eff, d_rx)


def gauss(x, mean, var):
    return math.exp(-((x - mean) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)


def brute_images(q, x, t, k_range):
    # direct image sum on the unwrapped line
    return sum(gauss(x + k * q.l_eff, q.v_eff * t, 2 * q.d_eff * t) for k in k_range)


# -- dispersion ----------------------------------------------------------------


def test_dispersion_examples():
    assert dispersion_coefficient(DispersionInputs(1.25e-9, 100e-6, 50e-6)) == pytest.approx(
        1.25e-9 * (1 + 16 / 48), rel=1e-15
    )
    assert dispersion_coefficient(DispersionInputs(5e-9, 100e-6, 50e-6)) == pytest.approx(5.104166666e-9, rel=1e-9)
    assert dispersion_coefficient(DispersionInputs(1e-9, 1e-9, 1e-9)) == pytest.approx(1e-9, rel=1e-15)


@pytest.mark.parametrize("bad", [(0, 1e-4, 1e-5), (1e-9, -1, 1e-5), (1e-9, 1e-4, 0), (float("nan"), 1, 1)])
def test_dispersion_rejects_nonpositive(bad):
    with pytest.raises(DomainError):
        DispersionInputs(*bad)


# -- channel parameters ----------------------------------------------------------


@pytest.mark.parametrize("kw", [{"d_eff": 0}, {"l_eff": -1}, {"d_rx": L}, {"d_rx": -1e-6}, {"v_eff": math.inf}])
def test_channel_invariants(kw):
    with pytest.raises(DomainError):
        channel(**kw)


def test_negative_velocity_is_mirrored():
    q = channel(v_eff=-V, d_rx=0.3e-3)
    assert q.v_eff == V
    assert q.d_rx == pytest.approx(0.7e-3, rel=1e-15)
    assert channel(v_eff=-V, d_rx=0.0).d_rx == 0.0


# -- free space ------------------------------------------------------------------


def test_normal_peak_value():
    q = channel()
    t = 3.0
    assert normal_concentration(q, V * t, t) == pytest.approx(1 / math.sqrt(4 * math.pi * q.d_eff * t), rel=1e-14)


def test_normal_matches_direct_formula_and_quadrature():
    q = channel()
    x, t = 0.39e-3, 7.16
    expected = gauss(x, V * t, 2 * q.d_eff * t)
    assert normal_concentration(q, x, t) == pytest.approx(expected, rel=1e-12)
    mean, sd = V * t, math.sqrt(2 * q.d_eff * t)
    total, _ = integrate.quad(lambda s: normal_concentration(q, s, t), mean - 40 * sd, mean + 40 * sd,
                              points=[mean], epsabs=0, epsrel=1e-13, limit=200)
    assert total == pytest.approx(1.0, abs=1e-10)


def test_normal_symmetry():
    q = channel()
    t = 5.0
    mu = V * t
    assert normal_concentration(q, mu + 1e-4, t) == pytest.approx(normal_concentration(q, mu - 1e-4, t), rel=1e-14)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_normal_rejects_nonpositive_time(t):
    with pytest.raises(DomainError):
        normal_concentration(channel(), 0.0, t)


def test_normal_broadcasts():
    out = normal_concentration(channel(), np.linspace(0, 1e-3, 5)[:, None], np.array([1.0, 2.0]))
    assert out.shape == (5, 2)


# -- ring ------------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.5, 3.0, 7.16, 20.0])
@pytest.mark.parametrize("x", [0.0, 0.1e-3, 0.39e-3, 0.84e-3, 0.999e-3])
def test_wrapped_matches_brute_image_sum(x, t):
    q = channel()
    expected = brute_images(q, x, t, range(-60, 61))
    assert wrapped_concentration(q, x, t) == pytest.approx(expected, rel=1e-11, abs=1e-300)


def test_wrapped_fourier_branch_matches_images():
    # wide pulses are summed with the Fourier series; check against images
    q = channel(d_eff=5e-8)
    t = 200.0
    sbar = q.scale * math.sqrt(2 * q.d_eff * t)
    assert sbar > 2 * math.pi
    for x in (0.0, 0.2e-3, 0.7e-3):
        expected = brute_images(q, x, t, range(-200, 201))
        assert wrapped_concentration(q, x, t) == pytest.approx(expected, rel=1e-11)


def test_wrapped_small_sigma_equals_three_images():
    q = channel()
    t = 0.6
    assert q.scale * math.sqrt(2 * q.d_eff * t) <= 0.5
    for x in np.linspace(0, L, 11):
        three = sum(normal_concentration(q, (x % L) + k * L, t) for k in (-1, 0, 1))
        assert wrapped_concentration(q, x, t) == pytest.approx(three, rel=1e-12, abs=1e-300)


def test_wrapped_k0_term_is_free_space():
    # away from the wrap, the k = 0 image alone reproduces the line solution
    q = channel(d_eff=1e-11)
    t = 4.0
    x = V * t + 1e-5
    assert wrapped_concentration(q, x, t) == pytest.approx(normal_concentration(q, x, t), rel=1e-12)


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0, 100.0])
@pytest.mark.parametrize("d_mol", [1.25e-9, 5e-9])
def test_wrapped_integrates_to_one(t, d_mol):
    d_eff = dispersion_coefficient(DispersionInputs(d_mol, 100e-6, V))
    q = channel(d_eff=d_eff)
    centre = (V * t) % L
    total, _ = integrate.quad(lambda x: wrapped_concentration(q, x, t), 0, L,
                              points=[centre], epsabs=1e-13, epsrel=1e-13, limit=400)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_wrapped_steady_state():
    q = channel()
    t = 1e4
    for x in np.linspace(0, L, 7):
        assert wrapped_concentration(q, x, t) == pytest.approx(1 / L, rel=1e-6)


def test_wrapped_periodic_endpoints_identical():
    q = channel()
    t = np.linspace(0.1, 50, 300)
    assert np.array_equal(wrapped_concentration(q, 0.0, t), wrapped_concentration(q, L, t))


@pytest.mark.parametrize("x,t", [(-1e-9, 1.0), (L * 1.0001, 1.0), (0.5e-3, 0.0), (0.5e-3, -2.0)])
def test_wrapped_domain_errors(x, t):
    with pytest.raises(DomainError):
        wrapped_concentration(channel(), x, t)


def test_wrapped_rejects_bad_tolerance():
    with pytest.raises(DomainError):
        wrapped_concentration(channel(), 0.1e-3, 1.0, tol=0.0)


def test_wrapped_scalar_and_array_shapes():
    q = channel()
    assert isinstance(wrapped_concentration(q, 0.1e-3, 1.0), float)
    assert wrapped_concentration(q, np.zeros((2, 3)), 1.0).shape == (2, 3)


@settings(max_examples=150, deadline=None)
@given(
    d_eff=st.floats(1e-12, 1e-5),
    v_eff=st.floats(0, 1e-2),
    l_eff=st.floats(1e-3, 0.2),
    frac=st.floats(0, 1),
    t=st.floats(1e-3, 1e3),
)
def test_wrapped_nonnegative_and_finite(d_eff, v_eff, l_eff, frac, t):
    q = ChannelParams(d_eff, v_eff, l_eff, 0.0)
    val = wrapped_concentration(q, frac * l_eff, t)
    assert math.isfinite(val) and val >= 0


@settings(max_examples=60, deadline=None)
@given(d_eff=st.floats(1e-10, 1e-7), t=st.floats(0.05, 500), frac=st.floats(0, 1))
def test_wrapped_tolerance_bound(d_eff, t, frac):
    # a loose tolerance may only drop relatively small terms
    q = channel(d_eff=d_eff)
    x = frac * L
    tight = wrapped_concentration(q, x, t, tol=1e-15)
    loose = wrapped_concentration(q, x, t, tol=1e-6)
    assert abs(tight - loose) <= 2e-6 * tight + 1e-300


def test_pde_residual_second_order():
    q = channel()
    x0, t0 = 0.6e-3, 9.0

    def residual(h):
        k = h * h / (2 * q.d_eff) * 0.25  # time step tied to h^2 keeps both errors O(h^2)
        p = lambda x, t: wrapped_concentration(q, x, t)
        dpdt = (p(x0, t0 + k) - p(x0, t0 - k)) / (2 * k)
        dpdx = (p(x0 + h, t0) - p(x0 - h, t0)) / (2 * h)
        d2 = (p(x0 + h, t0) - 2 * p(x0, t0) + p(x0 - h, t0)) / h**2
        return abs(dpdt - q.d_eff * d2 + q.v_eff * dpdx) / abs(dpdt)

    r = [residual(h) for h in (2e-5, 1e-5, 5e-6)]
    assert r[0] < 1e-2
    assert r[1] / r[2] == pytest.approx(4.0, rel=0.15)
    assert r[0] / r[1] == pytest.approx(4.0, rel=0.15)


# -- peak times --------------------------------------------------------------------


def numeric_maxima(q, t_end, dt=1e-3):
    t = dt * np.arange(1, int(round(t_end / dt)) + 1)
    p = wrapped_concentration(q, q.d_rx, t)
    idx = np.nonzero((p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:]))[0] + 1
    return t[idx]


def test_peak_time_fig7_value():
    q = channel()
    t0 = peak_times(q, 0)[0]
    assert t0 == pytest.approx(7.16, abs=0.005)
    maxima = numeric_maxima(q, 12.0)
    assert abs(maxima[0] - t0) <= 1e-3


def test_peak_time_formula():
    q = channel()
    for k, t in enumerate(peak_times(q, 3)):
        s = q.d_rx + k * q.l_eff
        expected = q.d_eff / q.v_eff**2 * (-1 + math.sqrt(1 + (q.v_eff / q.d_eff) ** 2 * s * s))
        assert t == pytest.approx(expected, rel=1e-12)


def test_peak_time_pure_drift_limit():
    q = channel(d_eff=D_SLOW * 1e-6)
    assert peak_times(q, 0)[0] == pytest.approx(q.d_rx / q.v_eff, rel=1e-3)


@settings(max_examples=100, deadline=None)
@given(
    d_eff=st.floats(1e-12, 1e-4),
    v_eff=st.floats(1e-7, 1e-1),
    l_eff=st.floats(1e-4, 1.0),
    frac=st.floats(0, 0.999),
)
def test_peak_times_increasing(d_eff, v_eff, l_eff, frac):
    ts = peak_times(ChannelParams(d_eff, v_eff, l_eff, frac * l_eff), 5)
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_peak_times_errors():
    with pytest.raises(DomainError):
        peak_times(channel(v_eff=0.0), 2)
    with pytest.raises(DomainError):
        peak_times(channel(), -1)
