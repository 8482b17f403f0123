import math
from types import SimpleNamespace

import numpy as np
import pytest

from ringflow.analytic import ChannelParams
from ringflow.errors import ConfigError, DomainError, GridMismatchError
from ringflow.fitting import (
    SearchSpace,
    acc_space,
    dist_model_values,
    dist_space,
    fit_acc,
    fit_dist,
    fit_injection,
    nested_start,
    objective_acc,
    objective_dist,
    objective_injection,
    rmse,
    select_best,
)
from ringflow.signal import (
    AccumulationParams,
    InjectionParams,
    IntensityTrace,
    MixtureParams,
    derivative,
    injection_profile,
    model_acc,
    model_dist,
)

DT = 0.1
N = 601
INJ = InjectionParams(3.0, 1.0)
Q = ChannelParams(5e-6, 3.5e-3, 3.4e-2, 1.7e-2)


def trace(values, dt=DT, kind="raw"):
    return IntensityTrace(dt=dt, samples=np.asarray(values, dtype=float), kind=kind)


@pytest.fixture(scope="module")
def dist_trace():
    clean = model_dist(Q, INJ, DT, N).samples
    noise = 0.01 * np.random.default_rng(4).standard_normal(N)
    return trace(clean + noise, kind="dist")


@pytest.fixture(scope="module")
def fit1(dist_trace):
    return fit_dist(dist_trace, 1, INJ, starts=12, seed=3, threads=1)


# -- rmse ---------------------------------------------------------------------


def test_rmse_hand_cases():
    assert rmse(trace([0.0, 0.0]), trace([1.0, 1.0])) == math.sqrt(2.0)
    x = trace([0.2, 0.5, 0.9, 1.0])
    assert rmse(x, x) == 0.0
    c = 0.25
    shifted = trace(x.samples + c)
    assert rmse(x, shifted) == pytest.approx(c * math.sqrt(4 / 3), rel=1e-15)


def test_rmse_errors():
    with pytest.raises(GridMismatchError):
        rmse(trace([0.0, 1.0]), trace([0.0, 1.0], dt=0.2))
    with pytest.raises(GridMismatchError):
        rmse(np.zeros(3), np.zeros(4))
    with pytest.raises(DomainError):
        rmse(np.zeros(1), np.zeros(1))


# -- selection ---------------------------------------------------------------


def fake(r):
    return SimpleNamespace(rmse=r)


def test_select_best_single_and_min():
    only = fake(0.3)
    assert select_best([only]) is only
    items = [fake(0.3), fake(0.1), fake(0.2), fake(0.1)]
    assert select_best(items) is items[1]


def test_select_best_quantile_exact():
    rng = np.random.default_rng(0)
    values = rng.permutation(np.arange(100)) / 100
    items = [fake(v) for v in values]
    chosen = select_best(items, ("quantile", 0.15))
    assert sorted(r.rmse for r in chosen) == [i / 100 for i in range(15)]


def test_select_best_quantile_ties_included():
    items = [fake(v) for v in (0.1, 0.2, 0.2, 0.2, 0.5)]
    chosen = select_best(items, ("quantile", 0.4))
    assert len(chosen) == 4


def test_select_best_errors():
    with pytest.raises(DomainError):
        select_best([])
    with pytest.raises(DomainError):
        select_best([fake(1)], ("quantile", 0))
    with pytest.raises(DomainError):
        select_best([fake(1)], "median")


# -- search spaces -----------------------------------------------------------


def test_search_space_validation():
    with pytest.raises(ConfigError):
        SearchSpace({"a": (1.0, 1.0)})
    with pytest.raises(ConfigError):
        fit_acc(trace([0.5, 0.6]), SearchSpace({"a": (0.0, 1.0), "b": (1e-6, 1.0)}))
    with pytest.raises(ConfigError):
        fit_dist(trace([0.5, 0.6]), 1, INJ, SearchSpace({"d_eff": (1e-9, 1e-5)}))


# -- injection -------------------------------------------------------------------


def test_fit_injection_noiseless():
    dt = 0.04
    t = dt * np.arange(500)
    tr = trace(injection_profile(InjectionParams(3.0, 1.0), t), dt=dt)
    r = fit_injection(tr, seed=1, threads=1)
    assert abs(r.params.t_w - 3.0) <= 2 * dt
    assert abs(r.params.t_0 - 1.0) <= 2 * dt
    assert r.converged and r.kind == "injection"


def test_fit_injection_all_zero_is_flagged():
    r = fit_injection(trace(np.zeros(100)), seed=0, threads=1)
    assert not r.converged
    assert r.warnings


def test_fit_injection_rejects_nan():
    with pytest.raises(DomainError):
        fit_injection(trace([0.0, math.nan, 1.0]))


# -- accumulation ------------------------------------------------------------------


def test_fit_acc_noiseless():
    tr = trace(model_acc(AccumulationParams(0.6, 0.01), 1.0, 3600).samples, dt=1.0)
    r = fit_acc(tr, seed=0, threads=1)
    assert r.params.a == pytest.approx(0.6, rel=0.01)
    assert r.params.b == pytest.approx(0.01, rel=0.01)


def test_fit_acc_saturated_trace_pins_lower_bound():
    r = fit_acc(trace(np.ones(300), dt=1.0), seed=0, threads=1)
    assert r.params.a == pytest.approx(acc_space()["a"][0], rel=1e-3) or r.params.b <= 1.1e-6
    assert r.at_bound
    assert r.rmse < 1e-2


def test_fit_acc_decreasing_trace_flagged():
    r = fit_acc(trace(np.linspace(0.9, 0.5, 200), dt=1.0), seed=0, threads=1)
    assert not r.converged
    assert "trace is decreasing" in r.warnings


# -- distribution -----------------------------------------------------------------


def test_fit_dist_rejects_bad_n(dist_trace):
    with pytest.raises(DomainError):
        fit_dist(dist_trace, 0, INJ)


def test_fit_dist_result_contract(dist_trace, fit1):
    r = fit1
    assert r.kind == "dist-1"
    assert r.n_starts == 12
    assert r.rmse == pytest.approx(rmse(dist_trace.samples, r.model.samples), abs=1e-12)
    recomputed = objective_dist(dist_trace, r.params, INJ)
    assert recomputed == pytest.approx(r.objective, rel=1e-12)
    space = dist_space()
    for q in r.params.channels:
        for name in ("d_eff", "v_eff", "l_eff"):
            assert space.contains(name, getattr(q, name))
        assert space["d_rx"][0] <= q.d_rx < q.l_eff
    assert r.rmse <= 1.5 * 0.01


def test_fit_dist_deterministic_across_threads(dist_trace, fit1):
    other = fit_dist(dist_trace, 1, INJ, starts=12, seed=3, threads=3)
    assert other.objective == fit1.objective
    assert other.params == fit1.params
    assert np.array_equal(other.model.samples, fit1.model.samples)


def test_more_starts_never_worse(dist_trace, fit1):
    fewer = fit_dist(dist_trace, 1, INJ, starts=4, seed=3, threads=1)
    assert fit1.objective <= fewer.objective


def test_nested_start_embeds_exactly(fit1):
    p2 = nested_start(fit1.params, 2)
    assert p2.weights == (1.0, 0.0)
    a = dist_model_values(fit1.params, INJ, DT, N)
    b = dist_model_values(p2, INJ, DT, N)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


def test_two_components_nest_one(dist_trace, fit1):
    fit2 = fit_dist(dist_trace, 2, INJ, starts=4, seed=5, threads=1, include=[fit1.params])
    assert fit2.objective <= fit1.objective
    assert fit2.params.n == 2


def test_unnormalized_trace_warns(dist_trace):
    scaled = dist_trace.with_samples(dist_trace.samples * 3)
    r = fit_dist(scaled, 1, INJ, starts=2, seed=0, threads=1)
    assert any("steady-state level" in w for w in r.warnings)


def test_constant_trace_does_not_crash():
    tr = trace(np.ones(N), kind="dist")
    r = fit_dist(tr, 1, InjectionParams(0.2, 0.0), starts=8, seed=0, threads=1)
    residual = derivative(tr).samples - derivative(r.model).samples
    # beyond the first sample the derivative residual vanishes
    assert np.max(np.abs(residual[2:])) < 1e-6
    assert math.isfinite(r.rmse)


def test_objectives_match_definitions():
    tr = trace(injection_profile(INJ, DT * np.arange(80)) + 0.01, dt=DT)
    assert objective_injection(tr, INJ) == pytest.approx(80 * 1e-4, rel=1e-12)
    acc = trace(np.full(50, 0.5), dt=1.0)
    p = AccumulationParams(0.5, 0.1)
    expected = float(np.sum((0.5 - (1 - 0.5 * np.exp(-0.1 * np.arange(50)))) ** 2))
    assert objective_acc(acc, p) == pytest.approx(expected, rel=1e-13)


def test_dist_model_values_zero_when_never_arriving():
    slow = MixtureParams.single(ChannelParams(1e-12, 1e-6, 0.2, 0.19))
    assert not np.any(dist_model_values(slow, INJ, DT, 50))
