import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import kendalltau

from latentwarn.indicators import (
    Box,
    IndicatorSeries,
    RegionSpec,
    SampEnParams,
    local_maxima,
    om_functional,
    om_integrand,
    om_ratio_series,
    round_half_up,
    sample_entropy,
    sample_entropy_counts,
    sample_entropy_series,
    std_baseline,
    template_starts,
    transition_probability_series,
    warning_point,
    warning_time,
)
from latentwarn.sde import LatentSde, simulate
from latentwarn.synthetic import sampen_bruteforce

OU = LatentSde.from_polynomials([0.0, -1.0], [0.5])
REFERENCE = SampEnParams(5, 10, 1, 2.0, 300)


def series(kind, values, times=None):
    values = np.asarray(values, dtype=float)
    times = np.arange(values.size) if times is None else times
    return IndicatorSeries(times, values, kind)


# --- series type -----------------------------------------------------------


def test_series_invariants():
    with pytest.raises(ValueError):
        IndicatorSeries([0, 0], [1.0, 2.0], "OM-ratio")
    with pytest.raises(ValueError):
        IndicatorSeries([0, 1], [1.0, np.inf], "OM-ratio")
    with pytest.raises(ValueError):
        IndicatorSeries([0], [1.0], "variance")
    s = IndicatorSeries([0, 3], [np.nan, 1.0], "std-baseline", {"l": 2})
    with pytest.raises(ValueError):
        s.values[0] = 0.0


# --- Onsager-Machlup ---------------------------------------------------------


def test_om_zero_for_drift_following_path():
    dt = 0.0625
    m = LatentSde.from_polynomials([0.75], [1.0])
    z = 0.2 + 0.75 * dt * np.arange(50)
    assert abs(om_functional(z, m, 40, 30, dt)) < 1e-12


def test_om_unit_velocity_without_drift():
    dt = 0.1
    m = LatentSde.from_polynomials([0.0], [1.0])
    z = dt * np.arange(100)  # z(s) = s
    l = 40
    assert om_functional(z, m, 60, l, dt) == pytest.approx(0.5 * l * dt, abs=1e-12)


def test_om_divergence_only():
    dt = 0.05
    m = LatentSde.from_polynomials([0.0, -1.0], [1.0])
    z = np.zeros(80)
    assert om_functional(z, m, 50, 20, dt) == pytest.approx(-0.5 * 20 * dt, abs=1e-15)


def test_om_window_bounds():
    m = LatentSde.from_polynomials([0.0], [1.0])
    z = np.zeros(20)
    om_functional(z, m, 18, 18, 0.1)  # samples 1..18, the largest admissible window
    with pytest.raises(IndexError):
        om_functional(z, m, 18, 19, 0.1)
    with pytest.raises(IndexError):
        om_functional(z, m, 19, 5, 0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 30), st.integers(1, 30))
def test_om_additive_over_windows(seed, a, b, c):
    z = simulate(OU, [0.3], 120, 0.0625, seed=seed)
    t = 1 + a + b + c - 1
    whole = om_functional(z, OU, t, a + b + c, 0.0625)
    parts = om_functional(z, OU, t - c, a + b, 0.0625) + om_functional(z, OU, t, c, 0.0625)
    assert parts == pytest.approx(whole, abs=1e-10)


def test_om_ratio_matches_direct_functionals():
    z = simulate(OU, [0.0], 400, 0.0625, seed=1)
    s = om_ratio_series(z, OU, l=50, dt=0.0625)
    l2 = round_half_up(45.0)
    for i in (0, 17, len(s) - 1):
        t = int(s.times[i])
        ref = om_functional(z, OU, t, 50, 0.0625) / om_functional(z, OU, t - l2, l2, 0.0625)
        assert s.values[i] == pytest.approx(ref, rel=1e-9)


def test_om_ratio_periodic_trajectory():
    # period-2 path: integrand alternates, both windows hold whole periods
    z = np.tile([0.0, 1.0], 60)
    s = om_ratio_series(z, OU, l=20, dt=0.1)
    assert s.params["denominator_length"] == 18
    np.testing.assert_allclose(s.values, 20 / 18, rtol=1e-12)


def test_om_ratio_constant_integrand():
    z = 0.0625 * np.arange(700)
    m = LatentSde.from_polynomials([0.0], [1.0])
    s = om_ratio_series(z, m, l=300, dt=0.0625)
    np.testing.assert_allclose(s.values, 300 / 270, rtol=1e-10)


def test_om_ratio_zero_denominator_is_nan():
    m = LatentSde.from_polynomials([0.0], [1.0])
    s = om_ratio_series(np.zeros(100), m, l=20, dt=0.1)
    assert s.all_nan


def test_om_ratio_fluctuates_about_one_for_true_model():
    medians = []
    for seed in range(20):
        z = simulate(OU, [0.0], 1500, 0.0625, seed=seed)
        medians.append(np.nanmedian(om_ratio_series(z, OU, 300, 0.0625).values))
    assert all(0.7 <= m <= 1.3 for m in medians)


def test_om_integrand_ends_are_nan():
    f = om_integrand(np.arange(5.0), OU, 1.0)
    assert np.isnan(f[0]) and np.isnan(f[-1]) and np.all(np.isfinite(f[1:-1]))


# --- sample entropy ----------------------------------------------------------


def test_template_starts():
    np.testing.assert_array_equal(template_starts(12, 2, 1, 1), np.arange(1, 10))
    np.testing.assert_array_equal(template_starts(20, 3, 2, 4), [4, 8, 12])


def test_params_validation():
    with pytest.raises(ValueError):
        SampEnParams(5, 10, 1, 2.0, 15)
    with pytest.raises(ValueError):
        SampEnParams(0, 1, 1, 2.0, 10)
    with pytest.raises(ValueError):
        SampEnParams(1, 1, 1, 0.0, 10)


def test_huge_tolerance_gives_zero():
    w = np.random.default_rng(0).normal(size=40)
    res = sample_entropy_counts(w, SampEnParams(2, 2, 1, 1e9, 40))
    assert res.a_count == res.b_count > 0
    assert res.value == 0.0


def test_periodic_fixture_hand_count():
    w = np.array([1, 2, 3] * 4, dtype=float)
    params = SampEnParams(2, 1, 1, 0.5, 12)
    res = sample_entropy_counts(w, params)
    # nine templates in three phase classes of three: 3 * C(3, 2) matches at both lengths
    assert (res.a_count, res.b_count) == (9, 9)
    ref = sampen_bruteforce(w, params)
    assert (ref.a_count, ref.b_count) == (9, 9)
    assert res.value == ref.value == 0.0


def test_duplicated_channels_count_cross_pairs():
    w = np.array([0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.5, 1.5])
    params = SampEnParams(2, 1, 1, 0.6, 10)
    one = sample_entropy_counts(w, params)
    two = sample_entropy_counts(np.column_stack([w, w]), params)
    n_z = template_starts(10, 2, 1, 1).size
    # within-channel pairs twice, cross pairs {i != j} twice, plus the n_z same-index cross pairs
    assert two.b_count == 4 * one.b_count + n_z
    assert two.a_count == 4 * one.a_count + n_z
    ref = sampen_bruteforce(np.column_stack([w, w]), params)
    assert (ref.a_count, ref.b_count) == (two.a_count, two.b_count)


def test_minimal_window_single_pair():
    params = SampEnParams(2, 1, 1, 1.0, 5)
    # l = m + p + 2q leaves k = 1, 2: one template pair
    res = sample_entropy_counts(np.array([0.0, 1.0, 2.0, 1.0, 2.0]), params)
    assert res.b_count in (0, 1)


@settings(max_examples=300, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 4),
    st.integers(1, 4),
    st.integers(1, 3),
    st.floats(0.05, 3.0),
    st.integers(1, 3),
)
def test_matches_bruteforce(seed, m, p, q, r, d):
    rng = np.random.default_rng(seed)
    l = int(rng.integers(m + p + q, 41))
    params = SampEnParams(m, p, q, r, l)
    w = rng.integers(-3, 4, size=(l, d)).astype(float)  # ties exercise the strict inequality
    a = sample_entropy_counts(w, params)
    b = sampen_bruteforce(w, params)
    assert (a.a_count, a.b_count, a.flag) == (b.a_count, b.b_count, b.flag)
    assert a.value == pytest.approx(b.value, rel=1e-14, abs=1e-15, nan_ok=True)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-5, 5))
def test_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    w = rng.integers(-8, 9, size=(30, 2)).astype(float)
    params = SampEnParams(2, 2, 1, 0.7, 30)
    a = sample_entropy_counts(w, params)
    b = sample_entropy_counts(scale * w + shift, params)
    assert (a.a_count, a.b_count) == (b.a_count, b.b_count)


def test_degenerate_cases():
    params = SampEnParams(2, 1, 1, 0.5, 10)
    assert sample_entropy_counts(np.ones(10), params).flag == "zero-std"
    w = np.array([0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0])
    assert sample_entropy_counts(w, SampEnParams(2, 1, 1, 0.01, 10)).flag == "no-m-matches"
    # matches at length m but never at m + p
    w = np.array([0.0, 0.0, 5.0, 0.0, 0.0, -5.0, 0.0, 0.0, 9.0, 0.0])
    res = sample_entropy_counts(w, SampEnParams(2, 1, 1, 0.01, 10))
    assert res.b_count > 0 and res.a_count == 0
    assert res.flag == "infinite" and math.isnan(res.value)


def test_noise_more_irregular_than_sine():
    wins = 0
    t = np.arange(300)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(300)
        sine = np.sin(2 * np.pi * t / 50 + rng.uniform(0, 2 * np.pi))
        wins += sample_entropy(noise, REFERENCE) > sample_entropy(sine, REFERENCE)
    assert wins >= 18


def test_constant_series_all_nan():
    s = sample_entropy_series(np.ones(40), SampEnParams(2, 1, 1, 0.5, 20))
    assert s.all_nan and len(s) == 21


def test_series_windows_and_stride():
    z = np.random.default_rng(3).normal(size=60)
    params = SampEnParams(2, 2, 1, 0.5, 30)
    s = sample_entropy_series(z, params, stride=7)
    assert s.times.tolist() == list(range(29, 60, 7))
    assert s.values[2] == pytest.approx(sample_entropy(z[43 - 29 : 44], params), nan_ok=True)


def test_stationary_series_has_no_trend():
    taus = []
    for seed in range(20):
        z = simulate(OU, [0.0], 1500, 0.0625, seed=seed)
        s = sample_entropy_series(z, REFERENCE, stride=20)
        taus.append(kendalltau(s.times, s.values, nan_policy="omit")[0])
    assert abs(np.mean(taus)) <= 0.2


# --- transition probability -------------------------------------------------


def test_confined_trajectory_never_transitions():
    z = np.full(300, -2.0)
    tp = transition_probability_series(z, RegionSpec.split(-0.75), 100)
    assert np.all(tp.values == 0)
    assert warning_point(tp) is None


def test_step_trajectory_ramp():
    n, t_star, E = 400, 60, 100
    z = np.where(np.arange(n) >= t_star, 1.0, -1.0)
    tp = transition_probability_series(z, RegionSpec.split(0.0), E)
    origins = np.arange(min(E, t_star))
    expected = [(origins + t >= t_star).mean() for t in tp.times]
    np.testing.assert_allclose(tp.values, expected)
    assert np.all(tp.values[tp.times >= t_star] == 1.0)


def test_no_origin_in_a():
    with pytest.raises(ValueError, match="region A"):
        transition_probability_series(np.ones(200), RegionSpec.split(0.0), 100)


def test_too_short_for_ensemble():
    with pytest.raises(ValueError):
        transition_probability_series(np.zeros(50), RegionSpec.split(1.0), 100)


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.integers(20, 80), elements=st.floats(-2, 2)), st.floats(-1, 1))
def test_tp_bounds_and_zero_lag(z, cut):
    box = Box((-math.inf,), (cut,), closed_lower=False, closed_upper=True)
    regions = RegionSpec(box)  # B is the complement
    if not box.contains(z[:10]).any():
        return
    tp = transition_probability_series(z, regions, 10)
    assert np.all((tp.values >= 0) & (tp.values <= 1))
    assert tp.values[0] == 0.0


def _telegraph(n, a, b, seed):
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    s = np.zeros(n)
    state = 0
    for k in range(1, n):
        if state == 0 and u[k] < a:
            state = 1
        elif state == 1 and u[k] < b:
            state = 0
        s[k] = state
    return s


def test_telegraph_crossing_matches_analytic_lag():
    a, b = 0.04, 0.01
    # P(B at lag t | A at 0) = a/(a+b) * (1 - (1-a-b)^t)
    analytic = math.log(1 - 0.5 * (a + b) / a) / math.log(1 - a - b)
    for seed in range(3):
        tp = transition_probability_series(_telegraph(40000, a, b, seed), RegionSpec.split(0.5), 20000)
        assert abs(warning_time(tp) - analytic) <= 0.2 * analytic


def test_monte_carlo_mode_is_seeded():
    z = simulate(OU, [-1.0], 300, 0.0625, seed=0)
    regions = RegionSpec.split(0.0)
    a = transition_probability_series(z, regions, 20, sde=OU, dt=0.0625, seed=5)
    b = transition_probability_series(z, regions, 20, sde=OU, dt=0.0625, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.params["mode"] == "monte-carlo"
    assert a.values[0] == 0.0 and a.values[-1] > 0.2
    with pytest.raises(ValueError, match="dt"):
        transition_probability_series(z, regions, 20, sde=OU)


# --- warning points -----------------------------------------------------------


@pytest.mark.parametrize(
    "values, expected",
    [([0.1, 0.4, 0.6, 0.7], 2), ([0.1, 0.2, 0.3], None), ([np.nan, 0.5], 1)],
)
def test_warning_point_examples(values, expected):
    assert warning_point(series("transition-probability", values), 0.5) == expected


def test_warning_time_uses_series_times():
    s = series("transition-probability", [0.1, 0.9], times=np.array([10, 20]))
    assert warning_time(s) == 20


@settings(max_examples=100, deadline=None)
@given(
    arrays(float, st.integers(1, 30), elements=st.floats(0, 1) | st.just(np.nan)),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_warning_point_monotone_in_threshold(values, t1, t2):
    lo, hi = sorted((t1, t2))
    s = series("transition-probability", values)
    a, b = warning_point(s, lo), warning_point(s, hi)
    if b is not None:
        assert a is not None and a <= b


# --- std baseline -------------------------------------------------------------


def test_std_examples():
    assert np.all(std_baseline(np.full(10, 3.0), 4).values == 0)
    assert std_baseline(np.array([-1.0, 1.0]), 2).values[0] == 1.0


def test_std_averages_components():
    z = np.column_stack([[-1.0, 1.0, -1.0], [-2.0, 2.0, -2.0]])
    s = std_baseline(z, 2)
    np.testing.assert_allclose(s.values, [1.5, 1.5])
    assert s.times.tolist() == [1, 2]


def test_std_tracks_variance_doubling():
    rng = np.random.default_rng(0)
    z = np.concatenate([rng.normal(0, 1, 3000), rng.normal(0, math.sqrt(2), 3000)])
    s = std_baseline(z, 300)
    before = np.median(s.values[s.times < 3000] ** 2)
    after = np.median(s.values[s.times >= 3299] ** 2)
    assert 1.8 <= after / before <= 2.2


@settings(max_examples=60, deadline=None)
@given(
    arrays(float, st.tuples(st.integers(5, 30), st.integers(1, 3)), elements=st.floats(-10, 10)),
    st.floats(-100, 100),
    st.floats(0.1, 10),
)
def test_std_translation_and_scale(z, shift, scale):
    base = std_baseline(z, 5).values
    np.testing.assert_allclose(std_baseline(z + shift, 5).values, base, atol=1e-9)
    np.testing.assert_allclose(std_baseline(scale * z, 5).values, scale * base, rtol=1e-9, atol=1e-12)


def test_local_maxima_skips_nan():
    v = [np.nan, 1.0, 3.0, 1.0, np.nan, 0.0, 2.0, 0.0]
    assert local_maxima(v).tolist() == [2, 6]
    assert local_maxima([np.nan, np.nan]).size == 0
