import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from mpctune.dynamics import (
    Context,
    PlantParams,
    TruncatedNormalSpec,
    discretize,
    initial_buffer,
    latin_hypercube,
    perturb,
    plant_step,
    sample_truncated_normal,
)


def analytic_step(t, K, D, w0):
    """Unit-step response of K w0^2 / (s^2 + 2 D w0 s + w0^2) from rest."""
    t = np.asarray(t, dtype=float)
    if D < 1:
        wd = w0 * np.sqrt(1 - D * D)
        phi = np.arccos(D)
        y = K * (1 - np.exp(-D * w0 * t) / np.sqrt(1 - D * D) * np.sin(wd * t + phi))
    elif D == 1:
        y = K * (1 - np.exp(-w0 * t) * (1 + w0 * t))
    else:
        r = np.sqrt(D * D - 1)
        s1, s2 = -w0 * (D - r), -w0 * (D + r)
        y = K * (1 - (s2 * np.exp(s1 * t) - s1 * np.exp(s2 * t)) / (s2 - s1))
    return np.where(t >= 0, y, 0.0)


def simulate(plant, u):
    x = np.zeros(plant.order)
    buf = initial_buffer(plant)
    ys = []
    for uk in u:
        ys.append(float(plant.c @ x))
        x, buf = plant_step(plant, x, buf, uk)
    return np.array(ys)


def test_perturb_scales_stiffness_and_damping():
    p = PlantParams(gain=1.0, damping=0.5, omega0=10.0, delay=0.0)
    assert perturb(p, Context(1.0, 1.0)) == p
    q = perturb(p, Context(1.2, 0.8))
    assert q.omega0 == pytest.approx(12.0) and q.damping == pytest.approx(0.4)
    back = perturb(q, Context(1 / 1.2, 1 / 0.8))
    assert back.omega0 == pytest.approx(10.0) and back.damping == pytest.approx(0.5)


def test_small_sample_time_limit():
    # the deviation scales with w0**2 * ts
    m = discretize(PlantParams(omega0=5.0, damping=0.5, delay=0.0), 1e-8)
    assert np.linalg.norm(m.A - np.eye(2)) < 1e-6
    assert np.linalg.norm(m.b) < 1e-6


def test_step_response_matches_closed_form():
    ts = 0.002
    m = discretize(PlantParams(gain=1.0, damping=0.5, omega0=10.0, delay=0.0), ts)
    y = simulate(m, np.ones(500))
    t = np.arange(500) * ts
    assert np.max(np.abs(y - analytic_step(t, 1.0, 0.5, 10.0))) < 1e-9


def test_step_response_with_delay():
    ts = 0.002
    m = discretize(PlantParams(delay=2 * ts), ts)
    assert m.delay_steps == 2
    y = simulate(m, np.ones(300))
    t = (np.arange(300) - 2) * ts
    assert np.max(np.abs(y - analytic_step(t, 1.0, 0.28, 25.13))) < 1e-9


@settings(max_examples=50, deadline=None)
@given(
    K=st.floats(0.2, 5.0),
    D=st.floats(0.05, 3.0),
    w0=st.floats(1.0, 60.0),
)
def test_dc_gain_equals_static_gain(K, D, w0):
    m = discretize(PlantParams(gain=K, damping=D, omega0=w0, delay=0.0), 0.002)
    assert m.dc_gain() == pytest.approx(K, rel=1e-9)


def test_zero_input_stays_at_rest():
    m = discretize(PlantParams(), 0.002)
    assert np.all(simulate(m, np.zeros(100)) == 0.0)


def test_delay_two_samples():
    m = discretize(PlantParams(delay=0.004), 0.002)
    x = np.zeros(2)
    buf = initial_buffer(m)
    outputs = []
    for k in range(4):
        outputs.append(float(m.c @ x))
        x, buf = plant_step(m, x, buf, 1.0 if k == 0 else 0.0)
    # y_0 .. y_2 untouched; the state only moves once the input leaves the buffer
    assert outputs[:3] == [0.0, 0.0, 0.0]
    assert outputs[3] != 0.0


def test_long_constant_input_converges_to_gain():
    m = discretize(PlantParams(gain=2.5, damping=0.7, omega0=20.0, delay=0.004), 0.002)
    y = simulate(m, np.ones(1000))
    assert abs(y[-1] - 2.5) < 1e-6


def test_rejects_non_integer_delay():
    with pytest.raises(ValueError):
        discretize(PlantParams(delay=0.003), 0.002)


def test_truncated_normal_degenerate_support():
    spec = TruncatedNormalSpec(mean=(1.0, 1.0), std=0.25, lower=(1 - 2.5e-10, 1 - 2.5e-10), upper=(1 + 2.5e-10, 1 + 2.5e-10))
    draws = sample_truncated_normal(spec, 20, np.random.default_rng(0))
    assert np.allclose(draws, 1.0, atol=1e-9)


def test_truncated_normal_mean_and_support():
    spec = TruncatedNormalSpec()
    draws = sample_truncated_normal(spec, 100_000, np.random.default_rng(1))
    oracle = truncnorm.mean(-2.0, 2.0, loc=1.0, scale=0.25)
    assert np.all(np.abs(draws.mean(axis=0) - oracle) < 0.01)
    assert np.all(draws >= 0.5) and np.all(draws <= 1.5)


def test_truncated_normal_asymmetric_mean():
    spec = TruncatedNormalSpec(mean=(1.0, 0.6), std=0.25, lower=(0.5, 0.5), upper=(1.5, 1.5))
    draws = sample_truncated_normal(spec, 100_000, np.random.default_rng(2))
    oracle = truncnorm.mean(-0.4, 3.6, loc=0.6, scale=0.25)
    assert abs(draws[:, 1].mean() - oracle) < 0.01


def test_lhs_single_point_inside():
    p = latin_hypercube(1, [[0, 1], [2, 3]], rng=0)
    assert p.shape == (1, 2)
    assert 0 <= p[0, 0] <= 1 and 2 <= p[0, 1] <= 3


def test_lhs_one_point_per_stratum():
    p = np.sort(latin_hypercube(10, [[0, 10]], rng=3)[:, 0])
    assert np.all(np.floor(p) == np.arange(10))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 2**31 - 1))
def test_lhs_integer_dimensions(n, seed):
    p = latin_hypercube(n, [[1, 30], [1, 30], [-6, 1], [-4, 3]], [True, True, False, False], rng=seed)
    assert np.all(p[:, :2] == np.rint(p[:, :2]))
    assert np.all((p[:, :2] >= 1) & (p[:, :2] <= 30))
    assert np.all((p[:, 2] >= -6) & (p[:, 2] <= 1))
    # continuous dimensions keep one point per stratum
    strata = np.floor((p[:, 3] + 4) / 7 * n).astype(int)
    assert sorted(strata) == list(range(n))
