import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from stablewalk.errors import AcceptanceFloorError, ConfigError
from stablewalk.stable import (
    MeanderSample,
    StableParams,
    positivity_parameter,
    sample_meander_endpoint,
    sample_stable_path,
    sample_standard_stable,
    stable_survival_estimate,
    stable_tail_constant,
)
from stablewalk.stats import binomial_stderr, ks_critical_value, ks_two_sample, loglog_fit

alphas = st.floats(1.0, 2.0, exclude_min=True)
betas = st.floats(-1.0, 1.0)


@given(alphas)
def test_rho_symmetric_is_half(alpha):
    assert positivity_parameter(alpha, 0.0) == 0.5


@given(alphas, betas)
def test_rho_reflection(alpha, beta):
    total = positivity_parameter(alpha, beta) + positivity_parameter(alpha, -beta)
    assert total == pytest.approx(1.0, abs=1e-15)


@given(alphas, betas)
def test_rho_in_unit_interval(alpha, beta):
    assert 0.0 < positivity_parameter(alpha, beta) < 1.0


def test_rho_closed_values():
    assert positivity_parameter(1.5, 1.0) == pytest.approx(1 / 3, abs=1e-15)
    assert positivity_parameter(2.0, 0.7) == 0.5


@pytest.mark.parametrize("alpha, beta", [(1.0, 0.0), (0.5, 0.0), (2.1, 0.0), (1.5, 1.2), (1.5, -1.01), (math.nan, 0)])
def test_rho_domain(alpha, beta):
    with pytest.raises(ConfigError):
        positivity_parameter(alpha, beta)


@pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(alpha=2.5), dict(alpha=1.5, beta=2.0), dict(alpha=1.5, scale=0.0)])
def test_params_reject(kw):
    with pytest.raises(ConfigError):
        StableParams(**kw)


def test_params_degenerate_flag():
    assert StableParams(2.0).degenerate
    assert not StableParams(1.9).degenerate


def test_tail_constant_gaussian_limit_and_value():
    # (1 - a) / (Gamma(2 - a) cos(pi a / 2)) at a = 1.5
    assert stable_tail_constant(1.5) == pytest.approx(-0.5 / (math.gamma(0.5) * math.cos(0.75 * math.pi)))
    assert stable_tail_constant(1.999999) == pytest.approx(0.0, abs=1e-5)


def test_single_draw_is_float():
    assert isinstance(sample_standard_stable(StableParams(1.5), np.random.default_rng(0)), float)


def test_determinism():
    p = StableParams(1.3, 0.4, 2.0)
    a = sample_standard_stable(p, np.random.default_rng(42), size=1000)
    b = sample_standard_stable(p, np.random.default_rng(42), size=1000)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("alpha, beta", [(1.2, 0.5), (1.5, 1.0), (1.8, -0.7)])
def test_matches_scipy_levy_stable(alpha, beta):
    # scipy's default S1 parameterization shares this characteristic function
    ours = sample_standard_stable(StableParams(alpha, beta), np.random.default_rng(1), size=20_000)
    ref = sps.levy_stable.rvs(alpha, beta, size=20_000, random_state=np.random.default_rng(2))
    assert ks_two_sample(ours, ref).statistic < ks_critical_value(20_000, 20_000, 0.01)


def test_gaussian_endpoint_variance():
    x = sample_standard_stable(StableParams(2.0, 0.0, 1.5), np.random.default_rng(3), size=200_000)
    assert np.var(x) == pytest.approx(2 * 1.5**2, rel=0.02)


def test_symmetric_median_and_positivity():
    n = 10**6
    x = sample_standard_stable(StableParams(1.5, 0.0), np.random.default_rng(4), size=n)
    frac = np.mean(x > 0)
    assert abs(frac - 0.5) <= 3 * binomial_stderr(0.5, n)
    # sample median stderr: 1 / (2 f(0) sqrt(n)), f(0) = Gamma(1 + 1/a) / pi
    f0 = math.gamma(1 + 1 / 1.5) / math.pi
    assert abs(np.median(x)) <= 3 / (2 * f0 * math.sqrt(n))


def test_skewed_positivity():
    n = 10**6
    x = sample_standard_stable(StableParams(1.5, 1.0), np.random.default_rng(5), size=n)
    assert abs(np.mean(x > 0) - 1 / 3) <= 3 * binomial_stderr(1 / 3, n)


def test_symmetric_reflection_ks():
    rng = np.random.default_rng(6)
    p = StableParams(1.5, 0.0)
    a = sample_standard_stable(p, rng, size=10**5)
    b = -sample_standard_stable(p, rng, size=10**5)
    assert ks_two_sample(a, b).statistic < ks_critical_value(10**5, 10**5, 0.01)


def test_scale_parameter_is_multiplicative():
    a = sample_standard_stable(StableParams(1.5, 0.3, 2.5), np.random.default_rng(9), size=100)
    b = sample_standard_stable(StableParams(1.5, 0.3, 1.0), np.random.default_rng(9), size=100)
    np.testing.assert_allclose(a, 2.5 * b, rtol=1e-14)


@pytest.mark.parametrize("n", [2, 10, 100])
def test_sum_stability(n):
    p = StableParams(1.5, 0.6)
    rng = np.random.default_rng(100 + n)
    sums = sample_standard_stable(p, rng, size=(10**5, n)).sum(axis=1) / n ** (1 / 1.5)
    single = sample_standard_stable(p, rng, size=10**5)
    assert ks_two_sample(sums, single).statistic < ks_critical_value(10**5, 10**5, 0.01)


def test_path_single_step_is_one_draw():
    p = StableParams(1.5, 0.2)
    path = sample_stable_path(p, 1, 1.0, np.random.default_rng(11))
    assert path.shape == (1,)
    assert path[0] == sample_standard_stable(p, np.random.default_rng(11), size=1)[0]


def test_path_self_similarity():
    p = StableParams(1.5, 0.5)
    rng = np.random.default_rng(12)
    t = 7.0
    ends_t = np.array([sample_stable_path(p, 4, t, rng)[-1] for _ in range(10**4)])
    ends_1 = t ** (1 / 1.5) * sample_standard_stable(p, rng, size=10**4)
    assert ks_two_sample(ends_t, ends_1).statistic < ks_critical_value(10**4, 10**4, 0.01)


def test_path_symmetric_endpoint_positivity():
    rng = np.random.default_rng(13)
    ends = np.array([sample_stable_path(StableParams(1.5), 1024, 1.0, rng)[-1] for _ in range(10**4)])
    assert abs(np.mean(ends > 0) - 0.5) <= 3 * binomial_stderr(0.5, 10**4)


def test_path_rejects():
    with pytest.raises(ConfigError):
        sample_stable_path(StableParams(1.5), 0, 1.0, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_stable_path(StableParams(1.5), 4, 0.0, np.random.default_rng(0))


def test_survival_estimate_basic():
    curve = stable_survival_estimate(StableParams(1.5), 1.0, [0.1, 0.5, 1, 4, 16], 4, 20_000, seed=3)
    assert curve.p_hat[0] == 1.0  # first check happens at t = 1/4
    assert np.all(np.diff(curve.p_hat) <= 0)
    assert curve.paths == 20_000


def test_survival_estimate_rejects():
    with pytest.raises(ConfigError):
        stable_survival_estimate(StableParams(1.5), 1.0, [1, 2], 4, 0, seed=0)
    with pytest.raises(ConfigError):
        stable_survival_estimate(StableParams(1.5), 1.0, [2, 1], 4, 100, seed=0)
    with pytest.raises(ConfigError):
        stable_survival_estimate(StableParams(1.5), 0.0, [1, 2], 4, 100, seed=0)


def test_survival_estimate_worker_invariance():
    args = (StableParams(1.5, 0.5), 1.0, [1, 8, 64], 2, 20_000)
    a = stable_survival_estimate(*args, seed=5, workers=1)
    b = stable_survival_estimate(*args, seed=5, workers=2)
    assert a.survivors.tolist() == b.survivors.tolist()


@pytest.mark.slow
def test_survival_exponent_symmetric():
    t = 2.0 ** np.arange(2, 10)
    curve = stable_survival_estimate(StableParams(1.5), 1.0, t, 1, 10**6, seed=21)
    fit = loglog_fit(curve.t, curve.p_hat, (curve.p_hat / curve.stderr) ** 2)
    assert fit.slope == pytest.approx(-0.5, abs=0.05)


def test_meander_values_positive():
    draws = sample_meander_endpoint(StableParams(1.5, 0.3), 64, 2000, seed=1)
    assert len(draws) == 2000
    assert np.all(draws.values > 0)
    assert all(isinstance(s, MeanderSample) and s.grid_steps == 64 for s in draws)
    assert 0 < draws.acceptance_rate < 1


def test_meander_sample_invariants():
    with pytest.raises(ValueError):
        MeanderSample(0.0, 8)
    with pytest.raises(ValueError):
        MeanderSample(1.0, 1)


def test_meander_two_steps_brute_force():
    p = StableParams(1.5, 0.0)
    draws = sample_meander_endpoint(p, 2, 20_000, seed=2)
    rng = np.random.default_rng(77)
    n = 10**6
    steps = sample_standard_stable(p, rng, size=(n, 2))
    brute = np.mean((steps[:, 0] > 0) & (steps.sum(axis=1) > 0))
    se = math.hypot(binomial_stderr(brute, n), binomial_stderr(draws.acceptance_rate, draws.simulated))
    assert abs(draws.acceptance_rate - brute) <= 3 * se
    # Sparre Andersen: P(S_1 > 0, S_2 > 0) = 3/8 for a symmetric continuous walk
    assert brute == pytest.approx(3 / 8, abs=3 * binomial_stderr(3 / 8, n))


@pytest.mark.slow
def test_meander_acceptance_decay():
    p = StableParams(1.5, 0.0)
    r256 = sample_meander_endpoint(p, 256, 20_000, seed=3).acceptance_rate
    r512 = sample_meander_endpoint(p, 512, 20_000, seed=4).acceptance_rate
    assert math.log2(r256 / r512) == pytest.approx(0.5, abs=0.1)


def test_meander_floor_abort():
    with pytest.raises(AcceptanceFloorError):
        sample_meander_endpoint(StableParams(1.5, -1.0), 4096, 10, seed=0, floor=0.5, probe_paths=8192)


def test_meander_rejects():
    with pytest.raises(ConfigError):
        sample_meander_endpoint(StableParams(1.5), 1, 10, seed=0)
    with pytest.raises(ConfigError):
        sample_meander_endpoint(StableParams(1.5), 8, 0, seed=0)
