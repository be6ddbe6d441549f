import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bayesfuse import datagen
from bayesfuse.divergence import (
    KlSweep,
    cross_entropy_posterior_prior,
    fingerprint,
    kl_cil_cip,
    kl_decomposition,
    log_s,
    log_s_derivatives,
    sweep,
)
from bayesfuse.experiments import lda_config, regression_config, regression_locals
from bayesfuse.fusion import fuse_cil
from bayesfuse.gaussian import GaussianBelief

from conftest import random_belief, seeds


def normal(mean, var):
    return GaussianBelief.from_covariance(np.atleast_1d(float(mean)), np.atleast_2d(float(var)))


def quad_log_s(m, prior, post):
    p = stats.norm(prior.mean[0], np.sqrt(prior.covariance()[0, 0]))
    q = stats.norm(post.mean[0], np.sqrt(post.covariance()[0, 0]))
    val, _ = integrate.quad(lambda t: q.pdf(t) * p.pdf(t) ** m, -40, 40, epsabs=0, epsrel=1e-12, limit=200)
    return np.log(val)


def regression_setup(m, q0, seed=0):
    train, _, _ = datagen.gen_linear(datagen.linear_spec(seed=seed))
    return regression_locals(train, m, q0, 4.0, seed)


def kl_from_pooled(m, prior, post):
    """KL_M for a fixed pooled posterior, independent of how the data were split."""
    return log_s(m - 1, prior, post) + (m - 1) * cross_entropy_posterior_prior(post, prior)


# direct KL


def test_kl_single_agent_is_zero():
    prior, locals_ = regression_setup(1, 1.0)
    assert kl_cil_cip(prior, locals_) == 0.0


def test_kl_reference_magnitudes():
    assert 1.0 < kl_cil_cip(*regression_setup(6, 1.0)) < 100.0
    assert kl_cil_cip(*regression_setup(6, 81.0)) < 1e-2


def test_kl_vanishes_for_flat_prior():
    assert kl_cil_cip(*regression_setup(6, 1e6)) < 1e-6


# log S_M


def test_log_s_at_zero():
    rng = np.random.default_rng(0)
    for _ in range(5):
        prior, post = random_belief(rng, 3), random_belief(rng, 3)
        assert abs(log_s(0.0, prior, post)) < 1e-12


def test_log_s_standard_normal_example():
    assert log_s(1.0, normal(0, 1), normal(0, 1)) == pytest.approx(np.log(1 / np.sqrt(4 * np.pi)), abs=1e-6)
    assert log_s(1.0, normal(0, 1), normal(0, 1)) == pytest.approx(-1.26551, abs=1e-5)


@settings(max_examples=40)
@given(st.floats(-2, 2), st.floats(0.2, 3), st.floats(-2, 2), st.floats(0.05, 2), st.floats(0, 6))
def test_log_s_matches_quadrature(m0, v0, mu, s2, m):
    prior, post = normal(m0, v0), normal(mu, s2)
    ref = quad_log_s(m, prior, post)
    assert log_s(m, prior, post) == pytest.approx(ref, rel=1e-6, abs=1e-9)


def test_log_s_rejects_negative_m():
    with pytest.raises(ValueError):
        log_s(-1.0, normal(0, 1), normal(0, 1))
    with pytest.raises(ValueError):
        log_s_derivatives(-0.5, normal(0, 1), normal(0, 1))


@settings(max_examples=60)
@given(seeds, st.floats(0.1, 20))
def test_first_derivative_finite_difference(seed, m):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    prior, post = random_belief(rng, d), random_belief(rng, d, scale=0.3)
    h = 1e-4
    fd = (log_s(m + h, prior, post) - log_s(m - h, prior, post)) / (2 * h)
    first, _ = log_s_derivatives(m, prior, post)
    assert abs(first - fd) <= 1e-5 * max(1.0, abs(fd))


@settings(max_examples=60)
@given(seeds, st.floats(0.1, 20))
def test_second_derivative_finite_difference(seed, m):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    prior, post = random_belief(rng, d), random_belief(rng, d, scale=0.3)
    h = 1e-4
    f = [log_s_derivatives(m + k * h, prior, post)[0] for k in (-1, 1)]
    _, second = log_s_derivatives(m, prior, post)
    assert abs(second - (f[1] - f[0]) / (2 * h)) <= 1e-5 * max(1.0, abs(second))


def test_log_s_convex_on_random_triples():
    rng = np.random.default_rng(2024)
    worst = np.inf
    for _ in range(1000):
        d = int(rng.integers(1, 5))
        prior = random_belief(rng, d, scale=rng.uniform(0.1, 5))
        post = random_belief(rng, d, scale=rng.uniform(0.01, 2))
        worst = min(worst, log_s_derivatives(rng.uniform(0, 50), prior, post)[1])
    assert worst >= -1e-12


def test_second_derivative_without_mean_gap():
    rng = np.random.default_rng(8)
    prior = random_belief(rng, 3)
    post = GaussianBelief(prior.mean, random_belief(rng, 3).precision)
    m = 2.5
    a_inv_sigma = np.linalg.solve(prior.covariance() + m * post.covariance(), post.covariance())
    _, second = log_s_derivatives(m, prior, post)
    assert second == pytest.approx(0.5 * np.trace(a_inv_sigma @ a_inv_sigma), rel=1e-10)


# cross-entropy


def test_cross_entropy_examples():
    assert cross_entropy_posterior_prior(normal(0, 1), normal(0, 1)) == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=1e-6)
    assert cross_entropy_posterior_prior(normal(1, 1), normal(0, 1)) == pytest.approx(1.91894, abs=1e-5)
    p, q = stats.norm(1, 1), stats.norm(0, 1)
    ref, _ = integrate.quad(lambda t: -p.pdf(t) * q.logpdf(t), -30, 30)
    assert cross_entropy_posterior_prior(normal(1, 1), normal(0, 1)) == pytest.approx(ref, abs=1e-8)


def test_cross_entropy_can_be_negative():
    assert cross_entropy_posterior_prior(normal(0, 1e-4), normal(0, 1e-3)) < 0


def test_cross_entropy_widening_prior():
    # H grows with the prior variance q only while q exceeds s^2 + delta^2
    post = normal(1.0, 1.0)
    narrow = [cross_entropy_posterior_prior(post, normal(0, q)) for q in (0.5, 1.0)]
    assert narrow[0] > narrow[1]
    wide = [cross_entropy_posterior_prior(post, normal(0, q)) for q in (2.5, 4.0, 9.0, 100.0)]
    assert all(b > a for a, b in zip(wide, wide[1:]))


def test_cross_entropy_dense_matches_diagonal(rng):
    post = GaussianBelief(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    prior = GaussianBelief(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    dense = cross_entropy_posterior_prior(GaussianBelief(post.mean, np.diag(post.precision)), GaussianBelief(prior.mean, np.diag(prior.precision)))
    assert cross_entropy_posterior_prior(post, prior) == pytest.approx(dense, rel=1e-12)


# decomposition


@pytest.mark.parametrize("m", [2, 6, 26, 50])
def test_decomposition_sums_to_direct_kl(m):
    prior, locals_ = regression_setup(m, 1.0, seed=3)
    a, b = kl_decomposition(prior, locals_)
    direct = kl_cil_cip(prior, locals_)
    assert abs(a + b - direct) <= 1e-8 * max(1.0, direct)


def test_decomposition_single_agent():
    prior, locals_ = regression_setup(1, 1.0)
    assert kl_decomposition(prior, locals_) == (0.0, 0.0)


def test_decomposition_scalar_quadrature():
    prior = normal(0.5, 2.0)
    locals_ = [normal(1.0, 0.5), normal(0.2, 0.8), normal(1.5, 1.0)]
    post = fuse_cil(prior, locals_).fused
    log_ratio, _ = kl_decomposition(prior, locals_)
    assert log_ratio == pytest.approx(quad_log_s(2, prior, post), rel=1e-6)


def test_kl_increases_with_m_for_fixed_pooled_posterior():
    prior, locals_ = regression_setup(1, 1.0, seed=4)
    post = locals_[0]
    kls = [0.0] + [kl_from_pooled(m, prior, post) for m in range(2, 51)]
    steps = np.diff(kls)
    assert np.all(steps > 0)
    assert np.all(steps >= steps[0] - 1e-9)


@settings(max_examples=100)
@given(seeds)
def test_kl_increment_bound_random_instances(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    prior = random_belief(rng, d, diagonal=True, scale=2.0)
    post = GaussianBelief(rng.normal(size=d), prior.precision + rng.uniform(0.5, 10, d))
    kls = [0.0] + [kl_from_pooled(m, prior, post) for m in range(2, 12)]
    steps = np.diff(kls)
    assert np.all(steps > 0) and np.all(steps >= steps[0] - 1e-9)


def test_kl_decreasing_in_prior_variance():
    kls = [kl_cil_cip(*regression_setup(6, q)) for q in (1, 2, 4, 9, 16, 36, 81)]
    assert all(b < a for a, b in zip(kls, kls[1:]))


# sweeps


def test_sweep_over_agents_increasing():
    res = sweep("M", list(range(2, 51, 4)), regression_config(repetitions=3))
    assert np.all(np.diff(res.values) > 0)
    assert res.failures == {} and len(res.stderr) == len(res.grid)


def test_sweep_over_prior_variance_decreasing():
    res = sweep("q0", [1, 2, 4, 9, 16, 81], regression_config(M=6, repetitions=3))
    assert np.all(np.diff(res.values) < 0)


def test_sweep_over_class_prior_minimum_at_half():
    grid = [0.2, 0.35, 0.5, 0.65, 0.8]
    res = sweep("P1", grid, lda_config(M=10, repetitions=3))
    assert int(np.argmin(res.values)) == 2


def test_sweep_is_deterministic():
    cfg = regression_config(repetitions=2)
    a, b = sweep("M", [2, 6], cfg), sweep("M", [2, 6], cfg)
    assert a.values == b.values and a.config_fingerprint == b.config_fingerprint
    assert fingerprint(cfg) != fingerprint(cfg.replace(base_seed=1))


def test_sweep_records_failures():
    res = sweep("M", [2, 10_000], regression_config(repetitions=1))
    assert np.isnan(res.values[1]) and 10_000 in res.failures


def test_kl_sweep_validation():
    with pytest.raises(ValueError):
        KlSweep("width", [1.0], [0.0], "x")
    with pytest.raises(ValueError):
        KlSweep("M", [1.0, 2.0], [0.0], "x")
    with pytest.raises(ValueError):
        KlSweep("M", [2.0, 1.0], [0.0, 0.0], "x")
    with pytest.raises(ValueError):
        sweep("width", [1.0], regression_config())
