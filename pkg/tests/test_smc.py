import numpy as np
import pytest
from scipy import stats

from bayesmfa.errors import ConfigError
from bayesmfa.likelihood import LikelihoodModel
from bayesmfa.smc import (
    FunctionTarget,
    MFATarget,
    SmcConfig,
    UnconstrainedMap,
    effective_sample_size,
    run_smc,
    smc_sample,
    stick_breaking_forward,
    stick_breaking_inverse,
    systematic_resample,
)
from benchmarks import chain_split, split_flow


def gaussian_target(y=1.3, s=0.4):
    return FunctionTarget(
        1,
        lambda rng, n: rng.standard_normal((n, 1)),
        lambda u: stats.norm.logpdf(u[:, 0]),
        lambda u: stats.norm.logpdf(y, u[:, 0], s),
    )


def test_gaussian_evidence_closed_form():
    y, s = 1.3, 0.4
    ref = stats.norm.logpdf(y, 0.0, np.sqrt(1 + s**2))
    est = [smc_sample(gaussian_target(y, s), SmcConfig(particles=2000, seed=k, code="g")).log_evidence
           for k in range(4)]
    assert np.mean(est) == pytest.approx(ref, abs=0.03)


def test_ensemble_invariants():
    ens = smc_sample(gaussian_target(), SmcConfig(particles=500, seed=1, code="g"))
    b = np.array(ens.beta_schedule)
    assert b[0] == 0.0 and b[-1] == 1.0 and np.all(np.diff(b) > 0)
    assert abs(ens.weights.sum() - 1.0) < 1e-12
    assert np.isfinite(ens.log_evidence)
    assert all(0.05 <= a <= 0.95 for a in ens.acceptance)
    post_mean = 1.3 / (1 + 0.16)
    assert np.average(ens.theta[:, 0], weights=ens.weights) == pytest.approx(post_mean, abs=0.05)


def test_determinism_per_seed_and_code():
    b = split_flow()
    s, prior = b.setup()
    cfg = SmcConfig(particles=300, seed=5)
    a = run_smc(prior, b.dataset, s, None, cfg)
    c = run_smc(prior, b.dataset, s, None, cfg)
    assert a.log_evidence == c.log_evidence
    np.testing.assert_array_equal(a.theta, c.theta)
    d = run_smc(prior, b.dataset, s, None, SmcConfig(particles=300, seed=6))
    assert d.log_evidence != a.log_evidence


@pytest.mark.parametrize("kernel", ["rw", "hmc"])
def test_kernels_match_quadrature(kernel):
    b = chain_split()
    s, prior = b.setup()
    est = [run_smc(prior, b.dataset, s, None, SmcConfig(particles=1000, seed=k, kernel=kernel, mutation_steps=5))
           .log_evidence for k in range(4)]
    assert np.mean(est) == pytest.approx(b.oracle(), abs=0.1)


def test_config_validation_collects_everything():
    with pytest.raises(ConfigError) as err:
        SmcConfig(particles=10, ess_target=1.5, mutation_steps=0, kernel="nuts")
    assert len(err.value.violations) == 4


def test_stick_breaking_round_trip_and_centre():
    rng = np.random.default_rng(0)
    x = rng.dirichlet(np.ones(4), size=20)
    back, _ = stick_breaking_forward(stick_breaking_inverse(x))
    np.testing.assert_allclose(back, x, rtol=1e-10)
    centre, _ = stick_breaking_forward(np.zeros((1, 3)))
    np.testing.assert_allclose(centre, 0.25)


def test_stick_breaking_jacobian_numerically():
    y = np.array([[0.3, -0.7]])
    _, logj = stick_breaking_forward(y)
    h = 1e-6
    jac = np.zeros((2, 2))
    for k in range(2):
        e = np.zeros((1, 2))
        e[0, k] = h
        jac[:, k] = (stick_breaking_forward(y + e)[0][0, :2] - stick_breaking_forward(y - e)[0][0, :2]) / (2 * h)
    assert logj[0] == pytest.approx(np.log(abs(np.linalg.det(jac))), rel=1e-6)


def test_target_gradients_match_finite_differences():
    b = split_flow()
    s, prior = b.setup()
    t = MFATarget(prior, LikelihoodModel(s, b.dataset))
    u = t.sample_prior(np.random.default_rng(2), 3)
    lp, ll, glp, gll = t.gradients(u)
    h = 1e-6
    for k in range(t.dim):
        e = np.zeros_like(u)
        e[:, k] = h
        up, lp_ = t.log_densities(u + e), t.log_densities(u - e)
        np.testing.assert_allclose(glp[:, k], (up[0] - lp_[0]) / (2 * h), rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(gll[:, k], (up[1] - lp_[1]) / (2 * h), rtol=1e-5, atol=1e-6)


def test_unconstrained_map_round_trip():
    b = chain_split()
    s, prior = b.setup()
    m = UnconstrainedMap(s.layout)
    theta = prior.sample(np.random.default_rng(3), 10)
    np.testing.assert_allclose(m.forward(m.inverse(theta))[0], theta, rtol=1e-10)


def test_resampling_helpers():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    assert effective_sample_size(w) == pytest.approx(1 / np.sum(w**2))
    idx = systematic_resample(w, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=4)
    assert np.all(np.abs(counts - 4 * w) < 1)
