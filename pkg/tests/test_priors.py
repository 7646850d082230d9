import numpy as np
import pytest
from scipy import stats

from bayesmfa.errors import ConfigError, StructureError
from bayesmfa.network import Node, ParameterState, Topology, enumerate_structures, structure_from_code
from bayesmfa.priors import (
    ConnectionBelief,
    DirichletSpec,
    build_prior_bundle,
    log_prior_density,
    restrict_to_structure,
    sample_trunc_normal,
    structure_prior,
    structure_priors,
)


def topo():
    nodes = (Node("a", "a", "process"), Node("b", "b", "process"), Node("c", "c", "terminal-consumption"),
             Node("d", "d", "terminal-consumption"), Node("e", "e", "terminal-consumption"))
    return Topology(nodes, (("a", "b"), ("a", "c"), ("b", "d")), (("a", "e"), ("b", "e")), ("a",))


def bundle(t=None):
    t = t or topo()
    return build_prior_bundle(
        t,
        dirichlet={"a": {"b": 2.0, "c": 3.0, "e": 4.0}, "b": {"d": 1.5, "e": 0.5}},
        trunc_normal={"a": (10.0, 2.0)},
        beliefs=[0.3, 0.8],
    )


def test_structure_prior_product_and_sum():
    assert structure_prior([0.3, 0.8], "10") == pytest.approx(0.3 * 0.2)
    priors = structure_priors(bundle(), ["00", "01", "10", "11"])
    assert sum(priors.values()) == pytest.approx(1.0)
    assert priors["01"] == pytest.approx(0.7 * 0.8)


def test_beliefs_must_be_strictly_inside_unit_interval():
    for p in (0.0, 1.0, 1.2):
        with pytest.raises(ConfigError):
            ConnectionBelief(0, p)


def test_dirichlet_spec_validation():
    with pytest.raises(ConfigError):
        DirichletSpec("a", ("b", "c"), (1.0,))
    with pytest.raises(ConfigError):
        DirichletSpec("a", ("b",), (0.0,))


def test_restriction_drops_absent_edges_in_order():
    t = topo()
    b = bundle(t)
    s = structure_from_code(t, "01")
    prior = restrict_to_structure(b, s)
    np.testing.assert_array_equal(prior.dirichlet_for("a"), [2.0, 3.0])
    np.testing.assert_array_equal(prior.dirichlet_for("b"), [1.5, 0.5])
    s = structure_from_code(t, "10")
    assert restrict_to_structure(b, s).dirichlet_for("b") is None


def test_log_density_matches_scipy():
    t = topo()
    s = structure_from_code(t, "11")
    prior = restrict_to_structure(bundle(t), s)
    rng = np.random.default_rng(0)
    theta = prior.sample(rng, 50)
    lay = s.layout
    ref = np.zeros(50)
    for k in range(50):
        p = lay.unpack(theta[k])
        ref[k] += stats.dirichlet.logpdf(p.allocation["a"], [2.0, 3.0, 4.0])
        ref[k] += stats.dirichlet.logpdf(p.allocation["b"], [1.5, 0.5])
        ref[k] += stats.truncnorm.logpdf(p.inputs["a"], -5.0, np.inf, loc=10.0, scale=2.0)
    np.testing.assert_allclose(prior.log_density(theta), ref, rtol=1e-10)


def test_off_support_is_log_zero():
    t = topo()
    s = structure_from_code(t, "00")
    prior = restrict_to_structure(bundle(t), s)
    assert log_prior_density(prior, ParameterState({"a": [0.5, 0.6], "b": [1.0]}, {"a": 1.0})) == -np.inf
    assert log_prior_density(prior, ParameterState({"a": [0.5, 0.5], "b": [1.0]}, {"a": -1.0})) == -np.inf
    assert np.isfinite(log_prior_density(prior, ParameterState({"a": [0.5, 0.5], "b": [1.0]}, {"a": 3.0})))


def test_prior_moments():
    t = topo()
    s = structure_from_code(t, "11")
    prior = restrict_to_structure(bundle(t), s)
    theta = prior.sample(np.random.default_rng(1), 40_000)
    a = np.array([2.0, 3.0, 4.0])
    np.testing.assert_allclose(theta[:, :3].mean(axis=0), a / a.sum(), atol=0.01)
    q = theta[:, s.layout.input_slice][:, 0]
    assert q.mean() == pytest.approx(stats.truncnorm.mean(-5.0, np.inf, loc=10, scale=2), abs=0.05)


def test_trunc_normal_far_tail_stays_nonnegative():
    x = sample_trunc_normal(np.random.default_rng(2), [-5.0], [1.0], 5000)
    assert np.all(x >= 0)
    ref = stats.truncnorm.mean(5.0, np.inf, loc=-5.0, scale=1.0)
    assert x.mean() == pytest.approx(ref, rel=0.05)


def test_defaults_fill_missing_specs():
    t = topo()
    b = build_prior_bundle(t, beliefs=[0.5, 0.5], input_records={"a": 8.0})
    assert b.dirichlet["a"].concentration == (1.0, 1.0, 1.0)
    assert (b.trunc_normal["a"].mean, b.trunc_normal["a"].sd) == (8.0, 4.0)
    assert not b.coverage_problems(t)


def test_gradient_matches_finite_differences():
    t = topo()
    for s in enumerate_structures(t):
        prior = restrict_to_structure(bundle(t), s)
        theta = prior.sample(np.random.default_rng(3), 1)
        g = prior.grad_log_density(theta)[0]
        sl = s.layout.input_slice
        h = 1e-6
        e = np.zeros_like(theta)
        e[0, sl] = h
        fd = (prior.log_density(theta + e) - prior.log_density(theta - e))[0] / (2 * h)
        assert g[sl].sum() == pytest.approx(fd, rel=1e-6)


def test_missing_dirichlet_is_structure_error():
    t = topo()
    b = bundle(t)
    broken = type(b)({"a": b.dirichlet["a"]}, b.trunc_normal, b.beliefs)
    with pytest.raises(StructureError):
        restrict_to_structure(broken, structure_from_code(t, "11"))


def test_random_beliefs_normalize():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 7))
        beliefs = rng.uniform(0.01, 0.99, size=n)
        codes = [format(k, f"0{n}b") for k in range(2**n)]
        assert abs(sum(structure_prior(beliefs, c) for c in codes) - 1.0) <= 1e-12


def test_restricted_samples_follow_structure_support():
    t = topo()
    for s in enumerate_structures(t):
        prior = restrict_to_structure(bundle(t), s)
        theta = prior.sample(np.random.default_rng(5), 200)
        for k in range(5):
            p = s.layout.unpack(theta[k])
            for node, vec in p.allocation.items():
                assert len(vec) == s.out_degree(node)


def test_dirichlet_means_within_three_standard_errors():
    t = topo()
    s = structure_from_code(t, "11")
    prior = restrict_to_structure(bundle(t), s)
    n = 100_000
    theta = prior.sample(np.random.default_rng(6), n)
    a = np.array([2.0, 3.0, 4.0])
    mean = a / a.sum()
    var = mean * (1 - mean) / (a.sum() + 1)
    assert np.all(np.abs(theta[:, :3].mean(axis=0) - mean) < 3 * np.sqrt(var / n))


def test_sampler_agrees_with_density():
    # marginals of the sampler against the distributions the density encodes
    t = topo()
    s = structure_from_code(t, "11")
    prior = restrict_to_structure(bundle(t), s)
    theta = prior.sample(np.random.default_rng(7), 20_000)
    assert stats.kstest(theta[:, 0], stats.beta(2.0, 7.0).cdf).pvalue > 0.01
    q = theta[:, s.layout.input_slice][:, 0]
    assert stats.kstest(q, stats.truncnorm(-5.0, np.inf, loc=10.0, scale=2.0).cdf).pvalue > 0.01
    # chi-square on binned shares: counts against the Beta(2, 7) cell masses
    edges = np.linspace(0, 1, 11)
    counts, _ = np.histogram(theta[:, 0], bins=edges)
    expected = len(theta) * np.diff(stats.beta(2.0, 7.0).cdf(edges))
    keep = expected > 5
    assert stats.chisquare(counts[keep], expected[keep] * counts[keep].sum() / expected[keep].sum()).pvalue > 0.01
