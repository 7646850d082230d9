import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesmfa.errors import ConfigError
from bayesmfa.impact import (
    ImpactModel,
    ZeroThroughputError,
    attribution_balance,
    consumption_eii,
    demand_vectors,
    impact_from_theta,
    io_matrices,
    rectified_eii,
    rectified_flows,
    fixed_point_residual,
    supply_driven_eii,
    system_impact,
)
from bayesmfa.network import Node, ParameterState, Topology, solve_mass_flows, structure_from_code
from helpers import random_network


def setup(seed, loss=False, cyclic=True):
    rng = np.random.default_rng(seed)
    topo, s, p = random_network(rng, n_proc=int(rng.integers(3, 8)), cyclic=cyclic, loss=loss)
    lossn = next((n.id for n in topo.nodes if n.cls == "terminal-loss"), None)
    e = {n.id: float(rng.uniform(0, 3)) for n in topo.nodes if n.id != lossn}
    cons = tuple(n.id for n in topo.nodes if n.cls == "terminal-consumption")
    model = ImpactModel(e, cons, lossn)
    return topo, s, p, model


def phi_matrix(s, p):
    phi = np.zeros((s.n_p, s.n_p))
    phi[s.edges[:, 0], s.edges[:, 1]] = p.edge_values(s)
    return phi


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_demand_supply_duality(seed):
    topo, s, p, model = setup(seed)
    sol = solve_mass_flows(s, p)
    if np.any(sol.x <= 0):
        return
    io = io_matrices(sol, p)
    e = model.vector(topo)
    phi = phi_matrix(s, p)
    for c in model.consumption_nodes:
        i = topo.index[c]
        demand = consumption_eii(e, io, i)
        supply = supply_driven_eii(phi, sol.x, e, np.zeros(len(e)), sol.q, i)
        assert demand == pytest.approx(supply, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), loss=st.booleans())
def test_leontief_and_attribution(seed, loss):
    topo, s, p, model = setup(seed, loss=loss)
    sol = solve_mass_flows(s, p)
    if np.any(sol.x <= 0):
        return
    io = io_matrices(sol, p, model.loss_node)
    if np.any(io.gamma >= 1.0):
        return  # a node whose whole output is loss has no demand-driven throughput
    n = len(sol.x)
    np.testing.assert_allclose(io.L @ (np.eye(n) - io.A), np.eye(n), atol=1e-9)
    e = model.vector(topo)
    dv = demand_vectors(sol, model)
    base = rectified_flows(io, dv.F_cons)
    keep = np.arange(n) != (topo.index[model.loss_node] if loss else -1)
    np.testing.assert_allclose(base[keep], sol.x[keep], rtol=1e-9)
    assert fixed_point_residual(io, base, dv.F_cons) < 1e-9
    eii = [rectified_eii(e, io, dv.F_cons, topo.index[c]) for c in model.consumption_nodes]
    f_cons = dv.F_cons[model.consumption_index(topo)]
    assert attribution_balance(eii, f_cons) == pytest.approx(system_impact(e, sol), rel=1e-8)


def test_delta_invariance():
    for seed in range(100):
        topo, s, p, model = setup(seed, loss=True)
        sol = solve_mass_flows(s, p)
        if np.all(sol.x > 0):
            io = io_matrices(sol, p, model.loss_node)
            if np.all(io.gamma < 1.0) and io.gamma.any():
                break
    dv = demand_vectors(sol, model)
    e = model.vector(topo)
    i = topo.index[model.consumption_nodes[0]]
    a = rectified_eii(e, io, dv.F_cons, i, delta=1e-3, check=False)
    b = rectified_eii(e, io, dv.F_cons, i, delta=1e-2, check=False)
    assert abs(a - b) < 1e-9 * abs(a)


def test_batch_matches_per_sample_and_pooled_mean():
    topo, s, p, model = setup(5, loss=True)
    rng = np.random.default_rng(0)
    theta = np.vstack([s.layout.pack(p)] * 20)
    for k in range(20):
        for sl in s.layout.simplex_slices:
            theta[k, sl] = rng.dirichlet(np.ones(sl.stop - sl.start))
    res = impact_from_theta(s, theta, model)
    e = model.vector(topo)
    direct = []
    for k in range(20):
        pk = s.layout.unpack(theta[k])
        sol = solve_mass_flows(s, pk)
        io = io_matrices(sol, pk, model.loss_node)
        dv = demand_vectors(sol, model)
        row = [rectified_eii(e, io, dv.F_cons, topo.index[c]) for c in model.consumption_nodes]
        direct.append(row)
        assert res.total[k] == pytest.approx(system_impact(e, sol), rel=1e-10)
    direct = np.array(direct)
    np.testing.assert_allclose(res.eii, direct, rtol=1e-8)
    # pooling two halves with weights equals the mean over all samples
    w = np.full(20, 0.05)
    halves = 0.5 * res.eii[:10].mean(axis=0) + 0.5 * res.eii[10:].mean(axis=0)
    np.testing.assert_allclose(w @ res.eii, halves, rtol=1e-10)


def test_zero_throughput_is_skipped_in_batch_and_raises_single():
    nodes = (Node("a", "a", "process"), Node("b", "b", "process"), Node("c", "c", "terminal-consumption"),
             Node("d", "d", "terminal-consumption"))
    topo = Topology(nodes, (("a", "b"), ("a", "d"), ("b", "c")), (), ("a",))
    s = structure_from_code(topo, ())
    p = ParameterState({"a": [0.0, 1.0], "b": [1.0]}, {"a": 5.0})
    model = ImpactModel({"a": 1.0, "b": 2.0}, ("c", "d"))
    with pytest.raises(ZeroThroughputError):
        io_matrices(solve_mass_flows(s, p), p)
    good = s.layout.pack(ParameterState({"a": [0.5, 0.5], "b": [1.0]}, {"a": 5.0}))
    res = impact_from_theta(s, np.vstack([s.layout.pack(p), good]), model)
    assert list(res.valid) == [False, True]
    assert res.skip_rate == 0.5
    assert np.all(np.isnan(res.eii[0]))
    np.testing.assert_allclose(res.eii[1], [3.0, 1.0])


def test_model_validation():
    topo, _, _, _ = setup(1)
    with pytest.raises(ConfigError):
        ImpactModel({"nope": 1.0}, ("p0",), "p1").validate(topo)
    with pytest.raises(ConfigError):
        ImpactModel({"t2": 1.0}, ("t0",), "t2").validate(topo)
