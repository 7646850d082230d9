import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesmfa.errors import DimensionMismatchError, NonDissipativeCycleError, StructureError
from bayesmfa.network import (
    ConnectionFlow,
    ExternalInput,
    FlowBatch,
    FlowGradient,
    NodalFlow,
    Node,
    ParameterState,
    Ratio,
    StructureCode,
    Sum,
    Topology,
    assemble_balance_matrix,
    enumerate_structures,
    evaluate_qoi,
    qoi_from_dict,
    solve_mass_flows,
    structure_from_code,
)
from helpers import random_network


def chain():
    nodes = (Node("a", "A", "process"), Node("b", "B", "process"), Node("c", "C", "terminal-consumption"),
             Node("d", "D", "terminal-consumption"))
    return Topology(nodes, (("a", "b"), ("b", "c"), ("b", "d")), (("a", "d"),), ("a",))


def test_enumeration_count_and_order():
    topo = chain()
    codes = [str(s.code) for s in enumerate_structures(topo)]
    assert codes == ["0", "1"]
    assert len(enumerate_structures(Topology(topo.nodes, topo.baseline_edges, (), ("a",)))) == 1


def test_full_structure_edge_order_is_stable():
    topo = chain()
    s0, s1 = enumerate_structures(topo)
    assert s0.out_targets("a") == ["b"]
    assert s1.out_targets("a") == ["b", "d"]


def test_structure_code_parse():
    assert StructureCode.parse("0101").bits == (0, 1, 0, 1)
    with pytest.raises(StructureError):
        structure_from_code(chain(), "11")


def test_pass_through_solution():
    s = structure_from_code(chain(), "0")
    p = ParameterState({"a": [1.0], "b": [0.25, 0.75]}, {"a": 8.0})
    sol = solve_mass_flows(s, p)
    assert sol.throughput("c") == pytest.approx(2.0)
    assert sol.throughput("d") == pytest.approx(6.0)
    assert sol.flow("a", "b") == pytest.approx(8.0)
    assert sol.flow("a", "d") == 0.0


def test_wrong_allocation_length():
    s = structure_from_code(chain(), "1")
    with pytest.raises(DimensionMismatchError):
        solve_mass_flows(s, ParameterState({"a": [1.0], "b": [0.5, 0.5]}, {"a": 1.0}))


def test_non_dissipative_cycle_is_reported():
    nodes = (Node("a", "a", "process"), Node("b", "b", "process"), Node("t", "t", "terminal-consumption"))
    topo = Topology(nodes, (("a", "b"), ("b", "a"), ("b", "t")), (), ("a",))
    s = structure_from_code(topo, ())
    with pytest.raises(NonDissipativeCycleError) as err:
        solve_mass_flows(s, ParameterState({"a": [1.0], "b": [1.0, 0.0]}, {"a": 1.0}))
    assert set(err.value.cycle) == {"a", "b"}


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), cyclic=st.booleans())
def test_mass_balance_and_terminal_conservation(seed, cyclic):
    rng = np.random.default_rng(seed)
    topo, s, p = random_network(rng, n_proc=int(rng.integers(3, 9)), cyclic=cyclic)
    sol = solve_mass_flows(s, p)
    m = assemble_balance_matrix(s, p)
    q = p.input_vector(s)
    assert np.max(np.abs(m @ sol.x - q)) <= 1e-9 * np.max(np.abs(q))
    terminal = sum(sol.x[topo.index[n.id]] for n in topo.nodes if n.terminal)
    assert terminal == pytest.approx(q.sum(), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), cyclic=st.booleans())
def test_batch_solver_matches_dense(seed, cyclic):
    rng = np.random.default_rng(seed)
    topo, s, p = random_network(rng, n_proc=int(rng.integers(3, 9)), cyclic=cyclic)
    theta = s.layout.pack(p)
    batch = FlowBatch.from_theta(s, theta[None])
    np.testing.assert_allclose(batch.x[0], solve_mass_flows(s, p).x, rtol=1e-10, atol=1e-12)


def test_layout_round_trip():
    rng = np.random.default_rng(3)
    _, s, p = random_network(rng, cyclic=True)
    back = s.layout.unpack(s.layout.pack(p))
    for k, v in p.allocation.items():
        if len(v) > 1:
            np.testing.assert_array_equal(back.allocation[k], v)
    assert back.inputs == p.inputs


def test_qoi_evaluation_and_serialization():
    s = structure_from_code(chain(), "1")
    p = ParameterState({"a": [0.5, 0.5], "b": [0.2, 0.8]}, {"a": 10.0})
    assert evaluate_qoi(NodalFlow("d"), s, p) == pytest.approx(5 + 4)
    assert evaluate_qoi(ConnectionFlow("a", "d"), s, p) == pytest.approx(5)
    assert evaluate_qoi(ExternalInput("a"), s, p) == pytest.approx(10)
    r = Ratio(ConnectionFlow("b", "c"), NodalFlow("b"))
    assert evaluate_qoi(r, s, p) == pytest.approx(0.2)
    total = Sum((ConnectionFlow("b", "c"), ConnectionFlow("b", "d")))
    assert evaluate_qoi(total, s, p) == pytest.approx(5)
    for q in (r, total, NodalFlow("c"), ExternalInput("a")):
        assert qoi_from_dict(q.to_dict()) == q


def test_qoi_applicability():
    s0 = structure_from_code(chain(), "0")
    assert not ConnectionFlow("a", "d").applicable(s0)
    assert Ratio(ConnectionFlow("a", "d"), NodalFlow("a")).applicable(s0) is False
    with pytest.raises(StructureError):
        Ratio(Sum((NodalFlow("a"),)), NodalFlow("b"))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_backprop_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    topo, s, p = random_network(rng, n_proc=5, cyclic=True)
    edge = s.edge_ids[0]
    target = topo.nodes[-1].id
    theta = s.layout.pack(p)[None]
    for qoi in (Sum((ConnectionFlow(*edge), NodalFlow(target))), Ratio(NodalFlow(target), NodalFlow(edge[0]))):
        _check_backprop(s, qoi, theta)


def _check_backprop(s, qoi, theta):

    def value(t):
        return qoi.evaluate_batch(FlowBatch.from_theta(s, t))[0]

    batch = FlowBatch.from_theta(s, theta)
    grads = FlowGradient(1, s.n_p, len(s.edge_ids))
    qoi.backprop(batch, np.ones(1), grads)
    grads.through_balance(batch)
    layout = s.layout
    analytic = np.zeros(layout.size)
    free = layout.edge_col >= 0
    analytic[layout.edge_col[free]] = grads.phi[0, free]
    analytic[layout.input_slice] = grads.q[0, layout.input_index]
    h = 1e-6
    for k in range(layout.size):
        e = np.zeros(layout.size)
        e[k] = h
        fd = (value(theta + e) - value(theta - e)) / (2 * h)
        assert analytic[k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_solver_on_many_random_networks():
    rng = np.random.default_rng(2024)
    for k in range(1000):
        topo, s, p = random_network(rng, n_proc=int(rng.integers(2, 10)), n_term=int(rng.integers(1, 4)),
                                    cyclic=bool(k % 2), loss=bool(k % 3 == 0))
        assert s.n_p <= 12
        sol = solve_mass_flows(s, p)
        q = p.input_vector(s)
        m = assemble_balance_matrix(s, p)
        assert np.max(np.abs(m @ sol.x - q)) <= 1e-10 * np.max(np.abs(q))
        assert np.all(sol.x >= 0)
        for node, vec in p.allocation.items():
            assert abs(np.sum(vec) - 1.0) <= 1e-12


def test_enumeration_round_trip():
    nodes = tuple(Node(n, n, "process") for n in "abc") + (Node("t", "t", "terminal-consumption"),)
    topo = Topology(nodes, (("a", "b"), ("b", "c"), ("c", "t")), (("a", "c"), ("a", "t"), ("b", "t")), ("a",))
    seen = set()
    for s in enumerate_structures(topo):
        again = structure_from_code(topo, str(s.code))
        assert again.code == s.code and again.edge_ids == s.edge_ids
        seen.add(str(s.code))
    assert len(seen) == 8
