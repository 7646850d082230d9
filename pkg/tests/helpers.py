"""Random networks shared by the property tests."""
from __future__ import annotations

import numpy as np

from bayesmfa.network import Node, ParameterState, Topology, structure_from_code


def random_network(rng: np.random.Generator, n_proc: int = 6, n_term: int = 3, cyclic: bool = False,
                   loss: bool = False):
    """Process nodes in a random forward order feeding terminal nodes.

    With ``cyclic`` a back edge is added from a late process node to an
    early one.  With ``loss`` the last terminal is a loss node.
    """
    proc = [f"p{k}" for k in range(n_proc)]
    term = [f"t{k}" for k in range(n_term)]
    nodes = [Node(p, p, "process") for p in proc]
    for k, t in enumerate(term):
        cls = "terminal-loss" if loss and k == n_term - 1 else "terminal-consumption"
        nodes.append(Node(t, t, cls))
    edges = set()
    for i, p in enumerate(proc):
        later = proc[i + 1:] + term
        k = int(rng.integers(1, min(3, len(later)) + 1))
        for j in rng.choice(len(later), size=k, replace=False):
            edges.add((p, later[j]))
        if loss and rng.uniform() < 0.5:
            edges.add((p, term[-1]))
    if cyclic and n_proc >= 3:
        edges.add((proc[-1], proc[int(rng.integers(0, n_proc - 2))]))
    inputs = tuple(proc[: max(1, n_proc // 3)])
    topo = Topology(tuple(nodes), tuple(sorted(edges)), (), inputs)
    s = structure_from_code(topo, ())
    alloc = {}
    for nd in topo.nodes:
        k = s.out_degree(nd.id)
        if k:
            alloc[nd.id] = rng.dirichlet(np.ones(k))
    params = ParameterState(alloc, {i: float(rng.uniform(1, 10)) for i in inputs})
    return topo, s, params
