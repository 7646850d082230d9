"""MFA topologies, candidate structures and the mass-balance system.

A topology fixes the nodes, the baseline edges that exist in every candidate
and an ordered list of targeted connections whose existence is uncertain.  A
candidate structure switches each targeted connection on or off through a
binary code.  Nodal throughputs solve ``(I - Phi^T) x = q``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatchError,
    NonDissipativeCycleError,
    NotApplicableError,
    StructureError,
    UndefinedRatioError,
)

NODE_CLASSES = ("process", "compiler", "terminal-consumption", "terminal-loss", "export")
TERMINAL_CLASSES = ("terminal-consumption", "terminal-loss", "export")
MAX_TARGETED = 20
SIMPLEX_TOL = 1e-12
CYCLE_THRESHOLD = 1.0 - 1e-9


@dataclass(frozen=True)
class Node:
    id: str
    name: str
    cls: str = "process"
    aliases: tuple[str, ...] = ()

    @property
    def terminal(self) -> bool:
        return self.cls in TERMINAL_CLASSES


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    baseline_edges: tuple[tuple[str, str], ...]
    targeted_connections: tuple[tuple[str, str], ...] = ()
    external_input_nodes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "baseline_edges", tuple(tuple(e) for e in self.baseline_edges))
        object.__setattr__(self, "targeted_connections", tuple(tuple(e) for e in self.targeted_connections))
        object.__setattr__(self, "external_input_nodes", tuple(self.external_input_nodes))
        problems = self.problems()
        if problems:
            raise StructureError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        ids = [n.id for n in self.nodes]
        if not ids:
            out.append("topology has no nodes")
        seen = set()
        for i in ids:
            if i in seen:
                out.append(f"duplicate node id {i!r}")
            seen.add(i)
        for n in self.nodes:
            if n.cls not in NODE_CLASSES:
                out.append(f"node {n.id!r} has unknown class {n.cls!r}")
        edges = list(self.baseline_edges) + list(self.targeted_connections)
        for s, t in edges:
            for end in (s, t):
                if end not in seen:
                    out.append(f"edge ({s!r}, {t!r}) references undeclared node {end!r}")
            if s == t:
                out.append(f"self-loop on node {s!r}")
        if len(set(edges)) != len(edges):
            dup = sorted({e for e in edges if edges.count(e) > 1})
            out.append(f"duplicate edges {dup}")
        both = set(self.baseline_edges) & set(self.targeted_connections)
        if both:
            out.append(f"targeted connections also listed as baseline edges: {sorted(both)}")
        for q in self.external_input_nodes:
            if q not in seen:
                out.append(f"external input on undeclared node {q!r}")
        return out

    @property
    def n_p(self) -> int:
        return len(self.nodes)

    @property
    def n_l(self) -> int:
        return len(self.targeted_connections)

    @cached_property
    def index(self) -> dict[str, int]:
        return {n.id: k for k, n in enumerate(self.nodes)}

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> Node:
        return self.nodes[self.index[node_id]]

    @property
    def all_edges(self) -> tuple[tuple[str, str], ...]:
        """Edges of the full structure: baseline first, then targeted in order."""
        return self.baseline_edges + self.targeted_connections

    def out_edges_full(self, node_id: str) -> list[str]:
        return [t for s, t in self.all_edges if s == node_id]

    def targeted_index(self, edge: tuple[str, str]) -> int | None:
        try:
            return self.targeted_connections.index(tuple(edge))
        except ValueError:
            return None


@dataclass(frozen=True, order=True)
class StructureCode:
    """Presence bits of the targeted connections, bit 1 leftmost."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"structure code bits must be 0/1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def parse(cls, text: str) -> "StructureCode":
        text = text.strip()
        if any(c not in "01" for c in text):
            raise ValueError(f"structure code must be a binary string, got {text!r}")
        return cls(tuple(int(c) for c in text))

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)

    def __len__(self) -> int:
        return len(self.bits)


class NetworkStructure:
    """A topology resolved under one structure code."""

    def __init__(self, topology: Topology, code: StructureCode | str | Sequence[int]):
        if isinstance(code, str):
            code = StructureCode.parse(code)
        elif not isinstance(code, StructureCode):
            code = StructureCode(tuple(code))
        if len(code) != topology.n_l:
            raise StructureError(
                f"code {code} has {len(code)} bits but topology has {topology.n_l} targeted connections"
            )
        self.topology = topology
        self.code = code
        present = [e for e, b in zip(topology.targeted_connections, code.bits) if b]
        ids = list(topology.baseline_edges) + present
        present_set = set(ids)
        # edges ordered as in the full structure so Dirichlet alignment is stable
        ordered = [e for e in topology.all_edges if e in present_set]
        self.edge_ids: tuple[tuple[str, str], ...] = tuple(ordered)
        idx = topology.index
        self.edges = np.array([(idx[s], idx[t]) for s, t in ordered], dtype=int).reshape(-1, 2)
        self.edge_lookup = {e: k for k, e in enumerate(ordered)}
        outs: list[list[int]] = [[] for _ in range(topology.n_p)]
        for k, (s, _) in enumerate(self.edges):
            outs[s].append(k)
        self.out_edge_indices: tuple[tuple[int, ...], ...] = tuple(tuple(o) for o in outs)

    def __repr__(self) -> str:
        return f"NetworkStructure(code={self.code}, edges={len(self.edge_ids)})"

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NetworkStructure)
            and self.topology is other.topology
            and self.code == other.code
        )

    def __hash__(self) -> int:
        return hash((id(self.topology), self.code))

    @property
    def n_p(self) -> int:
        return self.topology.n_p

    def out_degree(self, node_id: str) -> int:
        return len(self.out_edge_indices[self.topology.index[node_id]])

    def out_targets(self, node_id: str) -> list[str]:
        return [self.edge_ids[k][1] for k in self.out_edge_indices[self.topology.index[node_id]]]

    def has_edge(self, source: str, target: str) -> bool:
        return (source, target) in self.edge_lookup

    def has_node(self, node_id: str) -> bool:
        return node_id in self.topology.index

    def problems(self) -> list[str]:
        out = []
        for n in self.topology.nodes:
            if not n.terminal and self.out_degree(n.id) == 0:
                out.append(f"structure {self.code}: non-terminal node {n.id!r} has no out-edges")
        return out

    @cached_property
    def layout(self) -> "ParameterLayout":
        return ParameterLayout(self)

    @cached_property
    def solver(self) -> "BatchFlowSolver":
        return BatchFlowSolver(self)

    @cached_property
    def adjoint_solver(self) -> "BatchFlowSolver":
        """Solves ``(I - Phi) lam = g``, the transpose of the balance system."""
        return BatchFlowSolver(self, transpose=True)


def structure_from_code(topology: Topology, code) -> NetworkStructure:
    s = NetworkStructure(topology, code)
    problems = s.problems()
    if problems:
        raise StructureError("; ".join(problems))
    return s


def enumerate_structures(topology: Topology) -> list[NetworkStructure]:
    """All ``2**n_L`` candidate structures in lexicographic code order."""
    n = topology.n_l
    if n > MAX_TARGETED:
        raise StructureError(
            f"{n} targeted connections would give 2^{n} structures; the limit is {MAX_TARGETED}"
        )
    out = []
    for k in range(2**n):
        bits = tuple((k >> (n - 1 - b)) & 1 for b in range(n))
        out.append(structure_from_code(topology, StructureCode(bits)))
    return out


class ParameterLayout:
    """Flat vector layout of the uncertain parameters of one structure.

    ``theta`` holds every free allocation simplex (all entries, in out-edge
    order) followed by the external inputs.  Nodes with a single out-edge
    carry the constant fraction 1 and take no slot.
    """

    def __init__(self, structure: NetworkStructure):
        self.structure = structure
        topo = structure.topology
        self.simplex_nodes: list[str] = []
        self.simplex_slices: list[slice] = []
        names: list[str] = []
        edge_col = np.full(len(structure.edge_ids), -1, dtype=int)
        pos = 0
        for n in topo.nodes:
            outs = structure.out_edge_indices[topo.index[n.id]]
            if len(outs) >= 2:
                self.simplex_nodes.append(n.id)
                self.simplex_slices.append(slice(pos, pos + len(outs)))
                for k in outs:
                    edge_col[k] = pos
                    names.append(f"phi[{n.id}->{structure.edge_ids[k][1]}]")
                    pos += 1
        self.n_simplex_entries = pos
        self.input_nodes: list[str] = list(topo.external_input_nodes)
        self.input_index = np.array([topo.index[i] for i in self.input_nodes], dtype=int)
        for i in self.input_nodes:
            names.append(f"q[{i}]")
        self.input_slice = slice(pos, pos + len(self.input_nodes))
        self.size = pos + len(self.input_nodes)
        self.names = names
        self.edge_col = edge_col
        self.simplex_sizes = [s.stop - s.start for s in self.simplex_slices]
        self.unconstrained_size = sum(k - 1 for k in self.simplex_sizes) + len(self.input_nodes)

    def edge_values(self, theta: np.ndarray) -> np.ndarray:
        """Allocation fraction of every structure edge, shape ``(N, E)``."""
        theta = np.atleast_2d(theta)
        out = np.ones((theta.shape[0], len(self.edge_col)))
        free = self.edge_col >= 0
        out[:, free] = theta[:, self.edge_col[free]]
        return out

    def inputs(self, theta: np.ndarray) -> np.ndarray:
        """External inputs scattered onto all nodes, shape ``(N, n_p)``."""
        theta = np.atleast_2d(theta)
        q = np.zeros((theta.shape[0], self.structure.n_p))
        q[:, self.input_index] = theta[:, self.input_slice]
        return q

    def pack(self, params: "ParameterState") -> np.ndarray:
        params.validate(self.structure)
        theta = np.empty(self.size)
        for node, sl in zip(self.simplex_nodes, self.simplex_slices):
            theta[sl] = params.allocation[node]
        theta[self.input_slice] = [params.inputs[i] for i in self.input_nodes]
        return theta

    def unpack(self, theta: np.ndarray) -> "ParameterState":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DimensionMismatchError(f"expected {self.size} parameters, got shape {theta.shape}")
        s = self.structure
        alloc = {}
        for n in s.topology.nodes:
            k = s.out_degree(n.id)
            if k == 1:
                alloc[n.id] = np.ones(1)
        for node, sl in zip(self.simplex_nodes, self.simplex_slices):
            alloc[node] = theta[sl].copy()
        inputs = {i: float(v) for i, v in zip(self.input_nodes, theta[self.input_slice])}
        return ParameterState(alloc, inputs)


@dataclass(frozen=True)
class ParameterState:
    """One realization of the allocation fractions and external inputs.

    ``allocation[node]`` is aligned with ``structure.out_targets(node)``.
    """

    allocation: Mapping[str, np.ndarray]
    inputs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "allocation", {k: np.asarray(v, dtype=float) for k, v in self.allocation.items()}
        )
        object.__setattr__(self, "inputs", {k: float(v) for k, v in self.inputs.items()})

    def validate(self, structure: NetworkStructure) -> None:
        topo = structure.topology
        for n in topo.nodes:
            k = structure.out_degree(n.id)
            vec = self.allocation.get(n.id)
            if k == 0:
                if vec is not None and len(vec):
                    raise DimensionMismatchError(
                        f"node {n.id!r} has no out-edges under {structure.code} but an allocation was given"
                    )
                continue
            if vec is None:
                raise DimensionMismatchError(f"missing allocation for node {n.id!r}")
            if vec.shape != (k,):
                raise DimensionMismatchError(
                    f"allocation for {n.id!r} has length {vec.size}, structure {structure.code} needs {k}"
                )
        extra = set(self.allocation) - set(topo.index)
        if extra:
            raise DimensionMismatchError(f"allocation for unknown nodes {sorted(extra)}")
        missing = set(topo.external_input_nodes) - set(self.inputs)
        if missing:
            raise DimensionMismatchError(f"missing external inputs {sorted(missing)}")

    def is_valid(self, structure: NetworkStructure) -> bool:
        try:
            self.validate(structure)
        except DimensionMismatchError:
            return False
        for vec in self.allocation.values():
            if len(vec) and (np.any(vec < 0) or abs(vec.sum() - 1.0) > SIMPLEX_TOL):
                return False
        return all(v >= 0 for v in self.inputs.values())

    def edge_values(self, structure: NetworkStructure) -> np.ndarray:
        self.validate(structure)
        vals = np.empty(len(structure.edge_ids))
        topo = structure.topology
        for n in topo.nodes:
            for pos, k in enumerate(structure.out_edge_indices[topo.index[n.id]]):
                vals[k] = self.allocation[n.id][pos]
        return vals

    def input_vector(self, structure: NetworkStructure) -> np.ndarray:
        q = np.zeros(structure.n_p)
        for node, v in self.inputs.items():
            q[structure.topology.index[node]] = v
        return q


def assemble_balance_matrix(structure: NetworkStructure, params: ParameterState) -> np.ndarray:
    """``I - Phi^T``: unit diagonal, ``-phi_ij`` at row j, column i."""
    phi = params.edge_values(structure)
    m = np.eye(structure.n_p)
    if len(phi):
        np.add.at(m, (structure.edges[:, 1], structure.edges[:, 0]), -phi)
    return m


def _dissipativity_check(structure: NetworkStructure, phi: np.ndarray) -> None:
    n = structure.n_p
    if not len(phi):
        return
    mask = phi > 0
    src, dst = structure.edges[mask, 0], structure.edges[mask, 1]
    graph = csr_matrix((np.ones(mask.sum()), (src, dst)), shape=(n, n))
    ncomp, labels = connected_components(graph, directed=True, connection="strong")
    dense = np.zeros((n, n))
    np.add.at(dense, (structure.edges[:, 0], structure.edges[:, 1]), phi)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        block = dense[np.ix_(members, members)]
        rho = np.max(np.abs(np.linalg.eigvals(block)))
        if rho >= CYCLE_THRESHOLD:
            names = [structure.topology.nodes[k].id for k in members]
            raise NonDissipativeCycleError(
                f"cycle through {names} does not dissipate mass (spectral radius {rho:.12g})",
                cycle=names,
            )


@dataclass(frozen=True)
class FlowSolution:
    structure: NetworkStructure
    x: np.ndarray
    edge_flows: np.ndarray
    q: np.ndarray

    @property
    def z(self) -> dict[tuple[str, str], float]:
        return {e: float(v) for e, v in zip(self.structure.edge_ids, self.edge_flows)}

    def flow(self, source: str, target: str) -> float:
        k = self.structure.edge_lookup.get((source, target))
        return 0.0 if k is None else float(self.edge_flows[k])

    def throughput(self, node: str) -> float:
        return float(self.x[self.structure.topology.index[node]])


def solve_mass_flows(structure: NetworkStructure, params: ParameterState) -> FlowSolution:
    """Dense LU solve of the mass balance for one parameter state."""
    phi = params.edge_values(structure)
    _dissipativity_check(structure, phi)
    m = assemble_balance_matrix(structure, params)
    q = params.input_vector(structure)
    x = np.linalg.solve(m, q)
    scale = max(np.linalg.norm(q), 1e-300)
    resid = np.max(np.abs(m @ x - q)) if len(x) else 0.0
    if resid > 1e-10 * scale:
        # one step of iterative refinement before giving up
        x = x + np.linalg.solve(m, q - m @ x)
        resid = np.max(np.abs(m @ x - q))
        if resid > 1e-10 * scale:
            raise NonDissipativeCycleError(f"mass balance residual {resid:.3g} exceeds tolerance")
    z = phi * x[structure.edges[:, 0]] if len(phi) else np.zeros(0)
    return FlowSolution(structure, x, z, q)


class BatchFlowSolver:
    """Vectorized mass-balance solves over many parameter vectors.

    Nodes are ordered so that every edge points forward except edges into a
    small feedback set R.  Given the throughputs of R, all other nodes follow
    by forward substitution; the R throughputs then solve a ``|R| x |R|``
    system.  For recycling networks R is usually a single scrap node.
    """

    def __init__(self, structure: NetworkStructure, transpose: bool = False):
        self.structure = structure
        n = structure.n_p
        # reversing every edge gives the transposed system with the same edge columns
        edges = structure.edges[:, ::-1] if transpose else structure.edges
        self.feedback = _feedback_vertices(n, edges)
        fb = set(self.feedback)
        order = _topological_order(n, [(s, t) for s, t in edges if t not in fb])
        self.order = order
        incoming: list[list[int]] = [[] for _ in range(n)]
        for k, (s, t) in enumerate(edges):
            incoming[t].append(k)
        self.incoming = [np.array(v, dtype=int) for v in incoming]
        self.sources = [edges[v, 0] if len(v) else v for v in self.incoming]
        self.fb_index = np.array(self.feedback, dtype=int)

    def solve(self, edge_phi: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Throughputs ``x`` of shape ``(N, n_p)``."""
        edge_phi = np.atleast_2d(edge_phi)
        q = np.atleast_2d(q)
        nb, n = q.shape
        k = len(self.feedback)
        # column 0: response to q with x_R = 0; columns 1..k: response to unit x_R
        xs = np.zeros((nb, n, k + 1))
        fbset = set(self.feedback)
        for r, node in enumerate(self.feedback):
            xs[:, node, r + 1] = 1.0
        for j in self.order:
            if j in fbset:
                continue
            inc = self.incoming[j]
            acc = np.zeros((nb, k + 1))
            acc[:, 0] = q[:, j]
            if len(inc):
                acc += np.einsum("ne,nek->nk", edge_phi[:, inc], xs[:, self.sources[j], :])
            xs[:, j, :] = acc
        if k == 0:
            return xs[:, :, 0]
        # consistency for feedback rows: s = q_R + sum_in phi * (a + B s)
        rhs = q[:, self.fb_index].copy()
        mat = np.repeat(np.eye(k)[None], nb, axis=0)
        for r, node in enumerate(self.feedback):
            inc = self.incoming[node]
            if not len(inc):
                continue
            contrib = np.einsum("ne,nek->nk", edge_phi[:, inc], xs[:, self.sources[node], :])
            rhs[:, r] += contrib[:, 0]
            mat[:, r, :] -= contrib[:, 1:]
        with np.errstate(all="ignore"):
            # rows with non-finite or singular systems come back as nan instead of raising
            bad = ~(np.all(np.isfinite(mat), axis=(1, 2)) & np.all(np.isfinite(rhs), axis=1))
            if k == 1:
                bad |= mat[:, 0, 0] == 0
            else:
                bad |= np.linalg.cond(np.where(bad[:, None, None], np.eye(k), mat)) > 1e14
            safe = np.where(bad[:, None, None], np.eye(k), mat)
            s = np.linalg.solve(safe, np.where(bad[:, None], 0.0, rhs)[:, :, None])[:, :, 0]
            s[bad] = np.nan
            return xs[:, :, 0] + np.einsum("nik,nk->ni", xs[:, :, 1:], s)


def _topological_order(n: int, edges) -> list[int]:
    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for s, t in edges:
        succ[s].append(t)
        indeg[t] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for t in succ[i]:
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
    if len(order) != n:
        raise StructureError("feedback set does not break every cycle")
    return order


def _feedback_vertices(n: int, edges: np.ndarray) -> list[int]:
    """Greedy feedback vertex set: cutting edges into these nodes leaves a DAG."""
    chosen: list[int] = []
    while True:
        keep = [(s, t) for s, t in edges if t not in chosen]
        if not keep:
            return sorted(chosen)
        src = np.array([e[0] for e in keep])
        dst = np.array([e[1] for e in keep])
        graph = csr_matrix((np.ones(len(keep)), (src, dst)), shape=(n, n))
        ncomp, labels = connected_components(graph, directed=True, connection="strong")
        sizes = np.bincount(labels, minlength=ncomp)
        cyclic = [c for c in range(ncomp) if sizes[c] > 1]
        if not cyclic:
            return sorted(chosen)
        best, best_score = None, -1
        for c in cyclic:
            members = set(np.flatnonzero(labels == c))
            for v in sorted(members):
                indeg = sum(1 for s, t in keep if t == v and s in members)
                outdeg = sum(1 for s, t in keep if s == v and t in members)
                score = indeg * outdeg
                if score > best_score:
                    best, best_score = v, score
        chosen.append(int(best))


# --- quantities of interest -------------------------------------------------


class QoISpec:
    """Base class for model quantities that data records observe."""

    depth = 0

    def references(self) -> tuple[set[str], set[tuple[str, str]]]:
        raise NotImplementedError

    def applicable(self, structure: NetworkStructure) -> bool:
        nodes, edges = self.references()
        return all(structure.has_node(n) for n in nodes) and all(structure.has_edge(*e) for e in edges)

    def evaluate_batch(self, ctx: "FlowBatch") -> np.ndarray:
        raise NotImplementedError

    def backprop(self, ctx: "FlowBatch", gbar: np.ndarray, grads: "FlowGradient") -> None:
        """Add ``gbar * d(value)/d(x, phi, q)`` into ``grads``."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class NodalFlow(QoISpec):
    node: str

    def references(self):
        return {self.node}, set()

    def evaluate_batch(self, ctx):
        return ctx.x[:, ctx.node_index(self.node)]

    def backprop(self, ctx, gbar, grads):
        grads.x[:, ctx.node_index(self.node)] += gbar

    def to_dict(self):
        return {"kind": "nodal_flow", "node": self.node}


@dataclass(frozen=True)
class ConnectionFlow(QoISpec):
    source: str
    target: str

    def references(self):
        return {self.source, self.target}, {(self.source, self.target)}

    def evaluate_batch(self, ctx):
        return ctx.z[:, ctx.edge_index(self.source, self.target)]

    def backprop(self, ctx, gbar, grads):
        k = ctx.edge_index(self.source, self.target)
        i = ctx.node_index(self.source)
        grads.phi[:, k] += gbar * ctx.x[:, i]
        grads.x[:, i] += gbar * ctx.edge_phi[:, k]

    def to_dict(self):
        return {"kind": "connection_flow", "source": self.source, "target": self.target}


@dataclass(frozen=True)
class ExternalInput(QoISpec):
    node: str

    def references(self):
        return {self.node}, set()

    def applicable(self, structure):
        return self.node in structure.topology.external_input_nodes

    def evaluate_batch(self, ctx):
        return ctx.q[:, ctx.node_index(self.node)]

    def backprop(self, ctx, gbar, grads):
        grads.q[:, ctx.node_index(self.node)] += gbar

    def to_dict(self):
        return {"kind": "external_input", "node": self.node}


@dataclass(frozen=True)
class Ratio(QoISpec):
    numerator: QoISpec
    denominator: QoISpec

    def __post_init__(self):
        if max(self.numerator.depth, self.denominator.depth) >= 1:
            raise StructureError("ratio/sum nesting is limited to one level")

    depth = 1

    def references(self):
        n1, e1 = self.numerator.references()
        n2, e2 = self.denominator.references()
        return n1 | n2, e1 | e2

    def applicable(self, structure):
        return self.numerator.applicable(structure) and self.denominator.applicable(structure)

    def evaluate_batch(self, ctx):
        num = self.numerator.evaluate_batch(ctx)
        den = self.denominator.evaluate_batch(ctx)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den != 0, num / np.where(den != 0, den, 1.0), np.nan)

    def backprop(self, ctx, gbar, grads):
        num = self.numerator.evaluate_batch(ctx)
        den = self.denominator.evaluate_batch(ctx)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.numerator.backprop(ctx, gbar / den, grads)
            self.denominator.backprop(ctx, -gbar * num / den**2, grads)

    def to_dict(self):
        return {"kind": "ratio", "numerator": self.numerator.to_dict(), "denominator": self.denominator.to_dict()}


@dataclass(frozen=True)
class Sum(QoISpec):
    terms: tuple[QoISpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise StructureError("sum needs at least one term")
        if any(t.depth >= 1 for t in self.terms):
            raise StructureError("ratio/sum nesting is limited to one level")

    depth = 1

    def references(self):
        nodes, edges = set(), set()
        for t in self.terms:
            n, e = t.references()
            nodes |= n
            edges |= e
        return nodes, edges

    def applicable(self, structure):
        return all(t.applicable(structure) for t in self.terms)

    def evaluate_batch(self, ctx):
        return np.sum([t.evaluate_batch(ctx) for t in self.terms], axis=0)

    def backprop(self, ctx, gbar, grads):
        for t in self.terms:
            t.backprop(ctx, gbar, grads)

    def to_dict(self):
        return {"kind": "sum", "terms": [t.to_dict() for t in self.terms]}


def qoi_from_dict(d: Mapping) -> QoISpec:
    kind = d["kind"]
    if kind == "nodal_flow":
        return NodalFlow(d["node"])
    if kind == "connection_flow":
        return ConnectionFlow(d["source"], d["target"])
    if kind == "external_input":
        return ExternalInput(d["node"])
    if kind == "ratio":
        return Ratio(qoi_from_dict(d["numerator"]), qoi_from_dict(d["denominator"]))
    if kind == "sum":
        return Sum(tuple(qoi_from_dict(t) for t in d["terms"]))
    raise ValueError(f"unknown QoI kind {kind!r}")


class FlowGradient:
    """Gradients with respect to throughputs, edge fractions and inputs."""

    def __init__(self, n: int, n_nodes: int, n_edges: int):
        self.x = np.zeros((n, n_nodes))
        self.phi = np.zeros((n, n_edges))
        self.q = np.zeros((n, n_nodes))

    def through_balance(self, ctx: "FlowBatch") -> None:
        """Push the throughput gradient onto ``phi`` and ``q``.

        With ``(I - Phi^T) x = q`` and ``(I - Phi) lam = dF/dx``, one has
        ``dF/dq = lam`` and ``dF/dphi_ij = lam_j x_i``.
        """
        s = ctx.structure
        lam = s.adjoint_solver.solve(ctx.edge_phi, self.x)
        self.q += lam
        self.phi += lam[:, s.edges[:, 1]] * ctx.x[:, s.edges[:, 0]]
        self.x[:] = 0.0


class FlowBatch:
    """Throughputs, edge flows and inputs for a batch of parameter vectors."""

    def __init__(self, structure: NetworkStructure, x: np.ndarray, edge_phi: np.ndarray, q: np.ndarray):
        self.structure = structure
        self.x = x
        self.q = q
        self.edge_phi = edge_phi
        self.z = edge_phi * x[:, structure.edges[:, 0]] if len(structure.edge_ids) else np.zeros((len(x), 0))

    @classmethod
    def from_theta(cls, structure: NetworkStructure, theta: np.ndarray) -> "FlowBatch":
        layout = structure.layout
        theta = np.atleast_2d(theta)
        phi = layout.edge_values(theta)
        q = layout.inputs(theta)
        x = structure.solver.solve(phi, q)
        return cls(structure, x, phi, q)

    def node_index(self, node: str) -> int:
        try:
            return self.structure.topology.index[node]
        except KeyError:
            raise NotApplicableError(f"unknown node {node!r}") from None

    def edge_index(self, source: str, target: str) -> int:
        k = self.structure.edge_lookup.get((source, target))
        if k is None:
            raise NotApplicableError(f"edge ({source}, {target}) absent from structure {self.structure.code}")
        return k


def evaluate_qoi(spec: QoISpec, structure: NetworkStructure, params: ParameterState) -> float:
    if not spec.applicable(structure):
        raise NotApplicableError(f"{spec} references nodes or edges absent from structure {structure.code}")
    sol = solve_mass_flows(structure, params)
    phi = params.edge_values(structure)
    ctx = FlowBatch(structure, sol.x[None], phi[None], sol.q[None])
    if isinstance(spec, Ratio):
        den = spec.denominator.evaluate_batch(ctx)[0]
        if den == 0:
            raise UndefinedRatioError(f"denominator of {spec} is zero")
    return float(spec.evaluate_batch(ctx)[0])


def edge_list(pairs: Iterable) -> list[tuple[str, str]]:
    return [(str(s), str(t)) for s, t in pairs]
