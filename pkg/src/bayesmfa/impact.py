"""Emission attribution: system impact, demand- and supply-driven intensities.

Intensities are per unit of node throughput.  The technical coefficient
``A_ij = z_ij / x_j`` is the input from ``i`` per unit output of ``j`` and the
terminal demand is the throughput of each terminal node.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, SingularSystemError
from .network import FlowSolution, NetworkStructure, ParameterState, Topology

log = logging.getLogger(__name__)

DELTA = 1e-3
CHUNK = 1000


class ZeroThroughputError(NumericalError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class ImpactModel:
    """Nodal intensities plus the terminal roles used for attribution.

    ``e0`` and ``eq`` feed the supply-driven balance; they default to ``e``
    and zero.
    """

    intensity: Mapping[str, float]
    consumption_nodes: tuple[str, ...]
    loss_node: str | None = None
    e0: Mapping[str, float] | None = None
    eq: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "intensity", {k: float(v) for k, v in dict(self.intensity).items()})
        object.__setattr__(self, "consumption_nodes", tuple(self.consumption_nodes))
        object.__setattr__(self, "eq", {k: float(v) for k, v in dict(self.eq).items()})
        if self.e0 is not None:
            object.__setattr__(self, "e0", {k: float(v) for k, v in dict(self.e0).items()})

    def problems(self, topology: Topology) -> list[str]:
        out = []
        known = set(topology.index)
        for name, table in (("intensity", self.intensity), ("e0", self.e0 or {}), ("eq", self.eq)):
            for node, v in table.items():
                if node not in known:
                    out.append(f"{name} given for undeclared node {node!r}")
                elif not v >= 0:
                    out.append(f"{name} for node {node!r} must be >= 0, got {v}")
        if self.loss_node is not None:
            if self.loss_node not in known:
                out.append(f"loss node {self.loss_node!r} is not declared")
            elif not topology.node(self.loss_node).terminal:
                out.append(f"loss node {self.loss_node!r} is not terminal")
            elif self.intensity.get(self.loss_node, 0.0) != 0.0:
                # losses are charged to consumers through Gamma; the loss node itself is never produced
                out.append(f"loss node {self.loss_node!r} must have zero intensity")
        for c in self.consumption_nodes:
            if c not in known:
                out.append(f"consumption node {c!r} is not declared")
            elif not topology.node(c).terminal:
                out.append(f"consumption node {c!r} is not terminal")
            if c == self.loss_node:
                out.append(f"node {c!r} cannot be both a consumption and the loss node")
        return out

    def validate(self, topology: Topology) -> None:
        problems = self.problems(topology)
        if problems:
            raise ConfigError(problems)

    def vector(self, topology: Topology, which: str = "e") -> np.ndarray:
        table = {"e": self.intensity, "e0": self.e0 if self.e0 is not None else self.intensity, "eq": self.eq}[which]
        return np.array([table.get(n, 0.0) for n in topology.node_ids])

    def consumption_index(self, topology: Topology) -> np.ndarray:
        return np.array([topology.index[c] for c in self.consumption_nodes], dtype=int)

    def loss_index(self, topology: Topology) -> int | None:
        return None if self.loss_node is None else topology.index[self.loss_node]


def system_impact(e: np.ndarray, flows: FlowSolution | np.ndarray) -> float | np.ndarray:
    """``EI = e . x`` for one solution or a stack of throughput vectors."""
    x = flows.x if isinstance(flows, FlowSolution) else np.asarray(flows, dtype=float)
    return x @ np.asarray(e, dtype=float)


@dataclass(frozen=True)
class IoMatrices:
    A: np.ndarray
    L: np.ndarray
    gamma: np.ndarray

    @property
    def Gamma(self) -> np.ndarray:
        return np.diag(self.gamma)


@dataclass(frozen=True)
class DemandVectors:
    F: np.ndarray
    F_cons: np.ndarray
    F_loss: np.ndarray


def _phi_matrix(structure: NetworkStructure, edge_phi: np.ndarray) -> np.ndarray:
    n = structure.n_p
    phi = np.zeros((n, n))
    if len(structure.edge_ids):
        phi[structure.edges[:, 0], structure.edges[:, 1]] = edge_phi
    return phi


def io_matrices(flows: FlowSolution, params: ParameterState, loss_node: str | None = None) -> IoMatrices:
    s = flows.structure
    phi = _phi_matrix(s, params.edge_values(s))
    x = flows.x
    incident = np.zeros(s.n_p, dtype=bool)
    if len(s.edge_ids):
        incident[s.edges[:, 0]] = True
        incident[s.edges[:, 1]] = True
    bad = np.flatnonzero(incident & (x <= 0))
    if len(bad):
        node = s.topology.node_ids[bad[0]]
        raise ZeroThroughputError(f"throughput of node {node!r} is zero; technical coefficients undefined", node=node)
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(phi > 0, phi * x[:, None] / np.where(x > 0, x, 1.0)[None, :], 0.0)
    n = s.n_p
    try:
        L = np.linalg.inv(np.eye(n) - A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("I - A is singular") from exc
    gamma = np.zeros(n)
    if loss_node is not None:
        gamma = phi[:, s.topology.index[loss_node]].copy()
    return IoMatrices(A, L, gamma)


def demand_vectors(flows: FlowSolution, model: ImpactModel) -> DemandVectors:
    topo = flows.structure.topology
    x = flows.x
    F = np.zeros(len(x))
    for k, node in enumerate(topo.nodes):
        if node.terminal:
            F[k] = x[k]
    cons = np.zeros(len(x))
    cidx = model.consumption_index(topo)
    cons[cidx] = F[cidx]
    loss = np.zeros(len(x))
    if model.loss_node is not None:
        phi = _phi_matrix(flows.structure, flows.edge_flows / np.where(x > 0, x, 1.0)[flows.structure.edges[:, 0]])
        loss = phi[:, topo.index[model.loss_node]] * x
    return DemandVectors(F, cons, loss)


def consumption_eii(e: np.ndarray, io: IoMatrices, i: int) -> float:
    """Demand-driven intensity ``e . L[:, i]``."""
    return float(np.asarray(e, dtype=float) @ io.L[:, i])


def supply_driven_eii(phi: np.ndarray, x: np.ndarray, e0: np.ndarray, eq: np.ndarray, q: np.ndarray, i: int) -> float:
    """Intensity at node ``i`` from the emission balance ``EI = Phi^T EI + e0 x + eq q``."""
    x = np.asarray(x, dtype=float)
    if not x[i] > 0:
        raise ZeroThroughputError(f"throughput of node index {i} is zero")
    n = len(x)
    src = np.asarray(e0, dtype=float) * x + np.asarray(eq, dtype=float) * np.asarray(q, dtype=float)
    try:
        ei = np.linalg.solve(np.eye(n) - np.asarray(phi).T, src)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError("I - Phi^T is singular") from exc
    return float(ei[i] / x[i])


def rectified_flows(io: IoMatrices, f_cons: np.ndarray) -> np.ndarray:
    """Throughputs ``(I - L Gamma)^-1 L F_cons`` with fixed yield-loss fractions."""
    n = len(f_cons)
    m = np.eye(n) - io.L * io.gamma[None, :]
    if np.linalg.cond(m) > 1e12:
        raise SingularSystemError("loss-feedback system I - L Gamma is singular; some node's output reaches only "
                                  "the loss node")
    return np.linalg.solve(m, io.L @ f_cons)


def fixed_point_residual(io: IoMatrices, x_new: np.ndarray, f_cons_new: np.ndarray) -> float:
    """Largest residual of the loss-feedback equations, relative to ``max(1, |x|)``."""
    f_loss = io.gamma * x_new
    f_new = f_cons_new + f_loss
    r = x_new - io.L @ f_new
    return float(np.max(np.abs(r)) / max(1.0, np.max(np.abs(x_new)))) if len(r) else 0.0


def rectified_eii(e: np.ndarray, io: IoMatrices, f_cons_base: np.ndarray, i: int, delta: float = DELTA,
                  check: bool = True) -> float:
    """Change in system impact per unit reduction of consumption at ``i``.

    With ``check`` the value is recomputed at ``10 * delta``; a relative
    difference above 1e-9 raises, since the system is linear in demand.
    """
    e = np.asarray(e, dtype=float)
    f_cons_base = np.asarray(f_cons_base, dtype=float)
    ei_base = e @ rectified_flows(io, f_cons_base)

    def at(d):
        f_new = f_cons_base.copy()
        f_new[i] -= d
        return (ei_base - e @ rectified_flows(io, f_new)) / d

    value = at(delta)
    if check:
        other = at(10 * delta)
        if abs(other - value) > 1e-9 * max(abs(value), 1e-12):
            raise NumericalError(f"rectified intensity depends on the perturbation size: {value!r} vs {other!r}")
    return float(value)


# --- batched evaluation over posterior samples -------------------------------


@dataclass
class ImpactSamples:
    """Per-sample total impact and rectified intensities at consumption nodes."""

    total: np.ndarray
    eii: np.ndarray
    consumption_nodes: tuple[str, ...]
    valid: np.ndarray

    @property
    def skip_rate(self) -> float:
        return float(1.0 - self.valid.mean()) if len(self.valid) else 0.0


def batch_impact(structure: NetworkStructure, edge_phi: np.ndarray, x: np.ndarray, model: ImpactModel,
                 chunk: int = CHUNK) -> ImpactSamples:
    """Total impact and rectified intensities for every sample.

    Uses ``(I - L Gamma)^-1 L = (I - A - Gamma)^-1`` so that each sample needs
    a single linear solve.  Samples with zero throughput at a node that has
    incident edges are marked invalid and their intensities set to nan.
    """
    topo = structure.topology
    edge_phi = np.atleast_2d(edge_phi)
    x = np.atleast_2d(x)
    nb, n = x.shape
    e = model.vector(topo)
    cidx = model.consumption_index(topo)
    lidx = model.loss_index(topo)
    total = x @ e
    eii = np.full((nb, len(cidx)), np.nan)
    incident = np.zeros(n, dtype=bool)
    if len(structure.edge_ids):
        incident[structure.edges[:, 0]] = True
        incident[structure.edges[:, 1]] = True
    valid = ~np.any((x <= 0) & incident[None, :], axis=1)
    src, dst = (structure.edges[:, 0], structure.edges[:, 1]) if len(structure.edge_ids) else (np.zeros(0, int),) * 2
    loss_edges = np.flatnonzero(dst == lidx) if lidx is not None else np.zeros(0, int)
    for start in range(0, nb, chunk):
        rows = np.arange(start, min(start + chunk, nb))
        rows = rows[valid[rows]]
        if not len(rows):
            continue
        xs = x[rows]
        ph = edge_phi[rows]
        m = np.repeat(np.eye(n)[None], len(rows), axis=0)
        # A_ij = phi_ij x_i / x_j
        a = ph * xs[:, src] / xs[:, dst]
        m[:, src, dst] -= a
        if len(loss_edges):
            m[:, src[loss_edges], src[loss_edges]] -= ph[:, loss_edges]
        # r^T = e^T M^-1  <=>  M^T r = e
        rhs = np.broadcast_to(e, (len(rows), n))[:, :, None]
        with np.errstate(all="ignore"):
            try:
                r = np.linalg.solve(np.transpose(m, (0, 2, 1)), rhs)[:, :, 0]
            except np.linalg.LinAlgError:
                r = np.full((len(rows), n), np.nan)
                for k in range(len(rows)):
                    try:
                        r[k] = np.linalg.solve(m[k].T, e)
                    except np.linalg.LinAlgError:
                        valid[rows[k]] = False
        eii[rows] = r[:, cidx]
    eii[~valid] = np.nan
    skipped = int((~valid).sum())
    if skipped:
        log.warning("skipped %d of %d samples with zero throughput at a connected node", skipped, nb)
    return ImpactSamples(total, eii, model.consumption_nodes, valid)


def impact_from_theta(structure: NetworkStructure, theta: np.ndarray, model: ImpactModel,
                      chunk: int = CHUNK) -> ImpactSamples:
    layout = structure.layout
    theta = np.atleast_2d(theta)
    totals, eiis, valids = [], [], []
    for start in range(0, theta.shape[0], chunk):
        t = theta[start:start + chunk]
        phi = layout.edge_values(t)
        x = structure.solver.solve(phi, layout.inputs(t))
        res = batch_impact(structure, phi, x, model, chunk)
        totals.append(res.total)
        eiis.append(res.eii)
        valids.append(res.valid)
    if not totals:
        k = len(model.consumption_nodes)
        return ImpactSamples(np.zeros(0), np.zeros((0, k)), model.consumption_nodes, np.zeros(0, bool))
    return ImpactSamples(np.concatenate(totals), np.vstack(eiis), model.consumption_nodes, np.concatenate(valids))


def attribution_balance(eii: Sequence[float], f_cons: Sequence[float]) -> float:
    """``sum_i EII_i F_cons,i``; equals the loss-free system impact."""
    return float(np.dot(eii, f_cons))
