"""Parameter priors and the network-structure prior.

Allocation fractions leaving a node get a Dirichlet prior aligned with the
node's out-edges under the full structure (every targeted connection
present); external inputs get normal priors truncated below at zero.  A
candidate structure drops the concentration entries of its absent targeted
edges and keeps the rest unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri, xlogy

from .errors import ConfigError, StructureError
from .network import NetworkStructure, ParameterState, StructureCode, Topology

log = logging.getLogger(__name__)

LOG_ZERO = -np.inf
_SIMPLEX_SUM_TOL = 1e-9


@dataclass(frozen=True)
class DirichletSpec:
    node_id: str
    targets: tuple[str, ...]
    concentration: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "concentration", tuple(float(a) for a in self.concentration))
        if len(self.targets) != len(self.concentration):
            raise ConfigError(f"Dirichlet for {self.node_id!r}: {len(self.targets)} targets but "
                              f"{len(self.concentration)} concentrations")
        if any(not a > 0 for a in self.concentration):
            raise ConfigError(f"Dirichlet for {self.node_id!r}: concentrations must be > 0")


@dataclass(frozen=True)
class TruncNormalSpec:
    node_id: str
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ConfigError(f"truncated normal for {self.node_id!r}: sd must be > 0")
        if self.mean < 0:
            raise ConfigError(f"truncated normal for {self.node_id!r}: mean must be >= 0")


@dataclass(frozen=True)
class ConnectionBelief:
    index: int
    p_exist: float

    def __post_init__(self):
        if not 0.0 < self.p_exist < 1.0:
            raise ConfigError(
                f"belief for targeted connection {self.index + 1} is {self.p_exist}; it must lie strictly "
                "inside (0, 1) -- move a certain connection into the baseline edges (p=1) or drop it (p=0)"
            )


@dataclass(frozen=True)
class PriorBundle:
    dirichlet: Mapping[str, DirichletSpec]
    trunc_normal: Mapping[str, TruncNormalSpec]
    beliefs: tuple[ConnectionBelief, ...] = ()
    structure_prior_overrides: Mapping[str, float] | None = None
    defaults_applied: tuple[str, ...] = field(default=(), compare=False)

    def coverage_problems(self, topology: Topology) -> list[str]:
        out = []
        for n in topology.nodes:
            full = topology.out_edges_full(n.id)
            if len(full) == 0:
                continue
            spec = self.dirichlet.get(n.id)
            if spec is None:
                out.append(f"no Dirichlet prior for node {n.id!r}")
            elif tuple(spec.targets) != tuple(full):
                out.append(f"Dirichlet for {n.id!r} covers {list(spec.targets)}, out-edges are {full}")
        for q in topology.external_input_nodes:
            if q not in self.trunc_normal:
                out.append(f"no truncated-normal prior for external input {q!r}")
        if len(self.beliefs) != topology.n_l:
            out.append(f"{len(self.beliefs)} connection beliefs for {topology.n_l} targeted connections")
        return out


def build_prior_bundle(
    topology: Topology,
    dirichlet: Mapping[str, Mapping[str, float]] | None = None,
    trunc_normal: Mapping[str, tuple[float, float]] | None = None,
    beliefs: Sequence[float] = (),
    input_records: Mapping[str, float] | None = None,
    structure_prior_overrides: Mapping[str, float] | None = None,
) -> PriorBundle:
    """Assemble a bundle, filling gaps with the non-informative defaults.

    Nodes without a Dirichlet spec get ``Dir(1, ..., 1)``.  Inputs without a
    spec get ``TruncNormal(mu=y, s=0.5 y)`` where ``y`` is the input's data
    record value from ``input_records``.
    """
    dirichlet = dict(dirichlet or {})
    trunc_normal = dict(trunc_normal or {})
    input_records = dict(input_records or {})
    problems: list[str] = []
    applied: list[str] = []
    dspecs: dict[str, DirichletSpec] = {}
    for n in topology.nodes:
        full = topology.out_edges_full(n.id)
        if not full:
            if n.id in dirichlet:
                problems.append(f"Dirichlet given for node {n.id!r} which has no out-edges")
            continue
        given = dirichlet.pop(n.id, None)
        if given is None:
            dspecs[n.id] = DirichletSpec(n.id, tuple(full), (1.0,) * len(full))
            if len(full) > 1:
                applied.append(f"Dir(1,...,1) on {n.id}")
            continue
        unknown = set(given) - set(full)
        if unknown:
            problems.append(f"Dirichlet for {n.id!r} names targets {sorted(unknown)} that are not out-edges")
        missing = [t for t in full if t not in given]
        if missing:
            problems.append(f"Dirichlet for {n.id!r} lacks concentrations for {missing}")
            continue
        try:
            dspecs[n.id] = DirichletSpec(n.id, tuple(full), tuple(given[t] for t in full))
        except ConfigError as exc:
            problems.extend(exc.violations)
    for node in dirichlet:
        problems.append(f"Dirichlet given for unknown node {node!r}")
    tspecs: dict[str, TruncNormalSpec] = {}
    for q in topology.external_input_nodes:
        if q in trunc_normal:
            mu, sd = trunc_normal.pop(q)
        elif q in input_records:
            mu = float(input_records[q])
            sd = 0.5 * mu
            applied.append(f"TruncNormal({mu:g}, {sd:g}) on input {q}")
        else:
            problems.append(f"external input {q!r} has neither a prior nor a data record to default from")
            continue
        try:
            tspecs[q] = TruncNormalSpec(q, float(mu), float(sd))
        except ConfigError as exc:
            problems.extend(exc.violations)
    for node in trunc_normal:
        problems.append(f"truncated-normal prior given for {node!r}, which is not an external input")
    bel = []
    if len(beliefs) != topology.n_l:
        problems.append(f"{len(beliefs)} connection beliefs for {topology.n_l} targeted connections")
    for k, p in enumerate(beliefs):
        try:
            bel.append(ConnectionBelief(k, float(p)))
        except ConfigError as exc:
            problems.extend(exc.violations)
    if structure_prior_overrides is not None:
        problems.extend(_override_problems(topology, structure_prior_overrides))
    if problems:
        raise ConfigError(problems)
    for msg in applied:
        log.info("default prior: %s", msg)
    return PriorBundle(dspecs, tspecs, tuple(bel),
                       dict(structure_prior_overrides) if structure_prior_overrides is not None else None,
                       tuple(applied))


def _override_problems(topology: Topology, overrides: Mapping[str, float]) -> list[str]:
    out = []
    n = topology.n_l
    codes = {format(k, f"0{n}b") if n else "" for k in range(2**n)}
    if set(overrides) != codes:
        out.append(f"structure prior overrides must list every code exactly once ({len(codes)} codes)")
    vals = list(overrides.values())
    if any(v < 0 for v in vals):
        out.append("structure prior overrides must be nonnegative")
    if abs(sum(vals) - 1.0) > 1e-9:
        out.append(f"structure prior overrides sum to {sum(vals)!r}, not 1")
    return out


class RestrictedPrior:
    """Prior of one candidate structure, aligned with its parameter layout."""

    def __init__(self, structure: NetworkStructure, alphas: list[np.ndarray], means: np.ndarray, sds: np.ndarray):
        self.structure = structure
        self.layout = structure.layout
        self.alphas = alphas
        self.means = np.asarray(means, dtype=float)
        self.sds = np.asarray(sds, dtype=float)
        self._lognorm = [gammaln(a.sum()) - gammaln(a).sum() for a in alphas]
        self._tn_lognorm = -np.log(self.sds) - 0.5 * np.log(2 * np.pi) - log_ndtr(self.means / self.sds)

    def dirichlet_for(self, node: str) -> np.ndarray | None:
        try:
            k = self.layout.simplex_nodes.index(node)
        except ValueError:
            return None
        return self.alphas[k]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Prior draws as flat parameter vectors, shape ``(size, P)``."""
        theta = np.empty((size, self.layout.size))
        for a, sl in zip(self.alphas, self.layout.simplex_slices):
            g = rng.standard_gamma(a, size=(size, len(a)))
            theta[:, sl] = g / g.sum(axis=1, keepdims=True)
        if len(self.means):
            theta[:, self.layout.input_slice] = sample_trunc_normal(rng, self.means, self.sds, size)
        return theta

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        out = np.zeros(theta.shape[0])
        for a, sl, c in zip(self.alphas, self.layout.simplex_slices, self._lognorm):
            phi = theta[:, sl]
            bad = np.any(phi < 0, axis=1) | (np.abs(phi.sum(axis=1) - 1.0) > _SIMPLEX_SUM_TOL)
            with np.errstate(divide="ignore", invalid="ignore"):
                val = c + xlogy(a - 1.0, np.where(phi < 0, 0.0, phi)).sum(axis=1)
            out += np.where(bad, LOG_ZERO, val)
        if len(self.means):
            q = theta[:, self.layout.input_slice]
            z = (q - self.means) / self.sds
            val = (self._tn_lognorm - 0.5 * z**2).sum(axis=1)
            out += np.where(np.any(q < 0, axis=1), LOG_ZERO, val)
        out[np.isnan(out)] = LOG_ZERO
        return out

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        """Gradient of the log density in the interior of the support."""
        theta = np.atleast_2d(theta)
        g = np.zeros_like(theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            for a, sl in zip(self.alphas, self.layout.simplex_slices):
                g[:, sl] = (a - 1.0) / theta[:, sl]
        if len(self.means):
            sl = self.layout.input_slice
            g[:, sl] = -(theta[:, sl] - self.means) / self.sds**2
        return g


def sample_trunc_normal(rng: np.random.Generator, mean, sd, size: int) -> np.ndarray:
    """Normal draws truncated below at 0, by rejection with an inverse-CDF fallback."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    sd = np.atleast_1d(np.asarray(sd, dtype=float))
    out = np.empty((size, len(mean)))
    accept = ndtr(mean / sd)
    for k in range(len(mean)):
        if accept[k] < 0.1:
            lo = ndtr(-mean[k] / sd[k])
            u = rng.uniform(lo, 1.0, size=size)
            out[:, k] = np.maximum(mean[k] + sd[k] * ndtri(u), 0.0)
            continue
        filled = 0
        col = np.empty(size)
        while filled < size:
            need = size - filled
            draw = mean[k] + sd[k] * rng.standard_normal(int(need / accept[k]) + 8)
            draw = draw[draw >= 0][:need]
            col[filled:filled + len(draw)] = draw
            filled += len(draw)
        out[:, k] = col
    return out


def restrict_to_structure(bundle: PriorBundle, structure: NetworkStructure) -> RestrictedPrior:
    """Drop concentrations of absent targeted edges; keep the rest in order."""
    topo = structure.topology
    alphas = []
    for node in structure.layout.simplex_nodes:
        spec = bundle.dirichlet.get(node)
        if spec is None:
            raise StructureError(f"prior bundle has no Dirichlet for node {node!r}")
        present = structure.out_targets(node)
        conc = dict(zip(spec.targets, spec.concentration))
        missing = [t for t in present if t not in conc]
        if missing:
            raise StructureError(f"Dirichlet for {node!r} does not cover out-edges {missing}")
        alpha = np.array([conc[t] for t in present])
        if alpha.size == 0:
            raise StructureError(f"restriction left node {node!r} with an empty concentration vector")
        alphas.append(alpha)
    for n in topo.nodes:
        if structure.out_degree(n.id) >= 1 and n.id not in bundle.dirichlet:
            raise StructureError(f"prior bundle has no Dirichlet for node {n.id!r}")
    means, sds = [], []
    for q in structure.layout.input_nodes:
        spec = bundle.trunc_normal.get(q)
        if spec is None:
            raise StructureError(f"prior bundle has no truncated normal for input {q!r}")
        means.append(spec.mean)
        sds.append(spec.sd)
    return RestrictedPrior(structure, alphas, np.array(means), np.array(sds))


def sample_parameters(prior: RestrictedPrior, rng: np.random.Generator) -> ParameterState:
    return prior.layout.unpack(prior.sample(rng, 1)[0])


def log_prior_density(prior: RestrictedPrior, params: ParameterState) -> float:
    """Log prior density; the log-zero sentinel off the support."""
    theta = prior.layout.pack(params)
    # single-edge nodes carry the constant 1; anything else is off the support
    for node, vec in params.allocation.items():
        if len(vec) == 1 and vec[0] != 1.0:
            return LOG_ZERO
    return float(prior.log_density(theta[None])[0])


def structure_prior(beliefs: Sequence[ConnectionBelief | float], code: StructureCode | str) -> float:
    """Product of independent connection-existence probabilities."""
    if isinstance(code, str):
        code = StructureCode.parse(code)
    ps = [b.p_exist if isinstance(b, ConnectionBelief) else float(b) for b in beliefs]
    if len(ps) != len(code):
        raise ValueError(f"{len(ps)} beliefs for a {len(code)}-bit code")
    out = 1.0
    for p, d in zip(ps, code.bits):
        out *= p if d else 1.0 - p
    return out


def structure_priors(bundle: PriorBundle, codes: Sequence[StructureCode | str]) -> dict[str, float]:
    """Prior probability per code, honouring config overrides."""
    if bundle.structure_prior_overrides is not None:
        return {str(c): float(bundle.structure_prior_overrides[str(c)]) for c in codes}
    return {str(c): structure_prior(bundle.beliefs, c) for c in codes}
