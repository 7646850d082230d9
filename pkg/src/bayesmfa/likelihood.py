"""Observation records and the relative-noise likelihood.

Each record observes a model quantity ``G_k`` through ``y_k = G_k (1 + eps_k)``
with ``eps_k ~ N(0, sigma_k^2)``.  A record that references an edge missing
from a candidate structure is either left out of that structure's likelihood
(``exclude``) or, under ``compact_support``, contributes a constant uniform
density over fixed bounds while its applicable counterpart uses a normal
density truncated to the same bounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import ConfigError, PredictionError
from .network import (
    FlowBatch,
    FlowGradient,
    NetworkStructure,
    ParameterState,
    QoISpec,
    Ratio,
    Topology,
    solve_mass_flows,
)
from .priors import LOG_ZERO

RECORD_TYPES = ("External Input", "Flow", "Ratio", "Sum")


def _pdf(z):
    return np.exp(-0.5 * z**2) / np.sqrt(2 * np.pi)

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class DataRecord:
    record_id: str
    qoi: QoISpec
    value: float
    sigma: float = 0.10
    source: str = ""
    kind: str = "Flow"
    description: str = ""

    def problems(self) -> list[str]:
        out = []
        if not self.value >= 0:
            out.append(f"record {self.record_id}: value {self.value} must be >= 0")
        if not self.sigma > 0:
            out.append(f"record {self.record_id}: sigma {self.sigma} must be > 0")
        if self.kind == "Ratio" and not 0 <= self.value <= 1:
            out.append(f"record {self.record_id}: ratio value {self.value} outside [0, 1]")
        if self.kind not in RECORD_TYPES:
            out.append(f"record {self.record_id}: unknown type {self.kind!r}")
        return out


@dataclass(frozen=True)
class Dataset:
    records: tuple[DataRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.record_id for r in self.records]
        problems = [p for r in self.records for p in r.problems()]
        if len(set(ids)) != len(ids):
            problems.append("duplicate record ids")
        if problems:
            raise ConfigError(problems)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def applicability(self, structure: NetworkStructure) -> np.ndarray:
        return np.array([r.qoi.applicable(structure) for r in self.records], dtype=bool)

    def applicable_ids(self, structure: NetworkStructure) -> list[str]:
        mask = self.applicability(structure)
        return [r.record_id for r, m in zip(self.records, mask) if m]

    def without(self, record_ids: Sequence[str]) -> "Dataset":
        drop = set(record_ids)
        return Dataset(tuple(r for r in self.records if r.record_id not in drop))

    def targeted_records(self, topology: Topology) -> list[str]:
        """Records touching any targeted connection."""
        targeted = set(topology.targeted_connections)
        return [r.record_id for r in self.records if r.qoi.references()[1] & targeted]


@dataclass(frozen=True)
class MissingRecordPolicy:
    mode: str = "exclude"
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("exclude", "compact_support"):
            raise ConfigError(f"unknown missing-record policy {self.mode!r}")
        object.__setattr__(self, "bounds", {k: (float(a), float(b)) for k, (a, b) in dict(self.bounds).items()})
        bad = [k for k, (a, b) in self.bounds.items() if not a < b]
        if bad:
            raise ConfigError([f"bounds for record {k} need b_l < b_u" for k in bad])

    def problems(self, dataset: Dataset, topology: Topology) -> list[str]:
        if self.mode != "compact_support":
            return []
        out = []
        for rid in dataset.targeted_records(topology):
            if rid not in self.bounds:
                out.append(f"compact_support policy needs bounds for record {rid}")
        for r in dataset:
            if r.record_id in self.bounds:
                lo, hi = self.bounds[r.record_id]
                if not lo <= r.value <= hi:
                    out.append(f"record {r.record_id} value {r.value} outside its bounds [{lo}, {hi}]")
        return out


class LikelihoodModel:
    """Likelihood of one dataset under one candidate structure, vectorized."""

    def __init__(self, structure: NetworkStructure, dataset: Dataset, policy: MissingRecordPolicy | None = None):
        policy = policy or MissingRecordPolicy()
        problems = policy.problems(dataset, structure.topology)
        if problems:
            raise ConfigError(problems)
        self.structure = structure
        self.dataset = dataset
        self.policy = policy
        mask = dataset.applicability(structure)
        self.applicable = [r for r, m in zip(dataset.records, mask) if m]
        self.inapplicable = [r for r, m in zip(dataset.records, mask) if not m]
        self.y = np.array([r.value for r in self.applicable])
        self.sigma = np.array([r.sigma for r in self.applicable])
        compact = policy.mode == "compact_support"
        self.bounded = np.array([compact and r.record_id in policy.bounds for r in self.applicable], dtype=bool)
        lo = np.zeros(len(self.applicable))
        hi = np.ones(len(self.applicable))
        for k, r in enumerate(self.applicable):
            if self.bounded[k]:
                lo[k], hi[k] = policy.bounds[r.record_id]
        self.lo, self.hi = lo, hi
        self.constant = 0.0
        if compact:
            for r in self.inapplicable:
                a, b = policy.bounds[r.record_id]
                self.constant -= np.log(b - a)

    @property
    def record_ids(self) -> list[str]:
        return [r.record_id for r in self.applicable]

    def predict(self, batch: FlowBatch) -> np.ndarray:
        if not self.applicable:
            return np.zeros((batch.x.shape[0], 0))
        return np.stack([r.qoi.evaluate_batch(batch) for r in self.applicable], axis=1)

    def from_predictions(self, g: np.ndarray) -> np.ndarray:
        g = np.atleast_2d(g)
        if g.shape[1] == 0:
            return np.full(g.shape[0], self.constant)
        ok = np.all(np.isfinite(g) & (g > 0), axis=1)
        gs = np.where(g > 0, g, 1.0)
        with np.errstate(all="ignore"):
            r = (self.y / gs - 1.0) / self.sigma
            terms = -_LOG_SQRT_2PI - np.log(self.sigma) - 0.5 * r**2
            if self.bounded.any():
                b = self.bounded
                s = self.sigma[b] * gs[:, b]
                mass = ndtr((self.hi[b] - gs[:, b]) / s) - ndtr((self.lo[b] - gs[:, b]) / s)
                # upper tail form keeps precision when the window sits far out
                alt = np.exp(log_ndtr((gs[:, b] - self.lo[b]) / s)) - np.exp(log_ndtr((gs[:, b] - self.hi[b]) / s))
                mass = np.maximum(mass, alt)
                terms[:, b] = -_LOG_SQRT_2PI - np.log(s) - 0.5 * r[:, b] ** 2 - np.log(mass)
            total = terms.sum(axis=1) + self.constant
        total = np.where(ok & np.isfinite(total), total, LOG_ZERO)
        return total

    def log_likelihood_theta(self, theta: np.ndarray) -> np.ndarray:
        batch = FlowBatch.from_theta(self.structure, theta)
        return self.from_predictions(self.predict(batch))

    def value_and_grad_theta(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Log-likelihood and its gradient with respect to the flat parameters."""
        theta = np.atleast_2d(theta)
        s = self.structure
        batch = FlowBatch.from_theta(s, theta)
        g = self.predict(batch)
        ll = self.from_predictions(g)
        grads = FlowGradient(len(theta), s.n_p, len(s.edge_ids))
        if self.applicable:
            with np.errstate(all="ignore"):
                gs = np.where(g > 0, g, 1.0)
                r = (self.y / gs - 1.0) / self.sigma
                dg = r * self.y / (self.sigma * gs**2)
                if self.bounded.any():
                    b = self.bounded
                    sig = self.sigma[b]
                    hi = (self.hi[b] / gs[:, b] - 1.0) / sig
                    lo = (self.lo[b] / gs[:, b] - 1.0) / sig
                    mass = ndtr(hi) - ndtr(lo)
                    dmass = _pdf(hi) * (-self.hi[b] / (sig * gs[:, b] ** 2)) - _pdf(lo) * (-self.lo[b] / (sig * gs[:, b] ** 2))
                    dg[:, b] += -1.0 / gs[:, b] - dmass / mass
            for k, rec in enumerate(self.applicable):
                rec.qoi.backprop(batch, dg[:, k], grads)
            grads.through_balance(batch)
        layout = s.layout
        gt = np.zeros_like(theta)
        free = layout.edge_col >= 0
        gt[:, layout.edge_col[free]] = grads.phi[:, free]
        gt[:, layout.input_slice] = grads.q[:, layout.input_index]
        gt[ll <= LOG_ZERO] = 0.0
        return ll, np.nan_to_num(gt, nan=0.0, posinf=0.0, neginf=0.0)


def predict_observables(structure: NetworkStructure, params: ParameterState, dataset: Dataset) -> np.ndarray:
    """Model counterparts of the applicable records, in dataset order."""
    sol = solve_mass_flows(structure, params)
    phi = params.edge_values(structure)
    batch = FlowBatch(structure, sol.x[None], phi[None], sol.q[None])
    out = []
    for r, m in zip(dataset.records, dataset.applicability(structure)):
        if not m:
            continue
        if isinstance(r.qoi, Ratio) and r.qoi.denominator.evaluate_batch(batch)[0] == 0:
            raise PredictionError(f"record {r.record_id}: ratio denominator is zero", record_id=r.record_id)
        out.append(float(r.qoi.evaluate_batch(batch)[0]))
    return np.array(out)


def log_likelihood(
    structure: NetworkStructure,
    params: ParameterState,
    dataset: Dataset,
    policy: MissingRecordPolicy | None = None,
) -> float:
    model = LikelihoodModel(structure, dataset, policy)
    sol = solve_mass_flows(structure, params)
    phi = params.edge_values(structure)
    batch = FlowBatch(structure, sol.x[None], phi[None], sol.q[None])
    with np.errstate(all="ignore"):
        g = model.predict(batch)
    return float(model.from_predictions(g)[0])


def asymmetric_records(dataset: Dataset, structures: Sequence[NetworkStructure]) -> list[str]:
    """Records that enter the likelihood of some structures but not others."""
    if not structures:
        return []
    masks = np.array([dataset.applicability(s) for s in structures])
    varying = masks.any(axis=0) & ~masks.all(axis=0)
    return [r.record_id for r, v in zip(dataset.records, varying) if v]
