"""Structure posteriors, posterior ratios and model-averaged predictives."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, MFAError, NumericalError, UndefinedRatioError
from .network import FlowBatch, NetworkStructure, QoISpec

log = logging.getLogger(__name__)

JEFFREYS_BANDS = (
    (0.5, "Non-substantial"),
    (1.0, "Substantial"),
    (1.5, "Strong"),
    (2.0, "Very strong"),
    (math.inf, "Decisive"),
)
POOLING_THRESHOLD = 1e-6


class NoExplainingModelError(NumericalError):
    pass


class IncompleteEnsembleError(MFAError):
    pass


@dataclass(frozen=True)
class EvidenceTable:
    codes: tuple[str, ...]
    log_evidence: tuple[float, ...]
    prior: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(str(c) for c in self.codes))
        object.__setattr__(self, "log_evidence", tuple(float(v) for v in self.log_evidence))
        object.__setattr__(self, "prior", tuple(float(v) for v in self.prior))
        problems = []
        if not (len(self.codes) == len(self.log_evidence) == len(self.prior)):
            problems.append("evidence table columns differ in length")
        if len(set(self.codes)) != len(self.codes):
            problems.append("structure codes in the evidence table are not unique")
        if abs(sum(self.prior) - 1.0) > 1e-12:
            problems.append(f"structure priors sum to {sum(self.prior)!r}, not 1")
        if any(p < 0 for p in self.prior):
            problems.append("structure priors must be nonnegative")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[str, float, float]]) -> "EvidenceTable":
        codes, ev, pr = zip(*rows) if rows else ((), (), ())
        return cls(codes, ev, pr)

    def row(self, code: str) -> tuple[float, float]:
        k = self.codes.index(str(code))
        return self.log_evidence[k], self.prior[k]


@dataclass(frozen=True)
class StructurePosterior:
    probabilities: Mapping[str, float]

    def __getitem__(self, code: str) -> float:
        return self.probabilities[str(code)]

    @property
    def codes(self) -> list[str]:
        return list(self.probabilities)

    def argmax(self) -> str:
        return max(self.probabilities, key=lambda c: (self.probabilities[c], c))


def structure_posterior(table: EvidenceTable) -> StructurePosterior:
    ev = np.array(table.log_evidence)
    with np.errstate(divide="ignore"):
        logp = ev + np.log(np.array(table.prior))
    if not np.any(np.isfinite(logp)):
        raise NoExplainingModelError("every structure has zero evidence (or zero prior)")
    post = np.exp(logp - logsumexp(logp))
    return StructurePosterior({c: float(p) for c, p in zip(table.codes, post)})


def jeffreys_label(log10_pr: float) -> str:
    """Jeffreys-scale wording for the strength of ``|log10 PR|``."""
    x = abs(log10_pr)
    for upper, label in JEFFREYS_BANDS:
        if x <= upper:
            return label
    return "Decisive"


def posterior_ratio(source: EvidenceTable | StructurePosterior, m: str, n: str) -> tuple[float, str]:
    """``log10 PR_mn`` and its Jeffreys label.

    Negative values are labelled by the strength of the reverse comparison,
    i.e. the evidence in favour of ``n``.
    """
    m, n = str(m), str(n)
    if m == n:
        return 0.0, jeffreys_label(0.0)
    if isinstance(source, EvidenceTable):
        lm, pm = source.row(m)
        ln, pn = source.row(n)
        if pn == 0:
            raise UndefinedRatioError(f"prior of structure {n} is zero")
        if pm == 0:
            return -math.inf, "Decisive"
        value = (lm - ln) / math.log(10) + math.log10(pm) - math.log10(pn)
    else:
        pm, pn = source[m], source[n]
        if pn == 0:
            raise UndefinedRatioError(f"posterior of structure {n} is zero")
        value = -math.inf if pm == 0 else math.log10(pm) - math.log10(pn)
    return value, jeffreys_label(value)


def bayes_factor_log10(table: EvidenceTable, m: str, n: str) -> float:
    lm, _ = table.row(m)
    ln, _ = table.row(n)
    return (lm - ln) / math.log(10)


@dataclass(frozen=True)
class RatioReport:
    codes: tuple[str, ...]
    log10_pr: np.ndarray
    log10_bf: np.ndarray
    labels: tuple[tuple[str, ...], ...]

    def rows(self):
        for a, m in enumerate(self.codes):
            for b, n in enumerate(self.codes):
                v = self.log10_pr[a, b]
                favours = m if v > 0 else (n if v < 0 else "")
                yield m, n, v, self.log10_bf[a, b], self.labels[a][b], favours


def ratio_report(table: EvidenceTable) -> RatioReport:
    codes = table.codes
    k = len(codes)
    pr = np.zeros((k, k))
    bf = np.zeros((k, k))
    labels = []
    for a in range(k):
        row = []
        for b in range(k):
            if a == b:
                row.append(jeffreys_label(0.0))
                continue
            v, lab = posterior_ratio(table, codes[a], codes[b])
            pr[a, b] = v
            bf[a, b] = bayes_factor_log10(table, codes[a], codes[b])
            row.append(lab)
        labels.append(tuple(row))
    # enforce exact antisymmetry against rounding in the two directions
    pr = 0.5 * (pr - pr.T)
    bf = 0.5 * (bf - bf.T)
    return RatioReport(codes, pr, bf, tuple(labels))


# --- model averaging ----------------------------------------------------------


@dataclass
class AveragedPredictive:
    qoi_names: list[str]
    codes: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    structure_weights: dict[str, float]

    def mean(self) -> np.ndarray:
        return self.weights @ self.values

    def sd(self) -> np.ndarray:
        mu = self.mean()
        return np.sqrt(np.maximum(self.weights @ (self.values - mu) ** 2, 0.0))

    def quantile(self, q: float) -> np.ndarray:
        from .decision import weighted_quantile

        return np.array([weighted_quantile(self.values[:, k], self.weights, q) for k in range(self.values.shape[1])])

    def summary(self, quantiles=(0.05, 0.5, 0.95)) -> list[dict]:
        mu, sd = self.mean(), self.sd()
        qs = {q: self.quantile(q) for q in quantiles}
        out = []
        for k, name in enumerate(self.qoi_names):
            row = {"qoi": name, "mean": float(mu[k]), "sd": float(sd[k])}
            for q in quantiles:
                row[f"q{int(round(q * 100)):02d}"] = float(qs[q][k])
            out.append(row)
        return out


def qoi_values(structure: NetworkStructure, theta: np.ndarray, qois: Sequence[QoISpec]) -> np.ndarray:
    """QoI samples for one structure; inapplicable QoIs are zero flow."""
    batch = FlowBatch.from_theta(structure, theta)
    out = np.zeros((batch.x.shape[0], len(qois)))
    for k, q in enumerate(qois):
        if q.applicable(structure):
            out[:, k] = q.evaluate_batch(batch)
    return out


def model_average(
    ensembles: Mapping[str, tuple[np.ndarray, np.ndarray]],
    posterior: StructurePosterior,
    qoi_names: Sequence[str],
    threshold: float = POOLING_THRESHOLD,
) -> AveragedPredictive:
    """Pool per-structure QoI samples with weight ``p(M|y) * w_particle``.

    ``ensembles`` maps a structure code to ``(values, weights)`` where
    ``values`` has one column per QoI.
    """
    keep = {c: p for c, p in posterior.probabilities.items() if p >= threshold}
    dropped = {c: p for c, p in posterior.probabilities.items() if p < threshold and p > 0}
    if dropped:
        log.warning("pooling drops %d structures below posterior %.3g (total mass %.3g)",
                    len(dropped), threshold, sum(dropped.values()))
    missing = [c for c in keep if c not in ensembles]
    if missing:
        raise IncompleteEnsembleError(f"no ensemble for structures {missing} with posterior above {threshold}")
    total = sum(keep.values())
    codes, vals, wts = [], [], []
    for c in sorted(keep):
        v, w = ensembles[c]
        v = np.atleast_2d(np.asarray(v, dtype=float))
        w = np.asarray(w, dtype=float)
        w = w / w.sum()
        codes.append(np.full(len(w), c))
        vals.append(v)
        wts.append(w * keep[c] / total)
    weights = np.concatenate(wts)
    weights /= weights.sum()
    return AveragedPredictive(
        list(qoi_names), np.concatenate(codes), np.vstack(vals), weights,
        {c: keep[c] / total for c in sorted(keep)},
    )
