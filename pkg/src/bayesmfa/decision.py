"""Risk-appetite metrics over benefit distributions and option rankings."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

MIN_SAMPLES = 100
METRICS = ("mean", "inv_cv", "low", "high")
METRIC_ALIASES = {"maximin": "low", "maximax": "high", "expected": "mean", "certainty": "inv_cv"}
METRIC_LABELS = {
    "mean": "Maximize expected savings",
    "inv_cv": "Maximize certainty of savings",
    "low": "Maximize low savings",
    "high": "Maximize high savings",
}


def weighted_quantile(values, weights, q: float) -> float:
    """Linear-interpolation quantile of a weighted sample.

    Sorted sample ``k`` sits at plotting position
    ``(S_k - w_k) / (S_N - w_N)`` with ``S`` the cumulative weight, which is
    the usual ``(k - 1) / (N - 1)`` rule when the weights are equal.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape or v.ndim != 1 or len(v) == 0:
        raise ValueError("values and weights must be matching non-empty 1-d arrays")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    keep = w > 0
    v, w = v[keep], w[keep]
    order = np.argsort(v, kind="mergesort")
    v, w = v[order], w[order]
    if len(v) == 1:
        return float(v[0])
    s = np.cumsum(w)
    pos = (s - w) / (s[-1] - w[-1])
    return float(np.interp(q, pos, v))


@dataclass(frozen=True)
class BenefitDistribution:
    option: str
    samples: np.ndarray
    weights: np.ndarray

    def __init__(self, option: str, samples, weights=None, min_samples: int = MIN_SAMPLES):
        samples = np.asarray(samples, dtype=float).ravel()
        if weights is None:
            weights = np.full(len(samples), 1.0 / max(len(samples), 1))
        weights = np.asarray(weights, dtype=float).ravel()
        problems = []
        if len(samples) < min_samples:
            problems.append(f"option {option!r} has {len(samples)} samples; at least {min_samples} are needed")
        if weights.shape != samples.shape:
            problems.append(f"option {option!r}: weights and samples differ in length")
        elif np.any(weights < 0) or not weights.sum() > 0:
            problems.append(f"option {option!r}: weights must be nonnegative with positive total")
        if not np.all(np.isfinite(samples)):
            problems.append(f"option {option!r}: samples must be finite")
        if problems:
            raise ConfigError(problems)
        object.__setattr__(self, "option", str(option))
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "weights", weights / weights.sum())


@dataclass(frozen=True)
class DecisionMetrics:
    option: str
    mean: float
    sd: float
    inv_cv: float
    low: float
    high: float
    inv_cv_infinite: bool = False

    def value(self, metric: str) -> float:
        return getattr(self, canonical_metric(metric))


def canonical_metric(metric: str) -> str:
    m = METRIC_ALIASES.get(metric, metric)
    if m.startswith("p") and m[1:].isdigit():
        m = "low" if int(m[1:]) < 50 else "high"
    if m not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    return m


def decision_metrics(dist: BenefitDistribution, percentiles: tuple[float, float] = (5, 95)) -> DecisionMetrics:
    w, v = dist.weights, dist.samples
    live = v[w > 0]
    if np.all(live == live[0]):
        # exact zero spread; the weighted sums would leave rounding noise
        mean, sd = float(live[0]), 0.0
    else:
        mean = float(w @ v)
        sd = float(math.sqrt(max(w @ (v - mean) ** 2, 0.0)))
    if sd > 0:
        inv_cv, flag = mean / sd, False
    else:
        inv_cv, flag = math.inf, True
    lo = weighted_quantile(v, w, percentiles[0] / 100.0)
    hi = weighted_quantile(v, w, percentiles[1] / 100.0)
    return DecisionMetrics(dist.option, mean, sd, inv_cv, lo, hi, flag)


@dataclass(frozen=True)
class Ranking:
    metric: str
    options: tuple[str, ...]
    ties: tuple[tuple[str, ...], ...]

    def __iter__(self):
        return iter(self.options)

    def __len__(self) -> int:
        return len(self.options)

    def __getitem__(self, k):
        return self.options[k]

    @property
    def top(self) -> str:
        return self.options[0]

    @property
    def tied(self) -> bool:
        return bool(self.ties)


def rank_options(reports: Sequence[DecisionMetrics], metric: str) -> Ranking:
    """Options by descending metric; equal values fall back to name order and are reported as ties."""
    if not reports:
        raise ValueError("no options to rank")
    m = canonical_metric(metric)
    rows = sorted(reports, key=lambda r: (-r.value(m), r.option))
    groups: dict[float, list[str]] = {}
    for r in rows:
        groups.setdefault(r.value(m), []).append(r.option)
    ties = tuple(tuple(g) for g in groups.values() if len(g) > 1)
    return Ranking(m, tuple(r.option for r in rows), ties)


@dataclass(frozen=True)
class DecisionReport:
    metrics: tuple[DecisionMetrics, ...]
    percentiles: tuple[float, float] = (5, 95)

    @classmethod
    def build(cls, dists: Sequence[BenefitDistribution], percentiles=(5, 95)) -> "DecisionReport":
        return cls(tuple(decision_metrics(d, percentiles) for d in dists), tuple(percentiles))

    @property
    def options(self) -> list[str]:
        return [m.option for m in self.metrics]

    def ranking(self, metric: str) -> Ranking:
        return rank_options(self.metrics, metric)

    def top(self, metric: str) -> str:
        return self.ranking(metric).top

    def columns(self) -> list[str]:
        lo, hi = self.percentiles
        return ["option", "mean", "sd", "inv_cv", "inv_cv_infinite", _pname(lo), _pname(hi)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for m in self.metrics:
                w.writerow([m.option, repr(m.mean), repr(m.sd), repr(m.inv_cv), int(m.inv_cv_infinite),
                            repr(m.low), repr(m.high)])

    def to_text(self) -> str:
        """Rows are criteria, entries the options from best to worst."""
        lo, hi = self.percentiles
        labels = dict(METRIC_LABELS)
        labels["low"] += f" (p{lo:g})"
        labels["high"] += f" (p{hi:g})"
        order = ("low", "inv_cv", "mean", "high")
        rankings = {m: self.ranking(m) for m in order}
        width = max(len(labels[m]) for m in order)
        col = max(len(o) for o in self.options) + 2
        head = "Criterion".ljust(width) + "  " + "".join(f"#{k + 1}".ljust(col) for k in range(len(self.options)))
        lines = [head.rstrip(), "-" * len(head.rstrip())]
        for m in order:
            r = rankings[m]
            cells = "".join(o.ljust(col) for o in r.options)
            mark = "  (tie)" if r.tied else ""
            lines.append((labels[m].ljust(width) + "  " + cells).rstrip() + mark)
        return "\n".join(lines) + "\n"


def _pname(p: float) -> str:
    return f"p{int(p):02d}" if float(p).is_integer() else f"p{p:g}"


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def benefit_distributions(samples: Mapping[str, np.ndarray], weights: np.ndarray) -> list[BenefitDistribution]:
    """One distribution per option sharing the pooled sample weights; nan samples are dropped."""
    out = []
    for name, v in samples.items():
        v = np.asarray(v, dtype=float)
        ok = np.isfinite(v)
        out.append(BenefitDistribution(name, v[ok], np.asarray(weights)[ok]))
    return out
