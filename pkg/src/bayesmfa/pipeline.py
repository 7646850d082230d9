"""The six commands as plain functions over a parsed configuration.

Each command reads what the previous one wrote under the output directory,
so they can run separately or in sequence.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts as art
from .config import RunConfig, parse_config_dict
from .decision import BenefitDistribution, DecisionReport
from .errors import ConfigError, MissingArtifactError
from .impact import impact_from_theta
from .likelihood import asymmetric_records
from .network import ConnectionFlow, NetworkStructure, NodalFlow, StructureCode, enumerate_structures
from .priors import restrict_to_structure, structure_priors
from .selection import (
    POOLING_THRESHOLD,
    EvidenceTable,
    StructurePosterior,
    model_average,
    qoi_values,
    ratio_report,
    structure_posterior,
)
from .smc import run_smc

log = logging.getLogger(__name__)


def structures(cfg: RunConfig) -> dict[str, NetworkStructure]:
    return {str(s.code): s for s in enumerate_structures(cfg.topology)}


def resolve_codes(cfg: RunConfig, codes: Sequence[str] | None) -> list[str]:
    known = structures(cfg)
    if not codes:
        return list(known)
    bad = [c for c in codes if c not in known]
    if bad:
        raise ConfigError([f"unknown structure code {c!r}; valid codes have {cfg.topology.n_l} bits" for c in bad])
    return list(codes)


# --- enumerate ---------------------------------------------------------------


def cmd_enumerate(cfg: RunConfig) -> list[tuple[str, float]]:
    ss = structures(cfg)
    priors = structure_priors(cfg.priors, list(ss))
    rows = []
    for code, s in ss.items():
        rows.append((code, priors[code], len(s.edge_ids), s.layout.size))
    art.write_csv(cfg.output / art.STRUCTURES, ["structure", "prior", "edges", "parameters"], rows)
    return [(c, p) for c, p, _, _ in rows]


# --- infer -------------------------------------------------------------------


def _infer_one(doc: dict, base: str, code: str) -> tuple[str, float]:
    cfg = parse_config_dict(doc, Path(base))
    return _infer(cfg, code)


def _infer(cfg: RunConfig, code: str) -> tuple[str, float]:
    s = structures(cfg)[code]
    prior = restrict_to_structure(cfg.priors, s)
    ens = run_smc(prior, cfg.dataset, s, cfg.policy, cfg.smc)
    p = structure_priors(cfg.priors, [code])[code]
    art.write_ensemble(cfg.output, ens, {"structure_prior": p, "policy": cfg.policy.mode})
    for f in ens.flags:
        log.warning("structure %s: %s", code, f)
    log.info("structure %s: log evidence %.4f over %d stages", code, ens.log_evidence, len(ens.beta_schedule) - 1)
    return code, ens.log_evidence


def cmd_infer(cfg: RunConfig, codes: Sequence[str] | None = None, jobs: int = 1) -> dict[str, float]:
    codes = resolve_codes(cfg, codes)
    if jobs <= 1 or len(codes) == 1:
        return dict(_infer(cfg, c) for c in codes)
    doc = cfg.to_dict()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_infer_one, doc, str(cfg.source), c) for c in codes]
        return dict(f.result() for f in futures)


# --- select ------------------------------------------------------------------


def evidence_table(cfg: RunConfig) -> EvidenceTable:
    ss = structures(cfg)
    priors = structure_priors(cfg.priors, list(ss))
    rows = []
    missing = []
    for code in ss:
        try:
            meta = art.read_json(art.ensemble_dir(cfg.output, code) / art.METADATA, f"infer --structure {code}")
        except MissingArtifactError:
            missing.append(code)
            continue
        rows.append((code, float(meta["log_evidence"]), priors[code]))
    if missing:
        raise MissingArtifactError(
            str(art.ensemble_dir(cfg.output, missing[0])),
            "bayesmfa infer --all" if len(missing) > 1 else f"bayesmfa infer --structure {missing[0]}",
        )
    return EvidenceTable.from_rows(rows)


def cmd_select(cfg: RunConfig) -> StructurePosterior:
    ss = structures(cfg)
    asym = asymmetric_records(cfg.dataset, list(ss.values()))
    if asym and cfg.policy.mode == "exclude":
        log.warning(
            "records %s enter only some structures' likelihoods; their evidences are not directly comparable "
            "(consider --policy compact-support)", asym,
        )
    table = evidence_table(cfg)
    post = structure_posterior(table)
    art.write_csv(
        cfg.output / art.POSTERIOR,
        ["structure", "prior", "log_evidence", "posterior"],
        [(c, p, ev, post[c]) for c, ev, p in zip(table.codes, table.log_evidence, table.prior)],
    )
    rep = ratio_report(table)
    art.write_csv(
        cfg.output / art.RATIOS,
        ["m", "n", "log10_pr", "log10_bf", "label", "favours"],
        list(rep.rows()),
    )
    return post


def read_posterior(cfg: RunConfig) -> StructurePosterior:
    rows = art.read_csv(cfg.output / art.POSTERIOR, "select")
    return StructurePosterior({r["structure"]: float(r["posterior"]) for r in rows})


# --- average -----------------------------------------------------------------


def averaging_qois(cfg: RunConfig):
    names = [f"x[{n.id}]" for n in cfg.topology.nodes]
    return names, [NodalFlow(n.id) for n in cfg.topology.nodes]


def _kept(post: StructurePosterior, threshold: float) -> list[str]:
    return sorted(c for c, p in post.probabilities.items() if p >= threshold)


def cmd_average(cfg: RunConfig, threshold: float = POOLING_THRESHOLD):
    post = read_posterior(cfg)
    ss = structures(cfg)
    names, qois = averaging_qois(cfg)
    edges = list(cfg.topology.all_edges)
    link_qois = [ConnectionFlow(s, t) for s, t in edges]
    values, links = {}, {}
    for code in _kept(post, threshold):
        ens = art.read_ensemble(cfg.output, code)
        values[code] = (qoi_values(ss[code], ens.theta, qois), ens.weights)
        links[code] = (qoi_values(ss[code], ens.theta, link_qois), ens.weights)
    avg = model_average(values, post, names, threshold)
    link_avg = model_average(links, post, [f"{s}->{t}" for s, t in edges], threshold)
    art.write_csv(
        cfg.output / art.AVERAGED,
        ["structure", "weight", *names],
        ([avg.codes[k], avg.weights[k], *avg.values[k]] for k in range(len(avg.weights))),
    )
    summary = avg.summary()
    cols = list(summary[0]) if summary else ["qoi", "mean", "sd"]
    art.write_csv(cfg.output / art.AVERAGED_SUMMARY, cols, ([row[c] for c in cols] for row in summary))
    mean, sd = link_avg.mean(), link_avg.sd()
    doc = {
        "nodes": [{"id": n.id, "name": n.name} for n in cfg.topology.nodes],
        "links": [
            {
                "source": s,
                "target": t,
                "mean": float(mean[k]),
                "sd": float(sd[k]),
                "sd_pct": float(sd[k] / mean[k]) if mean[k] > 0 else None,
            }
            for k, (s, t) in enumerate(edges)
        ],
        "structure_weights": avg.structure_weights,
        "seed": cfg.seed,
    }
    art.write_json(cfg.output / art.SANKEY, doc)
    return avg, doc


# --- impact ------------------------------------------------------------------


def cmd_impact(cfg: RunConfig, threshold: float = POOLING_THRESHOLD) -> dict:
    if cfg.impact is None:
        raise ConfigError("the configuration has no impact section or emissions file")
    post = read_posterior(cfg)
    ss = structures(cfg)
    keep = _kept(post, threshold)
    total_p = sum(post[c] for c in keep)
    nodes = list(cfg.impact.consumption_nodes)
    rows_code, weights, totals, eiis, valid = [], [], [], [], []
    for code in keep:
        ens = art.read_ensemble(cfg.output, code)
        res = impact_from_theta(ss[code], ens.theta, cfg.impact)
        w = ens.weights / ens.weights.sum() * post[code] / total_p
        rows_code.extend([code] * len(w))
        weights.append(w)
        totals.append(res.total)
        eiis.append(res.eii)
        valid.append(res.valid)
    w = np.concatenate(weights)
    w = w / w.sum()
    total = np.concatenate(totals)
    eii = np.vstack(eiis)
    ok = np.concatenate(valid)
    cols = [f"eii[{n}]" for n in nodes]
    art.write_csv(
        cfg.output / art.IMPACT_SAMPLES,
        ["structure", "weight", "valid", "total_ei", *cols],
        ([rows_code[k], w[k], ok[k], total[k], *eii[k]] for k in range(len(w))),
    )
    for j, n in enumerate(nodes):
        art.write_csv(
            cfg.output / "eii" / f"{_slug(n)}.csv",
            ["structure", "weight", "eii"],
            ([rows_code[k], w[k], eii[k, j]] for k in range(len(w)) if ok[k]),
        )
    mean = float(w @ total)
    summary = {
        "total_ei_mean": mean,
        "total_ei_sd": float(math.sqrt(max(w @ (total - mean) ** 2, 0.0))),
        "skip_rate": float(1.0 - ok.mean()),
        "samples": int(len(w)),
        "seed": cfg.seed,
        "structures": keep,
        "eii": {},
    }
    for j, n in enumerate(nodes):
        ww, v = w[ok], eii[ok, j]
        m = float(ww @ v / ww.sum())
        summary["eii"][n] = {"mean": m, "sd": float(math.sqrt(max(ww @ (v - m) ** 2 / ww.sum(), 0.0)))}
    art.write_json(cfg.output / art.IMPACT_SUMMARY, summary)
    return summary


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()


# --- decide ------------------------------------------------------------------


def read_impact_samples(cfg: RunConfig) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    rows = art.read_csv(cfg.output / art.IMPACT_SAMPLES, "impact")
    if not rows:
        return np.zeros(0), {}
    w = np.array([float(r["weight"]) for r in rows])
    samples = {}
    for key in rows[0]:
        if key.startswith("eii[") and key.endswith("]"):
            samples[key[4:-1]] = np.array([float(r[key]) for r in rows])
    return w, samples


def cmd_decide(cfg: RunConfig) -> DecisionReport:
    w, samples = read_impact_samples(cfg)
    dists = []
    for name, v in samples.items():
        ok = np.isfinite(v)
        dists.append(BenefitDistribution(name, v[ok], w[ok]))
    report = DecisionReport.build(dists, cfg.percentiles)
    report.write_csv(cfg.output / art.DECISION_CSV)
    (cfg.output / art.DECISION_TXT).write_text(report.to_text())
    return report


def cmd_run(cfg: RunConfig, jobs: int = 1) -> DecisionReport | None:
    """Every command in order."""
    cmd_enumerate(cfg)
    cmd_infer(cfg, None, jobs)
    cmd_select(cfg)
    cmd_average(cfg)
    if cfg.impact is None:
        return None
    cmd_impact(cfg)
    return cmd_decide(cfg)
