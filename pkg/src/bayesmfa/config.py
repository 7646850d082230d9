"""Run configuration: one JSON document plus the records and emissions CSVs.

Every violation found while parsing is collected and raised together, and
nothing is computed until the whole document validates.
"""
from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError, StructureError
from .impact import ImpactModel
from .likelihood import RECORD_TYPES, DataRecord, Dataset, MissingRecordPolicy
from .network import ConnectionFlow, ExternalInput, NodalFlow, Node, QoISpec, Ratio, Sum, Topology
from .priors import PriorBundle, build_prior_bundle
from .smc import SmcConfig

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("Description", "Type", "Value", "Source")
EMISSION_COLUMNS = ("Node name", "Emission intensity", "Note")
DEFAULT_SIGMA = 0.10
POLICIES = {"exclude": "exclude", "compact_support": "compact_support", "compact-support": "compact_support"}


def _norm(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip()).casefold()


class NameIndex:
    """Lookup of node ids by name, alias or id.

    An exact match wins; otherwise case and repeated spaces are ignored.
    """

    def __init__(self, topology: Topology):
        self.topology = topology
        self._exact: dict[str, set[str]] = {}
        self._map: dict[str, set[str]] = {}
        for n in topology.nodes:
            for label in (n.id, n.name, *n.aliases):
                self._exact.setdefault(label.strip(), set()).add(n.id)
                self._map.setdefault(_norm(label), set()).add(n.id)
        self._edges = set(topology.all_edges)

    def candidates(self, label: str, loose: bool = False) -> set[str]:
        exact = self._exact.get(label.strip(), set())
        if loose or not exact:
            return exact | self._map.get(_norm(label), set())
        return exact

    def node(self, label: str) -> str:
        found = self.candidates(label)
        if len(found) != 1:
            what = "no node" if not found else f"ambiguous ({sorted(found)})"
            raise ConfigError(f"{what} named {label!r}")
        return next(iter(found))

    def edge(self, text: str) -> tuple[str, str]:
        """Resolve ``"A to B"`` to the unique declared edge it can mean."""
        parts = text.split(" to ")
        for loose in (False, True):
            pairs = set()
            for k in range(1, len(parts)):
                a, b = " to ".join(parts[:k]), " to ".join(parts[k:])
                for s in self.candidates(a, loose):
                    for t in self.candidates(b, loose):
                        if (s, t) in self._edges:
                            pairs.add((s, t))
            if pairs:
                break
        if len(pairs) == 1:
            return next(iter(pairs))
        if not pairs:
            raise ConfigError(f"{text!r} does not name a connection of the network")
        raise ConfigError(f"{text!r} is ambiguous: {sorted(pairs)}")

    def input_node(self, text: str) -> str:
        inputs = set(self.topology.external_input_nodes)
        if " to " in text:
            s, _ = self.edge(text)
            if s not in inputs:
                raise ConfigError(f"{text!r}: node {s!r} is not an external input")
            return s
        found = self.candidates(text) & inputs or self.candidates(text, True) & inputs
        if len(found) != 1:
            raise ConfigError(f"{text!r} does not name a unique external input node")
        return next(iter(found))


def qoi_from_description(index: NameIndex, description: str, kind: str) -> QoISpec:
    """Interpret one records-table row.

    ``Ratio`` rows are shares of the origin's throughput; ``Sum`` rows join
    terms with ``+``.
    """
    text = description.strip()
    if kind == "External Input":
        return ExternalInput(index.input_node(text))
    if kind == "Ratio":
        s, t = index.edge(text)
        return Ratio(ConnectionFlow(s, t), NodalFlow(s))
    if kind == "Sum":
        terms = []
        for part in text.split(" + "):
            part = part.strip()
            terms.append(ConnectionFlow(*index.edge(part)) if " to " in part else NodalFlow(index.node(part)))
        return Sum(tuple(terms))
    if kind == "Flow":
        return ConnectionFlow(*index.edge(text)) if " to " in text else NodalFlow(index.node(text))
    raise ConfigError(f"unknown record type {kind!r}; expected one of {RECORD_TYPES}")


def read_records(path, topology: Topology, default_sigma: float = DEFAULT_SIGMA) -> Dataset:
    """Records CSV with columns Description, Type, Value, Source (optional Id, Sigma)."""
    index = NameIndex(topology)
    problems: list[str] = []
    records: list[DataRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RECORD_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=1):
            rid = (row.get("Id") or "").strip() or f"R{row_no:03d}"
            desc = row["Description"].strip()
            kind = row["Type"].strip()
            try:
                value = float(row["Value"])
                sigma = float(row["Sigma"]) if (row.get("Sigma") or "").strip() else default_sigma
                qoi = qoi_from_description(index, desc, kind)
                rec = DataRecord(rid, qoi, value, sigma, row["Source"].strip(), kind, desc)
                bad = rec.problems()
                if bad:
                    problems.extend(bad)
                    continue
                records.append(rec)
            except ConfigError as exc:
                problems.extend(f"{Path(path).name} row {row_no} ({desc!r}): {v}" for v in exc.violations)
            except ValueError as exc:
                problems.append(f"{Path(path).name} row {row_no} ({desc!r}): {exc}")
    if problems:
        raise ConfigError(problems)
    return Dataset(tuple(records))


def read_emissions(path, topology: Topology) -> dict[str, float]:
    index = NameIndex(topology)
    problems: list[str] = []
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EMISSION_COLUMNS[:2] if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=1):
            try:
                node = index.node(row["Node name"])
                value = float(row["Emission intensity"])
            except (ConfigError, ValueError) as exc:
                problems.append(f"{Path(path).name} row {row_no}: {exc}")
                continue
            if not value >= 0:
                problems.append(f"{Path(path).name} row {row_no}: intensity {value} must be >= 0")
            if node in out:
                problems.append(f"{Path(path).name} row {row_no}: node {node!r} listed twice")
            out[node] = value
    if problems:
        raise ConfigError(problems)
    return out


@dataclass
class RunConfig:
    source: Path
    doc: dict
    topology: Topology
    priors: PriorBundle
    dataset: Dataset
    impact: ImpactModel | None
    policy: MissingRecordPolicy
    smc: SmcConfig
    seed: int
    output: Path
    percentiles: tuple[float, float] = (5.0, 95.0)
    extra: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.doc.get("name", "")

    def to_dict(self) -> dict:
        """Normalized document; file paths are absolute so the result parses anywhere."""
        return json.loads(json.dumps(self.doc))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _as_edge(e, where: str, problems: list[str]) -> tuple[str, str] | None:
    if isinstance(e, Mapping):
        e = (e.get("source"), e.get("target"))
    if not isinstance(e, (list, tuple)) or len(e) != 2 or not all(isinstance(v, str) for v in e):
        problems.append(f"{where}: edge {e!r} must be a [source, target] pair of node ids")
        return None
    return (e[0], e[1])


def parse_config_dict(raw: Mapping[str, Any], base: Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    problems: list[str] = []
    raw = json.loads(json.dumps(raw))
    overrides = dict(overrides or {})
    nodes = []
    for k, n in enumerate(raw.get("nodes") or []):
        if not isinstance(n, Mapping) or "id" not in n:
            problems.append(f"nodes[{k}] needs an id")
            continue
        nodes.append(Node(str(n["id"]), str(n.get("name", n["id"])), str(n.get("class", "process")),
                          tuple(n.get("aliases", ()))))
    declared = {n.id for n in nodes}
    base_edges = []
    for k, e in enumerate(raw.get("baseline_edges") or []):
        pair = _as_edge(e, f"baseline_edges[{k}]", problems)
        if pair is not None:
            base_edges.append(pair)
    targeted, beliefs = [], []
    for k, t in enumerate(raw.get("targeted_connections") or []):
        e = _as_edge(t, f"targeted_connections[{k}]", problems)
        if e is None:
            continue
        targeted.append(e)
        p = t.get("p_exist", 0.5) if isinstance(t, Mapping) else 0.5
        beliefs.append(p)
        if not isinstance(p, (int, float)) or not 0 < p < 1:
            problems.append(
                f"targeted connection {k + 1} {e}: p_exist {p!r} must lie strictly inside (0, 1); "
                "put certain connections in baseline_edges instead"
            )
    inputs = list(raw.get("external_inputs") or [])
    for where, ids in (("external_inputs", inputs),):
        for i in ids:
            if i not in declared:
                problems.append(f"{where}: undeclared node {i!r}")
    for s, t in base_edges + targeted:
        for end in (s, t):
            if end not in declared:
                problems.append(f"edge ({s!r}, {t!r}) references undeclared node {end!r}")
    topology = None
    if not any("undeclared" in p for p in problems):
        try:
            topology = Topology(tuple(nodes), tuple(base_edges), tuple(targeted), tuple(inputs))
        except StructureError as exc:
            problems.extend(str(exc).split("; "))
    if topology is not None:
        for n in topology.nodes:
            if not n.terminal and not topology.out_edges_full(n.id):
                problems.append(f"non-terminal node {n.id!r} has no out-edges")
            if n.terminal and topology.out_edges_full(n.id):
                problems.append(f"terminal node {n.id!r} has out-edges")
        losses = [n.id for n in topology.nodes if n.cls == "terminal-loss"]
        if len(losses) > 1:
            problems.append(f"only one terminal-loss node is supported, found {losses}")

    data = raw.get("data") or {}
    sigma = data.get("sigma", DEFAULT_SIGMA)
    if not isinstance(sigma, (int, float)) or not sigma > 0:
        problems.append(f"data.sigma must be > 0, got {sigma!r}")
        sigma = DEFAULT_SIGMA
    dataset = None
    rec_path = data.get("records")
    if rec_path is None:
        problems.append("data.records (path to the records CSV) is required")
    else:
        rec_path = (base / rec_path).resolve()
        data["records"] = str(rec_path)
        if not rec_path.exists():
            problems.append(f"records file {rec_path} not found")
        elif topology is not None:
            try:
                dataset = read_records(rec_path, topology, sigma)
            except ConfigError as exc:
                problems.extend(exc.violations)

    intensity = None
    em_path = data.get("emissions")
    if em_path is not None:
        em_path = (base / em_path).resolve()
        data["emissions"] = str(em_path)
        if not em_path.exists():
            problems.append(f"emissions file {em_path} not found")
        elif topology is not None:
            try:
                intensity = read_emissions(em_path, topology)
            except ConfigError as exc:
                problems.extend(exc.violations)
    raw["data"] = data

    impact = None
    imp = raw.get("impact") or {}
    if topology is not None and (imp or intensity is not None):
        loss = imp.get("loss_node")
        cons = imp.get("consumption_nodes")
        if cons is None:
            cons = [n.id for n in topology.nodes if n.terminal and n.id != loss]
        impact = ImpactModel(intensity or {}, tuple(cons), loss)
        problems.extend(impact.problems(topology))

    priors = None
    pr = raw.get("priors") or {}
    if topology is not None:
        input_values = {}
        if dataset is not None:
            for r in dataset:
                if isinstance(r.qoi, ExternalInput) and r.qoi.node not in input_values:
                    input_values[r.qoi.node] = r.value
        tn = {k: tuple(v) for k, v in (pr.get("trunc_normal") or {}).items()}
        try:
            priors = build_prior_bundle(
                topology, pr.get("dirichlet") or {}, tn, beliefs, input_values,
                raw.get("structure_prior_overrides"),
            )
        except ConfigError as exc:
            problems.extend(exc.violations)

    lk = dict(raw.get("likelihood") or {})
    if "policy" in overrides and overrides["policy"] is not None:
        lk["policy"] = overrides["policy"]
    mode = POLICIES.get(lk.get("policy", "exclude"))
    policy = MissingRecordPolicy()
    if mode is None:
        problems.append(f"likelihood.policy {lk.get('policy')!r} must be exclude or compact-support")
    else:
        lk["policy"] = mode
        try:
            bounds = {}
            for rid, b in (lk.get("bounds") or {}).items():
                bounds[rid] = (float(b[0]), float(b[1]))
            policy = MissingRecordPolicy(mode, bounds)
            if dataset is not None and topology is not None:
                known = {r.record_id for r in dataset}
                problems.extend(f"likelihood bounds for unknown record {k!r}" for k in bounds if k not in known)
                problems.extend(policy.problems(dataset, topology))
        except (ConfigError, TypeError, ValueError, IndexError) as exc:
            problems.extend(exc.violations if isinstance(exc, ConfigError) else [f"likelihood.bounds: {exc}"])
    raw["likelihood"] = lk

    sm = dict(raw.get("smc") or {})
    for key in ("particles", "ess_target", "mutation_steps", "max_stages"):
        if overrides.get(key) is not None:
            sm[key] = overrides[key]
    seed = overrides.get("seed") if overrides.get("seed") is not None else raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append(f"seed must be a nonnegative integer, got {seed!r}")
        seed = 0
    smc = SmcConfig()
    try:
        smc = SmcConfig(**{**sm, "seed": seed})
    except ConfigError as exc:
        problems.extend(exc.violations)
    except TypeError as exc:
        problems.append(f"smc: {exc}")
    raw["smc"] = sm
    raw["seed"] = seed

    dec = raw.get("decision") or {}
    pct = tuple(float(v) for v in dec.get("percentiles", (5, 95)))
    if len(pct) != 2 or not 0 <= pct[0] < pct[1] <= 100:
        problems.append(f"decision.percentiles {pct} must be two increasing values in [0, 100]")
        pct = (5.0, 95.0)

    out = overrides.get("output") or raw.get("output", "out")
    out_path = (base / out).resolve() if overrides.get("output") is None else Path(out).resolve()
    raw["output"] = str(out_path)

    if problems:
        raise ConfigError(problems)
    return RunConfig(base, raw, topology, priors, dataset, impact, policy, smc, seed, out_path, pct)


def parse_config(path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config_dict(raw, path.resolve().parent, overrides)


def bundled_config_path(name: str) -> Path:
    """Path of a bundled case (``steel`` or ``toy``)."""
    root = resources.files("bayesmfa") / "data" / name / "config.json"
    return Path(str(root))
