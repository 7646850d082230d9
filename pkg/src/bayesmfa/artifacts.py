"""Reading and writing the files that pass results between commands.

Floats are written with ``repr`` so every file parses back to the exact
values, and JSON is written with sorted keys so repeated runs are
byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import MissingArtifactError
from .smc import ParticleEnsemble

ENSEMBLE_DIR = "ensembles"
PARTICLES = "particles.csv"
METADATA = "metadata.json"
STRUCTURES = "structures.csv"
POSTERIOR = "posterior.csv"
RATIOS = "ratios.csv"
AVERAGED = "averaged_samples.csv"
AVERAGED_SUMMARY = "averaged_summary.csv"
SANKEY = "sankey.json"
IMPACT_SAMPLES = "impact_samples.csv"
IMPACT_SUMMARY = "impact_summary.json"
DECISION_CSV = "decision.csv"
DECISION_TXT = "decision.txt"


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path, command: str) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), f"bayesmfa {command}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def read_json(path, command: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), f"bayesmfa {command}")
    return json.loads(path.read_text())


def _clean(doc):
    """JSON has no inf or nan; write them as strings."""
    if isinstance(doc, dict):
        return {str(k): _clean(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_clean(v) for v in doc]
    if isinstance(doc, (float, np.floating)):
        v = float(doc)
        return v if math.isfinite(v) else str(v)
    if isinstance(doc, np.integer):
        return int(doc)
    return doc


# --- ensembles -------------------------------------------------------------


def ensemble_dir(out: Path, code: str) -> Path:
    return Path(out) / ENSEMBLE_DIR / str(code)


def write_ensemble(out: Path, ens: ParticleEnsemble, extra: dict | None = None) -> Path:
    d = ensemble_dir(out, ens.code)
    header = ["particle", "weight", *ens.names]
    rows = ([k, ens.weights[k], *ens.theta[k]] for k in range(ens.n))
    write_csv(d / PARTICLES, header, rows)
    meta = ens.metadata()
    meta.update(extra or {})
    write_json(d / METADATA, meta)
    return d


@dataclass
class StoredEnsemble:
    code: str
    names: list[str]
    theta: np.ndarray
    weights: np.ndarray
    metadata: dict

    @property
    def log_evidence(self) -> float:
        return float(self.metadata["log_evidence"])


def read_ensemble(out: Path, code: str) -> StoredEnsemble:
    d = ensemble_dir(out, code)
    meta = read_json(d / METADATA, f"infer --structure {code}")
    path = d / PARTICLES
    if not path.exists():
        raise MissingArtifactError(str(path), f"bayesmfa infer --structure {code}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    return StoredEnsemble(str(code), header[2:], data[:, 2:], data[:, 1], meta)
