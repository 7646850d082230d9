import csv
import json

import pytest

from bayesmfa.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main

FAST = ["--particles", "200", "--mutation-steps", "5"]


def run(*args):
    return main([*args])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert run("run", "--config", "toy", "--out", str(out), *FAST) == EXIT_OK
    return out


def test_full_pipeline_outputs(toy_run):
    out = toy_run
    for name in ("structures.csv", "posterior.csv", "ratios.csv", "averaged_samples.csv", "averaged_summary.csv",
                 "sankey.json", "impact_samples.csv", "impact_summary.json", "decision.csv", "decision.txt"):
        assert (out / name).exists(), name
    with open(out / "posterior.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16
    assert sum(float(r["posterior"]) for r in rows) == pytest.approx(1.0, abs=1e-10)
    meta = json.loads((out / "ensembles" / "0100" / "metadata.json").read_text())
    assert meta["structure"] == "0100" and meta["beta_schedule"][-1] == 1.0
    sankey = json.loads((out / "sankey.json").read_text())
    assert {"nodes", "links", "structure_weights"} <= set(sankey)


def test_every_csv_parses_back(toy_run):
    for path in toy_run.rglob("*.csv"):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert all(len(r) == len(header) for r in body), path
        numeric = [k for k, h in enumerate(header) if h not in ("structure", "qoi", "option", "m", "n", "label",
                                                                "favours")]
        for r in body:
            for k in numeric:
                float(r[k])


def test_commands_run_separately_and_match(toy_run, tmp_path):
    out = tmp_path / "split"
    assert run("enumerate", "--config", "toy", "--out", str(out)) == EXIT_OK
    assert run("infer", "--config", "toy", "--out", str(out), "--all", *FAST) == EXIT_OK
    for cmd in ("select", "average", "impact", "decide"):
        assert run(cmd, "--config", "toy", "--out", str(out), *FAST) == EXIT_OK
    for name in ("posterior.csv", "impact_summary.json", "decision.csv"):
        assert (out / name).read_bytes() == (toy_run / name).read_bytes()


def test_missing_upstream_artifacts(tmp_path):
    assert run("select", "--config", "toy", "--out", str(tmp_path)) == EXIT_MISSING
    assert run("decide", "--config", "toy", "--out", str(tmp_path)) == EXIT_MISSING


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [], "baseline_edges": [["a", "b"]]}))
    assert run("enumerate", "--config", str(bad)) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "undeclared" in err and "records" in err
    assert run("enumerate", "--config", str(tmp_path / "nope.json")) == EXIT_CONFIG
    assert run("infer", "--config", "toy", "--out", str(tmp_path), "--structure", "01") == EXIT_CONFIG


def test_enumerate_prints_priors(tmp_path, capsys):
    assert run("enumerate", "--config", "toy", "--out", str(tmp_path)) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 16 and all(float(l.split()[1]) == pytest.approx(1 / 16) for l in lines)


def test_select_warns_about_asymmetric_records(toy_run, caplog):
    with caplog.at_level("WARNING"):
        assert run("select", "--config", "toy", "--out", str(toy_run)) == EXIT_OK
    assert any("R008" in r.getMessage() for r in caplog.records)


def test_infer_twice_is_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("infer", "--config", "toy", "--out", str(out), "--structure", "0100", "--seed", "7", *FAST) == 0
    for name in ("particles.csv", "metadata.json"):
        assert (a / "ensembles/0100" / name).read_bytes() == (b / "ensembles/0100" / name).read_bytes()
    meta = json.loads((a / "ensembles/0100/metadata.json").read_text())
    assert meta["seed"] == 7


def test_toy_decision_options(toy_run):
    with open(toy_run / "decision.csv") as fh:
        assert {r["option"] for r in csv.DictReader(fh)} == {"node 4", "node 5", "node 9"}
    assert json.loads((toy_run / "impact_summary.json").read_text())["seed"] == 7
