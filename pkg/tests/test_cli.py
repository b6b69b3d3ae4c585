import json
import os
from pathlib import Path

import numpy as np
import pytest

from sbnn.bench import CSV_COLUMNS
from sbnn.cli import main
from sbnn.engine import flop_count, plan_model, run_model
from sbnn.ir import load, serialize
from sbnn.model import load_model

GOLDEN = Path(__file__).parent / "golden"
UPDATE = os.environ.get("SBNN_UPDATE_GOLDEN") == "1"


def schema(obj):
    """Structure of a JSON document with leaves replaced by their type names."""
    if isinstance(obj, dict):
        return {k: schema(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [schema(obj[0])] if obj else []
    return type(obj).__name__


def check_golden(name, data):
    path = GOLDEN / name
    text = json.dumps(data, indent=2, sort_keys=True) + "\n" if not isinstance(data, str) else data
    if UPDATE:
        path.write_text(text)
    assert path.read_text() == text, f"{name} drifted from the golden file"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workdir(tmp_path, capsys):
    code, _, _ = run(capsys, "mobilenet", "--out", tmp_path / "mn", "--resolution", 32,
                     "--width", 0.25, "--classes", 10, "--seed", 3)
    assert code == 0
    (tmp_path / "cfg.json").write_text(json.dumps({"conv1x1": {"rho": 0.3}}))
    return tmp_path


def test_full_pipeline(workdir, capsys):
    mf = workdir / "mn" / "manifest.json"
    code, out, _ = run(capsys, "prune", "--manifest", mf, "--config", workdir / "cfg.json",
                       "--out", workdir / "pr")
    assert code == 0
    report = json.loads(out)
    check_golden("prune_report.schema.json", schema(report))
    assert json.loads((workdir / "pr" / "report.json").read_text()) == report
    pw = [r for r in report["layers"] if r["op"] == "conv1x1"]
    assert pw and all(abs(r["sparsity"] - 0.3) <= 1 / (r["kept_blocks"] + r["removed_blocks"])
                      for r in pw)

    code, out, _ = run(capsys, "convert", "--manifest", mf, "--masks", workdir / "pr" / "masks.json",
                       "--out", workdir / "m.sbnn")
    assert code == 0
    size = json.loads(out)
    assert size["stored_weight_bytes"] < size["dense_weight_bytes"]

    code, out, _ = run(capsys, "validate", workdir / "m.sbnn")
    assert code == 0 and json.loads(out)["valid"]

    code, out, _ = run(capsys, "inspect", workdir / "m.sbnn", "--json")
    assert code == 0
    doc = json.loads(out)
    check_golden("inspect.json", doc)
    ir = load(workdir / "m.sbnn")
    assert doc["effective_macs"] == flop_count(ir)["effective_macs"]
    assert len(doc["layers"]) == len(ir.layers)

    x = np.random.default_rng(0).standard_normal(ir.layers[0].in_shape).astype("<f4")
    x.tofile(workdir / "x.bin")
    code, out, _ = run(capsys, "run", workdir / "m.sbnn", "--input", workdir / "x.bin",
                       "--out", workdir / "y.bin", "--timing", workdir / "t.json", "--reps", 3,
                       "--warmup", 1)
    assert code == 0
    timing = json.loads((workdir / "t.json").read_text())
    check_golden("timing.schema.json", schema(timing))
    y = np.fromfile(workdir / "y.bin", dtype="<f4")
    np.testing.assert_array_equal(y, run_model(ir, x, plan_model(ir)).reshape(-1))


def test_prune_rho_zero(workdir, capsys):
    (workdir / "zero.json").write_text("{}")
    code, out, _ = run(capsys, "prune", "--manifest", workdir / "mn" / "manifest.json",
                       "--config", workdir / "zero.json", "--out", workdir / "p0")
    assert code == 0
    rep = json.loads(out)
    assert all(r["sparsity"] == 0 for r in rep["layers"] if r["op"] == "conv1x1")


def test_prune_is_deterministic(workdir, capsys):
    outs = []
    for d in ("a", "b"):
        run(capsys, "prune", "--manifest", workdir / "mn" / "manifest.json",
            "--config", workdir / "cfg.json", "--out", workdir / d)
        outs.append((workdir / d / "masks.json").read_bytes())
    assert outs[0] == outs[1]


def test_rearrange(workdir, capsys):
    code, out, _ = run(capsys, "rearrange", "--manifest", workdir / "mn" / "manifest.json",
                       "--config", workdir / "cfg.json", "--out", workdir / "ra")
    assert code == 0
    rep = json.loads(out)["layers"]
    assert rep and all(v["retained_after"] >= v["retained_before"] - 1e-9 for v in rep.values())
    plan = json.loads((workdir / "ra" / "plan.json").read_text())
    assert set(plan) == {"layers", "edges"}
    assert load_model(workdir / "ra" / "manifest.json").layers


def test_rearrange_rejects_concat(tmp_path, capsys):
    doc = {"input": "input", "layers": [
        {"name": "a", "op": "relu", "in_shape": [1, 2, 2, 4], "out_shape": [1, 2, 2, 4]},
        {"name": "b", "op": "relu", "in_shape": [1, 2, 2, 4], "out_shape": [1, 2, 2, 4],
         "inputs": ["input"]},
        {"name": "c", "op": "concat", "in_shape": [1, 2, 2, 4], "out_shape": [1, 2, 2, 8],
         "inputs": ["a", "b"]}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    code, _, err = run(capsys, "rearrange", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o")
    assert code == 2 and "concat" in err


def test_error_exit_codes(workdir, capsys):
    code, _, err = run(capsys, "inspect", workdir / "missing.sbnn")
    assert code == 3 and err
    (workdir / "bad.json").write_text("{\"layers\": 5}")
    code, _, err = run(capsys, "prune", "--manifest", workdir / "bad.json", "--out", workdir / "o")
    assert code == 2 and err
    (workdir / "masks.json").write_text("{\"masks\": {\"pw1\": {\"kind\": \"block\"}}}")
    code, _, err = run(capsys, "convert", "--manifest", workdir / "mn" / "manifest.json",
                       "--masks", workdir / "masks.json", "--out", workdir / "x.sbnn")
    assert code == 2 and "pw1" in err
    (workdir / "junk.sbnn").write_bytes(b"SBNN" + bytes(20))
    code, _, _ = run(capsys, "validate", workdir / "junk.sbnn")
    assert code == 2
    code, _, _ = run(capsys, "run", workdir / "junk.sbnn")
    assert code == 2


def test_validate_reports_violation(workdir, capsys):
    run(capsys, "convert", "--manifest", workdir / "mn" / "manifest.json", "--out", workdir / "d.sbnn")
    ir = load(workdir / "d.sbnn")
    ir.layers[1].in_shape = (1, 5, 5, 5)
    (workdir / "broken.sbnn").write_bytes(serialize(ir))
    code, out, _ = run(capsys, "validate", workdir / "broken.sbnn")
    assert code == 2
    assert any(ir.layers[1].name in v for v in json.loads(out)["violations"])


def test_dense_inspect_shows_zero_sparsity(workdir, capsys):
    run(capsys, "convert", "--manifest", workdir / "mn" / "manifest.json", "--out", workdir / "d.sbnn")
    code, out, _ = run(capsys, "inspect", workdir / "d.sbnn", "--json")
    assert code == 0
    doc = json.loads(out)
    assert all(d["sparsity"] == 0 for d in doc["layers"])
    assert doc["dense_macs"] == doc["effective_macs"]
    code, out, _ = run(capsys, "inspect", workdir / "d.sbnn")
    assert code == 0 and "total MACs" in out


def test_bench_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--shapes", "6x6x16x16", "--sparsity", "0,0.5", "--reps", 3,
                       "--warmup", 1, "--out", tmp_path / "b.csv")
    assert code == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    check_golden("bench_header.txt", lines[0] + "\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 3
    code, _, err = run(capsys, "bench", "--reps", 2)
    assert code == 2 and "reps" in err
