import json

import numpy as np
import pytest

from surfglm.benchmark import read_csv, write_csv
from surfglm.cli import main
from surfglm.io import RESULT_SCHEMA, read_json, validate_result

SMALL = {"n_target": 100, "K": 2, "T": 120, "M": 2, "subject_shift_mm": 4.0, "seed": 3}


def simulate(tmp_path, name="sim", **over):
    cfg = tmp_path / f"{name}.json"
    cfg.write_text(json.dumps({"scenario": {**SMALL, **over}}))
    out = tmp_path / name
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def fit_args(sim, sub, out, *extra):
    man = read_json(sim / "manifest.json")
    s = man["files"]["subjects"][sub]
    return ["fit", "--mesh", str(sim / man["files"]["mesh"]), "--bold", *[str(sim / b) for b in s["bold"]],
            "--stimuli", str(sim / man["files"]["stimuli"]), "--out", str(out), "--H", "200", *extra]


def values(doc):
    """Result values with run-specific bookkeeping removed."""
    d = {k: v for k, v in doc.items() if k not in ("timing", "inputs")}
    if "options" in d:
        d["options"] = {k: v for k, v in d["options"].items() if k != "threads"}
    return d


def test_simulate_manifest_and_determinism(tmp_path):
    a = simulate(tmp_path, "a", M=1)
    man = read_json(a / "manifest.json")
    assert man["files"]["mesh"] == "mesh.txt" and len(man["files"]["subjects"]) == 1
    assert len(man["files"]["subjects"][0]["bold"]) == 1
    b = simulate(tmp_path, "b", M=1)
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_fit_em_and_classical_validate(tmp_path):
    sim = simulate(tmp_path)
    for method in ("em", "classical"):
        out = tmp_path / f"{method}.json"
        assert main(fit_args(sim, 0, out, "--method", method)) == 0
        doc = read_json(out)
        validate_result(doc, RESULT_SCHEMA)
        assert len(doc["masks"]) == 2 * 3
        if method == "em":
            assert doc["converged"] and len(doc["history"]) >= 1
        assert (tmp_path / f"{method}.beta.txt").exists()


def test_fit_threads_identical(tmp_path):
    sim = simulate(tmp_path)
    docs = []
    for t in ("1", "4"):
        out = tmp_path / f"t{t}.json"
        assert main(fit_args(sim, 1, out, "--threads", t, "--seed", "5")) == 0
        docs.append(values(read_json(out)))
    assert docs[0] == docs[1]


def test_group_and_single_subject_mask(tmp_path):
    sim = simulate(tmp_path)
    paths = []
    for m in range(2):
        out = tmp_path / f"s{m}.json"
        main(fit_args(sim, m, out))
        paths.append(str(out))
    g = tmp_path / "group.json"
    assert main(["group", "--results", *paths, "--out", str(g), "--H", "200"]) == 0
    doc = read_json(g)
    assert len(doc["masks"]) == 2 * 3 and len(doc["lambda"]) == 2
    # one subject: the group mask reproduces that subject's mask at its own theta
    one = tmp_path / "one.json"
    assert main(["group", "--results", paths[0], "--out", str(one), "--H", "200"]) == 0
    sub, grp = read_json(paths[0]), read_json(one)
    for a, b in zip(sorted(sub["masks"], key=lambda x: (x["task"], x["gamma"])),
                    sorted(grp["masks"], key=lambda x: (x["task"], x["gamma"]))):
        assert a["active"] == b["active"]


def test_exit_codes(tmp_path):
    sim = simulate(tmp_path, M=1)
    assert main(fit_args(sim, 0, tmp_path / "x.json", "--epsilon", "-1")) == 2
    assert main(fit_args(sim, 0, tmp_path / "x.json", "--alpha", "2")) == 2
    nc = tmp_path / "nc.json"
    assert main(fit_args(sim, 0, nc, "--epsilon", "1e-300", "--max-iter", "1")) == 3
    assert read_json(nc)["converged"] is False
    assert main(fit_args(sim, 0, tmp_path / "missing" / "dir" / "x.json")) == 4
    args = fit_args(sim, 0, tmp_path / "y.json")
    args[args.index("--mesh") + 1] = str(tmp_path / "nope.txt")
    assert main(args) == 4
    bad = tmp_path / "bad_mesh.txt"
    bad.write_text("mesh 3 1\nv 0 0 0\nv 1 0 0\nf 0 1 2\n")
    args[args.index("--mesh") + 1] = str(bad)
    assert main(args) == 2
    with pytest.raises(SystemExit):
        main(["fit"])


def test_benchmark_rows_and_csv_round_trip(tmp_path):
    cfg = {"scenarios": [
        {"name": "a", "replicates": 2, "scenario": {"n_target": 64, "K": 1, "T": 80, "seed": 1}},
        {"name": "b", "replicates": 2, "scenario": {"n_target": 81, "K": 2, "T": 80, "seed": 2}},
    ], "H": 200}
    p = tmp_path / "bench.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "bench.csv"
    assert main(["benchmark", "--config", str(p), "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows) == 8
    assert {r["method"] for r in rows} == {"em", "classical"}
    again = tmp_path / "again.csv"
    write_csv(again, rows)
    assert read_csv(again) == rows
    assert again.read_text() == out.read_text()
    assert all(np.isfinite(float(r["rmse"])) for r in rows)
