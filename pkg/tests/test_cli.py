import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from confpareto.bundle import ModelBundle
from confpareto.cli import main
from confpareto.pareto import BoundPoint, strictly_dominates


def run(*args):
    assert main([str(a) for a in args]) == 0


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run("gen", "--scenario", "synthetic", "--policy", "unbalanced", "--n", 1000, "--seed", 7, "--out", root / "gen")
    run("fit", "--data", root / "gen" / "data.csv", "--alpha", 0.2, "--seed", 1, "--trees", 40, "--out", root / "fit")
    return root


def test_gen_synthetic(workdir):
    rows = read_csv(workdir / "gen" / "data.csv")
    assert rows[0] == ["x", "y1", "y2", "z"]
    assert len(rows) == 1001
    assert {r[0] for r in rows[1:]} == {"0", "1", "2", "3", "4"}
    meta = json.loads((workdir / "gen" / "data.meta.json").read_text())
    assert meta["schema_version"] == 1 and meta["seed"] == 7
    assert meta["schema"]["reward_floors"] == [0.0, 0.0]
    assert meta["config"]["policy"] == "unbalanced"


def test_gen_is_byte_reproducible(workdir, tmp_path):
    run("gen", "--scenario", "synthetic", "--policy", "unbalanced", "--n", 1000, "--seed", 7, "--threads", 4, "--out", tmp_path)
    for name in ("data.csv", "data.meta.json"):
        assert digest(tmp_path / name) == digest(workdir / "gen" / name)


def test_gen_records_fresh_seed(tmp_path):
    run("gen", "--n", 20, "--out", tmp_path)
    meta = json.loads((tmp_path / "data.meta.json").read_text())
    assert meta["config"]["seed_generated"] is True
    assert isinstance(meta["seed"], int)


def test_star_cost_appends_column(tmp_path):
    run("gen", "--scenario", "star-standin", "--n", 600, "--seed", 2, "--out", tmp_path / "s")
    run("gen", "--scenario", "star-cost", "--input", tmp_path / "s" / "data.csv", "--seed", 3, "--out", tmp_path / "c")
    src = read_csv(tmp_path / "s" / "data.csv")
    out = read_csv(tmp_path / "c" / "data.csv")
    assert out[0] == src[0] + ["y2"]
    assert len(out) == len(src)
    assert [r[:-1] for r in out] == src
    meta = json.loads((tmp_path / "c" / "data.meta.json").read_text())
    assert len(meta["cost_parameters"]["beta"]) == 11


def test_fit_bundle_contents(workdir):
    blob = json.loads((workdir / "fit" / "bundle.json").read_text())
    assert blob["schema_version"] == 1
    assert [m["kind"] for m in blob["models"]] == ["forest", "forest"]
    assert [m["level"] for m in blob["models"]] == [0.1, 0.1]
    assert blob["alpha"] == {"total": 0.2, "per_reward": [0.1, 0.1]}
    assert len(blob["split"]["training_indices"]) == len(blob["split"]["calibration_indices"]) == 500
    assert blob["policy"]["variant"] == "generative"
    assert blob["dataset"]["reward_floors"] == [0.0, 0.0]


def test_fit_known_uniform_has_no_mixture(workdir, tmp_path):
    run("fit", "--data", workdir / "gen" / "data.csv", "--policy", "known-uniform", "--seed", 1, "--trees", 5, "--out", tmp_path)
    policy = json.loads((tmp_path / "bundle.json").read_text())["policy"]
    assert policy["variant"] == "known" and policy["rule"] == "uniform"
    assert "mixtures" not in policy


def test_bundle_reload_predictions(workdir, rng):
    path = workdir / "fit" / "bundle.json"
    bundle = ModelBundle.load(path)
    again = ModelBundle.from_dict(json.loads(json.dumps(bundle.to_dict())))
    dec = rng.integers(0, 5, 100)
    Z = rng.normal(60, 12, (100, 1))
    for a, b in zip(bundle.models, again.models):
        assert np.array_equal(a.predict(dec, Z), b.predict(dec, Z))
    assert bundle.frontier([68.0]).efficient == again.frontier([68.0]).efficient


def test_fit_is_thread_independent(workdir, tmp_path):
    run("fit", "--data", workdir / "gen" / "data.csv", "--alpha", 0.2, "--seed", 1, "--trees", 40, "--threads", 3, "--out", tmp_path)
    assert digest(tmp_path / "bundle.json") == digest(workdir / "fit" / "bundle.json")


def test_fit_linear_and_custom_alpha(workdir, tmp_path):
    run("fit", "--data", workdir / "gen" / "data.csv", "--alpha", 0.3, "--alpha-per-reward", "0.1,0.2",
        "--model", "linear", "--policy", "propensity", "--seed", 2, "--out", tmp_path)
    blob = json.loads((tmp_path / "bundle.json").read_text())
    assert [m["kind"] for m in blob["models"]] == ["linear", "linear"]
    assert [m["level"] for m in blob["models"]] == [0.1, 0.2]


def test_frontier_files_and_partition(workdir, tmp_path):
    run("frontier", "--bundle", workdir / "fit" / "bundle.json", "--z", 46, "--z", 56, "--z", 68, "--out", tmp_path)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == [f"frontier_{i:03d}.{ext}" for i in range(3) for ext in ("csv", "json")]
    for i in range(3):
        rep = json.loads((tmp_path / f"frontier_{i:03d}.json").read_text())
        pts = [BoundPoint(p["decision"], [float(b) for b in p["bounds"]]) for p in rep["points"]]
        beaten = {q.decision for q in pts if any(strictly_dominates(p, q) for p in pts)}
        assert set(rep["efficient"]) == {p.decision for p in pts} - beaten
        assert {d["decision"] for d in rep["dominated"]} == beaten
        assert len(rep["decisions"]) == 5
        rows = read_csv(tmp_path / f"frontier_{i:03d}.csv")
        assert rows[0] == ["decision", "bound_1", "bound_2", "efficient", "clamped"]
        assert len(rows) == 6


def test_frontier_is_reproducible(workdir, tmp_path):
    for sub in ("a", "b"):
        run("frontier", "--bundle", workdir / "fit" / "bundle.json", "--z", 60, "--out", tmp_path / sub)
    assert digest(tmp_path / "a" / "frontier_000.json") == digest(tmp_path / "b" / "frontier_000.json")


def test_frontier_dimension_mismatch(workdir, tmp_path, capsys):
    assert main(["frontier", "--bundle", str(workdir / "fit" / "bundle.json"), "--z", "1,2", "--out", str(tmp_path)]) == 1
    assert "context has 2 values" in capsys.readouterr().err


def test_rare_decision_clamped_at_68_across_seeds(tmp_path):
    seeds = range(20)
    clamped = 0
    for seed in seeds:
        d = tmp_path / str(seed)
        run("gen", "--scenario", "synthetic", "--policy", "unbalanced", "--n", 1000, "--seed", seed, "--out", d)
        run("fit", "--data", d / "data.csv", "--seed", seed, "--trees", 20, "--out", d)
        run("frontier", "--bundle", d / "bundle.json", "--z", 68, "--out", d)
        rep = json.loads((d / "frontier_000.json").read_text())
        x4 = rep["decisions"][4]
        clamped += all(x4["clamped"]) and x4["bounds"] == [0.0, 0.0]
    assert clamped / len(seeds) >= 0.95


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"gen": {"n": 30, "policy": "unbalanced", "seed": 5}}))
    run("gen", "--config", cfg, "--n", 12, "--out", tmp_path / "o")
    meta = json.loads((tmp_path / "o" / "data.meta.json").read_text())
    assert meta["n"] == 12 and meta["seed"] == 5 and meta["config"]["policy"] == "unbalanced"


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"trees": 3}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown option" in capsys.readouterr().err


def test_missing_input_exit_code(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "nope.csv"), "--seed", "1", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--scenario", "moon"])
    assert exc.value.code == 2


def test_insufficient_data_exit_code(tmp_path):
    (tmp_path / "d.csv").write_text("x,y1,z\n0,1,2\n")
    assert main(["fit", "--data", str(tmp_path / "d.csv"), "--seed", "1", "--out", str(tmp_path)]) == 1


def test_coverage_single_replicate(tmp_path):
    run("coverage", "--alpha", 0.2, "--replicates", 1, "--n-test", 40, "--trees", 10, "--seed", 4, "--out", tmp_path)
    blob = json.loads((tmp_path / "coverage.json").read_text())
    assert blob["schema_version"] == 1 and blob["replicates"] == 1
    assert blob["policy_variant"] == "known"
    rows = read_csv(tmp_path / "coverage.csv")
    assert rows[0] == ["alpha", "decision", "reward", "violation_rate", "se", "clamp_rate"]


def test_coverage_thread_independent(tmp_path):
    args = ["coverage", "--alpha", 0.2, "--alpha", 0.4, "--replicates", 3, "--n-test", 30, "--trees", 10,
            "--policy", "generative", "--assignment", "unbalanced", "--probe-z", 68, "--seed", 4]
    run(*args, "--out", tmp_path / "a")
    run(*args, "--threads", 2, "--out", tmp_path / "b")
    for name in ("coverage.json", "coverage.csv"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_coverage_policy_conflict(tmp_path):
    assert main(["coverage", "--policy", "known-uniform", "--assignment", "unbalanced", "--replicates", "1",
                 "--seed", "1", "--out", str(tmp_path)]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "confpareto.cli", "gen", "--n", "5", "--seed", "1", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert (tmp_path / "data.csv").exists()
