import csv
import json

import numpy as np
import pytest

from slicelora.adapters import rescale_coefficient
from slicelora.cli import EXIT_BUDGET, EXIT_CELL, EXIT_CONFIG, EXIT_OK, main
from slicelora.model import ToyModel
from slicelora.synthetic import perturbed_teacher


def _run(*args):
    return main([str(a) for a in args])


def test_single_cell_single_seed(tiny, write_yaml, tmp_path):
    out = tmp_path / "out"
    assert _run("run", "--config", write_yaml(tiny), "--out", out) == EXIT_OK
    assert len(list(out.rglob("results.csv"))) == 1
    assert len(list(out.rglob("summary.json"))) == 1
    summary = json.loads(next(out.rglob("summary.json")).read_text())
    assert set(summary) >= {"config", "seed", "sequence", "mining", "metrics", "stages"}
    assert (out / "resolved_config.yaml").exists()


def test_sweep_grid_and_aggregate(tiny, write_yaml, tmp_path):
    tiny["seeds"] = list(range(10))
    tiny["sweep"] = {"init.c": [0.0, 0.5, 1.0]}
    out = tmp_path / "out"
    assert _run("run", "--config", write_yaml(tiny), "--out", out) == EXIT_OK
    assert len(list(out.rglob("results.csv"))) == 30
    with (out / "aggregate.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["init.c"] for r in rows] == ["0.0", "0.5", "1.0"]
    assert all(r["seeds_ok"] == "10" for r in rows)
    fgt = [json.loads(p.read_text())["metrics"]["fgt"] for p in (out / "cell_000").rglob("summary.json")]
    assert float(rows[0]["fgt_mean"]) == pytest.approx(np.mean(fgt), rel=1e-12)


def test_dry_run(tiny, write_yaml, tmp_path, capsys):
    tiny["seeds"] = [0, 1]
    tiny["sweep"] = {"init.c": [0.5, 1.0]}
    out = tmp_path / "out"
    assert _run("run", "--config", write_yaml(tiny), "--out", out, "--dry-run") == EXIT_OK
    assert "2 cell(s) x 2 seed(s) = 4 run(s)" in capsys.readouterr().out
    assert not out.exists()


def test_runs_are_byte_identical(tiny, write_yaml, tmp_path):
    path = write_yaml(tiny)
    _run("run", "--config", path, "--out", tmp_path / "a")
    _run("run", "--config", path, "--out", tmp_path / "b")
    rel = "cell_000/seed_0/results.csv"
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tiny, write_yaml, tmp_path, capsys):
    bad = dict(tiny, init={k: v for k, v in tiny["init"].items() if k != "rank"})
    assert _run("run", "--config", write_yaml(bad, "bad.yaml"), "--out", tmp_path / "o1") == EXIT_CONFIG
    assert "init.rank" in capsys.readouterr().err

    tiny["seeds"] = [0, 1]
    tiny["sweep"] = {"training.learning_rate": [0.003, 1e6]}
    tiny["training"]["optimizer"] = "sgd"
    tiny["training"]["epochs"] = 5
    assert _run("run", "--config", write_yaml(tiny, "div.yaml"), "--out", tmp_path / "o2") == EXIT_CELL
    assert (tmp_path / "o2" / "cell_001" / "seed_0" / "error.txt").exists()
    assert (tmp_path / "o2" / "cell_000" / "seed_0" / "results.csv").exists()

    tiny["sweep"] = {}
    tiny["tasks"]["budget"] = 2
    assert _run("run", "--config", write_yaml(tiny, "budget.yaml"), "--out", tmp_path / "o3") == EXIT_BUDGET


def _task_files(tmp_path, count=3):
    base = ToyModel.random([5, 3], 0, activation="identity")
    rng = np.random.default_rng(0)
    paths = []
    for i in range(count):
        teacher = perturbed_teacher(base, {0: rng.standard_normal((3, 5))})
        x = rng.standard_normal((40, 5))
        y = x @ teacher.layers[0].w0.T + teacher.layers[0].bias
        p = tmp_path / f"task{i}.jsonl"
        p.write_text("".join(json.dumps({"input": list(a), "target": list(b)}) + "\n" for a, b in zip(x, y)))
        paths.append(p.name)
    return paths


def _manifest(pool):
    return {"schema_version": 1, "seed": 0, "model": {"dims": [5, 3], "activation": "identity"},
            "mine": {"n": 2, "top_k": 3}, "pool": pool}


def test_mine_pool_of_two(write_yaml, tmp_path):
    files = _task_files(tmp_path, 2)
    out = tmp_path / "m"
    assert _run("mine", "--config", write_yaml(_manifest([{"file": f} for f in files]), "pool.yaml"),
                "--out", out) == EXIT_OK
    rep = json.loads((out / "mined.json").read_text())
    assert len(rep["candidates"]) == 1 and rep["subsets_evaluated"] == 1


def test_mine_precomputed_sketches_match_fresh(write_yaml, tmp_path):
    files = _task_files(tmp_path)
    fresh = tmp_path / "fresh"
    assert _run("mine", "--config", write_yaml(_manifest([{"file": f} for f in files]), "a.yaml"),
                "--out", fresh, "--save-sketches") == EXIT_OK
    mixed_pool = [{"sketch": "fresh/sketches/task0.bin"}] + [{"file": f} for f in files[1:]]
    mixed = tmp_path / "mixed"
    assert _run("mine", "--config", write_yaml(_manifest(mixed_pool), "b.yaml"), "--out", mixed) == EXIT_OK
    assert (fresh / "mined.json").read_text() == (mixed / "mined.json").read_text()


def test_mine_missing_sketch_names_path(write_yaml, tmp_path, capsys):
    files = _task_files(tmp_path, 2)
    pool = [{"sketch": "nowhere/lost.bin"}] + [{"file": f} for f in files]
    assert _run("mine", "--config", write_yaml(_manifest(pool), "p.yaml"), "--out", tmp_path / "m") == EXIT_CONFIG
    assert "lost.bin" in capsys.readouterr().err


def test_mine_budget_refusal(write_yaml, tmp_path):
    files = _task_files(tmp_path)
    man = _manifest([{"file": f} for f in files])
    man["mine"]["budget"] = 1
    assert _run("mine", "--config", write_yaml(man, "p.yaml"), "--out", tmp_path / "m") == EXIT_BUDGET


def test_inspect_init_report(tiny, write_yaml, tmp_path):
    tiny["model"] = {"dims": [24, 16], "activation": "identity"}
    tiny["tasks"] = {"source": "subspace_pool", "pool_size": 12, "length": 3, "params": {"private": 0.4}}
    tiny["inspect"] = {"task_index": 2}
    out = tmp_path / "i"
    assert _run("inspect-init", "--config", write_yaml(tiny), "--out", out) == EXIT_OK
    rep = json.loads((out / "inspect_init.json").read_text())
    s = rep["surgery"]
    assert not rep["surgery_skipped"] and s["active"]
    assert s["cosine_to_prev_before"] < 0 and abs(s["cosine_to_prev_after"]) < 1e-10
    for entry in rep["layers"].values():
        r = entry["rescale"]
        assert r["m"] == min(entry["shape"])
        beta, _, _ = rescale_coefficient(r["sigma_w_sq"], r["sigma_ba_sq"], entry["rank"], r["m"])
        assert r["beta"] == pytest.approx(beta, rel=1e-12)

    tiny["inspect"] = {"task_index": 0}
    assert _run("inspect-init", "--config", write_yaml(tiny, "first.yaml"), "--out", out) == EXIT_OK
    rep = json.loads((out / "inspect_init.json").read_text())
    assert rep["surgery_skipped"] and rep["previous_tasks"] == []
