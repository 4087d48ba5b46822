import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicelora.exceptions import BudgetExceeded, DegenerateInputError, ShapeError
from slicelora.miner import (TaskGradientSketch, build_pair_cache, load_sketch, mine, miner_report, save_sketch,
                             sketch_task_gradient)
from slicelora.model import SyntheticTask, ToyModel
from slicelora.synthetic import perturbed_teacher


def _cache(vectors):
    return build_pair_cache([TaskGradientSketch(f"t{i}", v) for i, v in enumerate(vectors)])


def _brute(vectors, n):
    # no cache: recompute cosines from the raw vectors for every subset
    vs = [np.asarray(v, dtype=float) for v in vectors]
    out = []
    for combo in itertools.combinations(range(len(vs)), n):
        cos = [vs[a] @ vs[b] / (np.linalg.norm(vs[a]) * np.linalg.norm(vs[b]))
               for a, b in itertools.combinations(combo, 2)]
        out.append((float(np.mean(cos)), tuple(f"t{i}" for i in combo)))
    return sorted(out, key=lambda t: (t[0], t[1]))


def test_hand_example():
    cache = _cache([[1, 0], [0, 1], [-1, 0]])
    scores = {(a, b): s for a, b, s in cache.pairs()}
    assert scores == {("t0", "t1"): 0.0, ("t0", "t2"): -1.0, ("t1", "t2"): 0.0}
    (best,) = mine(cache, 3)
    assert best.phi_bar == pytest.approx(-1 / 3, abs=1e-15)
    assert mine(cache, 2)[0].task_ids == ("t0", "t2")


def test_pairs_are_sorted_cosines():
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((6, 5))
    cache = _cache(vecs)
    ranked = mine(cache, 2, top_k=15)
    expected = sorted((s, (a, b)) for a, b, s in cache.pairs())
    assert [c.task_ids for c in ranked] == [ids for _, ids in expected]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 12), st.data())
def test_matches_cache_free_brute_force(seed, m, data):
    n = data.draw(st.integers(2, min(5, m)))
    vecs = np.random.default_rng(seed).standard_normal((m, 7))
    got, count = mine(_cache(vecs), n, top_k=3, return_count=True)
    ref = _brute(vecs, n)[:3]
    assert count == math.comb(m, n)
    for c, (phi, _) in zip(got, ref):
        assert c.phi_bar == pytest.approx(phi, abs=1e-12)
    assert got[0].task_ids == ref[0][1]


def test_scale_invariance():
    vecs = np.random.default_rng(1).standard_normal((7, 4))
    a = mine(_cache(vecs), 3, top_k=5)
    b = mine(_cache(10.0 * vecs), 3, top_k=5)
    assert [c.task_ids for c in a] == [c.task_ids for c in b]


def test_adding_a_clone_never_helps_conflict():
    vecs = np.random.default_rng(2).standard_normal((6, 4))
    before = mine(_cache(vecs), 3)[0].phi_bar
    after = mine(_cache(np.vstack([vecs, vecs[:1]])), 3)[0].phi_bar
    assert after <= before + 1e-15


def test_alignment_objective():
    cache = _cache([[1, 0], [0.9, 0.1], [-1, 0]])
    assert mine(cache, 2, objective="alignment")[0].task_ids == ("t0", "t1")


def test_budget_and_validation_errors():
    cache = _cache(np.random.default_rng(3).standard_normal((10, 3)))
    with pytest.raises(BudgetExceeded, match="252"):
        mine(cache, 5, budget=100)
    with pytest.raises(ValueError):
        mine(cache, 11)
    with pytest.raises(ValueError, match="duplicate"):
        build_pair_cache([TaskGradientSketch("a", [1.0]), TaskGradientSketch("a", [2.0])])
    with pytest.raises(DegenerateInputError):
        TaskGradientSketch("z", np.zeros(3))
    with pytest.raises(ShapeError):
        build_pair_cache([TaskGradientSketch("a", [1.0]), TaskGradientSketch("b", [1.0, 2.0])])


def test_full_scale_count():
    cache = _cache(np.random.default_rng(4).standard_normal((46, 8)))
    cands, count = mine(cache, 5, top_k=1, return_count=True)
    assert count == math.comb(46, 5) == 1_370_754
    assert len(cands) == 1


def test_sketch_file_round_trip(tmp_path):
    s = TaskGradientSketch("task-é", np.random.default_rng(5).standard_normal(11))
    save_sketch(s, tmp_path / "s.bin")
    back = load_sketch(tmp_path / "s.bin")
    assert back.task_id == s.task_id
    np.testing.assert_array_equal(back.g, s.g)
    with pytest.raises(FileNotFoundError, match="missing.bin"):
        load_sketch(tmp_path / "missing.bin")


def test_sketches_reflect_task_geometry():
    base = ToyModel.random([6, 5], 0, activation="identity")
    delta = np.random.default_rng(1).standard_normal((5, 6))
    t1 = SyntheticTask("a", 1, perturbed_teacher(base, {0: delta}), 64, 8)
    twin = SyntheticTask("a", 1, perturbed_teacher(base, {0: delta}), 64, 8)
    neg = SyntheticTask("b", 1, perturbed_teacher(base, {0: -delta}), 64, 8)
    s1 = sketch_task_gradient(base, t1, 4, 16, seed=3)
    np.testing.assert_array_equal(s1.g, sketch_task_gradient(base, twin, 4, 16, seed=3).g)
    cache = build_pair_cache([s1, sketch_task_gradient(base, neg, 4, 16, seed=3)])
    assert cache.scores[0, 1] < -0.9
    proj = sketch_task_gradient(base, t1, 4, 16, seed=3, projection_dim=8)
    assert proj.g.size == 8


def test_report_layout():
    cache = _cache([[1, 0], [0, 1], [-1, 0]])
    rep = miner_report(cache, mine(cache, 2, top_k=2), 2, 3)
    assert rep["candidates"][0] == {"rank": 1, "task_ids": ["t0", "t2"], "phi_bar": -1.0}
    assert len(rep["pair_scores"]) == 3
