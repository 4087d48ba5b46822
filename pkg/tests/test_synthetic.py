import math

import numpy as np
import pytest

from slicelora.model import ToyModel
from slicelora.synthetic import angle_pool, held_out_tasks, subspace_pool


def _base():
    return ToyModel.random([24, 16], 0, activation="identity")


def test_subspace_pool_structure():
    base = _base()
    pool = subspace_pool(base, 12, 3, private=0.4)
    assert [t.task_id for t in pool] == [f"task{i:02d}" for i in range(12)]
    deltas = [t.teacher.layers[0].w0 - base.layers[0].w0 for t in pool]
    # tasks six angles apart share the same shared-direction component
    shared = [d @ pool[0].input_basis[0] for d in deltas]
    np.testing.assert_allclose(shared[0], shared[6], atol=1e-12)
    np.testing.assert_allclose(shared[0], -shared[3], atol=1e-12)
    cos = shared[0] @ shared[1] / (np.linalg.norm(shared[0]) * np.linalg.norm(shared[1]))
    assert cos == pytest.approx(math.cos(math.pi / 3), abs=1e-12)
    for t in pool:
        basis = t.input_basis
        np.testing.assert_allclose(basis @ basis.T, np.eye(8), atol=1e-12)


def test_subspace_pool_is_deterministic_and_validates():
    a, b = subspace_pool(_base(), 3, 1), subspace_pool(_base(), 3, 1)
    np.testing.assert_array_equal(a[2].train_split()[0], b[2].train_split()[0])
    with pytest.raises(ValueError):
        subspace_pool(ToyModel.random([6, 4], 0), 2, 0)


def test_angle_pool_opposite_angles_conflict():
    base = _base()
    a, b = angle_pool(base, 2, 0, private=0.0, angles=[0.0, math.pi])
    da = a.teacher.layers[0].w0 - base.layers[0].w0
    db = b.teacher.layers[0].w0 - base.layers[0].w0
    np.testing.assert_allclose(da, -db, atol=1e-12)


def test_held_out_tasks_are_labelled_by_base():
    base = _base()
    held = held_out_tasks(base, 0, count=2, ip_input_scale=2.0)
    assert [tag for _, tag in held] == ["gp", "gp", "ip", "ip"]
    gp_x = held[0][0].eval_split()[0]
    ip_x = held[2][0].eval_split()[0]
    assert np.std(ip_x) == pytest.approx(2 * np.std(gp_x), rel=0.1)
