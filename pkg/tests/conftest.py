import copy

import pytest
import yaml

TINY = {
    "schema_version": 1,
    "seeds": [0],
    "model": {"dims": [8, 6], "activation": "identity"},
    "tasks": {"source": "subspace_pool", "pool_size": 4, "length": 2, "train_count": 32, "eval_count": 16,
              "params": {"shared_dim": 2, "private_dim": 2}},
    "held_out": {"count": 1},
    "init": {"method": "slice", "c": 1.0, "rank": 2, "alpha": 2.0, "scaling_rule": "rs_lora", "s_cur": 2,
             "s_prev": 2},
    "training": {"epochs": 1, "learning_rate": 0.003, "optimizer": "adam"},
    "inspect": {"task_index": 1},
}


@pytest.fixture
def tiny():
    return copy.deepcopy(TINY)


@pytest.fixture
def write_yaml(tmp_path):
    def _write(data, name="config.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False))
        return path
    return _write
