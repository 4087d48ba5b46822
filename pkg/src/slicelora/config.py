"""Run configuration: a single versioned YAML file, validated with field paths.

Scientifically meaningful parameters (``init.c`` for slice, ``init.rank``,
``init.alpha``, ``init.scaling_rule``, ``init.s_cur``, ``init.s_prev``) must be
written out unless the top-level ``defaults: true`` opts into the built-in
values. Everything else falls back silently and is materialized on
serialization, so ``dump(parse(text))`` is a complete, explicit record.
"""
from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from ._seeding import derive_seed
from .adapters import METHODS, SCALING_RULES, InitConfig
from .exceptions import ConfigError
from .harness import OPTIMIZERS, SequenceConfig
from .miner import DEFAULT_BUDGET, build_pair_cache, mine, sketch_task_gradient
from .model import ACTIVATIONS, LOSSES, ToyModel, load_jsonl_task
from .synthetic import angle_pool, held_out_tasks, subspace_pool

__all__ = ["SCHEMA_VERSION", "RunConfig", "Experiment", "parse_config", "load_config", "dump_config",
           "build_experiment", "build_model", "validate_model", "with_init"]

SCHEMA_VERSION = 1

# Values used when a field is absent. Entries under ``init`` listed in
# SCIENTIFIC are only taken from here behind ``defaults: true``.
DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "defaults": False,
    "seeds": None,
    "model": {"dims": None, "activation": "identity", "loss": "mean_squared_error", "bias": True,
              "weight_scale": 1.0, "targets": None},
    "tasks": {"source": "subspace_pool", "pool_size": 12, "length": 3, "selection": "mined",
              "objective": "conflict", "budget": DEFAULT_BUDGET, "sketch_steps": 8, "sketch_batch_size": 32,
              "train_count": 256, "eval_count": 256, "noise_std": 0.0, "params": {}, "files": []},
    "held_out": {"count": 2, "ip_input_scale": 2.0},
    "init": {"method": None, "c": 1.0, "rank": 2, "alpha": 2.0, "scaling_rule": "rs_lora", "s_cur": 8,
             "s_prev": 8, "batch_size": 16, "a_block": "second", "prev_budget": None},
    "surgery": {"coefficient_scope": "global"},
    "svd": {"mode": "randomized", "oversampling_multiplier": 4, "power_iterations": 4},
    "training": {"epochs": 3, "learning_rate": 0.05, "batch_size": 16, "optimizer": "sgd"},
    "sweep": {},
    "inspect": {"task_index": None, "seed": None},
}
SCIENTIFIC = ("c", "rank", "alpha", "scaling_rule", "s_cur", "s_prev")
SOURCES = ("subspace_pool", "angle_pool", "files")


def _check_keys(section: dict, allowed, path):
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, "unknown field")


def _int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _real(value, path, minimum=None, maximum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigError(path, f"must be <= {maximum}, got {value}")
    return value


def _choice(value, choices, path):
    if value not in choices:
        raise ConfigError(path, f"must be one of {list(choices)}, got {value!r}")
    return value


def _bool(value, path):
    if not isinstance(value, bool):
        raise ConfigError(path, f"expected true or false, got {value!r}")
    return value


def _section(raw, name):
    value = raw.get(name, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(name, "expected a mapping")
    _check_keys(value, DEFAULTS[name], name)
    return value


def _merge(name, given):
    out = copy.deepcopy(DEFAULTS[name])
    out.update(copy.deepcopy(given))
    return out


def validate_model(section, path="model") -> dict:
    """Validate and materialize a ``model`` block (shared with mining manifests)."""
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(path, "expected a mapping")
    _check_keys(section, DEFAULTS["model"], path)
    model = _merge("model", section)
    dims = model["dims"]
    if not isinstance(dims, list) or len(dims) < 2:
        raise ConfigError(f"{path}.dims", "expected a list of at least two layer widths")
    model["dims"] = [_int(d, f"{path}.dims[{i}]", 1) for i, d in enumerate(dims)]
    _choice(model["activation"], ACTIVATIONS, f"{path}.activation")
    _choice(model["loss"], LOSSES, f"{path}.loss")
    _bool(model["bias"], f"{path}.bias")
    model["weight_scale"] = _real(model["weight_scale"], f"{path}.weight_scale", 0.0)
    n_layers = len(model["dims"]) - 1
    if model["targets"] is not None:
        if not isinstance(model["targets"], list) or not model["targets"]:
            raise ConfigError(f"{path}.targets", "expected null or a non-empty list of layer indices")
        for i, t in enumerate(model["targets"]):
            _int(t, f"{path}.targets[{i}]", 0)
            if t >= n_layers:
                raise ConfigError(f"{path}.targets[{i}]", f"layer {t} does not exist ({n_layers} layers)")
    return model


def build_model(model: dict, seed: int) -> ToyModel:
    return ToyModel.random(model["dims"], derive_seed(seed, "model"), activation=model["activation"],
                           loss_kind=model["loss"], bias=model["bias"], weight_scale=model["weight_scale"],
                           targets=model["targets"])


def _validate(raw: dict, base_dir: Path) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a mapping at the top level")
    _check_keys(raw, DEFAULTS, "")
    if "schema_version" not in raw:
        raise ConfigError("schema_version", "missing (expected 1)")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {raw['schema_version']!r}")
    use_defaults = _bool(raw.get("defaults", False), "defaults")

    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds", "expected a non-empty list of integers")
    seeds = [_int(s, f"seeds[{i}]", 0) for i, s in enumerate(seeds)]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")

    model = validate_model(raw.get("model"), "model")
    n_layers = len(model["dims"]) - 1

    tasks = _merge("tasks", _section(raw, "tasks"))
    _choice(tasks["source"], SOURCES, "tasks.source")
    _int(tasks["length"], "tasks.length", 2)
    _choice(tasks["selection"], ("mined", "first"), "tasks.selection")
    _choice(tasks["objective"], ("conflict", "alignment"), "tasks.objective")
    for key in ("budget", "sketch_steps", "sketch_batch_size", "train_count", "eval_count"):
        _int(tasks[key], f"tasks.{key}", 1)
    tasks["noise_std"] = _real(tasks["noise_std"], "tasks.noise_std", 0.0)
    if not isinstance(tasks["params"], dict):
        raise ConfigError("tasks.params", "expected a mapping")
    if tasks["source"] == "files":
        files = tasks["files"]
        if not isinstance(files, list) or len(files) < 2:
            raise ConfigError("tasks.files", "expected a list of at least two task files")
        norm = []
        for i, entry in enumerate(files):
            if isinstance(entry, str):
                entry = {"path": entry}
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError(f"tasks.files[{i}]", "expected a path or a mapping with 'path'")
            _check_keys(entry, ("path", "id", "kind"), f"tasks.files[{i}]")
            resolved = (base_dir / entry["path"]).resolve()
            if not resolved.exists():
                raise ConfigError(f"tasks.files[{i}].path", f"file not found: {resolved}")
            norm.append({"path": str(entry["path"]), "id": entry.get("id", Path(entry["path"]).stem),
                         "kind": _choice(entry.get("kind", "regression"), ("regression", "classification"),
                                         f"tasks.files[{i}].kind")})
        tasks["files"] = norm
        tasks["pool_size"] = len(norm)
    else:
        _int(tasks["pool_size"], "tasks.pool_size", 2)
        if tasks["files"]:
            raise ConfigError("tasks.files", f"only used with source 'files', not {tasks['source']!r}")
    if tasks["length"] > tasks["pool_size"]:
        raise ConfigError("tasks.length", f"longer than the pool ({tasks['pool_size']})")

    held = _merge("held_out", _section(raw, "held_out"))
    _int(held["count"], "held_out.count", 0)
    held["ip_input_scale"] = _real(held["ip_input_scale"], "held_out.ip_input_scale", 0.0)

    given_init = _section(raw, "init")
    init = _merge("init", given_init)
    if init["method"] is None:
        raise ConfigError("init.method", f"missing (one of {list(METHODS)})")
    _choice(init["method"], METHODS, "init.method")
    for key in SCIENTIFIC:
        if key == "c" and init["method"] != "slice":
            continue
        if key not in given_init and not use_defaults:
            raise ConfigError(f"init.{key}", "missing; set it explicitly or opt in with 'defaults: true'")
    if init["method"] == "slice":
        init["c"] = _real(init["c"], "init.c", 0.0, 1.0)
    else:
        if "c" in given_init and given_init["c"] is not None:
            raise ConfigError("init.c", f"only applies to method 'slice', not {init['method']!r}")
        init["c"] = None
    _int(init["rank"], "init.rank", 2)
    init["alpha"] = _real(init["alpha"], "init.alpha", 0.0)
    _choice(init["scaling_rule"], SCALING_RULES, "init.scaling_rule")
    for key in ("s_cur", "s_prev", "batch_size"):
        _int(init[key], f"init.{key}", 1)
    _choice(init["a_block"], ("second", "leading"), "init.a_block")
    if init["prev_budget"] is not None:
        _int(init["prev_budget"], "init.prev_budget", 1)
    if init["method"] in ("slice", "lora_ga"):
        limit = min(min(model["dims"][i], model["dims"][i + 1]) for i in range(n_layers)
                    if model["targets"] is None or i in model["targets"])
        if 2 * init["rank"] > limit:
            raise ConfigError("init.rank", f"2 * rank must not exceed the smallest target dimension ({limit})")

    surgery = _merge("surgery", _section(raw, "surgery"))
    _choice(surgery["coefficient_scope"], ("global", "per_layer"), "surgery.coefficient_scope")

    svd = _merge("svd", _section(raw, "svd"))
    _choice(svd["mode"], ("randomized", "exact"), "svd.mode")
    _int(svd["oversampling_multiplier"], "svd.oversampling_multiplier", 1)
    _int(svd["power_iterations"], "svd.power_iterations", 0)

    training = _merge("training", _section(raw, "training"))
    _int(training["epochs"], "training.epochs", 1)
    training["learning_rate"] = _real(training["learning_rate"], "training.learning_rate", 0.0)
    _int(training["batch_size"], "training.batch_size", 1)
    _choice(training["optimizer"], tuple(OPTIMIZERS), "training.optimizer")

    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep", "expected a mapping of 'section.field' to value lists")
    for key, values in sweep.items():
        parts = str(key).split(".")
        if len(parts) != 2 or parts[0] not in ("init", "surgery", "svd", "training", "held_out", "tasks") \
                or parts[1] not in DEFAULTS[parts[0]]:
            raise ConfigError(f"sweep.{key}", "not a sweepable 'section.field' name")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}", "expected a non-empty list of values")

    inspect = _merge("inspect", _section(raw, "inspect"))
    if inspect["task_index"] is not None:
        _int(inspect["task_index"], "inspect.task_index", 0)
        if inspect["task_index"] >= tasks["length"]:
            raise ConfigError("inspect.task_index", f"sequence has only {tasks['length']} tasks")
    if inspect["seed"] is not None:
        _int(inspect["seed"], "inspect.seed", 0)

    return {
        "schema_version": SCHEMA_VERSION, "defaults": use_defaults, "seeds": seeds, "model": model,
        "tasks": tasks, "held_out": held, "init": init, "surgery": surgery, "svd": svd,
        "training": training, "sweep": {str(k): list(v) for k, v in sweep.items()}, "inspect": inspect,
    }


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration with every field materialized."""

    data: dict
    base_dir: Path = Path(".")

    @property
    def seeds(self) -> list:
        return list(self.data["seeds"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def cells(self):
        """Cartesian product of the sweep; yields ``(params, RunConfig)`` without a sweep block."""
        sweep = self.data["sweep"]
        keys = list(sweep)
        for values in itertools.product(*(sweep[k] for k in keys)):
            raw = self.to_dict()
            raw["sweep"] = {}
            for key, value in zip(keys, values):
                section, field = key.split(".")
                raw[section][field] = value
            if raw["init"]["method"] != "slice":
                raw["init"]["c"] = None
            params = dict(zip(keys, values))
            try:
                cell = parse_config(raw, self.base_dir)
            except ConfigError as exc:
                raise ConfigError(f"sweep[{params}].{exc.path}", str(exc)) from None
            yield params, cell

    def init_config(self, seed: int) -> InitConfig:
        i, s = self.data["init"], self.data["svd"]
        return InitConfig(
            i["method"], i["rank"], c=i["c"], alpha=i["alpha"], scaling_rule=i["scaling_rule"],
            s_cur=i["s_cur"], s_prev=i["s_prev"], batch_size=i["batch_size"],
            coefficient_scope=self.data["surgery"]["coefficient_scope"], svd_mode=s["mode"],
            oversampling_multiplier=s["oversampling_multiplier"], power_iterations=s["power_iterations"],
            a_block=i["a_block"], prev_budget=i["prev_budget"], seed=seed,
        )

    def sequence_config(self, seed: int, experiment: "Experiment | None" = None) -> SequenceConfig:
        exp = experiment or build_experiment(self, seed)
        t = self.data["training"]
        return SequenceConfig(
            exp.base, exp.tasks, self.init_config(seed), epochs=t["epochs"], learning_rate=t["learning_rate"],
            batch_size=t["batch_size"], seed=seed, held_out=exp.held_out, optimizer=t["optimizer"],
        )


def parse_config(raw: dict, base_dir=".") -> RunConfig:
    base_dir = Path(base_dir)
    return RunConfig(_validate(raw, base_dir), base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from None
    return parse_config(raw, path.parent)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


@dataclass(frozen=True)
class Experiment:
    """Seed-specific materialization: base model, task sequence, held-out tasks, mining record."""

    base: ToyModel
    tasks: tuple
    held_out: tuple
    pool_ids: tuple
    mining: dict | None = None


def _pool(cfg: RunConfig, base: ToyModel, seed: int):
    t = cfg.data["tasks"]
    common = dict(train_count=t["train_count"], eval_count=t["eval_count"], noise_std=t["noise_std"])
    pool_seed = derive_seed(seed, "tasks")
    try:
        if t["source"] == "subspace_pool":
            return subspace_pool(base, t["pool_size"], pool_seed, **common, **t["params"])
        if t["source"] == "angle_pool":
            return angle_pool(base, t["pool_size"], pool_seed, **common, **t["params"])
    except TypeError as exc:
        raise ConfigError("tasks.params", str(exc)) from None
    tasks = []
    for i, entry in enumerate(t["files"]):
        task = load_jsonl_task(cfg.base_dir / entry["path"], entry["id"], kind=entry["kind"],
                               seed=derive_seed(seed, "task_file", entry["id"]))
        if task.input_dim != base.n_features or task.output_dim != base.n_outputs:
            raise ConfigError(f"tasks.files[{i}]", f"task shape {task.input_dim}->{task.output_dim} does not match "
                                                  f"model {base.n_features}->{base.n_outputs}")
        tasks.append(task)
    return tasks


def build_experiment(cfg: RunConfig, seed: int) -> Experiment:
    """Base model, pool and selected sequence for one seed; all draws use named sub-seeds."""
    m, t = cfg.data["model"], cfg.data["tasks"]
    base = build_model(m, seed)
    pool = _pool(cfg, base, seed)
    mining = None
    if t["selection"] == "mined":
        sketch_seed = derive_seed(seed, "sketch")
        sketches = [sketch_task_gradient(base, task, t["sketch_steps"], t["sketch_batch_size"], sketch_seed)
                    for task in pool]
        cache = build_pair_cache(sketches)
        best = mine(cache, t["length"], 1, budget=t["budget"], objective=t["objective"])[0]
        idx = [cache.task_ids.index(i) for i in best.task_ids]
        mining = {
            "task_ids": list(best.task_ids), "phi_bar": best.phi_bar,
            "pair_cosines": {f"{cache.task_ids[a]}|{cache.task_ids[b]}": float(cache.scores[a, b])
                             for a, b in itertools.combinations(idx, 2)},
        }
        by_id = {task.task_id: task for task in pool}
        sequence = [by_id[i] for i in best.task_ids]
    else:
        sequence = pool[:t["length"]]
    h = cfg.data["held_out"]
    held = () if h["count"] == 0 else tuple(
        held_out_tasks(base, derive_seed(seed, "held_out"), count=h["count"], ip_input_scale=h["ip_input_scale"]))
    return Experiment(base, tuple(sequence), held, tuple(task.task_id for task in pool), mining)


def with_init(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with ``init`` fields replaced (re-validated)."""
    raw = cfg.to_dict()
    raw["init"].update(changes)
    return replace(cfg, data=_validate(raw, cfg.base_dir))
