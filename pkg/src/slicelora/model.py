"""Desk-scale dense networks, synthetic teacher tasks and gradient accumulation.

A :class:`ToyModel` is an immutable stack of dense layers with frozen base
weights. Low-rank adapters are attached by value (``with_adapters``) and
contribute ``scaling * B @ A`` to the effective weight of their layer.
Gradients are always taken with respect to the effective weight matrix.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._seeding import derive_rng
from ._validation import check_batch, check_matrix, check_positive_int, check_vector
from .exceptions import NoPreviousTasks, SamplerExhausted, ShapeError

__all__ = [
    "LayerWeights",
    "ToyModel",
    "SyntheticTask",
    "DatasetTask",
    "GradientSet",
    "BatchSampler",
    "MixtureSampler",
    "forward",
    "loss",
    "layer_gradients",
    "accumulate_gradients",
    "build_prev_sampler",
    "load_jsonl_task",
]

ACTIVATIONS = ("tanh", "relu", "identity")
LOSSES = ("mean_squared_error", "softmax_cross_entropy")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, h):
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerWeights:
    w0: np.ndarray
    bias: np.ndarray | None = None
    target: bool = True

    def __post_init__(self):
        object.__setattr__(self, "w0", check_matrix(self.w0, "w0"))
        if self.bias is not None:
            b = check_vector(self.bias, "bias")
            if b.shape[0] != self.w0.shape[0]:
                raise ShapeError(f"bias has length {b.shape[0]}, layer has {self.w0.shape[0]} outputs")
            object.__setattr__(self, "bias", b)

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]


@dataclass(frozen=True)
class ToyModel:
    """Dense network ``x -> W_L act(... act(W_1 x + b_1) ...) + b_L``.

    ``adapters`` maps a layer index to an object exposing ``delta()`` (the
    ``scaling * B @ A`` term); the base weights never change in place.
    """

    layers: tuple
    activation: str = "tanh"
    loss_kind: str = "mean_squared_error"
    adapters: Mapping = field(default_factory=dict)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("model needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].d_out != layers[i + 1].d_in:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].d_out} features but layer {i + 1} expects {layers[i + 1].d_in}"
                )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"loss_kind must be one of {LOSSES}")
        for idx, pair in dict(self.adapters).items():
            if not 0 <= idx < len(layers):
                raise ShapeError(f"adapter attached to missing layer {idx}")
            if pair.shape != layers[idx].w0.shape:
                raise ShapeError(f"adapter for layer {idx} has shape {pair.shape}, layer is {layers[idx].w0.shape}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "adapters", dict(self.adapters))

    @classmethod
    def random(cls, dims: Sequence[int], seed: int, *, activation="tanh",
               loss_kind="mean_squared_error", bias=True, weight_scale=1.0, targets=None):
        """Gaussian init with std ``weight_scale / sqrt(d_in)``; ``targets`` defaults to all layers."""
        rng = derive_rng(seed, "toy_model")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.standard_normal((d_out, d_in)) * (weight_scale / math.sqrt(d_in))
            b = 0.1 * rng.standard_normal(d_out) if bias else None
            is_target = True if targets is None else i in targets
            layers.append(LayerWeights(w, b, is_target))
        return cls(tuple(layers), activation, loss_kind)

    @property
    def n_features(self) -> int:
        return self.layers[0].d_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].d_out

    @property
    def target_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if layer.target]

    def effective_weight(self, idx) -> np.ndarray:
        w = self.layers[idx].w0
        pair = self.adapters.get(idx)
        return w if pair is None else w + pair.delta()

    def effective_weights(self) -> list:
        return [self.effective_weight(i) for i in range(len(self.layers))]

    def with_adapters(self, adapters) -> "ToyModel":
        return replace(self, adapters=dict(adapters))

    def without_adapters(self) -> "ToyModel":
        return replace(self, adapters={})

    def with_base(self, weights: Mapping) -> "ToyModel":
        """Copy with the base weight of every layer in ``weights`` replaced."""
        layers = list(self.layers)
        for idx, w in weights.items():
            layers[idx] = replace(layers[idx], w0=w)
        return replace(self, layers=tuple(layers))

    def merged(self) -> "ToyModel":
        """Fold attached adapters into the base weights and detach them."""
        merged = {idx: self.effective_weight(idx) for idx in self.adapters}
        return self.with_base(merged).without_adapters()


def _forward_trace(model: ToyModel, x: np.ndarray):
    hs = [x]
    zs = []
    weights = model.effective_weights()
    last = len(weights) - 1
    h = x
    for i, (layer, w) in enumerate(zip(model.layers, weights)):
        z = h @ w.T
        if layer.bias is not None:
            z = z + layer.bias
        zs.append(z)
        h = z if i == last else _act(model.activation, z)
        hs.append(h)
    return weights, zs, hs


def forward(model: ToyModel, x) -> np.ndarray:
    """Network output for one input vector (1-D) or a batch of rows (2-D)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    xb = check_batch(arr, n_features=model.n_features)
    out = _forward_trace(model, xb)[2][-1]
    return out[0] if single else out


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _loss_and_output_grad(loss_kind, out, y):
    n = out.shape[0]
    if loss_kind == "mean_squared_error":
        resid = out - y
        value = float(np.mean(resid * resid))
        grad = 2.0 * resid / (n * out.shape[1])
    else:
        logp = _log_softmax(out)
        value = float(-np.sum(y * logp) / n)
        p = np.exp(logp)
        grad = (p * y.sum(axis=1, keepdims=True) - y) / n
    return value, grad


def loss(model: ToyModel, x, y) -> float:
    """Mean per-example loss.

    Squared error is averaged over output dimensions; cross-entropy uses
    natural log and expects one-hot (or probability) target rows.
    """
    xb, yb = check_batch(x, y, n_features=model.n_features)
    out = _forward_trace(model, xb)[2][-1]
    if yb.shape[1] != out.shape[1]:
        raise ShapeError(f"targets have {yb.shape[1]} columns, model outputs {out.shape[1]}")
    return _loss_and_output_grad(model.loss_kind, out, yb)[0]


def loss_and_gradients(model: ToyModel, x, y, layers=None):
    """Loss and ``d loss / d W_eff`` for ``layers`` (default: target layers)."""
    xb, yb = check_batch(x, y, n_features=model.n_features)
    weights, zs, hs = _forward_trace(model, xb)
    out = hs[-1]
    if yb.shape[1] != out.shape[1]:
        raise ShapeError(f"targets have {yb.shape[1]} columns, model outputs {out.shape[1]}")
    value, delta = _loss_and_output_grad(model.loss_kind, out, yb)
    wanted = set(model.target_indices if layers is None else layers)
    grads = {}
    for i in range(len(weights) - 1, -1, -1):
        if i in wanted:
            grads[i] = delta.T @ hs[i]
        if i == 0 or not wanted.intersection(range(i)):
            break
        delta = (delta @ weights[i]) * _act_grad(model.activation, zs[i - 1], hs[i])
    return value, {i: grads[i] for i in sorted(grads)}


def layer_gradients(model: ToyModel, x, y) -> dict:
    """Exact backpropagated gradient of the batch loss for every target layer."""
    return loss_and_gradients(model, x, y)[1]


@dataclass(frozen=True)
class GradientSet:
    per_layer: dict
    accumulation_steps: int = 1
    batch_size: int = 1
    source: str = "current_task"

    def __post_init__(self):
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.source not in ("current_task", "previous_tasks"):
            raise ValueError(f"unknown gradient source {self.source!r}")
        object.__setattr__(self, "per_layer", {int(k): np.asarray(v, dtype=np.float64)
                                                for k, v in sorted(self.per_layer.items())})

    @property
    def layer_order(self) -> list:
        return list(self.per_layer)

    def flatten(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.per_layer.values()])

    def unflatten(self, flat) -> dict:
        flat = np.asarray(flat, dtype=np.float64)
        out, pos = {}, 0
        for idx, g in self.per_layer.items():
            out[idx] = flat[pos:pos + g.size].reshape(g.shape)
            pos += g.size
        if pos != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, gradient set has {pos}")
        return out

    def replace_layers(self, per_layer) -> "GradientSet":
        return replace(self, per_layer=per_layer)

    def check_compatible(self, other: "GradientSet"):
        if self.layer_order != other.layer_order:
            raise ShapeError(f"gradient sets cover layers {self.layer_order} and {other.layer_order}")
        for idx in self.per_layer:
            if self.per_layer[idx].shape != other.per_layer[idx].shape:
                raise ShapeError(
                    f"layer {idx}: shapes {self.per_layer[idx].shape} and {other.per_layer[idx].shape} differ"
                )


class BatchSampler:
    """Mini-batches from a fixed ``(X, Y)`` pool, with replacement by default."""

    def __init__(self, x, y, seed, replace=True):
        self.x, self.y = check_batch(x, y)
        self.replace = replace
        self._rng = np.random.default_rng(seed)
        self._order = None
        self._pos = 0

    def __len__(self):
        return self.x.shape[0]

    def sample(self, batch_size):
        n = self.x.shape[0]
        if self.replace:
            idx = self._rng.integers(0, n, size=batch_size)
        else:
            if self._order is None:
                self._order = self._rng.permutation(n)
            if self._pos + batch_size > n:
                raise SamplerExhausted(
                    f"requested {batch_size} examples but only {n - self._pos} of {n} remain"
                )
            idx = self._order[self._pos:self._pos + batch_size]
            self._pos += batch_size
        return self.x[idx], self.y[idx]


class MixtureSampler:
    """Draws each mini-batch from one child sampler chosen uniformly at random."""

    def __init__(self, samplers, seed):
        if not samplers:
            raise NoPreviousTasks("mixture needs at least one sampler")
        self.samplers = list(samplers)
        self._rng = np.random.default_rng(seed)
        self.draw_counts = [0] * len(self.samplers)

    def sample(self, batch_size):
        i = int(self._rng.integers(len(self.samplers)))
        self.draw_counts[i] += 1
        return self.samplers[i].sample(batch_size)


class _TaskData:
    """Shared split accessors for synthetic and file-backed tasks."""

    task_id: str

    @property
    def kind(self) -> str:
        raise NotImplementedError

    def train_split(self):
        raise NotImplementedError

    def eval_split(self):
        raise NotImplementedError

    def sampler(self, seed, replace=True, budget=None) -> BatchSampler:
        x, y = self.train_split()
        if budget is not None and budget < x.shape[0]:
            pick = np.sort(np.random.default_rng(seed).choice(x.shape[0], size=budget, replace=False))
            x, y = x[pick], y[pick]
        return BatchSampler(x, y, seed, replace=replace)


@dataclass(frozen=True, eq=False)
class SyntheticTask(_TaskData):
    """Inputs ``x ~ N(0, input_scale^2 I)`` labelled by a teacher network.

    With ``input_basis`` (a ``k x d`` matrix) the inputs are ``z @ input_basis``
    for ``z ~ N(0, input_scale^2 I_k)``, confining the task to a subspace.

    Regression targets are teacher outputs plus Gaussian noise; classification
    targets are one-hot argmaxes of the (noised) teacher logits. Train and eval
    splits come from distinct named sub-seeds of ``generator_seed``.
    """

    task_id: str
    generator_seed: int
    teacher: ToyModel
    train_count: int = 256
    eval_count: int = 256
    noise_std: float = 0.0
    input_scale: float = 1.0
    input_basis: np.ndarray = None

    def __post_init__(self):
        if self.input_basis is not None:
            basis = check_matrix(self.input_basis, "input_basis")
            if basis.shape[1] != self.teacher.n_features:
                raise ShapeError(f"input_basis has {basis.shape[1]} columns, teacher expects {self.teacher.n_features}")
            object.__setattr__(self, "input_basis", basis)
        check_positive_int(self.train_count, "train_count")
        check_positive_int(self.eval_count, "eval_count")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.teacher.n_features

    @property
    def output_dim(self) -> int:
        return self.teacher.n_outputs

    @property
    def kind(self) -> str:
        return "classification" if self.teacher.loss_kind == "softmax_cross_entropy" else "regression"

    def _generate(self, split, count):
        rng = derive_rng(self.generator_seed, "task", split)
        if self.input_basis is None:
            x = self.input_scale * rng.standard_normal((count, self.input_dim))
        else:
            x = self.input_scale * rng.standard_normal((count, self.input_basis.shape[0])) @ self.input_basis
        out = forward(self.teacher, x)
        if self.noise_std > 0:
            out = out + self.noise_std * rng.standard_normal(out.shape)
        if self.kind == "classification":
            out = np.eye(self.output_dim)[np.argmax(out, axis=1)]
        return x, out

    @cached_property
    def _train(self):
        return self._generate("train", self.train_count)

    @cached_property
    def _eval(self):
        return self._generate("eval", self.eval_count)

    def train_split(self):
        return self._train

    def eval_split(self):
        return self._eval


@dataclass(frozen=True, eq=False)
class DatasetTask(_TaskData):
    """Task backed by explicit arrays, e.g. loaded from a JSON-lines file."""

    task_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    task_kind: str = "regression"

    def __post_init__(self):
        if self.task_kind not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        xt, yt = check_batch(self.x_train, self.y_train)
        object.__setattr__(self, "x_train", xt)
        object.__setattr__(self, "y_train", yt)
        if len(self.x_eval):
            xe, ye = check_batch(self.x_eval, self.y_eval)
            object.__setattr__(self, "x_eval", xe)
            object.__setattr__(self, "y_eval", ye)

    @property
    def kind(self) -> str:
        return self.task_kind

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def output_dim(self) -> int:
        return self.y_train.shape[1]

    def train_split(self):
        return self.x_train, self.y_train

    def eval_split(self):
        return self.x_eval, self.y_eval


def load_jsonl_task(path, task_id=None, *, eval_fraction=0.25, seed=42, kind="regression") -> DatasetTask:
    """Read one task from a file of ``{"input": [...], "target": [...]}`` lines.

    Records are shuffled with ``seed`` and the last ``eval_fraction`` of them
    is held out for evaluation.
    """
    path = Path(path)
    xs, ys = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs.append([float(v) for v in rec["input"]])
                ys.append([float(v) for v in rec["target"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if len(xs) < 2:
        raise ValueError(f"{path}: need at least two records, found {len(xs)}")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    order = np.random.default_rng(seed).permutation(len(x))
    n_eval = max(1, int(round(eval_fraction * len(x))))
    ev, tr = order[-n_eval:], order[:-n_eval]
    return DatasetTask(task_id or path.stem, x[tr], y[tr], x[ev], y[ev], kind)


def accumulate_gradients(model: ToyModel, sampler, steps: int, batch_size: int,
                         source="current_task") -> GradientSet:
    """Mean of per-batch target-layer gradients over ``steps`` sampled mini-batches."""
    steps = check_positive_int(steps, "steps")
    batch_size = check_positive_int(batch_size, "batch_size")
    total = None
    for _ in range(steps):
        x, y = sampler.sample(batch_size)
        grads = layer_gradients(model, x, y)
        if total is None:
            total = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                total[k] += v
    return GradientSet({k: v / steps for k, v in total.items()}, steps, batch_size, source)


def build_prev_sampler(tasks, seed, per_task_budget=None):
    """Equal-weight sampler over one loader per previous task.

    ``per_task_budget`` caps how many training examples of each previous task
    form the fresh previous-task sample. Raises :class:`NoPreviousTasks` for an
    empty list, which callers treat as "skip surgery".
    """
    tasks = list(tasks)
    if not tasks:
        raise NoPreviousTasks("no previous tasks: gradient surgery is skipped for the first task")
    samplers = [t.sampler(derive_rng(seed, "prev_loader", i).integers(2**63), budget=per_task_budget)
                for i, t in enumerate(tasks)]
    if len(samplers) == 1:
        return samplers[0]
    return MixtureSampler(samplers, derive_rng(seed, "prev_mixture").integers(2**63))
