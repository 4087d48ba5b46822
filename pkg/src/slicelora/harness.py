"""Sequential continual-learning driver and the results-matrix metric suite."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._seeding import derive_seed
from ._validation import check_positive_int
from .adapters import AdapterPair, InitConfig, absorb_model, initialize
from .exceptions import DivergenceError, NonFiniteError, ShapeError
from .model import ToyModel, forward, loss_and_gradients

__all__ = [
    "SequenceConfig",
    "ResultsMatrix",
    "MetricsSummary",
    "StageRecord",
    "SequenceResult",
    "train_task",
    "evaluate",
    "run_sequence",
    "compute_metrics",
]


@dataclass(frozen=True)
class SequenceConfig:
    """One continual-learning run.

    ``held_out`` holds ``(task, tag)`` pairs with tag ``"gp"`` or ``"ip"``;
    they are never trained on and are scored once after the last stage.
    """

    base_model: ToyModel
    tasks: tuple
    init: InitConfig
    epochs: int = 3
    learning_rate: float = 0.05
    batch_size: int = 16
    seed: int = 0
    held_out: tuple = ()
    adapter_policy: str = "fresh_per_task"
    optimizer: str = "sgd"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "held_out", tuple(self.held_out))
        if len(self.tasks) < 2:
            raise ValueError("a sequence needs at least two tasks")
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.adapter_policy != "fresh_per_task":
            raise ValueError("only the fresh_per_task adapter policy is supported")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        for tag in (t for _, t in self.held_out):
            if tag not in ("gp", "ip"):
                raise ValueError(f"held-out tag must be 'gp' or 'ip', got {tag!r}")

    @property
    def alpha(self) -> float:
        return self.init.alpha

    @property
    def rank(self) -> int:
        return self.init.rank


@dataclass
class ResultsMatrix:
    """Lower-triangular ``R[i, j]``: score on task ``j`` after training through task ``i``."""

    t: int
    scores: np.ndarray = None

    def __post_init__(self):
        if self.scores is None:
            self.scores = np.full((self.t, self.t), np.nan)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.t, self.t):
            raise ShapeError(f"results matrix must be {self.t}x{self.t}")
        upper = np.triu_indices(self.t, 1)
        if not np.all(np.isnan(self.scores[upper])):
            raise ValueError("entries above the diagonal must be empty")

    @classmethod
    def from_rows(cls, rows):
        t = len(rows)
        scores = np.full((t, t), np.nan)
        for i, row in enumerate(rows):
            scores[i, :len(row)] = row
        return cls(t, scores)

    def __setitem__(self, key, value):
        i, j = key
        if j > i:
            raise IndexError(f"R[{i}][{j}] lies above the diagonal")
        self.scores[i, j] = value

    def __getitem__(self, key):
        return self.scores[key]

    @property
    def complete(self) -> bool:
        return bool(np.all(np.isfinite(self.scores[np.tril_indices(self.t)])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"score_task_{j}" for j in range(self.t)])
        for i in range(self.t):
            writer.writerow([i] + [repr(float(self.scores[i, j])) if j <= i else "" for j in range(self.t)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultsMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        body = rows[1:]
        return cls.from_rows([[float(v) for v in r[1:] if v != ""] for r in body])


@dataclass(frozen=True)
class MetricsSummary:
    ap: float
    fp: float
    fgt: float
    per_task_final: tuple
    gp: float | None = None
    ip: float | None = None

    def to_dict(self):
        return {
            "ap": self.ap,
            "fp": self.fp,
            "fgt": self.fgt,
            "gp_standin": self.gp,
            "ip_standin": self.ip,
            "per_task_final": list(self.per_task_final),
        }


def compute_metrics(r: ResultsMatrix, held_out_scores=None) -> MetricsSummary:
    """AP (mean diagonal), FP (mean last row), Fgt = AP - FP, plus held-out means.

    ``held_out_scores`` maps ``"gp"``/``"ip"`` to lists of scores.
    """
    if not r.complete:
        raise ValueError("results matrix has unpopulated lower-triangular entries")
    ap = float(np.mean(np.diag(r.scores)))
    last = r.scores[-1]
    fp = float(np.mean(last))
    held_out_scores = held_out_scores or {}
    gp = held_out_scores.get("gp")
    ip = held_out_scores.get("ip")
    return MetricsSummary(
        ap, fp, ap - fp, tuple(float(v) for v in last),
        float(np.mean(gp)) if gp else None,
        float(np.mean(ip)) if ip else None,
    )


def evaluate(model: ToyModel, task) -> float:
    """Score in [0, 100] on the eval split; higher is better.

    Regression: ``100 * max(0, 1 - MSE / Var(target))`` with the variance taken
    per output dimension and averaged. Classification: accuracy in percent.
    """
    x, y = task.eval_split()
    if len(x) == 0:
        raise ValueError(f"task {task.task_id!r} has an empty eval split")
    out = forward(model, x)
    if task.kind == "classification":
        return 100.0 * float(np.mean(np.argmax(out, axis=1) == np.argmax(y, axis=1)))
    mse = float(np.mean((out - y) ** 2))
    var = float(np.mean(np.var(y, axis=0)))
    if var == 0.0:
        return 100.0 if mse == 0.0 else 0.0
    return 100.0 * max(0.0, 1.0 - mse / var)


class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, key, param, grad):
        return param - self.lr * grad


class _Adam:
    """Adam without weight decay (AdamW with decay 0)."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.state = {}

    def step(self, key, param, grad):
        m, v, t = self.state.get(key, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = self.b1 * m + (1.0 - self.b1) * grad
        v = self.b2 * v + (1.0 - self.b2) * grad * grad
        self.state[key] = (m, v, t)
        m_hat = m / (1.0 - self.b1 ** t)
        v_hat = v / (1.0 - self.b2 ** t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": _SGD, "adam": _Adam}


def train_task(model: ToyModel, task, adapters, *, epochs, learning_rate, batch_size, seed,
               optimizer="sgd", return_history=False):
    """Train the adapter factors only; the base weights stay frozen.

    Each epoch visits a fresh permutation of the training split in
    ``ceil(n / batch_size)`` steps. ``optimizer`` is ``"sgd"`` (plain
    gradient descent) or ``"adam"``.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
    opt = OPTIMIZERS[optimizer](learning_rate)
    adapters = dict(adapters)
    x_all, y_all = task.train_split()
    n = x_all.shape[0]
    steps_per_epoch = math.ceil(n / batch_size)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            current = model.with_adapters(adapters)
            value, grads = loss_and_gradients(current, x_all[idx], y_all[idx], layers=list(adapters))
            if not math.isfinite(value):
                raise DivergenceError(task.task_id, step, value)
            history.append(value)
            updated = {}
            for li, pair in adapters.items():
                g = grads[li]
                grad_b = pair.scaling * (g @ pair.a.T)
                grad_a = pair.scaling * (pair.b.T @ g)
                try:
                    updated[li] = pair.with_factors(opt.step((li, "a"), pair.a, grad_a),
                                                    opt.step((li, "b"), pair.b, grad_b))
                except NonFiniteError:
                    raise DivergenceError(task.task_id, step, float("nan")) from None
            adapters = updated
            step += 1
    return (adapters, history) if return_history else adapters


@dataclass
class StageRecord:
    stage: int
    task_id: str
    wall_clock_s: float
    rescale_reports: dict = field(default_factory=dict)
    surgery: dict | None = None
    fallback_layers: list = field(default_factory=list)

    def to_dict(self):
        return {
            "stage": self.stage,
            "task_id": self.task_id,
            "wall_clock_s": self.wall_clock_s,
            "rescale_reports": {str(k): v for k, v in self.rescale_reports.items()},
            "surgery": self.surgery,
            "fallback_layers": self.fallback_layers,
        }


@dataclass
class SequenceResult:
    results: ResultsMatrix
    metrics: MetricsSummary
    stages: list
    held_out_scores: dict
    final_model: ToyModel
    stage_adapters: list = field(default_factory=list)


def run_sequence(cfg: SequenceConfig, keep_adapters=False) -> SequenceResult:
    """Initialize, absorb, train and evaluate task by task.

    After each stage the trained adapters are merged into the base, which
    becomes the frozen model of the next stage.
    """
    t = len(cfg.tasks)
    results = ResultsMatrix(t)
    stages, kept = [], []
    model = cfg.base_model.without_adapters()
    for i, task in enumerate(cfg.tasks):
        tic = time.perf_counter()
        init_cfg = replace(cfg.init, seed=derive_seed(cfg.seed, "stage", i, "init"))
        adapters, info = initialize(model, task, cfg.tasks[:i], init_cfg, return_info=True)
        absorbed = absorb_model(model, adapters)
        trained = train_task(absorbed, task, adapters, epochs=cfg.epochs, learning_rate=cfg.learning_rate,
                             batch_size=cfg.batch_size, seed=derive_seed(cfg.seed, "stage", i, "batches"),
                             optimizer=cfg.optimizer)
        current = absorbed.with_adapters(trained)
        for j in range(i + 1):
            results[i, j] = evaluate(current, cfg.tasks[j])
        if keep_adapters:
            kept.append(trained)
        model = current.merged()
        stages.append(StageRecord(
            i, task.task_id, time.perf_counter() - tic,
            {li: p.report.to_dict() for li, p in adapters.items() if isinstance(p, AdapterPair) and p.report},
            info.surgery.to_dict() if info.surgery is not None else None,
            list(info.fallback_layers),
        ))
    held = {}
    for task, tag in cfg.held_out:
        held.setdefault(tag, []).append(evaluate(model, task))
    metrics = compute_metrics(results, held)
    return SequenceResult(results, metrics, stages, held, model, kept)
