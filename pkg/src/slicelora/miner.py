"""Mining maximally gradient-conflicting task subsets.

Every task in a pool is reduced to one flattened gradient vector measured on
the frozen base model; pairwise cosines are computed once and cached, then
every ``n``-subset is scored by the mean of its cached pair cosines.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._seeding import derive_rng
from ._validation import check_positive_int
from .exceptions import BudgetExceeded, DegenerateInputError, ShapeError
from .model import ToyModel, accumulate_gradients

__all__ = [
    "TaskGradientSketch",
    "PairScoreCache",
    "SequenceCandidate",
    "sketch_task_gradient",
    "build_pair_cache",
    "mine",
    "save_sketch",
    "load_sketch",
    "miner_report",
]

DEFAULT_BUDGET = 10_000_000
_CHUNK = 131_072


@dataclass(frozen=True, eq=False)
class TaskGradientSketch:
    task_id: str
    g: np.ndarray
    norm: float = field(default=None)

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64).ravel()
        if not np.all(np.isfinite(g)):
            raise DegenerateInputError(f"sketch {self.task_id!r} has non-finite entries")
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            raise DegenerateInputError(f"sketch {self.task_id!r} is the zero vector")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "norm", norm)


@dataclass(frozen=True, eq=False)
class PairScoreCache:
    """Symmetric matrix of pair cosines; only ``i < j`` entries are meaningful."""

    task_ids: tuple
    scores: np.ndarray

    @property
    def pool_size(self) -> int:
        return len(self.task_ids)

    def pairs(self):
        for i, j in itertools.combinations(range(self.pool_size), 2):
            yield self.task_ids[i], self.task_ids[j], float(self.scores[i, j])


@dataclass(frozen=True)
class SequenceCandidate:
    task_ids: tuple
    phi_bar: float


def sketch_task_gradient(model: ToyModel, task, steps=4, batch_size=16, seed=0, projection_dim=None):
    """Flattened mean gradient of ``task`` on the frozen base (target layers in order).

    ``projection_dim`` opts into a seeded Gaussian random projection of the
    flattened vector; the default keeps the full dimension.
    """
    if model.adapters:
        raise ValueError("sketches are taken on the frozen base model; detach adapters first")
    sampler = task.sampler(derive_rng(seed, "sketch", task.task_id).integers(2**63))
    grads = accumulate_gradients(model, sampler, steps, batch_size)
    g = grads.flatten()
    if projection_dim is not None:
        proj = derive_rng(seed, "sketch_projection").standard_normal((projection_dim, g.size))
        g = proj @ g / math.sqrt(projection_dim)
    return TaskGradientSketch(task.task_id, g)


def build_pair_cache(sketches) -> PairScoreCache:
    sketches = list(sketches)
    if len(sketches) < 2:
        raise ValueError("need at least two sketches")
    ids = tuple(s.task_id for s in sketches)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate task ids in pool: {dup}")
    dims = {s.g.size for s in sketches}
    if len(dims) != 1:
        raise ShapeError(f"sketches have differing dimensions {sorted(dims)}")
    unit = np.stack([s.g / s.norm for s in sketches])
    scores = np.clip(unit @ unit.T, -1.0, 1.0)
    scores = 0.5 * (scores + scores.T)
    return PairScoreCache(ids, scores)


def _chunks(m, n):
    it = itertools.combinations(range(m), n)
    while True:
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, _CHUNK)), dtype=np.int64)
        if block.size == 0:
            return
        yield block.reshape(-1, n)


def mine(cache: PairScoreCache, n: int, top_k: int = 1, *, budget=DEFAULT_BUDGET, objective="conflict",
         return_count=False):
    """Score every ``n``-subset of the pool and return the ``top_k`` best.

    ``objective="conflict"`` ranks by ascending mean pair cosine;
    ``"alignment"`` by descending. Ties are broken by the lexicographic order
    of the candidates' task ids.
    """
    n = check_positive_int(n, "n")
    top_k = check_positive_int(top_k, "top_k")
    m = cache.pool_size
    if n < 2 or n > m:
        raise ValueError(f"subset size must be in [2, {m}], got {n}")
    if objective not in ("conflict", "alignment"):
        raise ValueError("objective must be 'conflict' or 'alignment'")
    total = math.comb(m, n)
    if total > budget:
        raise BudgetExceeded(total, budget)

    sign = 1.0 if objective == "conflict" else -1.0
    pair_cols = list(itertools.combinations(range(n), 2))
    denom = len(pair_cols)
    best = []
    visited = 0
    for block in _chunks(m, n):
        visited += block.shape[0]
        acc = np.zeros(block.shape[0])
        for a, b in pair_cols:
            acc += cache.scores[block[:, a], block[:, b]]
        phi = acc / denom
        key = sign * phi
        if block.shape[0] > top_k:
            cut = np.partition(key, top_k - 1)[top_k - 1]
            keep = np.nonzero(key <= cut)[0]
        else:
            keep = np.arange(block.shape[0])
        for row in keep:
            ids = tuple(cache.task_ids[i] for i in block[row])
            best.append((float(key[row]), ids, float(phi[row])))
        best.sort(key=lambda t: (t[0], t[1]))
        del best[top_k:]
    out = [SequenceCandidate(ids, phi) for _, ids, phi in best]
    return (out, visited) if return_count else out


def miner_report(cache: PairScoreCache, candidates, n, subsets_evaluated, objective="conflict") -> dict:
    return {
        "pool": list(cache.task_ids),
        "subset_size": n,
        "objective": objective,
        "subsets_evaluated": subsets_evaluated,
        "candidates": [
            {"rank": i + 1, "task_ids": list(c.task_ids), "phi_bar": c.phi_bar}
            for i, c in enumerate(candidates)
        ],
        "pair_scores": [{"a": a, "b": b, "cosine": s} for a, b, s in cache.pairs()],
    }


_SKETCH_MAGIC = b"SLCSKTC1"


def save_sketch(sketch: TaskGradientSketch, path):
    """``MAGIC | u32 id length | utf-8 id | u64 dim | float64 LE values``."""
    tid = sketch.task_id.encode("utf-8")
    blob = (_SKETCH_MAGIC + struct.pack("<I", len(tid)) + tid + struct.pack("<Q", sketch.g.size)
            + sketch.g.astype("<f8").tobytes())
    Path(path).write_bytes(blob)


def load_sketch(path) -> TaskGradientSketch:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sketch file not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != _SKETCH_MAGIC:
        raise ValueError(f"{path}: not a sketch file")
    (ilen,) = struct.unpack("<I", blob[8:12])
    tid = blob[12:12 + ilen].decode("utf-8")
    (dim,) = struct.unpack("<Q", blob[12 + ilen:20 + ilen])
    g = np.frombuffer(blob, "<f8", dim, 20 + ilen).copy()
    return TaskGradientSketch(tid, g)


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
