"""Dense matrix kernels and the two SVD routes (exact reference, randomized).

Matrices are plain 2-D ``float64`` numpy arrays; the helpers here only add
shape/finiteness checks and the few reductions the initialization pipeline
needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from ._validation import check_matrix, check_same_shape
from .exceptions import DegenerateInputError, ShapeError

__all__ = [
    "SvdConfig",
    "SvdResult",
    "matmul",
    "frobenius_inner",
    "frobenius_norm",
    "entrywise_variance",
    "svd",
    "projector_distance",
    "principal_angle_sines",
]


@dataclass(frozen=True)
class SvdConfig:
    rank_requested: int
    oversampling_multiplier: int = 4
    power_iterations: int = 4
    mode: str = "randomized"
    seed: int = 0

    def __post_init__(self):
        if self.rank_requested < 1:
            raise ValueError("rank_requested must be positive")
        if self.oversampling_multiplier < 1:
            raise ValueError("oversampling_multiplier must be positive")
        if self.power_iterations < 0:
            raise ValueError("power_iterations must be non-negative")
        if self.mode not in ("exact", "randomized"):
            raise ValueError(f"unknown svd mode {self.mode!r}")


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    @property
    def k(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def matmul(a, b) -> np.ndarray:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def frobenius_inner(a, b) -> float:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    check_same_shape(a, b)
    # ravel + dot keeps <a, a> and ||a||^2 on one accumulation path
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(a) -> float:
    a = check_matrix(a, "a")
    return float(np.sqrt(np.dot(a.ravel(), a.ravel())))


def entrywise_variance(m) -> float:
    """Population variance of all entries of ``m`` (divisor = entry count)."""
    m = check_matrix(m, "m")
    if m.size < 2:
        raise DegenerateInputError("variance needs at least two entries")
    return float(np.var(m))


def _exact_svd(m: np.ndarray, k: int) -> SvdResult:
    u, s, vt = la.svd(m, full_matrices=False, lapack_driver="gesdd")
    return SvdResult(u[:, :k], s[:k], vt[:k].T)


def _randomized_svd(m: np.ndarray, cfg: SvdConfig) -> SvdResult:
    rows, cols = m.shape
    k = cfg.rank_requested
    width = min(cfg.oversampling_multiplier * k, rows, cols)
    rng = np.random.default_rng(cfg.seed)
    sketch = rng.standard_normal((cols, width))
    q, _ = la.qr(m @ sketch, mode="economic")
    for _ in range(cfg.power_iterations):
        # re-orthonormalize between passes; plain powering loses the small directions
        z, _ = la.qr(m.T @ q, mode="economic")
        q, _ = la.qr(m @ z, mode="economic")
    small = q.T @ m
    ub, s, vt = la.svd(small, full_matrices=False, lapack_driver="gesdd")
    u = q @ ub
    return SvdResult(u[:, :k], s[:k], vt[:k].T)


def svd(m, cfg: SvdConfig) -> SvdResult:
    """Top-``cfg.rank_requested`` singular triplets of ``m``.

    ``exact`` mode runs a full LAPACK decomposition and truncates; it is the
    reference the randomized path is checked against. ``randomized`` mode
    uses a seeded Gaussian range finder of width
    ``oversampling_multiplier * rank_requested`` (capped at ``min(m.shape)``)
    followed by ``power_iterations`` subspace iterations.
    """
    m = check_matrix(m, "m")
    k = cfg.rank_requested
    if k > min(m.shape):
        raise ShapeError(f"rank {k} exceeds min dimension of {m.shape[0]}x{m.shape[1]} matrix")
    if cfg.mode == "exact":
        return _exact_svd(m, k)
    return _randomized_svd(m, cfg)


def projector_distance(x, y) -> float:
    """``||X X^T - Y Y^T||_F`` for matrices with orthonormal columns."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(x @ x.T - y @ y.T))


def principal_angle_sines(x, y) -> np.ndarray:
    """Sines of the principal angles between span(x) and span(y), descending."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    qx, _ = np.linalg.qr(x)
    qy, _ = np.linalg.qr(y)
    # the complement residual is more accurate than sqrt(1 - cos^2) for tiny angles
    if qx.shape[1] <= qy.shape[1]:
        resid = qx - qy @ (qy.T @ qx)
    else:
        resid = qy - qx @ (qx.T @ qy)
    sines = np.linalg.svd(resid, compute_uv=False)
    n = min(qx.shape[1], qy.shape[1])
    if sines.shape[0] < n:
        sines = np.concatenate([sines, np.zeros(n - sines.shape[0])])
    return np.sort(sines[:n])[::-1]
