"""scikit-learn style front ends for adapter initialization and sequence mining."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .adapters import InitConfig, absorb_model, initialize
from .miner import DEFAULT_BUDGET, TaskGradientSketch, build_pair_cache, mine
from .model import ToyModel

__all__ = ["LowRankInitializer", "ConflictMiner"]


class LowRankInitializer(TransformerMixin, BaseEstimator):
    """Build adapters for one task; ``transform`` returns the absorbed model with them attached.

    >>> init = LowRankInitializer(method="slice", rank=2, c=1.0)  # doctest: +SKIP
    >>> model_t = init.fit(model, task=cur, prev_tasks=prev).transform(model)  # doctest: +SKIP
    """

    def __init__(self, method="slice", rank=2, c=1.0, alpha=2.0, scaling_rule="rs_lora", s_cur=8, s_prev=8,
                 batch_size=16, coefficient_scope="global", svd_mode="randomized", seed=0):
        self.method = method
        self.rank = rank
        self.c = c
        self.alpha = alpha
        self.scaling_rule = scaling_rule
        self.s_cur = s_cur
        self.s_prev = s_prev
        self.batch_size = batch_size
        self.coefficient_scope = coefficient_scope
        self.svd_mode = svd_mode
        self.seed = seed

    def _config(self) -> InitConfig:
        return InitConfig(
            self.method, self.rank, c=self.c if self.method == "slice" else None, alpha=self.alpha,
            scaling_rule=self.scaling_rule, s_cur=self.s_cur, s_prev=self.s_prev, batch_size=self.batch_size,
            coefficient_scope=self.coefficient_scope, svd_mode=self.svd_mode, seed=self.seed,
        )

    def fit(self, X: ToyModel, y=None, *, task=None, prev_tasks=()):
        if not isinstance(X, ToyModel):
            raise TypeError("X must be a ToyModel")
        if task is None and self.method in ("slice", "lora_ga"):
            raise ValueError(f"method {self.method!r} needs the current task")
        self.adapters_, self.info_ = initialize(X, task, list(prev_tasks), self._config(), return_info=True)
        self.surgery_ = self.info_.surgery
        return self

    def transform(self, X: ToyModel) -> ToyModel:
        check_is_fitted(self, "adapters_")
        return absorb_model(X, self.adapters_).with_adapters(self.adapters_)


class ConflictMiner(BaseEstimator):
    """Exhaustive subset search over rows of a sketch matrix.

    ``fit(X, task_ids)`` takes one flattened gradient per row; ``candidates_``
    holds the ranked :class:`SequenceCandidate` list and ``pair_scores_`` the
    cosine matrix.
    """

    def __init__(self, n=3, top_k=1, objective="conflict", budget=DEFAULT_BUDGET):
        self.n = n
        self.top_k = top_k
        self.objective = objective
        self.budget = budget

    def fit(self, X, y=None, task_ids=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        ids = [f"task{i:02d}" for i in range(X.shape[0])] if task_ids is None else [str(t) for t in task_ids]
        if len(ids) != X.shape[0]:
            raise ValueError(f"{len(ids)} task ids for {X.shape[0]} sketches")
        self.cache_ = build_pair_cache(TaskGradientSketch(t, row) for t, row in zip(ids, X))
        self.candidates_, self.n_subsets_ = mine(self.cache_, self.n, self.top_k, budget=self.budget,
                                                 objective=self.objective, return_count=True)
        self.pair_scores_ = self.cache_.scores
        return self

    def predict(self, X=None):
        """Task ids of the best subset."""
        check_is_fitted(self, "candidates_")
        return list(self.candidates_[0].task_ids)
