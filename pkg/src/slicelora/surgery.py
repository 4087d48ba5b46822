"""Conflict-aware projection of the current-task gradient (parameterized PCGrad)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_unit_interval
from .model import GradientSet

__all__ = ["SurgeryConfig", "SurgeryReport", "pcgrad_project"]

SCOPES = ("global", "per_layer")


@dataclass(frozen=True)
class SurgeryConfig:
    c: float = 1.0
    coefficient_scope: str = "global"

    def __post_init__(self):
        object.__setattr__(self, "c", check_unit_interval(self.c, "c"))
        if self.coefficient_scope not in SCOPES:
            raise ValueError(f"coefficient_scope must be one of {SCOPES}")


@dataclass
class SurgeryReport:
    """What the projection saw and did; ``coefficient`` multiplies ``G_prev``."""

    scope: str
    c: float
    inner_products: dict = field(default_factory=dict)
    prev_norms_sq: dict = field(default_factory=dict)
    coefficients: dict = field(default_factory=dict)
    global_inner: float = 0.0
    global_prev_norm_sq: float = 0.0
    cosine_before: float = 0.0
    cosine_after: float = 0.0
    skipped: bool = False

    @property
    def active(self) -> bool:
        return any(coef != 0.0 for coef in self.coefficients.values())

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "c": self.c,
            "skipped": self.skipped,
            "active": self.active,
            "global_inner_product": self.global_inner,
            "global_prev_norm_sq": self.global_prev_norm_sq,
            "per_layer_inner_product": {str(k): v for k, v in self.inner_products.items()},
            "coefficients": {str(k): v for k, v in self.coefficients.items()},
            "cosine_to_prev_before": self.cosine_before,
            "cosine_to_prev_after": self.cosine_after,
        }


def _dot(a, b):
    return float(np.dot(a.ravel(), b.ravel()))


def _correction(inner, norm_sq, c):
    # min(<g, p>, 0) / ||p||^2; a zero p forces inner == 0, so the branch is never taken
    if c == 0.0 or inner >= 0.0 or norm_sq == 0.0:
        return 0.0
    return c * inner / norm_sq


def _cosine(a: GradientSet, b: GradientSet) -> float:
    fa, fb = a.flatten(), b.flatten()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(fa, fb) / (na * nb))


def pcgrad_project(g_cur: GradientSet, g_prev: GradientSet, cfg: SurgeryConfig = SurgeryConfig(),
                   return_report=False):
    """``G_cur - c * min(<G_cur, G_prev>, 0) / ||G_prev||^2 * G_prev``.

    With ``coefficient_scope="global"`` the inner product and norm run over
    all layers at once and a single coefficient is applied everywhere;
    ``"per_layer"`` computes one coefficient per layer. Layers whose
    coefficient is zero are returned as the original arrays, untouched.
    """
    g_cur.check_compatible(g_prev)
    report = SurgeryReport(cfg.coefficient_scope, cfg.c)
    for idx in g_cur.per_layer:
        report.inner_products[idx] = _dot(g_cur.per_layer[idx], g_prev.per_layer[idx])
        report.prev_norms_sq[idx] = _dot(g_prev.per_layer[idx], g_prev.per_layer[idx])
    report.global_inner = _dot(g_cur.flatten(), g_prev.flatten())
    report.global_prev_norm_sq = _dot(g_prev.flatten(), g_prev.flatten())

    if cfg.coefficient_scope == "global":
        coef = _correction(report.global_inner, report.global_prev_norm_sq, cfg.c)
        report.coefficients = {idx: coef for idx in g_cur.per_layer}
    else:
        report.coefficients = {
            idx: _correction(report.inner_products[idx], report.prev_norms_sq[idx], cfg.c)
            for idx in g_cur.per_layer
        }

    out = {}
    for idx, g in g_cur.per_layer.items():
        coef = report.coefficients[idx]
        out[idx] = g if coef == 0.0 else g - coef * g_prev.per_layer[idx]
    projected = g_cur.replace_layers(out)

    report.cosine_before = _cosine(g_cur, g_prev)
    report.cosine_after = _cosine(projected, g_prev)
    if return_report:
        return projected, report
    return projected
