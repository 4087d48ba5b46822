"""Adapter initialization: gradient factorization, variance-matched rescaling,
baseline initializers and weight absorption.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._seeding import derive_rng, derive_seed
from ._validation import check_matrix, check_unit_interval
from .exceptions import DegenerateInputError, NoPreviousTasks, ShapeError
from .linalg import SvdConfig, entrywise_variance, frobenius_norm, svd
from .model import GradientSet, LayerWeights, ToyModel, accumulate_gradients, build_prev_sampler
from .surgery import SurgeryConfig, SurgeryReport, pcgrad_project

__all__ = [
    "AdapterPair",
    "RescaleReport",
    "InitConfig",
    "scaling_factor",
    "rescale_coefficient",
    "factorize",
    "magnitude_rescale",
    "dst2_basis",
    "slice_init",
    "lora_ga_init",
    "vanilla_init",
    "loram_init",
    "initialize",
    "absorb",
    "absorb_model",
    "save_adapters",
    "load_adapters",
]

METHODS = ("slice", "lora_ga", "vanilla", "loram")
SCALING_RULES = ("rs_lora", "standard")


@dataclass(frozen=True)
class RescaleReport:
    sigma_w_sq: float
    sigma_ba_sq: float
    eta_var: float
    eta_r: float
    m: int
    beta: float

    def to_dict(self):
        return {k: getattr(self, k) for k in ("sigma_w_sq", "sigma_ba_sq", "eta_var", "eta_r", "m", "beta")}


@dataclass(frozen=True, eq=False)
class AdapterPair:
    """Low-rank update ``scaling * b @ a`` for one layer."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    scaling: float
    method: str = "vanilla"
    report: RescaleReport | None = None

    def __post_init__(self):
        a = check_matrix(self.a, "a")
        b = check_matrix(self.b, "b")
        if a.shape[0] != self.rank or b.shape[1] != self.rank:
            raise ShapeError(f"factors {b.shape} @ {a.shape} do not match rank {self.rank}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def shape(self):
        return (self.b.shape[0], self.a.shape[1])

    def delta(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)

    def with_factors(self, a, b) -> "AdapterPair":
        return replace(self, a=a, b=b)


def scaling_factor(alpha: float, rank: int, rule: str = "rs_lora") -> float:
    """``alpha / sqrt(r)`` (rank-stabilized) or ``alpha / r`` (standard LoRA)."""
    if rule == "rs_lora":
        return alpha / math.sqrt(rank)
    if rule == "standard":
        return alpha / rank
    raise ValueError(f"scaling rule must be one of {SCALING_RULES}, got {rule!r}")


@dataclass(frozen=True)
class InitConfig:
    """Everything an initializer needs; gradient fields are ignored by vanilla/LoRAM."""

    method: str
    rank: int
    c: float | None = None
    alpha: float = 2.0
    scaling_rule: str = "rs_lora"
    s_cur: int = 8
    s_prev: int = 8
    batch_size: int = 16
    coefficient_scope: str = "global"
    svd_mode: str = "randomized"
    oversampling_multiplier: int = 4
    power_iterations: int = 4
    a_block: str = "second"
    prev_budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "slice":
            if self.c is None:
                raise ValueError("slice initialization needs the surgery strength c")
            object.__setattr__(self, "c", check_unit_interval(self.c, "c"))
        elif self.c is not None:
            raise ValueError(f"c only applies to slice, not {self.method}")
        if self.rank < 2:
            raise DegenerateInputError("rank must be >= 2 (log_m(1) = 0 zeroes the rescaled factors)")
        if self.scaling_rule not in SCALING_RULES:
            raise ValueError(f"scaling_rule must be one of {SCALING_RULES}")
        if self.a_block not in ("second", "leading"):
            raise ValueError("a_block must be 'second' or 'leading'")

    @property
    def scaling(self) -> float:
        return scaling_factor(self.alpha, self.rank, self.scaling_rule)

    def svd_config(self, layer_idx) -> SvdConfig:
        return SvdConfig(2 * self.rank, self.oversampling_multiplier, self.power_iterations,
                         self.svd_mode, derive_seed(self.seed, "init", "svd", layer_idx))


def factorize(g_tilde, r: int, svd_cfg: SvdConfig | None = None, a_block="second"):
    """Split a (reconciled) gradient into ``(phi_b, phi_a)``.

    ``phi_b`` holds the leading ``r`` left singular vectors; ``phi_a`` the
    transposed right singular vectors ``r+1 .. 2r`` (``a_block="second"``)
    or ``1 .. r`` (``"leading"``, experimental).
    """
    return _factorize(g_tilde, r, svd_cfg, a_block)[:2]


def _factorize(g_tilde, r, svd_cfg, a_block):
    g = check_matrix(g_tilde, "g_tilde")
    if min(g.shape) < 2 * r:
        raise ShapeError(f"rank {r} needs min dimension >= {2 * r}, gradient is {g.shape[0]}x{g.shape[1]}")
    if frobenius_norm(g) == 0.0:
        raise DegenerateInputError("zero gradient has no singular subspace")
    cfg = SvdConfig(2 * r) if svd_cfg is None else replace(svd_cfg, rank_requested=2 * r)
    res = svd(g, cfg)
    phi_b = res.u[:, :r]
    cols = slice(r, 2 * r) if a_block == "second" else slice(0, r)
    phi_a = res.v[:, cols].T
    return phi_b, phi_a, res


def rescale_coefficient(sigma_w_sq: float, sigma_ba_sq: float, r: int, m: int):
    """Return ``(beta, eta_var, eta_r)`` with ``beta = (eta_r * eta_var) ** 0.25``."""
    if sigma_ba_sq <= 0.0:
        raise DegenerateInputError("Var(phi_b @ phi_a) is zero")
    if r < 2:
        raise DegenerateInputError("r = 1 gives eta_r = log_m(1) = 0")
    if r > m:
        raise DegenerateInputError(f"rank {r} exceeds min dimension {m}")
    eta_var = sigma_w_sq / sigma_ba_sq
    eta_r = math.log(r) / math.log(m)
    return (eta_r * eta_var) ** 0.25, eta_var, eta_r


def magnitude_rescale(phi_b, phi_a, w0):
    """Scale both factors by ``beta`` so ``Var(b0 @ a0) = log_m(r) * Var(w0)``."""
    phi_b = check_matrix(phi_b, "phi_b")
    phi_a = check_matrix(phi_a, "phi_a")
    w0 = check_matrix(w0, "w0")
    if phi_b.shape[0] != w0.shape[0] or phi_a.shape[1] != w0.shape[1] or phi_b.shape[1] != phi_a.shape[0]:
        raise ShapeError(f"factors {phi_b.shape} @ {phi_a.shape} incompatible with weight {w0.shape}")
    r = phi_b.shape[1]
    m = min(w0.shape)
    sigma_w_sq = entrywise_variance(w0)
    sigma_ba_sq = entrywise_variance(phi_b @ phi_a)
    beta, eta_var, eta_r = rescale_coefficient(sigma_w_sq, sigma_ba_sq, r, m)
    report = RescaleReport(sigma_w_sq, sigma_ba_sq, eta_var, eta_r, m, beta)
    return beta * phi_b, beta * phi_a, report


def dst2_basis(n: int) -> np.ndarray:
    """Orthonormal DST-II basis; column ``k`` is ``c_k sin(pi (j + 1/2)(k + 1) / n)``."""
    j = np.arange(n)[:, None] + 0.5
    k = np.arange(n)[None, :] + 1.0
    basis = np.sin(np.pi * j * k / n) * math.sqrt(2.0 / n)
    basis[:, -1] /= math.sqrt(2.0)
    return basis


def _vanilla_pair(layer: LayerWeights, cfg: InitConfig, idx) -> AdapterPair:
    rng = derive_rng(cfg.seed, "init", "vanilla", idx)
    a = rng.standard_normal((cfg.rank, layer.d_in)) / math.sqrt(layer.d_in)
    b = np.zeros((layer.d_out, cfg.rank))
    return AdapterPair(a, b, cfg.rank, cfg.scaling, "vanilla")


def vanilla_init(model: ToyModel, cfg: InitConfig) -> dict:
    """Gaussian ``A`` with std ``1/sqrt(d_in)``, ``B = 0``."""
    return {idx: _vanilla_pair(model.layers[idx], cfg, idx) for idx in model.target_indices}


def loram_init(model: ToyModel, cfg: InitConfig) -> dict:
    """Deterministic DST-II bases, rescaled like the gradient-based methods."""
    out = {}
    for idx in model.target_indices:
        layer = model.layers[idx]
        if cfg.rank > min(layer.w0.shape):
            raise ShapeError(f"rank {cfg.rank} exceeds layer {idx} shape {layer.w0.shape}")
        phi_b = dst2_basis(layer.d_out)[:, :cfg.rank]
        phi_a = dst2_basis(layer.d_in)[:, :cfg.rank].T
        b0, a0, report = magnitude_rescale(phi_b, phi_a, layer.w0)
        out[idx] = AdapterPair(a0, b0, cfg.rank, cfg.scaling, "loram", report)
    return out


@dataclass
class InitInfo:
    """Diagnostics gathered while building gradient-based adapters."""

    g_cur: GradientSet | None = None
    g_prev: GradientSet | None = None
    g_tilde: GradientSet | None = None
    surgery: SurgeryReport | None = None
    top_singular_values: dict = field(default_factory=dict)
    fallback_layers: list = field(default_factory=list)


def _gradient_adapters(model, g_tilde: GradientSet, cfg: InitConfig, method, info: InitInfo):
    out = {}
    for idx, g in g_tilde.per_layer.items():
        layer = model.layers[idx]
        if frobenius_norm(g) == 0.0:
            warnings.warn(f"layer {idx}: zero reconciled gradient, falling back to vanilla init", RuntimeWarning)
            info.fallback_layers.append(idx)
            out[idx] = _vanilla_pair(layer, cfg, idx)
            continue
        phi_b, phi_a, res = _factorize(g, cfg.rank, cfg.svd_config(idx), cfg.a_block)
        info.top_singular_values[idx] = res.singular_values
        b0, a0, report = magnitude_rescale(phi_b, phi_a, layer.w0)
        out[idx] = AdapterPair(a0, b0, cfg.rank, cfg.scaling, method, report)
    return out


def _current_gradient(model, cur_task, cfg):
    sampler = cur_task.sampler(derive_seed(cfg.seed, "init", "cur_batches"))
    return accumulate_gradients(model.merged(), sampler, cfg.s_cur, cfg.batch_size, "current_task")


def slice_init(model: ToyModel, cur_task, prev_tasks, cfg: InitConfig, return_info=False):
    """Estimate gradients, reconcile, factorize and rescale; one pair per target layer.

    With no previous tasks the surgery stage is skipped and the result equals
    :func:`lora_ga_init`.
    """
    info = InitInfo()
    info.g_cur = g_cur = _current_gradient(model, cur_task, cfg)
    surgery_cfg = SurgeryConfig(cfg.c if cfg.c is not None else 0.0, cfg.coefficient_scope)
    try:
        prev_sampler = build_prev_sampler(prev_tasks, derive_seed(cfg.seed, "init", "prev"), cfg.prev_budget)
    except NoPreviousTasks:
        g_tilde = g_cur
        info.surgery = SurgeryReport(surgery_cfg.coefficient_scope, surgery_cfg.c, skipped=True)
    else:
        info.g_prev = accumulate_gradients(model.merged(), prev_sampler, cfg.s_prev, cfg.batch_size,
                                           "previous_tasks")
        g_tilde, info.surgery = pcgrad_project(g_cur, info.g_prev, surgery_cfg, return_report=True)
    info.g_tilde = g_tilde
    adapters = _gradient_adapters(model, g_tilde, cfg, cfg.method, info)
    return (adapters, info) if return_info else adapters


def lora_ga_init(model: ToyModel, cur_task, cfg: InitConfig, return_info=False):
    """Gradient-aligned init: the same pipeline with the surgery stage removed."""
    info = InitInfo()
    info.g_cur = info.g_tilde = g_cur = _current_gradient(model, cur_task, cfg)
    adapters = _gradient_adapters(model, g_cur, cfg, "lora_ga", info)
    return (adapters, info) if return_info else adapters


def initialize(model: ToyModel, cur_task, prev_tasks, cfg: InitConfig, return_info=False):
    """Dispatch on ``cfg.method``."""
    if cfg.method == "slice":
        return slice_init(model, cur_task, prev_tasks, cfg, return_info)
    if cfg.method == "lora_ga":
        return lora_ga_init(model, cur_task, cfg, return_info)
    adapters = vanilla_init(model, cfg) if cfg.method == "vanilla" else loram_init(model, cfg)
    return (adapters, InitInfo()) if return_info else adapters


def absorb(layer: LayerWeights, pair: AdapterPair) -> LayerWeights:
    """Return ``layer`` with base ``W0 - s * B @ A`` so attaching ``pair`` restores ``W0``."""
    if pair.shape != layer.w0.shape:
        raise ShapeError(f"adapter shape {pair.shape} does not match layer {layer.w0.shape}")
    return replace(layer, w0=layer.w0 - pair.delta())


def absorb_model(model: ToyModel, adapters: dict) -> ToyModel:
    """Absorb every adapter into its base layer and attach it."""
    layers = list(model.layers)
    for idx, pair in adapters.items():
        layers[idx] = absorb(layers[idx], pair)
    return replace(model, layers=tuple(layers), adapters=dict(adapters))


_MAGIC = b"SLCADPT1"


def _layer_bytes(pair: AdapterPair):
    return pair.b.astype("<f8").tobytes(), pair.a.astype("<f8").tobytes()


def save_adapters(adapters: dict, path, metadata=None):
    """Write adapters to ``path`` and a JSON manifest to ``path + '.manifest.json'``.

    The binary file is ``MAGIC | u32 header length | JSON header | payload``;
    the payload stores B then A for each layer as little-endian float64.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for idx in sorted(adapters):
        pair = adapters[idx]
        b_bytes, a_bytes = _layer_bytes(pair)
        entries.append({
            "layer": int(idx),
            "d_out": pair.shape[0],
            "d_in": pair.shape[1],
            "rank": pair.rank,
            "scaling": pair.scaling,
            "method": pair.method,
            "rescale": pair.report.to_dict() if pair.report else None,
            "b_offset": offset,
            "a_offset": offset + len(b_bytes),
        })
        chunks += [b_bytes, a_bytes]
        offset += len(b_bytes) + len(a_bytes)
    header = json.dumps({"layers": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    blob = _MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    path.write_bytes(blob)
    manifest = {
        "format": "slicelora-adapters/1",
        "file": path.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "layer_order": [e["layer"] for e in entries],
        "layers": {
            str(e["layer"]): hashlib.sha256(chunks[2 * i] + chunks[2 * i + 1]).hexdigest()
            for i, e in enumerate(entries)
        },
    }
    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_adapters(path, verify=True):
    """Inverse of :func:`save_adapters`; returns ``(adapters, metadata)``."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not an adapter file")
    (hlen,) = struct.unpack("<I", blob[len(_MAGIC):len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(blob[start:start + hlen])
    payload = blob[start + hlen:]
    if verify:
        manifest_path = path.with_name(path.name + ".manifest.json")
        manifest = json.loads(manifest_path.read_text())
        if manifest["sha256"] != hashlib.sha256(blob).hexdigest():
            raise ValueError(f"{path}: checksum does not match {manifest_path.name}")
    adapters = {}
    for e in header["layers"]:
        nb = e["d_out"] * e["rank"]
        na = e["rank"] * e["d_in"]
        b = np.frombuffer(payload, "<f8", nb, e["b_offset"]).reshape(e["d_out"], e["rank"]).copy()
        a = np.frombuffer(payload, "<f8", na, e["a_offset"]).reshape(e["rank"], e["d_in"]).copy()
        report = RescaleReport(**e["rescale"]) if e["rescale"] else None
        adapters[e["layer"]] = AdapterPair(a, b, e["rank"], e["scaling"], e["method"], report)
    return adapters, header["metadata"]
