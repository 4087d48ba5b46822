"""Teacher-task families with controllable gradient conflict."""
from __future__ import annotations

import math

import numpy as np

from ._seeding import derive_rng
from .model import SyntheticTask, ToyModel

__all__ = ["angle_pool", "subspace_pool", "held_out_tasks", "perturbed_teacher"]


def _low_rank_direction(rng, shape, rank, norm):
    d = rng.standard_normal((shape[0], rank)) @ rng.standard_normal((rank, shape[1]))
    return d * (norm / np.linalg.norm(d))


def perturbed_teacher(base: ToyModel, deltas: dict) -> ToyModel:
    """Teacher network sharing ``base``'s architecture with per-layer weight offsets."""
    return base.with_base({i: base.layers[i].w0 + d for i, d in deltas.items()}).without_adapters()


def angle_pool(base: ToyModel, size: int, seed: int, *, strength=1.0, private=0.25, direction_rank=2,
               train_count=256, eval_count=256, noise_std=0.0, prefix="task", angles=None):
    """Pool of teachers ``W + strength * |W| * (cos t P1 + sin t P2) + private * |W| * Q_i``.

    ``P1``/``P2`` are shared unit-norm low-rank directions per target layer and
    ``Q_i`` is task-private. Teachers whose angles differ by more than 90
    degrees pull the base in opposing directions, so their gradients at the
    base conflict; triples about 120 degrees apart are the most adversarial.
    """
    rng = derive_rng(seed, "angle_pool", "shared")
    shared = {}
    for idx in base.target_indices:
        w = base.layers[idx].w0
        scale = np.linalg.norm(w)
        shared[idx] = (_low_rank_direction(rng, w.shape, direction_rank, scale),
                       _low_rank_direction(rng, w.shape, direction_rank, scale))
    if angles is None:
        angles = derive_rng(seed, "angle_pool", "angles").uniform(0.0, 2.0 * math.pi, size)
    tasks = []
    for i, theta in enumerate(angles):
        trng = derive_rng(seed, "angle_pool", "task", i)
        deltas = {}
        for idx, (p1, p2) in shared.items():
            w = base.layers[idx].w0
            q = _low_rank_direction(trng, w.shape, direction_rank, np.linalg.norm(w))
            deltas[idx] = strength * (math.cos(theta) * p1 + math.sin(theta) * p2) + private * q
        tasks.append(SyntheticTask(
            f"{prefix}{i:02d}", int(derive_rng(seed, "angle_pool", "data", i).integers(2**62)),
            perturbed_teacher(base, deltas), train_count, eval_count, noise_std,
        ))
    return tasks


def subspace_pool(base: ToyModel, size: int, seed: int, *, n_angles=6, private=0.4, shared_dim=4, private_dim=4,
                  delta_scale=0.5, train_count=256, eval_count=256, noise_std=0.0, prefix="task"):
    """Pool whose tasks share one conflicting direction and own private input subspaces.

    Only the first layer is perturbed. Task ``i`` sees inputs confined to a
    common ``shared_dim`` subspace plus its own random ``private_dim``
    subspace of the complement. Its teacher adds to ``W``

    ``delta_scale * |W| * (u(t_i) b^T + private * (c1 e1^T + c2 e2^T))``

    where ``b`` lies in the shared input subspace, ``u(t) = cos t a1 + sin t a2``
    rotates through ``n_angles`` evenly spaced angles (``t_i`` cycles with
    ``i``), and ``e1, e2`` lie in the task's private inputs. Gradients at the
    base therefore conflict on the shared part only; the private part can be
    learnt without harming other tasks.
    """
    w0 = base.layers[0].w0
    d_out, d_in = w0.shape
    if shared_dim + private_dim > d_in or d_out < 4:
        raise ValueError("model too small for the requested subspaces")
    if 0 not in base.target_indices:
        raise ValueError("the first layer must be a target layer")
    rng = derive_rng(seed, "subspace_pool")
    q_in, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    shared_in, comp = q_in[:, :shared_dim], q_in[:, shared_dim:]
    q_out, _ = np.linalg.qr(rng.standard_normal((d_out, d_out)))
    a1, a2, b = q_out[:, 0], q_out[:, 1], shared_in[:, 0]
    scale = delta_scale * np.linalg.norm(w0)
    tasks = []
    for i in range(size):
        theta = 2.0 * math.pi * (i % n_angles) / n_angles
        priv_in = comp @ np.linalg.qr(rng.standard_normal((comp.shape[1], private_dim)))[0]
        priv_out = q_out[:, 2:] @ np.linalg.qr(rng.standard_normal((d_out - 2, 2)))[0]
        delta = np.outer(math.cos(theta) * a1 + math.sin(theta) * a2, b)
        delta += private * (np.outer(priv_out[:, 0], priv_in[:, 0]) + np.outer(priv_out[:, 1], priv_in[:, 1]))
        basis = np.concatenate([shared_in, priv_in], axis=1).T
        tasks.append(SyntheticTask(
            f"{prefix}{i:02d}", int(rng.integers(2**62)), perturbed_teacher(base, {0: scale * delta}),
            train_count, eval_count, noise_std, 1.0, basis,
        ))
    return tasks


def held_out_tasks(base: ToyModel, seed: int, *, count=2, eval_count=256, ip_input_scale=2.0):
    """Stand-ins for general-capability suites: tasks labelled by the untouched base.

    ``gp`` tasks use the training input distribution; ``ip`` tasks use inputs
    scaled by ``ip_input_scale``. Returns ``(task, tag)`` pairs.
    """
    teacher = base.without_adapters()
    out = []
    for tag, scale in (("gp", 1.0), ("ip", ip_input_scale)):
        for k in range(count):
            data_seed = int(derive_rng(seed, "held_out", tag, k).integers(2**62))
            out.append((SyntheticTask(f"heldout_{tag}{k}", data_seed, teacher, 1, eval_count, 0.0, scale), tag))
    return out
