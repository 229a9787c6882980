"""Triplet, feature-mimic and combined stage-II losses.

All functions work on batches: descriptors are ``(B, dim)`` tensors and the
result is a ``(B,)`` tensor of per-sample losses.
"""

from __future__ import annotations

import torch
from torch import nn

from ..errors import LossError


def l2_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # clamp keeps the sqrt differentiable when a == b
    return (a - b).pow(2).sum(dim=-1).clamp_min(1e-24).sqrt()


def triplet_loss(x_q: torch.Tensor, x_p: torch.Tensor, x_n: torch.Tensor, margin: float = 0.1) -> torch.Tensor:
    """``max(d(q, p) - d(q, n) + margin, 0)`` with Euclidean ``d``."""
    if not (x_q.shape == x_p.shape == x_n.shape):
        raise LossError(f"descriptor shapes differ: {tuple(x_q.shape)}, {tuple(x_p.shape)}, {tuple(x_n.shape)}")
    if margin < 0:
        raise LossError("margin must be >= 0")
    return torch.relu(l2_distance(x_q, x_p) - l2_distance(x_q, x_n) + margin)


def kd_loss(
    x_teacher: torch.Tensor, x_student: torch.Tensor, t: nn.Module, phi, renormalize: bool = False
) -> torch.Tensor:
    """``phi * ||x_teacher - T(x_student)||^2``; the teacher gets no gradient.

    With ``renormalize`` the mapped student descriptor is L2-normalised
    before the comparison; by default it is used as is.
    """
    mapped = t(x_student)
    if renormalize:
        mapped = nn.functional.normalize(mapped, dim=-1)
    if mapped.shape != x_teacher.shape:
        raise LossError(f"T maps to {tuple(mapped.shape)}, teacher descriptors are {tuple(x_teacher.shape)}")
    phi = torch.as_tensor(phi, dtype=mapped.dtype, device=mapped.device)
    if (phi < 0).any():
        raise LossError("distillation weights must be nonnegative")
    return phi.detach() * (x_teacher.detach() - mapped).pow(2).sum(dim=-1)


def total_loss(
    student: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    teacher: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    t: nn.Module,
    phi,
    margin: float = 0.1,
    renormalize: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Triplet loss on the student plus mimic losses on q, p and n.

    The pair weight ``phi`` multiplies all three mimic terms. Returns
    ``(total, vpr, kd)`` per sample.
    """
    s_q, s_p, s_n = student
    vpr = triplet_loss(s_q, s_p, s_n, margin)
    kd = sum(kd_loss(xt, xs, t, phi, renormalize) for xt, xs in zip(teacher, student))
    return vpr + kd, vpr, kd
