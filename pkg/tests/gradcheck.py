"""Central finite-difference oracle for the stage-II objective."""

import torch
from torch import nn

from vprdistill.model import BackboneConfig, DescriptorNet
from vprdistill.training import kd_loss, total_loss, triplet_loss

TINY = (2, 3, 4, 5, 6)


def tiny_setup(seed: int, activation: str = "relu", batch: int = 3, size: int = 8):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    student = DescriptorNet(BackboneConfig(3, TINY, activation=activation), transform_dim=7).double()
    imgs = [torch.randn(batch, 3, size, size, generator=g, dtype=torch.float64) for _ in range(3)]
    teacher = [nn.functional.normalize(torch.randn(batch, 7, generator=g, dtype=torch.float64), dim=1) for _ in range(3)]
    phi = torch.rand(batch, generator=g, dtype=torch.float64) * 3
    return student, imgs, teacher, phi


def objective(which: str, student, imgs, teacher, phi, margin: float = 0.5) -> torch.Tensor:
    desc = [student({"rgb": x}) for x in imgs]
    if which == "triplet":
        return triplet_loss(*desc, margin).sum()
    if which == "kd":
        return sum(kd_loss(t, d, student.transform, phi) for t, d in zip(teacher, desc)).sum()
    return total_loss(desc, teacher, student.transform, phi, margin)[0].sum()


def relative_gradient_error(which: str, student, imgs, teacher, phi, eps: float = 1e-6) -> float:
    params = [p for p in student.parameters() if p.requires_grad]
    student.zero_grad()
    objective(which, student, imgs, teacher, phi).backward()
    analytic = torch.cat([(torch.zeros_like(p) if p.grad is None else p.grad).reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = objective(which, student, imgs, teacher, phi).item()
                flat[i] = old - eps
                down = objective(which, student, imgs, teacher, phi).item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale
