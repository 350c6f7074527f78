"""Five-term weighted L1 objective."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch import Tensor

from .config import LossWeights
from .template_learner import TemplateOutput


@dataclass
class GroundTruth:
    joints3d: Tensor          # (B, K, 3)
    coarse_vertices: Tensor   # (B, M_c, 3)
    fine_vertices: Tensor     # (B, M_f, 3)
    joints2d: Tensor          # (B, K, 2)
    theta: Tensor | None = None

    def index(self, idx) -> "GroundTruth":
        return GroundTruth(*(None if v is None else v[idx] for v in (getattr(self, f.name) for f in fields(self))))


@dataclass
class LossBreakdown:
    l_v: Tensor
    l_j: Tensor
    l_j_reg: Tensor
    l_v_temp: Tensor
    l_j_proj: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def _l1(a: Tensor, b: Tensor, what: str) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def total_loss(pred, template: TemplateOutput, gt: GroundTruth, joint_regressor: Tensor, w: LossWeights) -> LossBreakdown:
    """Mean-absolute-error terms combined as
    alpha * (l_v + l_j + l_j_reg) + alpha_temp * l_v_temp + beta * l_j_proj.

    ``l_v`` is the sum of the coarse and fine vertex terms; ``l_j_reg`` compares
    ``G @ pred.coarse_vertices`` with the ground-truth joints; the template term is
    supervised at coarse resolution.
    """
    G = torch.as_tensor(joint_regressor, dtype=pred.coarse_vertices.dtype)
    l_v = _l1(pred.coarse_vertices, gt.coarse_vertices, "coarse vertices") + _l1(
        pred.fine_vertices, gt.fine_vertices, "fine vertices"
    )
    l_j = _l1(pred.joints3d, gt.joints3d, "joints3d")
    l_j_reg = _l1(G @ pred.coarse_vertices, gt.joints3d, "regressed joints")
    l_v_temp = _l1(template.template_coarse, gt.coarse_vertices, "template vertices")
    l_j_proj = _l1(pred.joints2d, gt.joints2d, "joints2d")
    total = w.alpha * (l_v + l_j + l_j_reg) + w.alpha_temp * l_v_temp + w.beta * l_j_proj
    return LossBreakdown(l_v, l_j, l_j_reg, l_v_temp, l_j_proj, total)
