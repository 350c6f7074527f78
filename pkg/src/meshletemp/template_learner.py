"""Per-image learnable template: pooled features -> theta -> body mesh -> coarse mesh + joints."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .body_model import NUM_PARAMS, BodyLayer, RestBody
from .topology import Topology


@dataclass
class TemplateOutput:
    theta: Tensor             # (B, 82)
    template_fine: Tensor     # (B, M_f, 3)
    template_coarse: Tensor   # (B, M_c, 3)
    template_joints: Tensor   # (B, K, 3)


def pool_features(features: Tensor) -> Tensor:
    """Spatial mean of each channel: (..., C, 7, 7) -> (..., C)."""
    return features.mean(dim=(-2, -1))


class ThetaRegressor(nn.Module):
    """Average pool, flatten, then an MLP to the 82 body parameters.

    The last layer starts at zero so every image initially gets the rest-pose template.
    """

    def __init__(self, channels: int, hidden: list[int] | tuple[int, ...] = (256, 128)):
        super().__init__()
        dims = [channels, *hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims, dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        self.mlp = nn.Sequential(*layers)
        self.out = nn.Linear(dims[-1], NUM_PARAMS)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, features: Tensor) -> Tensor:
        return self.out(self.mlp(pool_features(features)))


class TemplateLearner(nn.Module):
    def __init__(self, channels: int, hidden, body: RestBody, topo: Topology):
        super().__init__()
        self.regressor = ThetaRegressor(channels, hidden)
        self.body = BodyLayer(body)
        self.register_buffer("downsample", torch.from_numpy(topo.dense_downsample()))
        self.register_buffer("joint_regressor", torch.from_numpy(topo.joint_regressor.copy()))

    def build(self, theta: Tensor) -> TemplateOutput:
        fine, _ = self.body(theta)
        coarse = self.downsample @ fine
        joints = self.joint_regressor @ coarse
        return TemplateOutput(theta, fine, coarse, joints)

    def forward(self, features: Tensor) -> TemplateOutput:
        return self.build(self.regressor(features))


def regress_theta(features: Tensor, regressor: ThetaRegressor) -> Tensor:
    single = features.dim() == 3
    theta = regressor(features[None] if single else features)
    return theta[0] if single else theta


def build_template(theta: Tensor, body: RestBody, topo: Topology) -> TemplateOutput:
    """Functional form of :meth:`TemplateLearner.build` for (82,) or (B, 82) theta."""
    theta = torch.as_tensor(theta, dtype=torch.float64)
    single = theta.dim() == 1
    if single:
        theta = theta[None]
    layer = BodyLayer(body)
    fine, _ = layer(theta)
    coarse = torch.from_numpy(topo.dense_downsample()) @ fine
    joints = torch.from_numpy(topo.joint_regressor.copy()) @ coarse
    out = TemplateOutput(theta, fine, coarse, joints)
    if single:
        out = TemplateOutput(*(t[0] for t in (theta, fine, coarse, joints)))
    return out
