"""The full image -> (joints, coarse mesh, fine mesh, camera) network."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import Backbone
from .body_model import RestBody, build_default_body
from .config import TrainConfig
from .mte import CameraHead, MeshUpsampler, MultiLayerEncoder, weak_perspective
from .template_learner import TemplateLearner, TemplateOutput
from .tokenizer import QuerySet, apply_mvm, attach_coordinates, make_base_queries
from .topology import Topology, build_topology


@dataclass
class Prediction:
    joints3d: Tensor          # (B, K, 3)
    coarse_vertices: Tensor   # (B, M_c, 3)
    fine_vertices: Tensor     # (B, M_f, 3)
    camera: Tensor            # (B, 3) as (s, tx, ty)
    joints2d: Tensor          # (B, K, 2)


@dataclass
class ForwardOutput:
    pred: Prediction
    template: TemplateOutput
    queries: QuerySet


def build_assets(cfg: TrainConfig) -> tuple[RestBody, Topology]:
    body = build_default_body(cfg.model.body_preset)
    return body, build_topology(body, cfg.model.coarse_count)


class MeshLeTemp(nn.Module):
    def __init__(self, cfg: TrainConfig, body: RestBody | None = None, topo: Topology | None = None):
        super().__init__()
        if body is None or topo is None:
            body, topo = build_assets(cfg)
        m = cfg.model
        self.body_preset = body.preset
        self.num_joints = topo.num_joints
        self.num_queries = topo.num_joints + topo.num_coarse
        self.backbone = Backbone(m.channels, m.backbone_widths)
        self.template_learner = TemplateLearner(m.channels, m.regressor_hidden, body, topo)
        self.encoder = MultiLayerEncoder(m.channels + 3, cfg.mte)
        self.upsampler = MeshUpsampler(topo)
        self.camera_head = CameraHead(cfg.mte.block_widths[-1], m.camera_hidden)

    def forward(self, images: Tensor, mvm_ratio=0.0, mvm_seed=0) -> ForwardOutput:
        """``images`` is (B, 1, H, W); ``mvm_ratio``/``mvm_seed`` scalars or per-sample lists."""
        features = self.backbone(images)
        template = self.template_learner(features)
        queries = attach_coordinates(make_base_queries(features, self.num_queries), template)
        queries = apply_mvm(queries, mvm_ratio, mvm_seed)
        states, xyz = self.encoder(queries.tokens)
        joints3d, coarse = xyz[:, : self.num_joints], xyz[:, self.num_joints :]
        camera = self.camera_head(states)
        pred = Prediction(
            joints3d=joints3d,
            coarse_vertices=coarse,
            fine_vertices=self.upsampler(coarse),
            camera=camera,
            joints2d=weak_perspective(joints3d, camera),
        )
        return ForwardOutput(pred, template, queries)


def build_model(cfg: TrainConfig, body: RestBody | None = None, topo: Topology | None = None) -> MeshLeTemp:
    """Seeded construction in the configured dtype."""
    torch.manual_seed(cfg.seed)
    model = MeshLeTemp(cfg, body, topo)
    return model.to(torch.float64 if cfg.dtype == "float64" else torch.float32)
