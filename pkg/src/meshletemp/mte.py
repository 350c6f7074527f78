"""Multi-layer transformer encoder, mesh upsampler and weak-perspective camera head."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import Tensor, nn

from .config import EncoderConfig
from .tokenizer import QuerySet
from .topology import Topology


class EncoderLayer(nn.Module):
    """Pre-norm self-attention layer. No positional embedding: token identity
    comes only from the coordinate segment, so the layer is permutation equivariant."""

    def __init__(self, width: int, heads: int, ffn_ratio: int = 2):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Linear(width, ffn_ratio * width), nn.GELU(), nn.Linear(ffn_ratio * width, width)
        )

    def attention(self, x: Tensor) -> Tensor:
        b, n, w = x.shape
        d = w // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(b, n, w))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class MultiLayerEncoder(nn.Module):
    """Input projection, three encoder blocks of decreasing width, shared xyz head."""

    def __init__(self, token_width: int, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        w = cfg.block_widths
        self.token_width = token_width
        self.input_proj = nn.Linear(token_width, w[0])
        self.blocks = nn.ModuleList(
            nn.Sequential(*[EncoderLayer(width, cfg.heads_per_block, cfg.ffn_ratio)
                            for _ in range(cfg.layers_per_block)])
            for width in w
        )
        self.norms = nn.ModuleList(nn.LayerNorm(width) for width in w)
        self.reduce = nn.ModuleList(nn.Linear(a, b) for a, b in zip(w, w[1:]))
        self.head = nn.Linear(w[-1], 3)

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """(B, N, C+3) -> (final token states (B, N, w3), xyz (B, N, 3))."""
        if tokens.shape[-1] != self.token_width:
            raise ValueError(f"token width {tokens.shape[-1]} != expected {self.token_width}")
        x = self.input_proj(tokens)
        for i, (block, norm) in enumerate(zip(self.blocks, self.norms)):
            x = norm(block(x))
            if i < len(self.reduce):
                x = self.reduce[i](x)
        return x, self.head(x)


def encode(queries: QuerySet, encoder: MultiLayerEncoder) -> tuple[Tensor, Tensor]:
    """Split the per-token regression into (joints3d, coarse_vertices)."""
    _, xyz = encoder(queries.tokens)
    k = queries.num_joints
    return xyz[:, :k], xyz[:, k:]


def upsample_init(topo: Topology) -> np.ndarray:
    """Row-normalised transpose of D: each fine vertex copies its coarse cell."""
    dt = topo.dense_downsample().T
    return dt / dt.sum(1, keepdims=True)


class MeshUpsampler(nn.Module):
    """Learnable linear map over the vertex axis, (B, M_c, 3) -> (B, M_f, 3)."""

    def __init__(self, topo: Topology):
        super().__init__()
        self.num_coarse = topo.num_coarse
        self.linear = nn.Linear(topo.num_coarse, topo.num_fine)
        with torch.no_grad():
            self.linear.weight.copy_(torch.from_numpy(upsample_init(topo)))
            self.linear.bias.zero_()

    def forward(self, coarse: Tensor) -> Tensor:
        if coarse.shape[-2:] != (self.num_coarse, 3):
            raise ValueError(f"expected (..., {self.num_coarse}, 3), got {tuple(coarse.shape)}")
        return self.linear(coarse.transpose(-2, -1)).transpose(-2, -1)


def weak_perspective(points: Tensor, camera: Tensor) -> Tensor:
    """s * (x, y) + (tx, ty) for points (..., K, 3) and camera (..., 3)."""
    return camera[..., None, :1] * points[..., :2] + camera[..., None, 1:]


class CameraHead(nn.Module):
    """Mean of the final token states -> (s, tx, ty); starts at the identity camera."""

    def __init__(self, width: int, hidden: int = 32):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, 3))
        nn.init.zeros_(self.mlp[-1].weight)
        with torch.no_grad():
            self.mlp[-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0]))

    def forward(self, states: Tensor) -> Tensor:
        return self.mlp(states.mean(dim=-2))


def camera_and_project(joints3d: Tensor, summary: Tensor, head: CameraHead) -> tuple[Tensor, Tensor]:
    camera = head.mlp(summary)
    return camera, weak_perspective(joints3d, camera)
