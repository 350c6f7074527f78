"""Query assembly (feature segment ++ template coordinates) and masked vertex modeling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import Tensor

from .template_learner import TemplateOutput, pool_features


@dataclass
class QuerySet:
    tokens: Tensor        # (B, K + M_c, C + 3)
    num_joints: int
    mask_flags: Tensor    # (B, K + M_c) bool

    @property
    def joint_block(self) -> Tensor:
        return self.tokens[:, : self.num_joints]

    @property
    def vertex_block(self) -> Tensor:
        return self.tokens[:, self.num_joints :]

    @property
    def feature_width(self) -> int:
        return self.tokens.shape[-1] - 3


def make_base_queries(features: Tensor, num_queries: int) -> Tensor:
    """Replicate the pooled C-vector of F once per query: (B, C, 7, 7) -> (B, N, C)."""
    pooled = pool_features(features)
    return pooled.unsqueeze(-2).expand(*pooled.shape[:-1], num_queries, pooled.shape[-1])


def attach_coordinates(base: Tensor, template: TemplateOutput) -> QuerySet:
    coords = torch.cat([template.template_joints, template.template_coarse], dim=-2)
    if base.shape[:-1] != coords.shape[:-1]:
        raise ValueError(f"base queries {tuple(base.shape)} do not match {coords.shape[-2]} template rows")
    tokens = torch.cat([base, coords.to(base.dtype)], dim=-1)
    flags = torch.zeros(tokens.shape[:-1], dtype=torch.bool, device=tokens.device)
    return QuerySet(tokens, template.template_joints.shape[-2], flags)


def mask_rows(num_tokens: int, ratio: float, seed: int) -> np.ndarray:
    """Seeded uniform choice of floor(ratio * N) rows without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    count = math.floor(ratio * num_tokens)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_tokens, size=count, replace=False))


def apply_mvm(queries: QuerySet, ratio, seed) -> QuerySet:
    """Zero the feature segment of randomly chosen queries; coordinates are kept.

    ``ratio`` and ``seed`` may be scalars (shared by the batch) or per-sample sequences.
    """
    batch, n = queries.tokens.shape[:2]
    ratios = [ratio] * batch if np.isscalar(ratio) else list(ratio)
    seeds = [seed] * batch if np.isscalar(seed) else list(seed)
    flags = torch.zeros(batch, n, dtype=torch.bool)
    for b in range(batch):
        flags[b, torch.from_numpy(mask_rows(n, float(ratios[b]), int(seeds[b])))] = True
    flags = flags.to(queries.tokens.device) | queries.mask_flags
    if not flags.any():
        return replace(queries, mask_flags=flags)
    width = queries.feature_width
    keep = torch.ones(queries.tokens.shape, dtype=torch.bool, device=flags.device)
    keep[..., :width] = ~flags[..., None]
    tokens = torch.where(keep, queries.tokens, torch.zeros((), dtype=queries.tokens.dtype))
    return QuerySet(tokens, queries.num_joints, flags)
