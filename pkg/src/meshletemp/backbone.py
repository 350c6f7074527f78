"""Small strided CNN standing in for the HRNet feature extractor.

Four stride-2 stages followed by adaptive average pooling give a (C, 7, 7)
grid for any input whose side is divisible by 16. Hidden stages use GroupNorm:
silhouettes cover a small part of the frame, and without per-sample
normalisation the pooled features of different images are nearly identical.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

GRID = 7
STRIDE = 16


class Backbone(nn.Module):
    def __init__(self, channels: int = 128, widths: list[int] | tuple[int, ...] = (16, 32, 64), in_channels: int = 1):
        super().__init__()
        self.channels = channels
        chans = [in_channels, *widths, channels]
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(chans, chans[1:])):
            layers.append(nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1))
            if i < len(chans) - 2:
                layers += [nn.GroupNorm(min(4, b), b), nn.GELU()]
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(GRID)

    def forward(self, images: Tensor) -> Tensor:
        """(B, 1, H, W) -> (B, C, 7, 7)."""
        h, w = images.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image side must be divisible by {STRIDE}, got {h}x{w}")
        return self.pool(self.stages(images))


def extract_features(image: Tensor, backbone: Backbone) -> Tensor:
    """Feature grid for an H x W x 1 image (or a B x H x W x 1 batch)."""
    image = torch.as_tensor(image)
    single = image.dim() == 3
    if single:
        image = image[None]
    if image.dim() != 4:
        raise ValueError(f"expected H x W x ch input, got shape {tuple(image.shape)}")
    feats = backbone(image.permute(0, 3, 1, 2).to(next(backbone.parameters()).dtype))
    return feats[0] if single else feats
