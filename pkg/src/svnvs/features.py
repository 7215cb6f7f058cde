"""Shared image feature extractor.

A small fully-convolutional net: a stem followed by four parallel dilated
branches (rates 1, 2, 3, 4) whose outputs concatenate to 32 channels at
input resolution. The same weights are applied to every source view.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import NonFiniteError


class FeatureExtractor(nn.Module):
    def __init__(self, out_channels: int = 32, stem_channels: int = 16):
        super().__init__()
        if out_channels % 4 != 0:
            raise ValueError("out_channels must split evenly across 4 dilated branches")
        self.out_channels = out_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(stem_channels, stem_channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        branch_ch = out_channels // 4
        self.branches = nn.ModuleList(
            [
                nn.Conv2d(stem_channels, branch_ch, 3, padding=rate, dilation=rate)
                for rate in (1, 2, 3, 4)
            ]
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) images -> (N, 32, H, W) features."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(images.shape)}")
        x = self.stem(images)
        out = torch.cat([torch.relu(branch(x)) for branch in self.branches], dim=1)
        if not torch.isfinite(out).all():
            raise NonFiniteError("feature activations")
        return out
