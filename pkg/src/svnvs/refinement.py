"""Per-source refinement and confidence blending.

The blended plane-sweep estimate is paired with each source's warped image;
a two-branch encoder-decoder produces a refined candidate and a confidence
map per source, and candidates are averaged under softmax-normalized
confidences.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError


@dataclass
class RefinedCandidate:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    confidence: torch.Tensor  # (1, H, W) unnormalized log-score


def _enc_block(cin, cout, stride):
    # no conv bias: instance norm cancels any constant channel shift
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class _Encoder(nn.Module):
    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        c0, c1, c2 = widths
        self.stem = _enc_block(3, c0, 1)
        self.down = nn.ModuleList(
            [_enc_block(c0, c1, 2), _enc_block(c1, c2, 2), _enc_block(c2, c2, 2)]
        )

    def forward(self, x):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        return skips  # resolutions 1, 1/2, 1/4, 1/8


class RefinementNet(nn.Module):
    """Two encoder branches merging into a shared skip-connected decoder."""

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        c0, c1, c2 = widths
        self.enc_blend = _Encoder(widths)
        self.enc_warp = _Encoder(widths)
        self.bottleneck = _enc_block(2 * c2, c2, 1)
        self.dec = nn.ModuleList(
            [
                _enc_block(c2 + 2 * c2, c2, 1),
                _enc_block(c2 + 2 * c1, c1, 1),
                _enc_block(c1 + 2 * c0, c0, 1),
            ]
        )
        self.head_image = nn.Conv2d(c0, 3, 3, padding=1)
        self.head_confidence = nn.Conv2d(c0, 1, 3, padding=1)

    def forward(self, blended: torch.Tensor, warped: torch.Tensor):
        """blended (N, 3, H, W) paired with warped (N, 3, H, W), batched over sources.

        Returns candidate images (N, 3, H, W) in [0, 1] via sigmoid and raw
        confidence logits (N, 1, H, W).
        """
        skips_b = self.enc_blend(blended)
        skips_w = self.enc_warp(warped)
        x = self.bottleneck(torch.cat([skips_b[3], skips_w[3]], dim=1))
        for i, block in enumerate(self.dec):
            sb, sw = skips_b[2 - i], skips_w[2 - i]
            x = F.interpolate(x, size=sb.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, sb, sw], dim=1))
        image = torch.sigmoid(self.head_image(x))
        confidence = self.head_confidence(x)
        if not (torch.isfinite(image).all() and torch.isfinite(confidence).all()):
            raise NonFiniteError("refinement activations")
        return image, confidence


def refine(model: RefinementNet, blended: torch.Tensor,
           warped: torch.Tensor) -> list[RefinedCandidate]:
    """One refined candidate per source from a (3, H, W) blended estimate."""
    n = warped.shape[0]
    images, confidences = model(blended.unsqueeze(0).expand(n, -1, -1, -1), warped)
    return [RefinedCandidate(image=images[i], confidence=confidences[i]) for i in range(n)]


def blend_candidates(candidates: list[RefinedCandidate]) -> torch.Tensor:
    """Confidence-weighted average; softmax over sources normalizes per pixel."""
    if len(candidates) == 0:
        raise ValueError("no candidates to blend")
    images = torch.stack([c.image for c in candidates], dim=0)
    logits = torch.stack([c.confidence for c in candidates], dim=0)
    weights = torch.softmax(logits, dim=0)
    return (weights * images).sum(dim=0)
