"""Depth distribution and image-space aggregation.

A per-pixel recurrent scan over the consensus volume yields a probability
distribution over depth planes; visibility logits become per-source blend
weights; both combine warped source colors into a target-view image.
An alternative over-compositing operator is kept for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NonFiniteError
from .visibility import ConvLSTMCell


class DepthRayScanner(nn.Module):
    """Scans consensus features near to far with a 1x1 ConvLSTM per pixel.

    No spatial mixing: each pixel's depth distribution depends only on its
    own column of the consensus volume, so predictions are equivariant to
    image translation.
    """

    def __init__(self, in_channels: int = 8, hidden_channels: int = 16):
        super().__init__()
        self.cell = ConvLSTMCell(in_channels, hidden_channels, kernel_size=1)
        self.score = nn.Conv2d(hidden_channels, 1, 1)

    def forward(self, consensus: torch.Tensor) -> torch.Tensor:
        """(D, K, H, W) consensus -> (D, H, W) probabilities, softmax over D."""
        if consensus.dim() != 4:
            raise ValueError(f"expected (D, K, H, W) consensus, got {tuple(consensus.shape)}")
        d, _, h, w = consensus.shape
        state = self.cell.init_state(1, h, w, dtype=consensus.dtype, device=consensus.device)
        # all planes in one call; unbind keeps per-plane slices as views
        x_gates = self.cell.input_gates(consensus).unsqueeze(1).unbind(dim=0)
        hiddens = []
        for k in range(d):
            state = self.cell(None, state, x_gates=x_gates[k])
            hiddens.append(state.hidden)
        stacked = self.score(torch.cat(hiddens, dim=0)).squeeze(1)
        if not torch.isfinite(stacked).all():
            raise NonFiniteError("depth scores")
        return torch.softmax(stacked, dim=0)


def blend_weights(vis_logits: torch.Tensor) -> torch.Tensor:
    """Softmax over sources of per-source visibility logits.

    Max-subtraction keeps arbitrarily large logits finite. (N, D, H, W) in
    and out; weights sum to 1 over sources at every pixel-plane cell.
    """
    if vis_logits.dim() != 4:
        raise ValueError(f"expected (N, D, H, W) logits, got {tuple(vis_logits.shape)}")
    shifted = vis_logits - vis_logits.max(dim=0, keepdim=True).values
    exp = shifted.exp()
    return exp / exp.sum(dim=0, keepdim=True)


@dataclass
class AggregatedImage:
    """Blended target-view estimate plus per-source warped images."""

    image: torch.Tensor  # (3, H, W), convex combination of inputs, not clamped
    source_warps: torch.Tensor  # (N, 3, H, W)


def aggregate(
    warped_colors: torch.Tensor,
    valid: torch.Tensor,
    weights: torch.Tensor,
    prob: torch.Tensor,
) -> AggregatedImage:
    """Collapse per-source color volumes into one image.

    warped_colors: (N, D, 3, H, W) with zeros at invalid cells,
    valid: (N, D, 1, H, W) bool, weights: (N, D, H, W), prob: (D, H, W).
    Blend weights are renormalized over the valid sources at each
    pixel-plane cell; where no source is valid the blend falls back to
    uniform (the colors there are zero anyway). Each source's warped image
    is its color volume contracted against the depth distribution.
    """
    n, d, c, h, w = warped_colors.shape
    if valid.shape != (n, d, 1, h, w):
        raise ValueError(f"valid shape {tuple(valid.shape)} does not match colors")
    if weights.shape != (n, d, h, w):
        raise ValueError(f"weights shape {tuple(weights.shape)} does not match colors")
    if prob.shape != (d, h, w):
        raise ValueError(f"prob shape {tuple(prob.shape)} does not match colors")

    masked = weights * valid.squeeze(2).to(weights.dtype)
    denom = masked.sum(dim=0, keepdim=True)
    effective = torch.where(denom > 0, masked / denom.clamp_min(1e-12),
                            torch.full_like(masked, 1.0 / n))
    per_plane = (effective.unsqueeze(2) * warped_colors).sum(dim=0)  # (D, 3, H, W)
    image = (per_plane * prob.unsqueeze(1)).sum(dim=0)
    source_warps = (warped_colors * prob[None, :, None]).sum(dim=1)
    return AggregatedImage(image=image, source_warps=source_warps)


@dataclass
class OverComposite:
    image: torch.Tensor  # (3, H, W)
    plane_weights: torch.Tensor  # (D, H, W), alpha_d * transmittance_d
    accumulated: torch.Tensor  # (H, W), sum of plane weights


def over_composite(alpha: torch.Tensor, colors: torch.Tensor) -> OverComposite:
    """Front-to-back over-compositing of per-plane colors.

    alpha: (D, H, W) opacities in [0, 1], colors: (D, 3, H, W) ordered near
    to far. Plane d contributes alpha_d times the transmittance through all
    nearer planes; the accumulated weight is 1 minus residual transmittance.
    """
    if alpha.dim() != 3 or colors.dim() != 4 or colors.shape[0] != alpha.shape[0]:
        raise ValueError(
            f"incompatible shapes alpha {tuple(alpha.shape)}, colors {tuple(colors.shape)}"
        )
    if alpha.min() < 0 or alpha.max() > 1:
        raise ValueError("alpha outside [0, 1]")
    one_minus = 1.0 - alpha
    trans = torch.cumprod(one_minus, dim=0)
    trans = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)  # exclusive
    plane_weights = alpha * trans
    image = (plane_weights.unsqueeze(1) * colors).sum(dim=0)
    return OverComposite(image=image, plane_weights=plane_weights,
                         accumulated=plane_weights.sum(dim=0))
