"""Per-source visibility estimation over plane-sweep volumes.

Each source view gets a photoconsistency score against the other sources
at every pixel-plane cell, then a recurrent encoder-decoder sweeps the
planes near to far and emits per-source visibility logits plus feature
volumes whose mean over sources forms a consensus volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteError

SIMILARITY_EPS = 1e-6


@dataclass
class RecurrentState:
    """Hidden and cell activations carried across depth planes."""

    hidden: torch.Tensor
    cell: torch.Tensor


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell.

    Gates split into an input conv and a hidden conv (equivalent to one conv
    on the concatenation); the input half has no state dependency, so callers
    scanning a volume can precompute it for every step in one batched call
    and pass it through x_gates.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        self.input_gates = nn.Conv2d(in_channels, 4 * hidden_channels, kernel_size,
                                     padding=pad)
        self.hidden_gates = nn.Conv2d(hidden_channels, 4 * hidden_channels, kernel_size,
                                      padding=pad, bias=False)

    def init_state(self, batch: int, height: int, width: int, *, dtype, device) -> RecurrentState:
        shape = (batch, self.hidden_channels, height, width)
        return RecurrentState(
            hidden=torch.zeros(shape, dtype=dtype, device=device),
            cell=torch.zeros(shape, dtype=dtype, device=device),
        )

    def forward(self, x: torch.Tensor | None, state: RecurrentState,
                x_gates: torch.Tensor | None = None) -> RecurrentState:
        if x_gates is None:
            x_gates = self.input_gates(x)
        gates = x_gates + self.hidden_gates(state.hidden)
        i, f, o, g = gates.chunk(4, dim=1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return RecurrentState(hidden=hidden, cell=cell)


def pairwise_similarity(features: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean pairwise correlation of each source's warped features.

    features: (N, D, C, H, W), valid: (N, D, 1, H, W) bool. For each source i,
    the channel-wise zero-mean correlation with every other source j is
    averaged over the N-1 partners; pairs where either projection is invalid
    contribute zero, as do constant (zero-variance) feature vectors.
    Returns (N, D, H, W).
    """
    if features.dim() != 5:
        raise ValueError(f"expected (N, D, C, H, W) features, got {tuple(features.shape)}")
    n = features.shape[0]
    if n < 2:
        raise ValueError("pairwise similarity needs at least 2 sources")
    centered = features - features.mean(dim=2, keepdim=True)
    norms = centered.norm(dim=2)  # (N, D, H, W)
    mask = valid.squeeze(2).to(features.dtype)  # (N, D, H, W)
    total = torch.zeros_like(norms)
    for i in range(n):
        for j in range(i + 1, n):
            corr = (centered[i] * centered[j]).sum(dim=1)
            corr = corr / (norms[i] * norms[j] + SIMILARITY_EPS)
            corr = corr * mask[i] * mask[j]
            total[i] = total[i] + corr
            total[j] = total[j] + corr
    return total / (n - 1)


class VisibilityEstimator(nn.Module):
    """Recurrent encoder-decoder sweeping depth planes near to far.

    Per plane it consumes each source's warped features together with its
    similarity score, the mean similarity over sources, and the validity
    mask, and emits a visibility logit map plus a feature volume slice.
    Weights are shared across sources; the recurrent state is reset at the
    nearest plane on every call.
    """

    def __init__(self, feature_channels: int = 32, base_channels: int = 16,
                 consensus_channels: int = 8):
        super().__init__()
        c0, c1 = base_channels, base_channels * 2
        in_channels = feature_channels + 3  # + similarity, mean similarity, validity
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.up1 = nn.Conv2d(c1 + c1, c1, 3, padding=1)
        self.up2 = nn.Conv2d(c1 + c0, c0, 3, padding=1)
        self.cells = nn.ModuleList(
            [
                ConvLSTMCell(c0, c0),
                ConvLSTMCell(c1, c1),
                ConvLSTMCell(c1, c1),
                ConvLSTMCell(c1, c1),
                ConvLSTMCell(c0, c0),
            ]
        )
        self.head_visibility = nn.Conv2d(c0, 1, 3, padding=1)
        self.head_features = nn.Conv2d(c0, consensus_channels, 3, padding=1)

    def forward(self, features: torch.Tensor, similarity: torch.Tensor,
                valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, D, C, H, W) features -> (N, D, H, W) logits, (N, D, K, H, W) features."""
        n, d, _, h, w = features.shape
        sim_mean = similarity.mean(dim=0)  # (D, H, W)
        x = torch.cat(
            [
                features,
                similarity.unsqueeze(2),
                sim_mean[None, :, None].expand(n, d, 1, h, w),
                valid.to(features.dtype),
            ],
            dim=2,
        )
        # encoder activations and LSTM input gates have no recurrent
        # dependency, so compute them for every source and plane at once
        e0 = F.relu(self.conv_in(x.reshape(n * d, -1, h, w)))
        e1 = F.relu(self.down1(e0))
        e2 = F.relu(self.down2(e1))
        e0_shape, e1_shape, e2_shape = e0.shape[-2:], e1.shape[-2:], e2.shape[-2:]
        # unbind over planes: slices stay views, so the backward pass gathers
        # plane gradients once instead of scattering into full-size zeros
        gates0 = self.cells[0].input_gates(e0).view(n, d, -1, *e0_shape).unbind(dim=1)
        gates1 = self.cells[1].input_gates(e1).view(n, d, -1, *e1_shape).unbind(dim=1)
        gates2 = self.cells[2].input_gates(e2).view(n, d, -1, *e2_shape).unbind(dim=1)

        kw = dict(dtype=features.dtype, device=features.device)
        states = [
            cell.init_state(n, hh, ww, **kw)
            for cell, (hh, ww) in zip(
                self.cells, [e0_shape, e1_shape, e2_shape, e1_shape, e0_shape]
            )
        ]
        hiddens = []
        for k in range(d):  # planes are ordered near to far
            states[0] = self.cells[0](None, states[0], x_gates=gates0[k])
            states[1] = self.cells[1](None, states[1], x_gates=gates1[k])
            states[2] = self.cells[2](None, states[2], x_gates=gates2[k])
            u1 = F.interpolate(states[2].hidden, size=e1_shape, mode="bilinear",
                               align_corners=False)
            d1 = F.relu(self.up1(torch.cat([u1, states[1].hidden], dim=1)))
            states[3] = self.cells[3](d1, states[3])
            u2 = F.interpolate(states[3].hidden, size=e0_shape, mode="bilinear",
                               align_corners=False)
            d2 = F.relu(self.up2(torch.cat([u2, states[0].hidden], dim=1)))
            states[4] = self.cells[4](d2, states[4])
            if not torch.isfinite(states[4].cell).all():
                raise NonFiniteError(f"visibility recurrent state at plane {k}")
            hiddens.append(states[4].hidden)
        stacked = torch.stack(hiddens, dim=1).reshape(n * d, -1, h, w)
        vis = self.head_visibility(stacked).view(n, d, h, w)
        feat = self.head_features(stacked).view(n, d, -1, h, w)
        if not (torch.isfinite(vis).all() and torch.isfinite(feat).all()):
            raise NonFiniteError("visibility outputs")
        return vis, feat


def build_consensus(vis_features: torch.Tensor) -> torch.Tensor:
    """Average per-source feature volumes into one (D, K, H, W) volume."""
    if vis_features.dim() != 5 or vis_features.shape[0] < 1:
        raise ValueError(
            f"expected non-empty (N, D, K, H, W) feature volumes, got {tuple(vis_features.shape)}"
        )
    return vis_features.mean(dim=0)
