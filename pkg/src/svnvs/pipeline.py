"""End-to-end synthesis pipeline.

Wires feature extraction, plane-sweep warping, visibility estimation,
depth scanning, aggregation, and refinement into a single module, with
switchable ablation variants. Warp grids and warped color volumes depend
only on geometry, so they are prepared once per target and reused across
training steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import geometry, refinement, rendering, visibility
from .config import TrainConfig
from .errors import NonFiniteError
from .features import FeatureExtractor
from .geometry import DepthPlanes
from .scene_io import CameraIntrinsics, CameraPose, View


def _check_finite(name: str, tensor: torch.Tensor):
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(name)


def resize_view(view: View, resolution: tuple[int, int]) -> View:
    """Resample a view, rescaling intrinsics so pixel centers stay aligned."""
    h, w = resolution
    k = view.intrinsics
    if (h, w) == (k.height, k.width):
        return view
    sx = (w - 1) / (k.width - 1)
    sy = (h - 1) / (k.height - 1)
    intr = CameraIntrinsics(fx=k.fx * sx, fy=k.fy * sy, cx=k.cx * sx, cy=k.cy * sy,
                            width=w, height=h)
    if view.image is None:
        return View(id=view.id, image=None, intrinsics=intr, pose=view.pose)
    img = torch.from_numpy(view.image).permute(2, 0, 1).unsqueeze(0)
    resized = nn.functional.interpolate(img, size=(h, w), mode="bilinear",
                                        align_corners=True)
    image = resized[0].permute(1, 2, 0).clamp(0, 1).numpy()
    return View(id=view.id, image=image, intrinsics=intr, pose=view.pose)


@dataclass
class PreparedViews:
    """Geometry-dependent tensors for one target and its sources."""

    target_id: str
    target_image: torch.Tensor | None  # (3, H, W); None for pose-only targets
    source_ids: list[str]
    source_images: torch.Tensor  # (N, 3, H, W)
    grids: torch.Tensor  # (N, D, H, W, 2) float64 sampling grids
    valids: torch.Tensor  # (N, D, 1, H, W) bool
    warped_colors: torch.Tensor  # (N, D, 3, H, W)
    planes: DepthPlanes
    target_intrinsics: CameraIntrinsics = None
    target_pose: CameraPose = None

    @property
    def num_sources(self) -> int:
        return self.source_images.shape[0]


def prepare_views(target: View, sources: list[View], planes: DepthPlanes,
                  resolution: tuple[int, int] | None = None,
                  device=None) -> PreparedViews:
    if len(sources) < 2:
        raise ValueError("need at least 2 source views")
    if resolution is not None:
        target = resize_view(target, resolution)
        sources = [resize_view(s, resolution) for s in sources]
    to_tensor = lambda img: torch.from_numpy(img).permute(2, 0, 1).contiguous()
    grids, valids, colors = [], [], []
    for s in sources:
        grid, valid = geometry.warp_grid(s.intrinsics, s.pose, target.intrinsics,
                                         target.pose, planes, device=device)
        warped = geometry.warp_volume(to_tensor(s.image).to(device or "cpu"), grid, valid)
        grids.append(grid)
        valids.append(valid)
        colors.append(warped.data)
    target_image = None
    if target.image is not None:
        target_image = to_tensor(target.image).to(device or "cpu")
    return PreparedViews(
        target_id=target.id,
        target_image=target_image,
        source_ids=[s.id for s in sources],
        source_images=torch.stack([to_tensor(s.image) for s in sources]).to(device or "cpu"),
        grids=torch.stack(grids),
        valids=torch.stack(valids),
        warped_colors=torch.stack(colors),
        planes=planes,
        target_intrinsics=target.intrinsics,
        target_pose=target.pose,
    )


def crop_views(batch: PreparedViews, top: int, left: int,
               size: tuple[int, int]) -> PreparedViews:
    """A window of the target pixel lattice, exact because the sweep tensors
    are per-target-pixel: slicing grids, masks, and warped colors is the same
    geometry restricted to the window. Source frames stay whole so features
    keep their full context.
    """
    h, w = size
    if batch.target_image is None:
        raise ValueError("cannot crop a batch without a target image")
    full_h, full_w = batch.target_image.shape[-2:]
    if not (0 <= top and top + h <= full_h and 0 <= left and left + w <= full_w):
        raise ValueError(f"crop {size} at ({top}, {left}) exceeds {(full_h, full_w)}")
    rows = slice(top, top + h)
    cols = slice(left, left + w)
    return PreparedViews(
        target_id=batch.target_id,
        target_image=batch.target_image[:, rows, cols],
        source_ids=batch.source_ids,
        source_images=batch.source_images,
        grids=batch.grids[:, :, rows, cols],
        valids=batch.valids[:, :, :, rows, cols],
        warped_colors=batch.warped_colors[:, :, :, rows, cols],
        planes=batch.planes,
        # a window can place the principal point outside the frame, so no
        # intrinsics are carried; crops feed training, not reprojection
        target_intrinsics=None,
        target_pose=batch.target_pose,
    )


@dataclass
class PipelineResult:
    final: torch.Tensor  # (3, H, W)
    aggregated: rendering.AggregatedImage
    prob: torch.Tensor  # (D, H, W), sums to 1 over planes
    vis_logits: torch.Tensor  # (N, D, H, W)
    weights: torch.Tensor  # (N, D, H, W), sums to 1 over sources
    similarity: torch.Tensor  # (N, D, H, W)
    consensus: torch.Tensor  # (D, K, H, W)
    candidates: list | None = None  # refinement runs only
    alpha: torch.Tensor | None = None  # (D, H, W), over-compositing runs only


class SynthesisPipeline(nn.Module):
    """Full model; the ablation choice fixes which branches exist."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.features = FeatureExtractor()
        self.visibility = visibility.VisibilityEstimator(
            feature_channels=self.features.out_channels
        )
        ab = config.ablation
        if ab == "over_compositing":
            self.opacity = nn.Conv2d(8, 1, 1)
        elif ab != "no_ray_casting":
            self.depth_scan = rendering.DepthRayScanner()
        if ab != "no_refinement":
            self.refine_net = refinement.RefinementNet()

    def forward(self, batch: PreparedViews) -> PipelineResult:
        ab = self.config.ablation
        n = batch.num_sources

        feats = self.features(batch.source_images)  # (N, C, H, W)
        warped_feats = torch.stack(
            [
                geometry.warp_volume(feats[i], batch.grids[i], batch.valids[i]).data
                for i in range(n)
            ]
        )
        _check_finite("warped source features", warped_feats)

        sim = visibility.pairwise_similarity(warped_feats, batch.valids)
        _check_finite("pairwise similarity", sim)

        vis_logits, vis_feats = self.visibility(warped_feats, sim, batch.valids)
        consensus = visibility.build_consensus(vis_feats)
        _check_finite("consensus volume", consensus)

        if ab == "no_visibility":
            weights = torch.full_like(vis_logits, 1.0 / n)
        else:
            weights = rendering.blend_weights(vis_logits)

        alpha = None
        if ab == "over_compositing":
            alpha = torch.sigmoid(self.opacity(consensus)).squeeze(1)  # (D, H, W)
            masked = weights * batch.valids.squeeze(2).to(weights.dtype)
            denom = masked.sum(dim=0, keepdim=True)
            effective = torch.where(denom > 0, masked / denom.clamp_min(1e-12),
                                    torch.full_like(masked, 1.0 / n))
            plane_colors = (effective.unsqueeze(2) * batch.warped_colors).sum(dim=0)
            composite = rendering.over_composite(alpha, plane_colors)
            prob = composite.plane_weights / composite.plane_weights.sum(dim=0).clamp_min(1e-12)
            source_warps = (batch.warped_colors * prob[None, :, None]).sum(dim=1)
            aggregated = rendering.AggregatedImage(image=composite.image,
                                                   source_warps=source_warps)
        else:
            if ab == "no_ray_casting":
                prob = torch.softmax(vis_logits.mean(dim=0), dim=0)
            else:
                prob = self.depth_scan(consensus)
            aggregated = rendering.aggregate(batch.warped_colors, batch.valids,
                                             weights, prob)
        _check_finite("aggregated image", aggregated.image)

        if ab == "no_refinement":
            return PipelineResult(
                final=aggregated.image, aggregated=aggregated, prob=prob,
                vis_logits=vis_logits, weights=weights, similarity=sim,
                consensus=consensus, alpha=alpha,
            )

        warps_in = aggregated.source_warps
        if ab == "no_warped_sources":
            warps_in = torch.zeros_like(warps_in)
        candidates = refinement.refine(self.refine_net, aggregated.image, warps_in)
        final = refinement.blend_candidates(candidates)
        _check_finite("refined image", final)
        return PipelineResult(
            final=final, aggregated=aggregated, prob=prob, vis_logits=vis_logits,
            weights=weights, similarity=sim, consensus=consensus,
            candidates=candidates, alpha=alpha,
        )
