"""Plane-sweep geometry.

Inverse-depth plane sampling, differentiable warping of source images or
feature maps onto target-view depth planes, soft-argmax depth readout,
and depth map export.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .scene_io import CameraIntrinsics, CameraPose, View

VALID_EPS = 1e-6  # minimum source-frame depth for a valid projection
BOUNDS_EPS = 1e-6  # pixels; tolerates roundoff for points exactly on the border


@dataclass(frozen=True)
class DepthPlanes:
    """Depth hypotheses sampled uniformly in inverse depth, near to far."""

    depths: np.ndarray  # (D,) float64, strictly increasing
    d_min: float
    d_max: float

    @property
    def count(self) -> int:
        return len(self.depths)

    def spacing_inverse(self) -> float:
        """Plane spacing in inverse depth (1/m)."""
        return (1.0 / self.d_min - 1.0 / self.d_max) / (self.count - 1)

    def to_tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.as_tensor(self.depths, dtype=dtype, device=device)


def sample_depth_planes(d_min: float, d_max: float, count: int) -> DepthPlanes:
    """depths[k] = 1 / (1/d_min + k/(count-1) * (1/d_max - 1/d_min))."""
    if not (0 < d_min < d_max):
        raise ValueError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    if count < 2:
        raise ValueError(f"need at least 2 planes, got {count}")
    inv = 1.0 / d_min + (np.arange(count, dtype=np.float64) / (count - 1)) * (
        1.0 / d_max - 1.0 / d_min
    )
    return DepthPlanes(depths=1.0 / inv, d_min=float(d_min), d_max=float(d_max))


@dataclass
class WarpedVolume:
    """Source data resampled onto target-view depth planes.

    data is zero wherever valid is False; valid marks projections that
    land in front of the source camera and inside its image bounds.
    """

    data: torch.Tensor  # (D, C, H, W)
    valid: torch.Tensor  # (D, 1, H, W) bool


def warp_grid(
    source_intrinsics: CameraIntrinsics,
    source_pose: CameraPose,
    target_intrinsics: CameraIntrinsics,
    target_pose: CameraPose,
    planes: DepthPlanes,
    device=None,
):
    """Sampling grid and validity mask for plane-sweep warping.

    For each target pixel and depth plane: back-project to the plane in the
    target frame, transform to world then into the source frame, and project.
    Returns a grid_sample-style grid (D, H, W, 2) in [-1, 1] (align_corners
    convention) as float64, plus a (D, 1, H, W) bool validity mask. The grid
    is geometry only, so it can be cached and reused across training steps.
    """
    for pose in (source_pose, target_pose):
        if not (np.isfinite(pose.rotation).all() and np.isfinite(pose.translation).all()):
            raise ValueError("non-finite pose entries")

    ht, wt = target_intrinsics.height, target_intrinsics.width
    hs, ws = source_intrinsics.height, source_intrinsics.width
    depths = np.asarray(planes.depths, dtype=np.float64)

    us, vs = np.meshgrid(np.arange(wt, dtype=np.float64), np.arange(ht, dtype=np.float64))
    rays = np.stack(
        [
            (us - target_intrinsics.cx) / target_intrinsics.fx,
            (vs - target_intrinsics.cy) / target_intrinsics.fy,
            np.ones_like(us),
        ],
        axis=-1,
    )  # (H, W, 3), z = 1 so scaling by d gives target-frame depth exactly d

    # target cam -> world -> source cam, composed into one affine map
    r_ts = source_pose.rotation @ target_pose.rotation.T
    t_ts = source_pose.translation - r_ts @ target_pose.translation
    rays_src = rays @ r_ts.T  # (H, W, 3)
    cam = depths[:, None, None, None] * rays_src[None] + t_ts  # (D, H, W, 3)

    z = cam[..., 2]
    safe_z = np.where(np.abs(z) < VALID_EPS, VALID_EPS, z)
    u = source_intrinsics.fx * cam[..., 0] / safe_z + source_intrinsics.cx
    v = source_intrinsics.fy * cam[..., 1] / safe_z + source_intrinsics.cy
    valid = ((z > VALID_EPS)
             & (u >= -BOUNDS_EPS) & (u <= ws - 1 + BOUNDS_EPS)
             & (v >= -BOUNDS_EPS) & (v <= hs - 1 + BOUNDS_EPS))

    gx = 2.0 * u / (ws - 1) - 1.0
    gy = 2.0 * v / (hs - 1) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1))  # (D, H, W, 2) float64
    valid_t = torch.from_numpy(valid).unsqueeze(1)  # (D, 1, H, W)
    if device is not None:
        grid, valid_t = grid.to(device), valid_t.to(device)
    return grid, valid_t


def warp_volume(data: torch.Tensor, grid: torch.Tensor, valid: torch.Tensor) -> WarpedVolume:
    """Bilinearly sample (C, H, W) source data at a precomputed grid."""
    if data.dim() != 3:
        raise ValueError(f"expected (C, H, W) source data, got shape {tuple(data.shape)}")
    d = grid.shape[0]
    batch = data.unsqueeze(0).expand(d, -1, -1, -1)
    sampled = F.grid_sample(
        batch,
        grid.to(dtype=data.dtype, device=data.device),
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )
    mask = valid.to(device=data.device)
    return WarpedVolume(data=sampled * mask.to(data.dtype), valid=mask)


def warp_to_target(
    source: View,
    target_intrinsics: CameraIntrinsics,
    target_pose: CameraPose,
    planes: DepthPlanes,
    data: torch.Tensor | None = None,
) -> WarpedVolume:
    """Warp a source view (or a feature map aligned with it) onto target planes.

    `data` defaults to the source image; pass a (C, H, W) tensor to warp
    features extracted at source resolution instead.
    """
    grid, valid = warp_grid(source.intrinsics, source.pose, target_intrinsics,
                            target_pose, planes)
    if data is None:
        data = torch.from_numpy(source.image).permute(2, 0, 1).contiguous()
    return warp_volume(data, grid, valid)


def softargmax_depth(prob: torch.Tensor, planes: DepthPlanes) -> torch.Tensor:
    """Expected depth under a per-pixel distribution over planes.

    prob is (D, H, W), nonnegative, summing to 1 over planes within 1e-5.
    """
    if prob.dim() != 3 or prob.shape[0] != planes.count:
        raise ValueError(f"expected ({planes.count}, H, W) probabilities, got {tuple(prob.shape)}")
    if prob.min() < 0:
        raise ValueError("negative probabilities")
    total = prob.sum(dim=0)
    if (total - 1.0).abs().max() > 1e-5:
        raise ValueError("probabilities do not sum to 1 over depth planes")
    depths = planes.to_tensor(dtype=prob.dtype, device=prob.device)
    return (prob * depths[:, None, None]).sum(dim=0)


def reprojection_in_frame(
    target_intrinsics: CameraIntrinsics,
    target_pose: CameraPose,
    depth: np.ndarray,
    source_intrinsics: CameraIntrinsics,
    source_pose: CameraPose,
) -> np.ndarray:
    """Which target pixels land inside a source image at the given depth map.

    Back-projects each target pixel at depth (H, W), maps it into the source
    camera, and tests the projection against the source bounds. Distinguishes
    "occluded" from "never observable" when evaluating visibility.
    """
    k = target_intrinsics
    h, w = k.height, k.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1)
    pts_target = rays * np.asarray(depth, dtype=np.float64)[..., None]
    world = (pts_target - target_pose.translation) @ target_pose.rotation
    cam = source_pose.transform(world)
    z = cam[..., 2]
    safe_z = np.where(np.abs(z) < VALID_EPS, VALID_EPS, z)
    u = source_intrinsics.fx * cam[..., 0] / safe_z + source_intrinsics.cx
    v = source_intrinsics.fy * cam[..., 1] / safe_z + source_intrinsics.cy
    return (
        (z > VALID_EPS)
        & (u >= -BOUNDS_EPS) & (u <= source_intrinsics.width - 1 + BOUNDS_EPS)
        & (v >= -BOUNDS_EPS) & (v <= source_intrinsics.height - 1 + BOUNDS_EPS)
    )


def export_depth(depth, raw_path=None, preview_path=None, depth_range=None):
    """Write a depth map as float32 TIFF and/or a colormapped PNG preview."""
    arr = np.asarray(depth.detach().cpu() if isinstance(depth, torch.Tensor) else depth,
                     dtype=np.float32)
    if raw_path is not None:
        Image.fromarray(arr, mode="F").save(raw_path)
    if preview_path is not None:
        import matplotlib.cm as cm

        lo, hi = depth_range if depth_range is not None else (arr.min(), arr.max())
        span = max(hi - lo, 1e-12)
        norm = np.clip((arr - lo) / span, 0.0, 1.0)
        rgba = cm.viridis(norm)
        Image.fromarray((rgba[..., :3] * 255.0 + 0.5).astype(np.uint8)).save(preview_path)
    return arr
