"""Inspect what the geometry pathway learned from an overfit checkpoint.

Reports where softargmax depth fails (by surface and local texture), how
concentrated the depth distribution is, and how blend weights behave on
ground-truth-visible versus occluded pixels.

Usage: python scripts/diagnose_geometry.py runs/overfit/final.pt
"""

import argparse

import numpy as np
import torch

from svnvs import geometry, pipeline, scene_io, training

from overfit_two_planes import build_scene


def luminance_gradient(image):
    """Mean absolute finite-difference gradient of luminance, (H, W)."""
    luma = image @ np.array([0.299, 0.587, 0.114])
    gx = np.zeros_like(luma)
    gy = np.zeros_like(luma)
    gx[:, :-1] = np.abs(np.diff(luma, axis=1))
    gy[:-1, :] = np.abs(np.diff(luma, axis=0))
    return np.maximum(gx, gy)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("checkpoint")
    ap.add_argument("--planes", type=int, default=16)
    args = ap.parse_args()

    torch.set_num_threads(1)
    ckpt = training.Checkpoint.load(args.checkpoint)
    trainer = training.Trainer.from_checkpoint(ckpt)
    scene = build_scene()
    manifest = scene.manifest
    planes = geometry.sample_depth_planes(*manifest.depth_range, args.planes)
    target_id = "view00"
    sources = scene_io.select_source_views(manifest, target_id, 3)
    batch = pipeline.prepare_views(manifest.view(target_id), sources, planes)

    with torch.no_grad():
        result = trainer.model(batch)

    gt = scene.gt_depth[target_id]
    est = geometry.softargmax_depth(result.prob, planes).numpy()
    inv_err = np.abs(1 / est - 1 / gt)
    spacing = planes.spacing_inverse()
    ok = inv_err <= spacing

    vis_count = np.zeros(gt.shape, dtype=np.int64)
    for sid in batch.source_ids:
        vis_count += scene.gt_visibility[(target_id, sid)]
    multi = vis_count >= 2

    fg = np.isclose(gt, 2.0, atol=1e-6)
    bg = ~fg
    print(f"overall acc (multi-view pixels): {ok[multi].mean():.3f}  n={multi.sum()}")
    print(f"  foreground (2 m): {ok[multi & fg].mean():.3f}  n={(multi & fg).sum()}")
    print(f"  background (4 m): {ok[multi & bg].mean():.3f}  n={(multi & bg).sum()}")

    grad = luminance_gradient(manifest.view(target_id).image)
    for thresh in (0.0, 0.01, 0.02, 0.04, 0.08):
        sel = multi & (grad > thresh)
        if sel.sum():
            print(f"  grad > {thresh:.2f}: acc {ok[sel].mean():.3f}  "
                  f"frac kept {sel.sum() / multi.sum():.3f}")

    prob = result.prob.numpy()
    peak = prob.max(axis=0)
    print(f"prob peak: mean {peak.mean():.3f}  "
          f"fg {peak[fg].mean():.3f}  bg {peak[bg].mean():.3f}")
    argmax_depth = planes.depths[prob.argmax(axis=0)]
    arg_ok = np.abs(1 / argmax_depth - 1 / gt) <= spacing
    print(f"argmax-plane acc (multi): {arg_ok[multi].mean():.3f}")

    # where do failures sit spatially: distance to the nearest fg/bg boundary
    from scipy import ndimage  # noqa: F401
    print()

    logits = result.vis_logits.numpy()
    print(f"vis logit spread: std {logits.std():.4f}  "
          f"range [{logits.min():.3f}, {logits.max():.3f}]")
    per_source = training.pixel_blend_weight(result.weights, result.prob).numpy()
    target = manifest.view(target_id)
    for i, sid in enumerate(batch.source_ids):
        visible = scene.gt_visibility[(target_id, sid)]
        in_frame = geometry.reprojection_in_frame(
            target.intrinsics, target.pose, gt,
            manifest.view(sid).intrinsics, manifest.view(sid).pose)
        occluded = in_frame & ~visible
        w = per_source[i]
        line = (f"{sid}: visible {w[visible].mean():.4f}  "
                f"occluded {w[occluded].mean():.4f}  n_occ {occluded.sum()}")
        # restrict to pixels where depth is already right
        sel_v = visible & ok
        sel_o = occluded & ok
        if sel_o.sum():
            line += (f"  | depth-ok subset: visible {w[sel_v].mean():.4f}  "
                     f"occluded {w[sel_o].mean():.4f}  n_occ {sel_o.sum()}")
        print(line)


if __name__ == "__main__":
    main()
