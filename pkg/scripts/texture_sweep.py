"""Rank scene textures by how quickly unsupervised geometry emerges.

Trains the same pipeline on two-plane scenes that differ only in texture,
at reduced resolution, and reports depth accuracy (split by surface) and
the visible-minus-occluded blend weight gap per source over training.
High-frequency texture makes wrong-depth blending costly, which is the
only training signal depth and visibility receive.
"""

import argparse
import time

import numpy as np
import torch

from svnvs import geometry, pipeline, scene_io, training
from svnvs.config import TrainConfig


def make_layout(textures, image_size, focal, spread=0.28):
    near_tex, far_tex = textures
    return scene_io.SceneLayout(
        primitives=(
            scene_io.PlanePrimitive(depth=2.0, texture=near_tex,
                                    x_range=(-0.55, 0.10), y_range=(-0.42, 0.26)),
            scene_io.PlanePrimitive(depth=4.0, texture=far_tex),
        ),
        depth_range=(1.5, 8.0),
        image_size=image_size,
        focal=focal,
        camera_spread=spread,
    )


CONFIGS = {
    "freq7_5": (scene_io.SinusoidTexture(seed=8, frequency=7.0),
                scene_io.SinusoidTexture(seed=9, frequency=5.0)),
    "freq14_10": (scene_io.SinusoidTexture(seed=8, frequency=14.0, waves=6),
                  scene_io.SinusoidTexture(seed=9, frequency=10.0, waves=6)),
    "freq24_16": (scene_io.SinusoidTexture(seed=8, frequency=24.0, waves=6),
                  scene_io.SinusoidTexture(seed=9, frequency=16.0, waves=6)),
    "checker": (scene_io.CheckerTexture(cell=0.08, color_a=(0.9, 0.6, 0.3),
                                        color_b=(0.15, 0.3, 0.6)),
                scene_io.SinusoidTexture(seed=9, frequency=16.0, waves=6)),
}


def evaluate_geometry(trainer, batch, scene, planes):
    with torch.no_grad():
        result = trainer.model(batch)
    target_id = batch.target_id
    gt = scene.gt_depth[target_id]
    est = geometry.softargmax_depth(result.prob, planes).numpy()
    spacing = planes.spacing_inverse()
    ok = np.abs(1 / est - 1 / gt) <= spacing

    vis_count = np.zeros(gt.shape, dtype=np.int64)
    for sid in batch.source_ids:
        vis_count += scene.gt_visibility[(target_id, sid)]
    multi = vis_count >= 2
    fg = np.isclose(gt, 2.0, atol=1e-6)

    per_source = training.pixel_blend_weight(result.weights, result.prob).numpy()
    target = scene.manifest.view(target_id)
    gaps = []
    for i, sid in enumerate(batch.source_ids):
        visible = scene.gt_visibility[(target_id, sid)]
        in_frame = geometry.reprojection_in_frame(
            target.intrinsics, target.pose, gt,
            scene.manifest.view(sid).intrinsics, scene.manifest.view(sid).pose)
        occluded = in_frame & ~visible
        if occluded.any():
            gaps.append(per_source[i][visible].mean() - per_source[i][occluded].mean())
    return {
        "acc": ok[multi].mean(),
        "acc_fg": ok[multi & fg].mean(),
        "acc_bg": ok[multi & ~fg].mean(),
        "peak": result.prob.max(dim=0).values.mean().item(),
        "gaps": gaps,
    }


def run_config(name, textures, args):
    h, w = args.height, args.width
    focal = 140.0 * (w - 1) / 127.0
    layout = make_layout(textures, (h, w), focal, spread=args.spread)
    scene = scene_io.generate_synthetic_scene(layout, 4, seed=7, name=name)
    manifest = scene.manifest
    planes = geometry.sample_depth_planes(*manifest.depth_range, args.planes)
    sources = scene_io.select_source_views(manifest, "view00", 3)
    batch = pipeline.prepare_views(manifest.view("view00"), sources, planes)

    config = TrainConfig(num_sources=3, num_planes=args.planes,
                         depth_range=manifest.depth_range,
                         learning_rate=args.lr, steps=args.steps, seed=0)
    trainer = training.Trainer(config)
    t0 = time.time()
    print(f"== {name}")
    for step in range(1, args.steps + 1):
        trainer.step(batch)
        if step % args.eval_every == 0 or step == args.steps:
            scores = trainer.evaluate(batch)
            geo = evaluate_geometry(trainer, batch, scene, planes)
            gaps = " ".join(f"{g:+.4f}" for g in geo["gaps"])
            print(f"  step {step:4d}  psnr {scores['psnr']:6.2f}  "
                  f"acc {geo['acc']:.3f} (fg {geo['acc_fg']:.3f} bg {geo['acc_bg']:.3f})  "
                  f"peak {geo['peak']:.3f}  gaps [{gaps}]  "
                  f"({time.time() - t0:5.0f}s)", flush=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--configs", nargs="*", default=list(CONFIGS))
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--planes", type=int, default=8)
    ap.add_argument("--height", type=int, default=48)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--spread", type=float, default=0.28)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--eval-every", type=int, default=25)
    args = ap.parse_args()
    torch.set_num_threads(1)
    for name in args.configs:
        run_config(name, CONFIGS[name], args)


if __name__ == "__main__":
    main()


