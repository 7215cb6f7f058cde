"""Command-line entry points.

Subcommands: train, synthesize, check, import-colmap, make-synthetic.
Exit codes: 0 success, 1 check violations or data errors, 2 bad flags or
missing inputs, 3 training divergence. The SVNVS_SEED environment variable
overrides --seed when set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, checks, geometry, scene_io, training
from .config import ABLATIONS, TrainConfig
from .errors import NonFiniteError
from .pipeline import prepare_views
from .training import Checkpoint, Trainer


def _parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise argparse.ArgumentTypeError(f"expected HxW, e.g. 96x128, got {text!r}")


def _resolve_seed(flag_seed: int) -> int:
    env = os.environ.get("SVNVS_SEED")
    if env is None:
        return flag_seed
    try:
        return int(env)
    except ValueError:
        print(f"error: SVNVS_SEED must be an integer, got {env!r}", file=sys.stderr)
        raise SystemExit(2)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svnvs",
        description="Self-supervised novel view synthesis from sparse source views",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a scene manifest")
    t.add_argument("--scene", required=True, help="path to manifest.json")
    t.add_argument("--views", type=int, default=6, help="source views per target")
    t.add_argument("--planes", type=int, default=48, help="depth planes")
    t.add_argument("--dmin", type=float, default=0.5)
    t.add_argument("--dmax", type=float, default=100.0)
    t.add_argument("--res", type=_parse_res, default=None, help="synthesis HxW")
    t.add_argument("--crop", type=_parse_res, default=None,
                   help="random training crop HxW (evaluation stays full frame)")
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", choices=ABLATIONS, default="none")
    t.add_argument("--gan", choices=["on", "off"], default="off")
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--target", default=None,
                   help="single target view id (default: round-robin over all views)")
    t.add_argument("--out", default="runs", help="parent directory for run outputs")
    t.add_argument("--run-id", default=None)
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--checkpoint-every", type=int, default=0,
                   help="0 saves only the final checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="render a target view from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--target", required=True,
                   help="target view id, or path to a pose file for free-viewpoint synthesis")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=None,
                   help="source view count (default: from checkpoint config)")
    s.add_argument("--permute-sources", action="store_true",
                   help="shuffle source order before rendering")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    c = sub.add_parser("check", help="run gradient and invariant checks")
    c.add_argument("--module", default=None, help="substring filter on check names")
    c.set_defaults(func=cmd_check)

    ic = sub.add_parser("import-colmap", help="convert COLMAP text exports to a manifest")
    ic.add_argument("--cameras", required=True, help="cameras.txt")
    ic.add_argument("--images", required=True, help="images.txt")
    ic.add_argument("--image-dir", required=True)
    ic.add_argument("--out", required=True, help="output manifest.json path")
    ic.add_argument("--dmin", type=float, default=0.5)
    ic.add_argument("--dmax", type=float, default=100.0)
    ic.add_argument("--name", default=None)
    ic.set_defaults(func=cmd_import_colmap)

    ms = sub.add_parser("make-synthetic", help="generate a synthetic scene with ground truth")
    ms.add_argument("--preset", choices=["single_plane", "two_planes", "plane_and_box"],
                    default="two_planes")
    ms.add_argument("--out", required=True)
    ms.add_argument("--views", type=int, default=6)
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--res", type=_parse_res, default=(96, 128))
    ms.add_argument("--name", default=None)
    ms.set_defaults(func=cmd_make_synthetic)

    return parser


def _input_hash(manifest_path: Path, manifest: scene_io.SceneManifest) -> str:
    digest = hashlib.sha256(manifest_path.read_bytes())
    for view in manifest.views:
        if view.image_path is not None:
            img = manifest_path.parent / view.image_path
            if img.exists():
                digest.update(img.read_bytes())
    return digest.hexdigest()


def _export_result(result, batch, run_dir: Path, tag: str, full: bool = False):
    image = result.final.detach().clamp(0, 1)
    scene_io.save_image(run_dir / "images" / f"{tag}.png",
                        image.permute(1, 2, 0).numpy())
    np.save(run_dir / "images" / f"{tag}.npy",
            image.numpy().astype(np.float32))
    depth = geometry.softargmax_depth(result.prob.detach(), batch.planes)
    geometry.export_depth(depth,
                          raw_path=run_dir / "depth" / f"{tag}.tiff",
                          preview_path=run_dir / "depth" / f"{tag}.png",
                          depth_range=(batch.planes.d_min, batch.planes.d_max))
    if full:
        agg = result.aggregated.image.detach().clamp(0, 1)
        scene_io.save_image(run_dir / "images" / f"{tag}_aggregated.png",
                            agg.permute(1, 2, 0).numpy())
        for i, sid in enumerate(batch.source_ids):
            warp = result.aggregated.source_warps[i].detach().clamp(0, 1)
            scene_io.save_image(run_dir / "images" / f"{tag}_warp_{sid}.png",
                                warp.permute(1, 2, 0).numpy())


def cmd_train(args) -> int:
    seed = _resolve_seed(args.seed)
    config = TrainConfig(
        num_sources=args.views,
        num_planes=args.planes,
        depth_range=(args.dmin, args.dmax),
        resolution=args.res,
        crop_size=args.crop,
        learning_rate=args.lr,
        steps=args.steps,
        seed=seed,
        ablation=args.ablation,
        gan=args.gan == "on",
    )
    scene_path = Path(args.scene)
    if not scene_path.exists():
        print(f"error: scene manifest {scene_path} not found", file=sys.stderr)
        return 2
    manifest = scene_io.read_manifest(scene_path)
    if len(manifest.views) < config.num_sources + 1:
        print(
            f"error: scene has {len(manifest.views)} views; "
            f"need at least {config.num_sources + 1} for {config.num_sources} sources",
            file=sys.stderr,
        )
        return 2

    run_id = args.run_id or f"{manifest.name}-{config.config_hash()[:8]}"
    run_dir = Path(args.out) / run_id
    for sub in ("checkpoints", "images", "depth"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    snapshot = {
        "run_id": run_id,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "input_hash": _input_hash(scene_path, manifest),
        "package_version": __version__,
        "scene": manifest.name,
        "target": args.target,
    }
    (run_dir / "config.snapshot").write_text(json.dumps(snapshot, indent=2))

    planes = geometry.sample_depth_planes(args.dmin, args.dmax, args.planes)
    target_ids = [args.target] if args.target else [v.id for v in manifest.views]
    try:
        batches = [
            prepare_views(
                manifest.view(tid),
                scene_io.select_source_views(manifest, tid, config.num_sources),
                planes,
                resolution=config.resolution,
            )
            for tid in target_ids
        ]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    trainer = Trainer(config)

    def log_fn(report, scores):
        if args.checkpoint_every and report.step % args.checkpoint_every == 0:
            trainer.checkpoint().save(run_dir / "checkpoints" / f"step_{report.step:06d}.pt")
        if scores is not None:
            print(f"step {report.step:6d}  total {report.total:.4f}  "
                  f"psnr {scores['psnr']:.2f}  ssim {scores['ssim']:.4f}")

    try:
        training.fit(trainer, batches, config.steps,
                     metrics_path=run_dir / "metrics.csv",
                     eval_every=args.eval_every, log_fn=log_fn)
    except NonFiniteError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3

    trainer.checkpoint().save(run_dir / "checkpoints" / "final.pt")
    with torch.no_grad():
        result = trainer.model(batches[0])
    _export_result(result, batches[0], run_dir, f"final_{batches[0].target_id}")
    scores = trainer.evaluate(batches[0])
    print(f"finished {run_id}: psnr {scores['psnr']:.2f} ssim {scores['ssim']:.4f}")
    print(f"outputs in {run_dir}")
    return 0


def cmd_synthesize(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        print(f"error: checkpoint {ckpt_path} not found", file=sys.stderr)
        return 2
    scene_path = Path(args.scene)
    if not scene_path.exists():
        print(f"error: scene manifest {scene_path} not found", file=sys.stderr)
        return 2
    seed = _resolve_seed(args.seed)
    ckpt = Checkpoint.load(ckpt_path)
    trainer = Trainer.from_checkpoint(ckpt)
    manifest = scene_io.read_manifest(scene_path)
    n = args.views or ckpt.config.num_sources
    try:
        ids = {v.id for v in manifest.views}
        if args.target in ids:
            target = manifest.view(args.target)
            sources = scene_io.select_source_views(manifest, args.target, n)
        elif Path(args.target).is_file():
            # free-viewpoint mode: a pose file gives the camera, the scene
            # supplies sources, and there is no ground truth to score against
            target = scene_io.read_pose_file(args.target)
            sources = scene_io.select_sources_near(manifest, target.pose, n)
        else:
            print(f"error: target {args.target!r} is neither a view id nor a pose file",
                  file=sys.stderr)
            return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.permute_sources:
        order = np.random.default_rng(seed).permutation(len(sources))
        sources = [sources[i] for i in order]
    planes = geometry.sample_depth_planes(*ckpt.config.depth_range, ckpt.config.num_planes)
    batch = prepare_views(target, sources, planes, resolution=ckpt.config.resolution)
    out_dir = Path(args.out)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        result = trainer.model(batch)
    _export_result(result, batch, out_dir, target.id, full=True)
    if batch.target_image is None:
        print(f"synthesized {target.id} (no ground truth, metrics skipped)")
        return 0
    final = result.final.clamp(0, 1)
    residual = (final - batch.target_image).abs().mean(0)
    scene_io.save_image(out_dir / "images" / f"{target.id}_residual.png",
                        residual.numpy())
    scores = {
        "psnr": training.psnr(final, batch.target_image),
        "ssim": training.ssim(final, batch.target_image),
    }
    (out_dir / "metrics.json").write_text(json.dumps(scores, indent=2))
    print(f"synthesized {target.id}: psnr {scores['psnr']:.2f} ssim {scores['ssim']:.4f}")
    return 0


def cmd_check(args) -> int:
    results = checks.run_checks(args.module)
    print(checks.format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_import_colmap(args) -> int:
    try:
        manifest = scene_io.import_colmap(
            args.cameras, args.images, args.image_dir,
            depth_range=(args.dmin, args.dmax),
            name=args.name,
        )
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    # store image paths relative to the manifest so the scene stays portable
    views = []
    for v in manifest.views:
        rel = os.path.relpath(Path(v.image_path), out_path.parent)
        views.append(scene_io.View(id=v.id, image=v.image, intrinsics=v.intrinsics,
                                   pose=v.pose, image_path=rel))
    manifest = scene_io.SceneManifest(name=manifest.name,
                                      depth_range=manifest.depth_range, views=views)
    scene_io.write_manifest(manifest, out_path)
    print(f"imported {len(manifest.views)} views into {out_path}")
    return 0


def cmd_make_synthetic(args) -> int:
    seed = _resolve_seed(args.seed)
    h, w = args.res
    layout = scene_io.preset_layout(args.preset, image_size=(h, w), seed=seed)
    scene = scene_io.generate_synthetic_scene(layout, args.views, seed,
                                              name=args.name or args.preset)
    out_dir = Path(args.out)
    manifest_path = scene_io.save_scene(scene.manifest, out_dir)
    gt_dir = out_dir / "gt"
    gt_dir.mkdir(exist_ok=True)
    for vid, depth in scene.gt_depth.items():
        geometry.export_depth(depth, raw_path=gt_dir / f"depth_{vid}.tiff")
    print(f"wrote {len(scene.manifest.views)} views to {manifest_path}")
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
