"""Command-line interface: dataset generation, training, rendering, editing,
segmentation, evaluation, feature visualization, and the HTTP service.

Every command exits 0 on success; failures print one machine-parsable line
`error: {...json...}` to stderr and exit nonzero. A JSON config file can
supply defaults for train/render flags; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import SyntheticSpec, generate_synthetic, load_checkpoint, \
    load_dataset, save_checkpoint, write_fmap, write_png
from .distiller import TrainConfig, train
from .editor import edit_from_json, render_edit
from .errors import FeatFieldError, InputError
from .evaluator import depth_metrics, pca_visualize, psnr, \
    segment_point_cloud, ssim
from .field import FieldConfig
from .geometry import Camera
from .renderer import render_view


def _load_json(path):
    return json.loads(Path(path).read_text())


def _camera_from_pose(pose: dict, *, width=None, height=None, near=None,
                      far=None) -> Camera:
    """Accept either {position,target,up,fov_deg} or {rotation,translation}
    plus optional intrinsics, filling defaults from the scene."""
    width = int(pose.get("width", width or 64))
    height = int(pose.get("height", height or 64))
    near = float(pose.get("near", near if near is not None else 0.5))
    far = float(pose.get("far", far if far is not None else 8.0))
    if "position" in pose:
        return Camera.look_at(pose["position"], pose.get("target", (0, 0, 0)),
                              up=pose.get("up", (0, 1, 0)),
                              fov_deg=float(pose.get("fov_deg", 50.0)),
                              width=width, height=height, near=near, far=far)
    if "rotation" in pose:
        focal = 0.5 * width / np.tan(np.deg2rad(float(pose.get("fov_deg", 50.0))) / 2)
        return Camera(rotation=np.asarray(pose["rotation"], dtype=np.float64).reshape(3, 3),
                      translation=np.asarray(pose["translation"], dtype=np.float64),
                      fx=float(pose.get("fx", focal)), fy=float(pose.get("fy", focal)),
                      cx=float(pose.get("cx", (width - 1) / 2)),
                      cy=float(pose.get("cy", (height - 1) / 2)),
                      width=width, height=height, near=near, far=far)
    raise InputError("pose needs either position/target or rotation/translation")


def _train_configs(args) -> tuple:
    base_train = {}
    base_field = {}
    if args.config:
        cfg = _load_json(args.config)
        base_train = cfg.get("train", {})
        base_field = cfg.get("field", {})
    train_kw = dict(TrainConfig.desk_scale().to_json())
    train_kw.update(base_train)
    for flag, key in (("phase1", "phase1_iters"), ("phase2", "phase2_iters"),
                      ("rays", "rays_per_batch"), ("lambda_f", "lambda_f"),
                      ("feature_sampling", "feature_sampling"), ("seed", "seed"),
                      ("n_coarse", "n_coarse"), ("n_fine", "n_fine"),
                      ("lr", "lr_start"), ("lr_end", "lr_end"),
                      ("finetune_lr", "finetune_lr")):
        v = getattr(args, flag, None)
        if v is not None:
            train_kw[key] = v
    if getattr(args, "freeze_radiance", False):
        train_kw["freeze_radiance"] = True
    tc = TrainConfig.from_json(train_kw)

    field_kw = dict(FieldConfig.desk_scale().to_json())
    field_kw.update(base_field)
    if getattr(args, "feature_mode", None):
        field_kw["feature_mode"] = args.feature_mode
    if getattr(args, "no_independent_pe", False):
        field_kw["independent_pe"] = False
    fc = FieldConfig.from_json(field_kw)
    return tc, fc


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec.from_json(_load_json(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    generate_synthetic(spec, out_dir=args.out)
    print(json.dumps({"out": str(args.out), "views": spec.n_train + spec.n_holdout,
                      "feature_dim": spec.feature_dim}))
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    tc, fc = _train_configs(args)
    if fc.feature_dim != dataset.feature_dim:
        fc = FieldConfig.from_json({**fc.to_json(),
                                    "feature_dim": dataset.feature_dim})
    out_path = Path(args.out)
    log_dir = out_path.parent if out_path.suffix else out_path
    ckpt_path = out_path if out_path.suffix else out_path / "scene.ffc"
    scene = train(dataset, fc, tc, out_dir=log_dir)
    save_checkpoint(scene, ckpt_path, train_config=tc.to_json(),
                    iteration=tc.phase1_iters + tc.phase2_iters)
    print(json.dumps({"checkpoint": str(ckpt_path)}))
    return 0


def _iter_poses(args, scene):
    poses = _load_json(args.pose_file)
    if isinstance(poses, dict):
        poses = [poses]
    for pose in poses:
        yield _camera_from_pose(pose, width=args.width, height=args.height,
                                near=scene.near, far=scene.far)


def cmd_render(args) -> int:
    scene = load_checkpoint(args.ckpt)
    channels = tuple(args.channels.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, cam in enumerate(_iter_poses(args, scene)):
        buf = render_view(scene, cam, mode=args.mode, channels=channels,
                          n_coarse=args.n_coarse, n_fine=args.n_fine,
                          seed=args.seed or 0)
        if buf.rgb is not None:
            p = out / f"{i:04d}.png"
            write_png(p, buf.rgb)
            written.append(str(p))
        if buf.feature is not None:
            p = out / f"{i:04d}.fmap"
            write_fmap(p, buf.feature.astype(np.float32))
            written.append(str(p))
        if buf.depth is not None and "depth" in channels:
            p = out / f"{i:04d}_depth.npy"
            np.save(p, buf.depth.astype(np.float32))
            written.append(str(p))
    print(json.dumps({"written": written}))
    return 0


def cmd_edit(args) -> int:
    scene = load_checkpoint(args.ckpt)
    desc = _load_json(args.edit)
    target = load_checkpoint(args.target_ckpt) if args.target_ckpt else None
    edited = edit_from_json(desc, scene, target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, cam in enumerate(_iter_poses(args, scene)):
        buf = render_edit(edited, cam, channels=("rgb",),
                          n_coarse=args.n_coarse, n_fine=args.n_fine,
                          seed=args.seed or 0)
        p = out / f"edit_{i:04d}.png"
        write_png(p, buf.rgb)
        written.append(str(p))
    print(json.dumps({"written": written}))
    return 0


def cmd_segment(args) -> int:
    scene = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if dataset.gt is None:
        raise InputError("dataset has no ground-truth point cloud")
    table = scene.table or dataset.table
    names = list(dataset.gt.labels)
    if not args.include_background:
        names = [n for n in names if n != names[0]]
    remap = {dataset.gt.labels.index(n): i for i, n in enumerate(names)}
    keep = np.asarray([int(l) in remap for l in dataset.gt.point_labels])
    gt_idx = np.asarray([remap[int(l)] for l in dataset.gt.point_labels[keep]])
    report = segment_point_cloud(scene, dataset.gt.points[keep], gt_idx, names,
                                 table, top2=args.top2)
    payload = report.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=1))
    print(json.dumps({"miou": payload["miou"], "accuracy": payload["accuracy"]}))
    return 0


def cmd_eval(args) -> int:
    scene = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    views = dataset.split.get("holdout") or dataset.split["train"]
    rows = []
    for v in views:
        cam = dataset.cameras[v]
        buf = render_view(scene, cam, mode="fine",
                          channels=("rgb", "depth", "opacity"),
                          n_coarse=args.n_coarse, n_fine=args.n_fine,
                          seed=args.seed or 0)
        row = {"view": v, "psnr": psnr(buf.rgb, dataset.images[v]),
               "ssim": ssim(buf.rgb, dataset.images[v])}
        if dataset.gt is not None:
            row.update(depth_metrics(buf.depth, dataset.gt.depths[v],
                                     mask=buf.opacity > 0.5))
        rows.append(row)
    summary = {
        "views": rows,
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    }
    if rows and "absrel" in rows[0]:
        summary["absrel"] = float(np.mean([r["absrel"] for r in rows]))
        summary["delta_1_25"] = float(np.mean([r["delta_1_25"] for r in rows]))
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if k != "views"}))
    return 0


def cmd_pca_vis(args) -> int:
    scene = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    reference = dataset.features[dataset.split["train"][0]]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    views = dataset.split.get("holdout") or dataset.split["train"]
    written = []
    for v in views:
        cam = dataset.cameras[v]
        buf = render_view(scene, cam, mode="fine", channels=("feature",),
                          n_coarse=args.n_coarse, n_fine=args.n_fine,
                          seed=args.seed or 0)
        img = pca_visualize(buf.feature, reference)
        p = out / f"pca_{v:04d}.png"
        write_png(p, img)
        written.append(str(p))
    print(json.dumps({"written": written}))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app
    app = create_app(checkpoints=args.ckpt or [], workers=args.workers)
    port = args.port or int(os.environ.get("FEATFIELD_PORT", "8080"))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="featfield",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="ray-trace an exact synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_synthetic)

    t = sub.add_parser("train", help="fit radiance + feature fields")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with train/field defaults")
    t.add_argument("--phase1", type=int)
    t.add_argument("--phase2", type=int)
    t.add_argument("--rays", type=int)
    t.add_argument("--lambda-f", dest="lambda_f", type=float)
    t.add_argument("--feature-sampling", choices=("coarse", "fine"))
    t.add_argument("--feature-mode", choices=("branch", "independent"))
    t.add_argument("--no-independent-pe", action="store_true")
    t.add_argument("--freeze-radiance", action="store_true")
    t.add_argument("--n-coarse", type=int)
    t.add_argument("--n-fine", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--finetune-lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    def render_like(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--pose-file", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--width", type=int)
        p.add_argument("--height", type=int)
        p.add_argument("--n-coarse", type=int, default=64)
        p.add_argument("--n-fine", type=int, default=128)
        p.add_argument("--seed", type=int)

    r = sub.add_parser("render", help="render poses from a checkpoint")
    render_like(r)
    r.add_argument("--mode", choices=("coarse", "fine"), default="fine")
    r.add_argument("--channels", default="rgb")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("edit", help="render an edit description")
    render_like(e)
    e.add_argument("--edit", required=True, help="edit descriptor JSON")
    e.add_argument("--target-ckpt", help="second scene for warp edits")
    e.set_defaults(fn=cmd_edit)

    s = sub.add_parser("segment", help="3D point-cloud segmentation report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--include-background", action="store_true")
    s.add_argument("--top2", action="store_true")
    s.set_defaults(fn=cmd_segment)

    v = sub.add_parser("eval", help="view-synthesis and depth metrics")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out")
    v.add_argument("--n-coarse", type=int, default=64)
    v.add_argument("--n-fine", type=int, default=128)
    v.add_argument("--seed", type=int)
    v.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pca-vis", help="render features and project to RGB")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-coarse", type=int, default=64)
    p.add_argument("--n-fine", type=int, default=128)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_pca_vis)

    sv = sub.add_parser("serve", help="HTTP service for the UI and scripts")
    sv.add_argument("--ckpt", action="append", help="preload checkpoint(s)")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int)
    sv.add_argument("--workers", type=int, default=2)
    sv.set_defaults(fn=cmd_serve)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except FeatFieldError as e:
        print("error: " + json.dumps({"type": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print("error: " + json.dumps({"type": "FileNotFound", "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
