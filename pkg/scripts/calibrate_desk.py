"""Calibration run for the desk-scale synthetic benchmark.

Trains the standard 3-object scene and reports held-out PSNR, point-cloud
mIoU, depth absrel, and wall time, so schedule/architecture knobs can be
pinned with real numbers.
"""

import argparse
import time

import numpy as np

from featfield.datastore import SceneObject, SyntheticSpec, generate_synthetic
from featfield.distiller import TrainConfig, train
from featfield.evaluator import depth_metrics, psnr, segment_point_cloud, ssim
from featfield.field import FieldConfig
from featfield.renderer import render_view


def desk_objects():
    return [
        SceneObject(kind="sphere", center=(-0.9, 0.0, 0.35), radius=0.55,
                    color=(0.85, 0.15, 0.10), label="red_ball"),
        SceneObject(kind="box", center=(0.8, -0.1, 0.6),
                    half_size=(0.45, 0.5, 0.4),
                    color=(0.10, 0.70, 0.20), label="green_crate"),
        SceneObject(kind="sphere", center=(0.15, 0.25, -0.95), radius=0.5,
                    color=(0.15, 0.30, 0.85), label="blue_ball"),
    ]


def desk_spec(**overrides):
    kw = dict(objects=desk_objects(), image_size=64, n_train=8, n_holdout=2,
              feature_dim=16, seed=11)
    kw.update(overrides)
    return SyntheticSpec(**kw)


def evaluate(scene, ds, n_coarse, n_fine, seed=123):
    rows = {}
    psnrs, ssims, absrels, deltas = [], [], [], []
    for v in ds.split["holdout"]:
        cam = ds.cameras[v]
        buf = render_view(scene, cam, mode="fine",
                          channels=("rgb", "depth", "opacity"),
                          n_coarse=n_coarse, n_fine=n_fine, seed=seed)
        psnrs.append(psnr(buf.rgb, ds.images[v]))
        ssims.append(ssim(buf.rgb, ds.images[v]))
        dm = depth_metrics(buf.depth, ds.gt.depths[v],
                           mask=buf.opacity > 0.5)
        absrels.append(dm["absrel"])
        deltas.append(dm["delta_1_25"])
    rows["psnr"] = float(np.mean(psnrs))
    rows["ssim"] = float(np.mean(ssims))
    rows["absrel"] = float(np.mean(absrels))
    rows["delta_1_25"] = float(np.mean(deltas))
    labels = [l for l in ds.gt.labels if l != "background"]
    remap = {ds.gt.labels.index(l): i for i, l in enumerate(labels)}
    gt_idx = np.asarray([remap[int(i)] for i in ds.gt.point_labels])
    rep = segment_point_cloud(scene, ds.gt.points, gt_idx, labels, ds.table)
    rows["miou"] = rep.miou
    rows["seg_accuracy"] = rep.accuracy
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--phase1", type=int, default=3000)
    ap.add_argument("--phase2", type=int, default=1000)
    ap.add_argument("--rays", type=int, default=160)
    ap.add_argument("--n-coarse", type=int, default=32)
    ap.add_argument("--n-fine", type=int, default=48)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--pe-pos", type=int, default=8)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--lr-end", type=float, default=5e-4)
    ap.add_argument("--finetune-lr", type=float, default=1e-3)
    ap.add_argument("--noise", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-samples", type=int, nargs=2, default=None,
                    help="override (n_coarse, n_fine) at eval time")
    args = ap.parse_args()

    ds = generate_synthetic(desk_spec())
    fc = FieldConfig.desk_scale(trunk_layers=args.layers, trunk_width=args.width,
                                pe_len_pos=args.pe_pos,
                                skip_at=max(args.layers // 2, 1))
    tc = TrainConfig.desk_scale(
        phase1_iters=args.phase1, phase2_iters=args.phase2,
        rays_per_batch=args.rays, n_coarse=args.n_coarse, n_fine=args.n_fine,
        lr_start=args.lr, lr_end=args.lr_end, finetune_lr=args.finetune_lr,
        density_noise=args.noise, seed=args.seed)
    t0 = time.perf_counter()
    scene = train(ds, fc, tc)
    train_s = time.perf_counter() - t0
    ec, ef = args.eval_samples or (args.n_coarse, args.n_fine)
    t0 = time.perf_counter()
    rows = evaluate(scene, ds, ec, ef)
    eval_s = time.perf_counter() - t0
    rows.update(train_s=round(train_s, 1), eval_s=round(eval_s, 1))
    print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in rows.items()})


if __name__ == "__main__":
    main()
