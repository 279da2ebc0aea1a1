"""Train every ablation axis on the reduced synthetic benchmark and print a
small table: distillation sampling (coarse/fine), branch vs independent
feature nets, positional encoding on/off for the independent net, and the
feature-loss weight x10."""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from desk_fixture import desk_spec  # noqa: E402
from featfield.datastore import generate_synthetic  # noqa: E402
from featfield.distiller import TrainConfig, train  # noqa: E402
from featfield.evaluator import segment_point_cloud  # noqa: E402
from featfield.field import FieldConfig  # noqa: E402

import numpy as np  # noqa: E402

AXES = {
    "base (coarse, branch, lambda=0.04)": {},
    "feature_sampling=fine": {"feature_sampling": "fine"},
    "independent MLP (+PE)": {"feature_mode": "independent"},
    "independent MLP (no PE)": {"feature_mode": "independent",
                                "independent_pe": False},
    "lambda x10": {"lambda_f": 0.4},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--image-size", type=int, default=48)
    ap.add_argument("--phase1", type=int, default=1500)
    ap.add_argument("--phase2", type=int, default=700)
    ap.add_argument("--rays", type=int, default=192)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    spec = desk_spec()
    spec.image_size = args.image_size
    spec.n_points = 2048
    dataset = generate_synthetic(spec)
    labels = [l for l in dataset.gt.labels if l != "background"]
    remap = {dataset.gt.labels.index(l): i for i, l in enumerate(labels)}
    gt_idx = np.asarray([remap[int(i)] for i in dataset.gt.point_labels])

    print(f"{'variant':38s} {'mIoU':>6s} {'acc':>6s} {'mins':>5s}")
    for name, kw in AXES.items():
        field_kw = {k: v for k, v in kw.items()
                    if k in ("feature_mode", "independent_pe")}
        train_kw = {k: v for k, v in kw.items()
                    if k in ("feature_sampling", "lambda_f")}
        fc = FieldConfig.desk_scale(feature_dim=16, **field_kw)
        tc = TrainConfig.desk_scale(phase1_iters=args.phase1,
                                    phase2_iters=args.phase2,
                                    rays_per_batch=args.rays,
                                    seed=args.seed, **train_kw)
        t0 = time.perf_counter()
        scene = train(dataset, fc, tc)
        rep = segment_point_cloud(scene, dataset.gt.points, gt_idx, labels,
                                  dataset.table)
        print(f"{name:38s} {rep.miou:6.3f} {rep.accuracy:6.3f} "
              f"{(time.perf_counter() - t0) / 60:5.1f}")


if __name__ == "__main__":
    main()
