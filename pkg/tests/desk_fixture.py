"""The desk-scale benchmark fixture: one synthetic 3-object scene and its
trained checkpoint, cached on disk so repeated test runs and the frontend
contract suite reuse a single training run.

Bump FIXTURE_REV whenever training semantics change; the cache key covers the
scene spec, both configs, and that revision.
"""

import hashlib
import json
import time
from pathlib import Path

from featfield.datastore import SceneObject, SyntheticSpec, generate_synthetic, \
    load_checkpoint, load_dataset, save_checkpoint
from featfield.distiller import TrainConfig, train
from featfield.field import FieldConfig

FIXTURE_REV = 3
CACHE_ROOT = Path(__file__).resolve().parents[1] / ".cache" / "featfield_tests"

# Acceptance thresholds for the desk run, frozen with this fixture.
PSNR_MIN_DB = 28.0
MIOU_MIN = 0.90
ABSREL_MAX = 0.05
TRAIN_BUDGET_S = 900.0
EVAL_SAMPLES = (96, 192)


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


def desk_spec() -> SyntheticSpec:
    return SyntheticSpec(objects=desk_objects(), image_size=64, n_train=8,
                         n_holdout=2, feature_dim=16, seed=11, n_points=4096)


def desk_field_config() -> FieldConfig:
    return FieldConfig.desk_scale(feature_dim=16)


def desk_train_config() -> TrainConfig:
    return TrainConfig.desk_scale(seed=0)


def _cache_key() -> str:
    payload = json.dumps({
        "rev": FIXTURE_REV,
        "spec": desk_spec().to_json(),
        "field": desk_field_config().to_json(),
        "train": desk_train_config().to_json(),
    }, sort_keys=True, default=str)
    return hashlib.sha1(payload.encode()).hexdigest()[:12]


def fixture_dir() -> Path:
    return CACHE_ROOT / f"desk_{_cache_key()}"


def build_fixture(force: bool = False) -> dict:
    """Generate + train (or load) the desk fixture.

    Returns {dataset, scene, dataset_dir, checkpoint, train_seconds,
    freshly_trained}.
    """
    root = fixture_dir()
    data_dir = root / "dataset"
    ckpt = root / "scene.ffc"
    meta_path = root / "meta.json"
    if not force and ckpt.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        return {"dataset": load_dataset(data_dir),
                "scene": load_checkpoint(ckpt),
                "dataset_dir": data_dir, "checkpoint": ckpt,
                "train_seconds": meta["train_seconds"],
                "freshly_trained": False}
    root.mkdir(parents=True, exist_ok=True)
    dataset = generate_synthetic(desk_spec(), out_dir=data_dir)
    tc = desk_train_config()
    t0 = time.perf_counter()
    scene = train(dataset, desk_field_config(), tc, out_dir=root)
    train_seconds = time.perf_counter() - t0
    save_checkpoint(scene, ckpt, train_config=tc.to_json(),
                    iteration=tc.phase1_iters + tc.phase2_iters)
    meta_path.write_text(json.dumps({"train_seconds": train_seconds,
                                     "key": _cache_key()}))
    return {"dataset": dataset, "scene": scene, "dataset_dir": data_dir,
            "checkpoint": ckpt, "train_seconds": train_seconds,
            "freshly_trained": True}


if __name__ == "__main__":
    info = build_fixture()
    print(json.dumps({"checkpoint": str(info["checkpoint"]),
                      "dataset": str(info["dataset_dir"]),
                      "train_seconds": round(info["train_seconds"], 1),
                      "freshly_trained": info["freshly_trained"]}))
