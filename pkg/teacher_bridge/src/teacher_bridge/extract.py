"""Extraction pipeline: posed images in, featfield-format features out."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import build_encoder
from .formats import bilinear_resize, write_fmap, write_queries


def _flip_average(encoder, image: np.ndarray) -> np.ndarray:
    """Average features with those of the horizontally flipped image."""
    fwd = encoder.encode_image(image)
    mirrored = encoder.encode_image(image[:, ::-1])
    return 0.5 * (fwd + mirrored[:, ::-1])


def encode_one(encoder, image: np.ndarray, *, flip_average: bool = False,
               out_size=None) -> np.ndarray:
    fmap = _flip_average(encoder, image) if flip_average \
        else encoder.encode_image(image)
    if out_size is not None and fmap.shape[:2] != tuple(out_size):
        fmap = bilinear_resize(fmap, out_size[0], out_size[1])
    return fmap.astype(np.float32)


def extract(scene_dir, teacher: str = "stub", *, labels=(), dim=None,
            flip_average: bool = False, seed: int = 0, stride: int = 4,
            full_resolution: bool = True) -> dict:
    """Encode every image of a scene directory and write features/ plus
    queries.json, updating the manifest in place.

    The scene directory must already carry scene.json and images/ (poses come
    from whoever captured the data). Feature maps are written at image
    resolution unless full_resolution is off, in which case the engine's
    loader resizes them at load time.
    """
    root = Path(scene_dir)
    manifest_path = root / "scene.json"
    manifest = json.loads(manifest_path.read_text())
    encoder = build_encoder(teacher, dim=dim, seed=seed, stride=stride)
    (root / "features").mkdir(exist_ok=True)

    feature_files = []
    for i, img_rel in enumerate(manifest["images"]):
        image = np.asarray(Image.open(root / img_rel))[..., :3]
        out_size = image.shape[:2] if full_resolution else None
        fmap = encode_one(encoder, image, flip_average=flip_average,
                          out_size=out_size)
        rel = f"features/{i:04d}.fmap"
        write_fmap(root / rel, fmap)
        feature_files.append(rel)

    table = {}
    for label in labels:
        table[label] = encoder.encode_text(label)
    write_queries(root / "queries.json", encoder.name, encoder.dim, table)

    manifest["teacher"] = encoder.name
    manifest["feature_dim"] = int(encoder.dim)
    manifest["features"] = feature_files
    manifest["queries"] = "queries.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(manifest_path)
    return {"features": feature_files, "dim": encoder.dim,
            "teacher": encoder.name}
