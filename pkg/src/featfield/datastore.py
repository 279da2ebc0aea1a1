"""Dataset formats, the synthetic ground-truth scene generator, and
checkpoint persistence.

Directory layout of a dataset:

    scene.json          manifest (cameras, split, file lists, label names)
    images/%04d.png     RGB
    features/%04d.fmap  per-pixel teacher features (binary, see below)
    queries.json        label -> embedding table
    gt/                 optional exact ground truth (synthetic scenes)

.fmap: magic "FMAP", u32 version, u32 H, u32 W, u32 D, then H*W*D float32,
row-major, all little-endian. Feature maps stored smaller than the images
are bilinearly resized to image resolution at load.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatastoreError, InputError
from .field import Field, FieldConfig, FieldParams
from .geometry import Camera, as_rng, generate_rays
from .query import QueryEmbeddingTable
from .scene import SceneModel

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
CKPT_MAGIC = b"FFCP"
CKPT_VERSION = 1
MANIFEST_NAME = "scene.json"
EMBEDDING_MAX_COS = 0.3


# --------------------------------------------------------------------- io

def write_png(path, arr):
    """uint8 (or float in [0,1]) array (H,W), (H,W,3) or (H,W,4) -> PNG."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(a).save(str(path))


def read_png(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DatastoreError(f"missing image file {p}")
    return np.asarray(Image.open(p))


def fmap_to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != 3:
        raise InputError("feature maps must be (H, W, D)")
    h, w, d = a.shape
    return FMAP_MAGIC + struct.pack("<IIII", FMAP_VERSION, h, w, d) + a.tobytes()


def write_fmap(path, arr):
    Path(path).write_bytes(fmap_to_bytes(arr))


def read_fmap(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DatastoreError(f"missing feature file {p}")
    raw = p.read_bytes()
    if raw[:4] != FMAP_MAGIC:
        raise DatastoreError(f"bad magic in feature file {p}")
    version, h, w, d = struct.unpack("<IIII", raw[4:20])
    if version != FMAP_VERSION:
        raise DatastoreError(
            f"feature file {p} has version {version}, reader supports {FMAP_VERSION}")
    expected = 20 + 4 * h * w * d
    if len(raw) != expected:
        raise DatastoreError(
            f"truncated feature file {p}: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(h, w, d).copy()


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize mapping corners onto corners exactly."""
    ih, iw = img.shape[:2]
    if (ih, iw) == (out_h, out_w):
        return np.array(img, copy=True)
    ys = np.linspace(0.0, ih - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, iw - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(ih - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(iw - 2, 0))
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    wy = (ys - y0).reshape(-1, 1, 1) if img.ndim == 3 else (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1, 1) if img.ndim == 3 else (xs - x0).reshape(1, -1)
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)


def _atomic_write(path, write_fn):
    tmp = Path(str(path) + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------- dataset

@dataclass
class GroundTruth:
    labels: list                     # index 0 is the background label
    points: np.ndarray               # (N, 3) float32, on object surfaces
    point_labels: np.ndarray         # (N,) int32 indices into labels
    depths: np.ndarray               # (V, H, W) float32, +inf where vacuum
    masks: np.ndarray                # (V, H, W) uint8 label indices


@dataclass
class TeacherDataset:
    teacher: str
    cameras: list
    images: np.ndarray               # (V, H, W, 3) float32 in [0, 1]
    features: np.ndarray             # (V, H, W, D) float32
    table: QueryEmbeddingTable
    split: dict                      # {"train": [...], "holdout": [...]}
    near: float
    far: float
    gt: GroundTruth | None = None

    @property
    def feature_dim(self) -> int:
        return self.features.shape[-1]

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def save_dataset(ds: TeacherDataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    images, features = [], []
    for i in range(ds.n_views):
        img_rel = f"images/{i:04d}.png"
        fmap_rel = f"features/{i:04d}.fmap"
        write_png(out / img_rel, (ds.images[i] * 255.0 + 0.5).astype(np.uint8))
        write_fmap(out / fmap_rel, ds.features[i])
        images.append(img_rel)
        features.append(fmap_rel)
    ds.table.save(out / "queries.json")
    manifest = {
        "format": "featfield-scene",
        "version": 1,
        "teacher": ds.teacher,
        "feature_dim": int(ds.feature_dim),
        "near": ds.near,
        "far": ds.far,
        "split": ds.split,
        "cameras": [c.to_json() for c in ds.cameras],
        "images": images,
        "features": features,
        "queries": "queries.json",
    }
    if ds.gt is not None:
        gt_dir = out / "gt"
        gt_dir.mkdir(exist_ok=True)
        np.savez(gt_dir / "points.npz",
                 points=ds.gt.points.astype("<f4"),
                 labels=ds.gt.point_labels.astype("<i4"))
        depth_files, mask_files = [], []
        for i in range(ds.n_views):
            dr, mr = f"gt/depth_{i:04d}.npy", f"gt/mask_{i:04d}.png"
            np.save(out / dr, ds.gt.depths[i].astype("<f4"))
            write_png(out / mr, ds.gt.masks[i])
            depth_files.append(dr)
            mask_files.append(mr)
        manifest["gt"] = {"labels": ds.gt.labels, "points": "gt/points.npz",
                          "depths": depth_files, "masks": mask_files}
    _atomic_write(out / MANIFEST_NAME,
                  lambda p: p.write_text(json.dumps(manifest, indent=1)))
    return out


def load_dataset(path) -> TeacherDataset:
    """Load and validate a dataset directory; errors name the offending file."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatastoreError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatastoreError(f"malformed manifest {manifest_path}: {e}") from e
    if manifest.get("format") != "featfield-scene":
        raise DatastoreError(f"{manifest_path} is not a featfield scene manifest")
    cameras = [Camera.from_json(c) for c in manifest["cameras"]]
    if not (len(cameras) == len(manifest["images"]) == len(manifest["features"])):
        raise DatastoreError("manifest counts disagree: one image and one "
                             "feature map per camera required")
    feature_dim = int(manifest["feature_dim"])
    images, features = [], []
    for img_rel, fmap_rel, cam in zip(manifest["images"], manifest["features"], cameras):
        img = read_png(root / img_rel)
        if img.ndim != 3 or img.shape[2] < 3:
            raise DatastoreError(f"{root / img_rel} is not an RGB image")
        if img.shape[:2] != (cam.height, cam.width):
            raise DatastoreError(
                f"{root / img_rel} is {img.shape[1]}x{img.shape[0]}, camera says "
                f"{cam.width}x{cam.height}")
        images.append(img[..., :3].astype(np.float32) / 255.0)
        fmap = read_fmap(root / fmap_rel)
        if fmap.shape[2] != feature_dim:
            raise DatastoreError(
                f"{root / fmap_rel} has {fmap.shape[2]} channels, manifest says "
                f"{feature_dim}")
        if fmap.shape[:2] != (cam.height, cam.width):
            fmap = bilinear_resize(fmap, cam.height, cam.width)
        features.append(fmap)
    table = QueryEmbeddingTable.load(root / manifest["queries"])
    if table.dim != feature_dim:
        raise DatastoreError(
            f"queries.json dim {table.dim} != manifest feature_dim {feature_dim}")
    gt = None
    if "gt" in manifest:
        g = manifest["gt"]
        pc = np.load(root / g["points"])
        depths = np.stack([np.load(root / p) for p in g["depths"]])
        masks = np.stack([read_png(root / p) for p in g["masks"]])
        gt = GroundTruth(labels=list(g["labels"]),
                         points=pc["points"].astype(np.float32),
                         point_labels=pc["labels"].astype(np.int32),
                         depths=depths.astype(np.float32),
                         masks=masks.astype(np.uint8))
    return TeacherDataset(
        teacher=manifest["teacher"], cameras=cameras,
        images=np.stack(images), features=np.stack(features), table=table,
        split={k: list(v) for k, v in manifest["split"].items()},
        near=float(manifest["near"]), far=float(manifest["far"]), gt=gt)


# ------------------------------------------------------- synthetic scenes

@dataclass
class SceneObject:
    kind: str                # "sphere" | "box"
    center: tuple
    color: tuple             # RGB in [0, 1]
    label: str
    radius: float = 0.5      # spheres
    half_size: tuple = (0.5, 0.5, 0.5)  # boxes

    def bounding_radius(self) -> float:
        c = float(np.linalg.norm(self.center))
        if self.kind == "sphere":
            return c + self.radius
        return c + float(np.linalg.norm(self.half_size))


@dataclass
class SyntheticSpec:
    objects: list
    image_size: int = 64
    n_train: int = 8
    n_holdout: int = 2
    feature_dim: int = 16
    seed: int = 0
    camera_radius: float = 4.0
    camera_elevation_deg: float = 28.0
    fov_deg: float = 48.0
    near: float = 0.0        # 0 -> derive from scene bounds
    far: float = 0.0
    n_points: int = 4096
    background_label: str = "background"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        d["objects"] = [SceneObject(**o) for o in d["objects"]]
        return cls(**d)


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - np.asarray(center)
    b = np.einsum("rd,rd->r", dirs, oc)
    disc = b * b - (np.einsum("rd,rd->r", oc, oc) - radius * radius)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(t > 1e-9, t, -b + sq)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _ray_box(origins, dirs, center, half_size):
    lo = np.asarray(center) - np.asarray(half_size)
    hi = np.asarray(center) + np.asarray(half_size)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    tnear = np.nanmax(np.minimum(t0, t1), axis=-1)
    tfar = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tfar >= tnear) & (tfar > 1e-9)
    t = np.where(tnear > 1e-9, tnear, tfar)
    return np.where(hit, t, np.inf)


def _object_hit(obj: SceneObject, origins, dirs):
    if obj.kind == "sphere":
        return _ray_sphere(origins, dirs, obj.center, obj.radius)
    if obj.kind == "box":
        return _ray_box(origins, dirs, obj.center, obj.half_size)
    raise InputError(f"unknown object kind {obj.kind!r}")


def _check_disjoint(objects):
    """Overlapping primitives would make the label oracle ambiguous."""
    def sep(a: SceneObject, b: SceneObject) -> bool:
        ca, cb = np.asarray(a.center, float), np.asarray(b.center, float)
        if a.kind == "sphere" and b.kind == "sphere":
            return np.linalg.norm(ca - cb) > a.radius + b.radius
        if a.kind == "box" and b.kind == "box":
            return bool((np.abs(ca - cb) > np.asarray(a.half_size)
                         + np.asarray(b.half_size)).any())
        sph, box = (a, b) if a.kind == "sphere" else (b, a)
        cs = np.asarray(sph.center, float)
        cb2 = np.asarray(box.center, float)
        nearest = np.clip(cs, cb2 - np.asarray(box.half_size),
                          cb2 + np.asarray(box.half_size))
        return np.linalg.norm(cs - nearest) > sph.radius
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            if not sep(a, b):
                raise InputError(
                    f"objects with labels {a.label!r} and {b.label!r} overlap")


def _make_embeddings(names, dim, rng, max_cos=EMBEDDING_MAX_COS):
    """Random unit vectors with pairwise |cos| below max_cos (seeded)."""
    for _ in range(200):
        vecs = rng.standard_normal((len(names), dim))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        gram = np.abs(vecs @ vecs.T) - np.eye(len(names))
        if gram.max() < max_cos:
            return {n: vecs[i] for i, n in enumerate(names)}
    raise InputError(
        f"could not draw {len(names)} embeddings of dim {dim} with pairwise "
        f"|cos| < {max_cos}; increase the feature dimension")


def _surface_points(objects, n_points, rng):
    areas = []
    for o in objects:
        if o.kind == "sphere":
            areas.append(4.0 * np.pi * o.radius ** 2)
        else:
            hx, hy, hz = o.half_size
            areas.append(8.0 * (hx * hy + hy * hz + hx * hz))
    areas = np.asarray(areas)
    counts = np.maximum((n_points * areas / areas.sum()).astype(int), 1)
    pts, idx = [], []
    for i, (o, cnt) in enumerate(zip(objects, counts)):
        if o.kind == "sphere":
            d = rng.standard_normal((cnt, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            p = np.asarray(o.center) + o.radius * d
        else:
            h = np.asarray(o.half_size)
            face_areas = np.asarray([h[1] * h[2], h[1] * h[2], h[0] * h[2],
                                     h[0] * h[2], h[0] * h[1], h[0] * h[1]])
            faces = rng.choice(6, size=cnt, p=face_areas / face_areas.sum())
            u = rng.uniform(-1, 1, (cnt, 3)) * h
            axis = faces // 2
            sign = np.where(faces % 2 == 0, 1.0, -1.0)
            u[np.arange(cnt), axis] = sign * h[axis]
            p = np.asarray(o.center) + u
        pts.append(p)
        idx.append(np.full(cnt, i))
    return np.concatenate(pts), np.concatenate(idx)


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> TeacherDataset:
    """Ray-trace analytic primitives into an exact TeacherDataset.

    Per-pixel features are the hit object's label embedding (background
    embedding on misses), so every ground-truth quantity is exact by
    construction. Pure function of (spec, seed).
    """
    objects = list(spec.objects)
    if not objects:
        raise InputError("scene needs at least one object")
    _check_disjoint(objects)
    rng = as_rng(spec.seed)

    label_names = [spec.background_label]
    for o in objects:
        if o.label == spec.background_label:
            raise InputError(f"object label {o.label!r} collides with background")
        if o.label not in label_names:
            label_names.append(o.label)
    obj_label_idx = np.asarray([label_names.index(o.label) for o in objects])
    embeddings = _make_embeddings(label_names, spec.feature_dim, rng)
    table = QueryEmbeddingTable(teacher="synthetic", dim=spec.feature_dim,
                                labels=embeddings)
    emb_matrix = np.stack([embeddings[n] for n in label_names]).astype(np.float32)

    scene_radius = max(o.bounding_radius() for o in objects)
    near = spec.near or max(spec.camera_radius - 1.6 * scene_radius,
                            0.05 * spec.camera_radius)
    far = spec.far or spec.camera_radius + 1.6 * scene_radius

    total = spec.n_train + spec.n_holdout
    elev = np.deg2rad(spec.camera_elevation_deg)
    cameras = []
    for i in range(total):
        az = 2.0 * np.pi * i / total
        pos = spec.camera_radius * np.asarray([
            np.cos(elev) * np.cos(az), np.sin(elev), np.cos(elev) * np.sin(az)])
        cameras.append(Camera.look_at(pos, (0.0, 0.0, 0.0), fov_deg=spec.fov_deg,
                                      width=spec.image_size, height=spec.image_size,
                                      near=near, far=far))
    stride = max(total // max(spec.n_holdout, 1), 1)
    holdout = [(stride // 2 + i * stride) % total for i in range(spec.n_holdout)]
    train = [i for i in range(total) if i not in holdout]

    colors = np.stack([np.asarray(o.color, dtype=np.float64) for o in objects])
    H = W = spec.image_size
    images = np.zeros((total, H, W, 3), dtype=np.float32)
    features = np.zeros((total, H, W, spec.feature_dim), dtype=np.float32)
    depths = np.full((total, H, W), np.inf, dtype=np.float32)
    masks = np.zeros((total, H, W), dtype=np.uint8)
    for v, cam in enumerate(cameras):
        rays = generate_rays(cam)
        best_t = np.full(len(rays), np.inf)
        best_obj = np.full(len(rays), -1)
        for oi, obj in enumerate(objects):
            t = _object_hit(obj, rays.origins, rays.directions)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_obj = np.where(closer, oi, best_obj)
        hit = best_obj >= 0
        rgb = np.zeros((len(rays), 3))
        rgb[hit] = colors[best_obj[hit]]
        # quantize like the PNG on disk so in-memory and loaded data agree
        rgb8 = (rgb * 255.0 + 0.5).astype(np.uint8)
        images[v] = (rgb8.astype(np.float32) / 255.0).reshape(H, W, 3)
        label_idx = np.zeros(len(rays), dtype=np.int64)
        label_idx[hit] = obj_label_idx[best_obj[hit]]
        features[v] = emb_matrix[label_idx].reshape(H, W, -1)
        depths[v] = np.where(hit, best_t, np.inf).reshape(H, W).astype(np.float32)
        masks[v] = label_idx.reshape(H, W).astype(np.uint8)

    pts, obj_idx = _surface_points(objects, spec.n_points, rng)
    gt = GroundTruth(labels=label_names,
                     points=pts.astype(np.float32),
                     point_labels=obj_label_idx[obj_idx].astype(np.int32),
                     depths=depths, masks=masks)
    ds = TeacherDataset(teacher="synthetic", cameras=cameras, images=images,
                        features=features, table=table,
                        split={"train": train, "holdout": holdout},
                        near=float(near), far=float(far), gt=gt)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


# ------------------------------------------------------------ checkpoints

def save_checkpoint(scene: SceneModel, path, *, train_config=None,
                    iteration: int = 0, rng_state=None):
    """Serialize a SceneModel; save followed by load is the identity."""
    blobs = [("coarse", scene.coarse.params.values),
             ("fine", scene.fine.params.values)]
    header = {
        "version": CKPT_VERSION,
        "coarse_config": scene.coarse.config.to_json(),
        "fine_config": scene.fine.config.to_json(),
        "near": scene.near,
        "far": scene.far,
        "feature_from": scene.feature_from,
        "iteration": int(iteration),
        "train_config": train_config,
        "rng_state": rng_state,
        "table": None if scene.table is None else scene.table.to_json(),
        "blobs": [{"name": n, "dtype": v.dtype.str, "size": int(v.size)}
                  for n, v in blobs],
    }
    payload = json.dumps(header).encode()

    def write(tmp):
        with open(tmp, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<IQ", CKPT_VERSION, len(payload)))
            f.write(payload)
            for _, v in blobs:
                f.write(np.ascontiguousarray(v).tobytes())

    _atomic_write(path, write)


def _read_header(path):
    p = Path(path)
    if not p.exists():
        raise DatastoreError(f"missing checkpoint {p}")
    with open(p, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise DatastoreError(f"bad magic in checkpoint {p}")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != CKPT_VERSION:
            raise DatastoreError(
                f"checkpoint {p} has version {version}, reader supports {CKPT_VERSION}")
        return json.loads(f.read(hlen).decode()), 16 + hlen


def read_checkpoint_header(path) -> dict:
    return _read_header(path)[0]


def load_checkpoint(path) -> SceneModel:
    p = Path(path)
    header, offset = _read_header(p)
    raw = p.read_bytes()
    fields = {}
    cursor = offset
    configs = {"coarse": FieldConfig.from_json(header["coarse_config"]),
               "fine": FieldConfig.from_json(header["fine_config"])}
    for blob in header["blobs"]:
        dtype = np.dtype(blob["dtype"])
        nbytes = dtype.itemsize * blob["size"]
        if cursor + nbytes > len(raw):
            raise DatastoreError(f"truncated checkpoint {p}")
        arr = np.frombuffer(raw, dtype=dtype, count=blob["size"], offset=cursor).copy()
        cursor += nbytes
        cfg = configs[blob["name"]]
        params = FieldParams(cfg, dtype=dtype)
        if params.size != arr.size:
            raise DatastoreError(
                f"checkpoint {p}: blob {blob['name']} has {arr.size} values, "
                f"config expects {params.size}")
        params.values[:] = arr
        fields[blob["name"]] = Field(cfg, params)
    table = None
    if header.get("table"):
        table = QueryEmbeddingTable.from_json(header["table"])
    return SceneModel(coarse=fields["coarse"], fine=fields["fine"],
                      near=float(header["near"]), far=float(header["far"]),
                      feature_from=header["feature_from"], table=table)
