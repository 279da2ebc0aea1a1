"""Cameras, pixel rays, and depth sampling along rays.

Conventions: right-handed world, cameras look down their local -z axis with
+y up (camera-to-world pose). Depths are metric distances along unit ray
directions, bounded by [near, far].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

# Mass added to each importance-sampling weight so the CDF never degenerates.
WEIGHT_STABILIZER = 0.01


def as_rng(rng) -> np.random.Generator:
    """Accept a Generator or a seed and return a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: camera-to-world pose plus intrinsics in pixels."""

    rotation: np.ndarray      # (3, 3) camera-to-world
    translation: np.ndarray   # (3,) camera center in world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise InputError("camera rotation is not orthonormal")
        if not (0.0 < self.near < self.far):
            raise InputError(f"require 0 < near < far, got ({self.near}, {self.far})")
        if self.fx <= 0 or self.fy <= 0:
            raise InputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InputError("image size must be positive")

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), *, fov_deg=50.0,
                width=64, height=64, near=0.1, far=10.0) -> "Camera":
        """Build a camera at `position` looking at `target`."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise InputError("camera position coincides with target")
        forward /= norm
        x_axis = np.cross(forward, np.asarray(up, dtype=np.float64))
        xn = np.linalg.norm(x_axis)
        if xn < 1e-9:
            raise InputError("view direction is parallel to the up vector")
        x_axis /= xn
        z_axis = -forward
        y_axis = np.cross(z_axis, x_axis)
        R = np.stack([x_axis, y_axis, z_axis], axis=1)
        focal = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(rotation=R, translation=position,
                   fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height, near=near, far=far)

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   translation=np.asarray(d["translation"], dtype=np.float64),
                   fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["width"]), height=int(d["height"]),
                   near=d["near"], far=d["far"])


@dataclass
class RayBundle:
    """A batch of rays; directions are unit vectors."""

    origins: np.ndarray     # (R, 3)
    directions: np.ndarray  # (R, 3)

    def __len__(self):
        return self.origins.shape[0]

    def points_at(self, depths: np.ndarray) -> np.ndarray:
        """World positions o + t d for per-ray depths (R, K) -> (R, K, 3)."""
        return self.origins[:, None, :] + depths[..., None] * self.directions[:, None, :]


def generate_rays(camera: Camera, pixels="all") -> RayBundle:
    """Cast one ray per pixel through the pixel center.

    `pixels` is either "all" (row-major over the full image) or an (N, 2)
    array of (row, col). Deterministic; out-of-bounds pixels raise InputError.
    """
    if isinstance(pixels, str) and pixels == "all":
        rows, cols = np.mgrid[0:camera.height, 0:camera.width]
        rows = rows.reshape(-1).astype(np.float64)
        cols = cols.reshape(-1).astype(np.float64)
    else:
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        if px.ndim != 2 or px.shape[1] != 2:
            raise InputError("pixels must be (N, 2) of (row, col)")
        rows, cols = px[:, 0], px[:, 1]
        if (rows < 0).any() or (rows > camera.height - 1).any() \
                or (cols < 0).any() or (cols > camera.width - 1).any():
            raise InputError("pixel out of image bounds")
    dirs_cam = np.stack([
        (cols - camera.cx) / camera.fx,
        -(rows - camera.cy) / camera.fy,
        -np.ones_like(cols),
    ], axis=-1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    return RayBundle(origins=origins, directions=dirs)


@dataclass
class DepthSamples:
    """Ascending per-ray depths t_1..t_K and their quadrature spacings.

    The spacing of the last sample is closed with the far bound, so the
    spacings always partition [t_1, far].
    """

    depths: np.ndarray  # (R, K), ascending along axis 1
    far: float
    deltas: np.ndarray = field(init=False)  # (R, K), nonnegative

    def __post_init__(self):
        d = np.diff(self.depths, axis=-1)
        last = np.maximum(self.far - self.depths[:, -1:], 0.0)
        self.deltas = np.concatenate([d, last], axis=-1)

    @property
    def count(self) -> int:
        return self.depths.shape[-1]

    def validate(self, near: float):
        if (np.diff(self.depths, axis=-1) <= 0).any():
            raise InputError("depths are not strictly ascending")
        if (self.depths < near - 1e-12).any() or (self.depths > self.far + 1e-12).any():
            raise InputError("depths escape [near, far]")


def stratified_sample(n_rays: int, near: float, far: float, k: int, rng) -> DepthSamples:
    """One uniform draw in each of K equal bins of [near, far], per ray."""
    if k < 2:
        raise InputError(f"need at least 2 samples per ray, got {k}")
    u = rng.random((n_rays, k))
    edges = np.arange(k, dtype=np.float64)
    h = (far - near) / k
    depths = near + (edges[None, :] + u) * h
    return DepthSamples(depths=depths, far=far)


def importance_sample(coarse: DepthSamples, weights: np.ndarray, m: int, rng,
                      include_coarse: bool = True) -> DepthSamples:
    """Draw M extra depths per ray by inverting the piecewise-constant CDF.

    Bin k spans [t_k, t_k + delta_k] and carries mass proportional to
    weights[k] plus a small stabilizer, so an all-zero weight row degrades
    to uniform sampling instead of failing. When `include_coarse` is set the
    result is the coarse depths merged with the new draws, sorted.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != coarse.depths.shape:
        raise InputError("weights must align with coarse depths")
    if (weights < 0).any():
        raise InputError("importance weights must be nonnegative")
    w = weights + WEIGHT_STABILIZER
    cdf = np.cumsum(w, axis=-1)
    total = cdf[:, -1:]
    cdf = cdf / total
    u = rng.random((weights.shape[0], m))
    # Bin index of each draw; comparing against the interior CDF edges keeps
    # every index within [0, K-1].
    idx = (u[:, :, None] >= cdf[:, None, :-1]).sum(axis=-1)
    shifted = np.concatenate([np.zeros_like(cdf[:, :1]), cdf[:, :-1]], axis=-1)
    cdf_lo = np.take_along_axis(shifted, idx, axis=-1)
    mass = np.take_along_axis(w / total, idx, axis=-1)
    frac = np.clip((u - cdf_lo) / mass, 0.0, 1.0)
    lo = np.take_along_axis(coarse.depths, idx, axis=-1)
    width = np.take_along_axis(coarse.deltas, idx, axis=-1)
    new = lo + frac * width
    if include_coarse:
        merged = np.sort(np.concatenate([coarse.depths, new], axis=-1), axis=-1)
    else:
        merged = np.sort(new, axis=-1)
    return DepthSamples(depths=merged, far=coarse.far)
