"""Resolve user queries to feature-space vectors and score 3D points.

The same softmax powers 2D pixel-label probabilities and the 3D probability
field, so the two agree whenever f(x) equals the pixel feature. Selections
come in two modes: softmax against a set of competing labels, or a hard
cosine threshold for decomposition without negatives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import InputError
from .geometry import Camera, as_rng
from .renderer import render_pixels

DEFAULT_TAU = 0.85
KMEANS_MAX_ITERS = 50


@dataclass
class QueryEmbeddingTable:
    """Precomputed label -> feature-space vectors for one teacher."""

    teacher: str
    dim: int
    labels: dict  # name -> (D,) float array

    def __post_init__(self):
        clean = {}
        for name, vec in self.labels.items():
            v = np.asarray(vec, dtype=np.float64).reshape(-1)
            if v.shape[0] != self.dim:
                raise InputError(f"label {name!r} has dim {v.shape[0]}, table dim {self.dim}")
            clean[name] = v
        self.labels = clean

    def names(self):
        return list(self.labels)

    def vector(self, name: str) -> np.ndarray:
        if name not in self.labels:
            raise InputError(f"unknown label {name!r}")
        return self.labels[name]

    def matrix(self, names=None) -> np.ndarray:
        names = self.names() if names is None else list(names)
        return np.stack([self.vector(n) for n in names], axis=0)

    def to_json(self) -> dict:
        return {"teacher": self.teacher, "dim": self.dim,
                "labels": {k: v.tolist() for k, v in self.labels.items()}}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, d: dict) -> "QueryEmbeddingTable":
        return cls(teacher=d["teacher"], dim=int(d["dim"]), labels=d["labels"])

    @classmethod
    def load(cls, path) -> "QueryEmbeddingTable":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Selection:
    """A resolved query: positive vector(s) plus how to turn scores into p.

    softmax mode scores positives against a negative label set (Eq.-style
    competition); threshold mode takes cos(f(x), q) > tau.
    """

    mode: str                       # "softmax" | "threshold"
    positives: np.ndarray           # (P, D)
    negatives: np.ndarray | None = None  # (N, D), softmax mode
    tau: float = DEFAULT_TAU
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=np.float64))
        if self.negatives is not None:
            self.negatives = np.atleast_2d(np.asarray(self.negatives, dtype=np.float64))
        if self.mode == "softmax":
            n_neg = 0 if self.negatives is None else self.negatives.shape[0]
            if self.positives.shape[0] + n_neg < 2:
                raise InputError("softmax selection needs at least two labels in play")
        elif self.mode == "threshold":
            if not (-1.0 < self.tau < 1.0):
                raise InputError("threshold must lie in (-1, 1)")
        else:
            raise InputError(f"unknown selection mode {self.mode!r}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "positives": self.positives.tolist(),
            "negatives": None if self.negatives is None else self.negatives.tolist(),
            "tau": self.tau,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Selection":
        return cls(mode=d["mode"], positives=np.asarray(d["positives"]),
                   negatives=None if d.get("negatives") is None
                   else np.asarray(d["negatives"]),
                   tau=d.get("tau", DEFAULT_TAU), meta=d.get("meta", {}))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def label_probabilities(features: np.ndarray, label_vectors: np.ndarray) -> np.ndarray:
    """Softmax over dot products: (N, D) x (L, D) -> (N, L)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    logits = features @ np.asarray(label_vectors, dtype=np.float64).T
    return softmax(logits, axis=-1)


def label_probability_2d(feature_map: np.ndarray, pixel, labels,
                         table: QueryEmbeddingTable) -> np.ndarray:
    """Probability of each label at one pixel of a 2D feature map."""
    row, col = int(pixel[0]), int(pixel[1])
    h, w = feature_map.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise InputError("pixel outside the feature map")
    return label_probabilities(feature_map[row, col], table.matrix(labels))[0]


def probability_field(scene, x: np.ndarray, selection: Selection) -> np.ndarray:
    """p(query | x): softmax membership of 3D points for a softmax selection.

    Depends only on the point and the query (never the viewpoint). With
    several positives their probabilities sum.
    """
    if selection.mode != "softmax":
        raise InputError("probability_field expects a softmax-mode selection")
    f = scene.point_features(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    vecs = selection.positives if selection.negatives is None else \
        np.concatenate([selection.positives, selection.negatives], axis=0)
    probs = label_probabilities(f, vecs)
    return probs[:, :selection.positives.shape[0]].sum(axis=-1)


def threshold_selection(scene, x: np.ndarray, selection: Selection) -> np.ndarray:
    """Hard membership: 1 iff max-over-positives cosine similarity > tau."""
    if selection.mode != "threshold":
        raise InputError("threshold_selection expects a threshold-mode selection")
    f = scene.point_features(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    fn = f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), 1e-12)
    q = selection.positives
    qn = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
    cos = (fn @ qn.T).max(axis=-1)
    return (cos > selection.tau).astype(np.float64)


def selection_probability(scene, x: np.ndarray, selection: Selection) -> np.ndarray:
    """Dispatch on selection mode; always returns p(x) in [0, 1]."""
    if selection.mode == "softmax":
        return probability_field(scene, x, selection)
    return threshold_selection(scene, x, selection)


def selection_fn(scene, selection: Selection):
    """Bind (scene, selection) into the pointwise callable renderers expect."""
    return lambda pts: selection_probability(scene, pts, selection)


def encode_patch_query(feature_map: np.ndarray, rect) -> np.ndarray:
    """Mean feature over rect = (r0, c0, r1, c1), end-exclusive."""
    r0, c0, r1, c1 = (int(v) for v in rect)
    h, w = feature_map.shape[:2]
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, h), min(c1, w)
    if r1 <= r0 or c1 <= c0:
        raise InputError("patch rect is empty")
    return np.asarray(feature_map[r0:r1, c0:c1], dtype=np.float64).reshape(
        -1, feature_map.shape[-1]).mean(axis=0)


def encode_point_query(scene, camera: Camera, pixel, *, seed=0,
                       n_coarse=64, n_fine=128, min_opacity=0.5) -> np.ndarray:
    """Feature of the surface seen through one pixel.

    Renders the feature channel for that ray and divides by the accumulated
    opacity to undo the compositing attenuation; mostly-empty rays are
    rejected because there is no surface to describe.
    """
    buf = render_pixels(scene, camera, [tuple(pixel)], channels=("feature",),
                        mode="fine", n_coarse=n_coarse, n_fine=n_fine, seed=seed)
    opacity = float(buf.opacity[0])
    if opacity < min_opacity:
        raise InputError(
            f"no surface under pixel {tuple(pixel)}: opacity {opacity:.3f}")
    return buf.feature[0] / opacity


def kmeans_features(features: np.ndarray, k: int, seed=0, *,
                    max_iters: int = KMEANS_MAX_ITERS):
    """Lloyd's algorithm with k-means++ seeding on (N, D) or (H, W, D) data.

    Returns (assignments, centroids, sse_history); deterministic per seed and
    capped at `max_iters` sweeps.
    """
    data = np.asarray(features, dtype=np.float64)
    shape = data.shape[:-1]
    pts = data.reshape(-1, data.shape[-1])
    n = pts.shape[0]
    if not (1 <= k <= n):
        raise InputError(f"need 1 <= k <= n_points, got k={k}, n={n}")
    rng = as_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pts[rng.integers(n)]
        else:
            centroids[i] = pts[np.searchsorted(np.cumsum(d2 / total),
                                               rng.random(), side="right").clip(0, n - 1)]
        d2 = np.minimum(d2, ((pts - centroids[i]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    sse_history = []
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new_assign = dist.argmin(axis=1)
        sse_history.append(float(np.take_along_axis(
            dist, new_assign[:, None], axis=1).sum()))
        for i in range(k):
            members = pts[new_assign == i]
            if len(members):
                centroids[i] = members.mean(axis=0)
            # empty clusters keep their previous centroid
        if np.array_equal(new_assign, assign) and len(sse_history) > 1:
            assign = new_assign
            break
        assign = new_assign
    return assign.reshape(shape), centroids, sse_history
