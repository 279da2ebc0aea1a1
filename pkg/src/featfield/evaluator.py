"""Metrics and diagnostics: image quality, 3D segmentation on point clouds,
depth accuracy, and PCA feature visualization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InputError
from .query import Selection, probability_field, label_probabilities

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PCA_CLIP_PERCENTILES = (2.0, 98.0)


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("images must share a shape")
    mse = float(((a - b) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window.

    Channels are scored independently and averaged; the window-radius border
    is cropped before averaging so every scored pixel sees a full window.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("images must share a shape")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    pad = SSIM_WINDOW // 2

    def blur(x):
        out = correlate1d(x, kernel, axis=0, mode="nearest")
        return correlate1d(out, kernel, axis=1, mode="nearest")

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / \
            ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(scores))


@dataclass
class SegmentationReport:
    labels: list
    confusion: np.ndarray     # (L, L), rows = ground truth, cols = prediction
    per_label_iou: dict
    miou: float
    accuracy: float

    def to_json(self) -> dict:
        return {"labels": self.labels,
                "confusion": self.confusion.tolist(),
                "per_label_iou": {k: (None if v is None else float(v))
                                  for k, v in self.per_label_iou.items()},
                "miou": float(self.miou),
                "accuracy": float(self.accuracy)}


def report_from_confusion(confusion: np.ndarray, labels) -> SegmentationReport:
    """mIoU and accuracy from a confusion matrix alone.

    Labels absent from both ground truth and prediction carry no evidence and
    are excluded from the mIoU mean.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    gt_counts = confusion.sum(axis=1).astype(np.float64)
    pred_counts = confusion.sum(axis=0).astype(np.float64)
    union = gt_counts + pred_counts - tp
    per_label = {}
    ious = []
    for i, name in enumerate(labels):
        if union[i] == 0:
            per_label[name] = None
            continue
        iou = tp[i] / union[i]
        per_label[name] = iou
        ious.append(iou)
    total = confusion.sum()
    return SegmentationReport(
        labels=list(labels), confusion=confusion, per_label_iou=per_label,
        miou=float(np.mean(ious)) if ious else 0.0,
        accuracy=float(tp.sum() / total) if total else 0.0)


def segment_point_cloud(scene, points: np.ndarray, gt_labels: np.ndarray,
                        label_names, table, *, chunk: int = 8192,
                        top2: bool = False) -> SegmentationReport:
    """Argmax the probability field over a label set at every point.

    `gt_labels` are indices into `label_names`; the query set is exactly
    `label_names`, looked up in `table`. With top2 set, a point counts for its
    ground-truth label when that label has the highest or second-highest
    probability.
    """
    points = np.asarray(points, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    vectors = table.matrix(label_names)
    n_labels = len(label_names)
    confusion = np.zeros((n_labels, n_labels), dtype=np.int64)
    for start in range(0, len(points), chunk):
        pts = points[start:start + chunk]
        gt = gt_labels[start:start + chunk]
        probs = label_probabilities(scene.point_features(pts), vectors)
        pred = probs.argmax(axis=1)
        if top2:
            order = np.argsort(-probs, axis=1)[:, :2]
            second_ok = order[:, 1] == gt
            pred = np.where((order[:, 0] == gt) | second_ok, gt, pred)
        np.add.at(confusion, (gt, pred), 1)
    return report_from_confusion(confusion, label_names)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask=None) -> dict:
    """delta<1.25 inlier ratio and mean absolute relative error over a mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = mask & np.isfinite(gt) & (gt > 0)
    if not mask.any():
        return {"delta_1_25": 0.0, "absrel": float("nan"), "n_pixels": 0}
    p, g = pred[mask], gt[mask]
    ratio = np.maximum(p / g, g / np.maximum(p, 1e-12))
    return {"delta_1_25": float((ratio < 1.25).mean()),
            "absrel": float((np.abs(p - g) / g).mean()),
            "n_pixels": int(mask.sum())}


def pca_fit(reference_map: np.ndarray, n_components: int = 3):
    """Top principal axes of a feature map's pixels.

    Eigenvector signs follow the largest-component-positive convention so the
    projection is deterministic. Returns (mean, components (C, D), eigvals).
    """
    pixels = np.asarray(reference_map, dtype=np.float64).reshape(
        -1, reference_map.shape[-1])
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / max(len(pixels) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    comps = eigvecs[:, order].T
    vals = eigvals[order]
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return mean, comps, vals


def pca_visualize(feature_map: np.ndarray, fit_reference_map: np.ndarray) -> np.ndarray:
    """Project features onto the reference map's top-3 axes as an RGB image.

    Each channel is clipped to its [2, 98] percentile range (outlier removal)
    and min-max scaled to [0, 1].
    """
    mean, comps, _ = pca_fit(fit_reference_map, n_components=3)
    h, w = feature_map.shape[:2]
    proj = (np.asarray(feature_map, dtype=np.float64).reshape(-1, feature_map.shape[-1])
            - mean) @ comps.T
    lo = np.percentile(proj, PCA_CLIP_PERCENTILES[0], axis=0)
    hi = np.percentile(proj, PCA_CLIP_PERCENTILES[1], axis=0)
    clipped = np.clip(proj, lo, hi)
    span = np.maximum(hi - lo, 1e-12)
    return ((clipped - lo) / span).reshape(h, w, 3)


def segmentation_selection(table, label: str, label_set=None) -> Selection:
    """Softmax selection for one label against the rest of a label set."""
    names = table.names() if label_set is None else list(label_set)
    if label not in names:
        raise InputError(f"label {label!r} not in the query set")
    negatives = [n for n in names if n != label]
    return Selection(mode="softmax", positives=table.vector(label),
                     negatives=table.matrix(negatives) if negatives else None,
                     meta={"label": label, "negatives": negatives})


def selection_overlay_iou(prob_map: np.ndarray, gt_mask: np.ndarray,
                          threshold: float = 0.5) -> float:
    """IoU between a thresholded selection render and a boolean mask."""
    pred = np.asarray(prob_map) > threshold
    gt = np.asarray(gt_mask).astype(bool)
    union = (pred | gt).sum()
    if union == 0:
        return 1.0
    return float((pred & gt).sum() / union)


__all__ = [
    "psnr", "ssim", "SegmentationReport", "report_from_confusion",
    "segment_point_cloud", "depth_metrics", "pca_fit", "pca_visualize",
    "segmentation_selection", "selection_overlay_iou", "probability_field",
]
