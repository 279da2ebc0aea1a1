"""Volume-rendering quadrature and the coarse/fine two-pass pipeline.

Transmittance is accumulated multiplicatively, T(t_k) = prod_{k'<k}(1 - a_k'),
which is exact for exponential media and lets scene-blending reuse the same
compositing chain bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import Camera, DepthSamples, RayBundle, as_rng, generate_rays, \
    importance_sample, stratified_sample
from .scene import SceneModel

CHANNELS = ("rgb", "feature", "depth", "opacity", "selection")


def alphas_from_sigma(sigma: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Per-segment opacity a_k = 1 - exp(-sigma_k delta_k)."""
    return -np.expm1(-sigma * deltas)


def transmittance_weights(alpha: np.ndarray):
    """Compositing weights w_k = T_k a_k with T_k = prod_{j<k}(1 - a_j)."""
    keep = 1.0 - alpha
    trans = np.cumprod(np.concatenate(
        [np.ones_like(alpha[..., :1]), keep[..., :-1]], axis=-1), axis=-1)
    return trans * alpha, trans


@dataclass
class RaySampleBatch:
    """Ordered per-ray samples with the field values needed to composite."""

    samples: DepthSamples
    sigma: np.ndarray                  # (R, K)
    color: np.ndarray | None = None    # (R, K, 3)
    feature: np.ndarray | None = None  # (R, K, D)

    def __post_init__(self):
        self._weights = None
        self._trans = None
        self._alpha = None

    @property
    def deltas(self):
        return self.samples.deltas

    def alphas(self):
        if self._alpha is None:
            self._alpha = alphas_from_sigma(self.sigma, self.deltas)
        return self._alpha

    def weights(self):
        if self._weights is None:
            self._weights, self._trans = transmittance_weights(self.alphas())
        return self._weights

    def transmittance(self):
        self.weights()
        return self._trans

    def opacity(self):
        return self.weights().sum(axis=-1)


def composite(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Quadrature sum over samples: (R, K) x (R, K, C) -> (R, C)."""
    return np.einsum("rk,rkc->rc", weights, values, optimize=True)


def composite_color(batch: RaySampleBatch) -> np.ndarray:
    """Rendered color per ray; vacuum composites to zero."""
    if batch.color is None:
        raise InputError("batch carries no colors")
    if batch.sigma.shape[-1] == 0:
        return np.zeros((batch.sigma.shape[0], 3), dtype=batch.sigma.dtype)
    return composite(batch.weights(), batch.color)


def composite_feature(batch: RaySampleBatch) -> np.ndarray:
    """Rendered feature per ray; same quadrature and weights as color."""
    if batch.feature is None:
        raise InputError("batch carries no features")
    if batch.sigma.shape[-1] == 0:
        return np.zeros((batch.sigma.shape[0], 0), dtype=batch.sigma.dtype)
    return composite(batch.weights(), batch.feature)


def composite_depth(batch: RaySampleBatch):
    """Expected termination depth per ray plus accumulated opacity."""
    w = batch.weights()
    return (w * batch.samples.depths).sum(axis=-1), w.sum(axis=-1)


def quadrature_backward(batch: RaySampleBatch, channels, d_opacity=None):
    """Backpropagate through the compositing sums of one pass.

    `channels` is a list of (values, d_composited, reaches_density); entries
    with reaches_density=False receive value gradients but contribute nothing
    to d_sigma, which is how the feature loss's stop-gradient on density is
    realized. Returns (d_sigma (R,K), [d_values per channel]).
    """
    w = batch.weights()
    trans = batch.transmittance()
    deltas = batch.deltas
    r = None
    d_values = []
    for values, d_comp, reaches_density in channels:
        d_values.append(w[..., None] * d_comp[:, None, :])
        if reaches_density:
            e = np.einsum("rkc,rc->rk", values, d_comp, optimize=True)
            r = e if r is None else r + e
    if d_opacity is not None:
        e = np.broadcast_to(np.asarray(d_opacity)[:, None], w.shape)
        r = e.copy() if r is None else r + e
    if r is None:
        d_sigma = np.zeros_like(w)
    else:
        q = r * w
        suffix = np.flip(np.cumsum(np.flip(q, axis=-1), axis=-1), axis=-1) - q
        d_sigma = deltas * (r * (trans - w) - suffix)
    return d_sigma, d_values


@dataclass
class RenderedBuffers:
    """Per-pixel render outputs; absent channels stay None."""

    rgb: np.ndarray | None = None
    feature: np.ndarray | None = None
    depth: np.ndarray | None = None
    opacity: np.ndarray | None = None
    selection: np.ndarray | None = None

    def reshape(self, h: int, w: int) -> "RenderedBuffers":
        def r(a, trailing):
            return None if a is None else a.reshape((h, w) + trailing)
        return RenderedBuffers(
            rgb=r(self.rgb, (3,)),
            feature=None if self.feature is None else
            self.feature.reshape(h, w, -1),
            depth=r(self.depth, ()),
            opacity=r(self.opacity, ()),
            selection=r(self.selection, ()),
        )


def _concat_buffers(parts):
    def cat(attr):
        vals = [getattr(p, attr) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=0)
    return RenderedBuffers(rgb=cat("rgb"), feature=cat("feature"),
                           depth=cat("depth"), opacity=cat("opacity"),
                           selection=cat("selection"))


def _sample_batch(scene: SceneModel, rays, depths: DepthSamples, net: str,
                  want_color: bool, want_feature: bool) -> RaySampleBatch:
    """Evaluate one net at the given depths and pack a RaySampleBatch."""
    n_rays, k = depths.depths.shape
    pts = rays.points_at(depths.depths).reshape(-1, 3)
    field = scene.net(net)
    same_feature_net = want_feature and scene.feature_from == net
    dirs = None
    if want_color:
        dirs = np.repeat(rays.directions, k, axis=0)
    out = field.forward(pts, dirs, want_color=want_color,
                        want_feature=same_feature_net)
    feature = None
    if want_feature:
        if same_feature_net:
            feature = out.feature
        else:
            feature = scene.feature_field.forward(
                pts, want_color=False, want_feature=True).feature
        feature = feature.reshape(n_rays, k, -1).astype(np.float64)
    # quadrature in double precision regardless of the net's parameter dtype
    return RaySampleBatch(
        samples=depths,
        sigma=out.sigma.reshape(n_rays, k).astype(np.float64),
        color=None if out.color is None else
        out.color.reshape(n_rays, k, 3).astype(np.float64),
        feature=feature,
    )


def render_pixels(scene: SceneModel, camera: Camera, pixels="all", *,
                  mode: str = "fine", channels=("rgb",), n_coarse: int = 64,
                  n_fine: int = 128, seed=0, tile: int = 4096,
                  bg_color=(0.0, 0.0, 0.0), selection_fn=None) -> RenderedBuffers:
    """Render the requested channels for a set of pixels (flat buffers).

    The coarse pass stratifies `n_coarse` depths; in fine mode its weights
    importance-sample `n_fine` more and the fine net is evaluated on the
    merged set. Deterministic for a fixed seed and tile size; rays are
    processed in tiles to bound memory.
    """
    if mode not in ("coarse", "fine"):
        raise InputError(f"unknown render mode {mode!r}")
    unknown = set(channels) - set(CHANNELS)
    if unknown:
        raise InputError(f"unknown channels {sorted(unknown)}")
    if "selection" in channels and selection_fn is None:
        raise InputError("selection channel needs a selection_fn")
    rng = as_rng(seed)
    rays_all = generate_rays(camera, pixels)
    want_rgb = "rgb" in channels
    want_feature = "feature" in channels
    bg = np.asarray(bg_color, dtype=np.float64)

    parts = []
    for start in range(0, len(rays_all), tile):
        rays = RayBundle(origins=rays_all.origins[start:start + tile],
                         directions=rays_all.directions[start:start + tile])
        t_c = stratified_sample(len(rays), camera.near, camera.far, n_coarse, rng)
        if mode == "coarse":
            batch = _sample_batch(scene, rays, t_c, "coarse", want_rgb, want_feature)
        else:
            coarse_batch = _sample_batch(scene, rays, t_c, "coarse", False, False)
            t_f = importance_sample(t_c, coarse_batch.weights(), n_fine, rng)
            batch = _sample_batch(scene, rays, t_f, "fine", want_rgb, want_feature)
        w = batch.weights()
        opacity = w.sum(axis=-1)
        buf = RenderedBuffers(opacity=opacity)
        if want_rgb:
            rgb = composite(w, batch.color)
            buf.rgb = rgb + (1.0 - opacity)[:, None] * bg
        if want_feature:
            buf.feature = composite(w, batch.feature)
        if "depth" in channels:
            buf.depth = (w * batch.samples.depths).sum(axis=-1)
        if "selection" in channels:
            pts = rays.points_at(batch.samples.depths).reshape(-1, 3)
            p = np.asarray(selection_fn(pts), dtype=np.float64)
            buf.selection = (w * p.reshape(w.shape)).sum(axis=-1)
        parts.append(buf)
    return _concat_buffers(parts)


def render_view(scene: SceneModel, camera: Camera, **kwargs) -> RenderedBuffers:
    """Render a full image; buffers come back (H, W, ...) shaped."""
    flat = render_pixels(scene, camera, "all", **kwargs)
    return flat.reshape(camera.height, camera.width)
