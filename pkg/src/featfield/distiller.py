"""Losses, optimizer, and the two-phase training pipeline.

Phase 1 fits the radiance fields alone (squared-L2 re-rendering loss, density
noise on). Phase 2 keeps the photometric term and adds the L1 feature
distillation term at a constant finetune learning rate with the noise
removed. Feature-loss gradients never touch density (stop-gradient), so the
reconstructed geometry cannot be degraded by inconsistent teacher maps.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from .errors import StructureError
from .field import Field, FieldConfig
from .geometry import RayBundle, importance_sample, stratified_sample
from .renderer import RaySampleBatch, composite, quadrature_backward
from .scene import SceneModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    phase1_iters: int = 200_000
    phase2_iters: int = 5_000
    rays_per_batch: int = 1024
    lr_start: float = 5e-4
    lr_end: float = 8e-5
    finetune_lr: float = 1e-4
    lambda_f: float = 0.04
    feature_sampling: str = "coarse"   # which pass distills the feature field
    density_noise: float = 1.0         # stddev of raw-density noise, 0 = off
    seed: int = 0
    n_coarse: int = 64
    n_fine: int = 128
    dtype: str = "float32"
    freeze_radiance: bool = False      # phase 2 updates only the feature path
    freeze_feature: bool = False       # never train or evaluate the feature path
    bg_color: tuple = (0.0, 0.0, 0.0)
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise StructureError("require lr_start >= lr_end > 0")
        if self.lambda_f < 0:
            raise StructureError("feature loss weight must be nonnegative")
        if self.feature_sampling not in ("coarse", "fine"):
            raise StructureError("feature_sampling must be 'coarse' or 'fine'")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        kw = dict(phase1_iters=3000, phase2_iters=1000, rays_per_batch=256,
                  lr_start=2e-3, lr_end=2e-4, finetune_lr=2e-4,
                  n_coarse=32, n_fine=48)
        kw.update(overrides)
        return cls(**kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["bg_color"] = list(self.bg_color)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["bg_color"] = tuple(d.get("bg_color", (0.0, 0.0, 0.0)))
        return cls(**d)


def learning_rate(iteration: int, config: TrainConfig) -> float:
    """Exactly linear decay across phase 1; constant finetune rate after."""
    if iteration >= config.phase1_iters:
        return config.finetune_lr
    span = max(config.phase1_iters, 1)
    return config.lr_start + (config.lr_end - config.lr_start) * iteration / span


def photometric_loss(rendered: np.ndarray, target: np.ndarray):
    """Sum of squared-L2 color errors over rays; gradient 2(rendered-target)."""
    diff = rendered - target
    return float((diff * diff).sum()), 2.0 * diff


def feature_loss(rendered: np.ndarray, target: np.ndarray):
    """Sum of L1 feature errors; subgradient sign(diff) with sign(0) = 0."""
    diff = rendered - target
    return float(np.abs(diff).sum()), np.sign(diff)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, values: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(values), v=np.zeros_like(values))


def adam_step(values: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, update_mask=None):
    """Standard Adam update in place; a mask freezes parameter subsets."""
    if state.m.shape != values.shape or grads.shape != values.shape:
        raise StructureError("optimizer state does not match the parameters")
    state.step += 1
    state.m += (1.0 - state.beta1) * (grads - state.m)
    state.v += (1.0 - state.beta2) * (grads * grads - state.v)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    delta = lr * mhat / (np.sqrt(vhat) + state.eps)
    if update_mask is not None:
        delta = delta * update_mask
    values -= delta


@dataclass
class _RayData:
    """Training pixels flattened across views."""

    origins: np.ndarray
    directions: np.ndarray
    rgb: np.ndarray
    features: np.ndarray


def _flatten_training_rays(dataset) -> _RayData:
    from .geometry import generate_rays
    origins, dirs, rgb, feats = [], [], [], []
    for v in dataset.split["train"]:
        cam = dataset.cameras[v]
        rays = generate_rays(cam)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        rgb.append(dataset.images[v].reshape(-1, 3))
        feats.append(dataset.features[v].reshape(-1, dataset.feature_dim))
    return _RayData(origins=np.concatenate(origins),
                    directions=np.concatenate(dirs),
                    rgb=np.concatenate(rgb).astype(np.float64),
                    features=np.concatenate(feats).astype(np.float64))


def _pass_backward(field: Field, depths, out, cache,
                   gt_rgb, bg, lambda_f, gt_feat):
    """Photometric (+ optional feature) loss and gradients for one pass."""
    n_rays, k = depths.depths.shape
    batch = RaySampleBatch(
        samples=depths,
        sigma=out.sigma.reshape(n_rays, k).astype(np.float64),
        color=out.color.reshape(n_rays, k, 3).astype(np.float64),
        feature=None if out.feature is None else
        out.feature.reshape(n_rays, k, -1).astype(np.float64),
    )
    w = batch.weights()
    opacity = w.sum(axis=-1)
    rgb = composite(w, batch.color) + (1.0 - opacity)[:, None] * bg
    loss_p, d_rgb = photometric_loss(rgb, gt_rgb)
    channels = [(batch.color, d_rgb, True)]
    loss_f = 0.0
    if batch.feature is not None:
        f_hat = composite(w, batch.feature)
        loss_f, d_f = feature_loss(f_hat, gt_feat)
        channels.append((batch.feature, lambda_f * d_f, False))
    d_opacity = -(d_rgb * bg).sum(axis=-1)
    d_sigma, d_vals = quadrature_backward(batch, channels, d_opacity=d_opacity)
    field.backward(cache,
                   d_sigma=d_sigma.reshape(-1),
                   d_color=d_vals[0].reshape(-1, 3),
                   d_feature=d_vals[1].reshape(-1, batch.feature.shape[-1])
                   if batch.feature is not None else None)
    return batch, loss_p, loss_f


def train(dataset, field_config: FieldConfig, config: TrainConfig,
          out_dir=None, progress=None) -> SceneModel:
    """Fit coarse and fine fields to a TeacherDataset.

    Deterministic per seed for a fixed thread count: every stochastic choice
    (init, pixel batches, stratified and importance draws, density noise)
    comes from its own named child stream of the config seed, consumed in a
    fixed order regardless of the feature path. Emits a JSON-lines loss log
    and optional periodic checkpoints when out_dir is given.
    """
    if dataset.feature_dim != field_config.feature_dim:
        raise StructureError(
            f"dataset features have dim {dataset.feature_dim}, field config "
            f"says {field_config.feature_dim}")
    dtype = np.dtype(config.dtype)
    streams = np.random.SeedSequence(config.seed).spawn(6)
    rng_init_c, rng_init_f, rng_pix, rng_strat, rng_imp, rng_noise = \
        (np.random.default_rng(s) for s in streams)

    coarse = Field(field_config, dtype=dtype, rng=rng_init_c)
    fine = Field(field_config, dtype=dtype, rng=rng_init_f)
    adam_c = AdamState.for_params(coarse.params.values)
    adam_f = AdamState.for_params(fine.params.values)
    feature_only_mask = {
        "coarse": coarse.params.group_mask(("feature",)).astype(dtype),
        "fine": fine.params.group_mask(("feature",)).astype(dtype),
    }

    data = _flatten_training_rays(dataset)
    n_pix = data.origins.shape[0]
    bg = np.asarray(config.bg_color, dtype=np.float64)
    total = config.phase1_iters + config.phase2_iters

    log_fh = None
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train_log.jsonl", "w")
    t0 = time.perf_counter()

    try:
        for it in range(total):
            phase2 = it >= config.phase1_iters
            lr = learning_rate(it, config)
            noise = 0.0 if phase2 else config.density_noise
            train_feature = (phase2 and config.lambda_f > 0.0
                             and not config.freeze_feature)

            idx = rng_pix.integers(0, n_pix, size=config.rays_per_batch)
            rays = RayBundle(origins=data.origins[idx],
                             directions=data.directions[idx])
            gt_rgb = data.rgb[idx]
            gt_feat = data.features[idx] if train_feature else None

            # coarse pass
            t_c = stratified_sample(len(rays), dataset.near, dataset.far,
                                    config.n_coarse, rng_strat)
            pts = rays.points_at(t_c.depths).reshape(-1, 3)
            dirs = np.repeat(rays.directions, config.n_coarse, axis=0)
            out_c, cache_c = coarse.forward(
                pts, dirs, want_color=True,
                want_feature=train_feature and config.feature_sampling == "coarse",
                noise_rng=rng_noise, noise_scale=noise, want_cache=True)
            batch_c, loss_pc, loss_fc = _pass_backward(
                coarse, t_c, out_c, cache_c, gt_rgb, bg,
                config.lambda_f, gt_feat)

            # fine pass on merged samples, driven by detached coarse weights
            t_f = importance_sample(t_c, batch_c.weights(), config.n_fine,
                                    rng_imp, include_coarse=True)
            pts = rays.points_at(t_f.depths).reshape(-1, 3)
            dirs = np.repeat(rays.directions, t_f.count, axis=0)
            out_f, cache_f = fine.forward(
                pts, dirs, want_color=True,
                want_feature=train_feature and config.feature_sampling == "fine",
                noise_rng=rng_noise, noise_scale=noise, want_cache=True)
            _, loss_pf, loss_ff = _pass_backward(
                fine, t_f, out_f, cache_f, gt_rgb, bg,
                config.lambda_f, gt_feat)

            mask_c = mask_f = None
            if phase2 and config.freeze_radiance:
                mask_c = feature_only_mask["coarse"]
                mask_f = feature_only_mask["fine"]
            adam_step(coarse.params.values, coarse.params.grads, adam_c, lr, mask_c)
            adam_step(fine.params.values, fine.params.grads, adam_f, lr, mask_f)
            coarse.params.zero_grads()
            fine.params.zero_grads()

            loss_f = loss_fc + loss_ff
            loss_total = loss_pc + loss_pf + config.lambda_f * loss_f
            if log_fh is not None and ((it + 1) % config.log_every == 0 or it == 0):
                log_fh.write(json.dumps({
                    "iter": it + 1, "phase": 2 if phase2 else 1, "lr": lr,
                    "loss": loss_total, "loss_p_coarse": loss_pc,
                    "loss_p_fine": loss_pf, "loss_f": loss_f,
                    "elapsed_s": round(time.perf_counter() - t0, 3)}) + "\n")
                log_fh.flush()
            if progress is not None and (it + 1) % config.log_every == 0:
                progress(it + 1, total, loss_total)
            if (out_path is not None and config.checkpoint_every > 0
                    and (it + 1) % config.checkpoint_every == 0):
                from .datastore import save_checkpoint
                save_checkpoint(_assemble(coarse, fine, dataset, config),
                                out_path / f"ckpt_{it + 1:06d}.ffc",
                                train_config=config.to_json(), iteration=it + 1)
    finally:
        if log_fh is not None:
            log_fh.close()

    return _assemble(coarse, fine, dataset, config)


def _assemble(coarse, fine, dataset, config) -> SceneModel:
    return SceneModel(coarse=coarse, fine=fine, near=dataset.near,
                      far=dataset.far, feature_from=config.feature_sampling,
                      table=dataset.table)
