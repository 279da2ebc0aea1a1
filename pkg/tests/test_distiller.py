import json
from pathlib import Path

import numpy as np
import pytest

from featfield.datastore import SceneObject, SyntheticSpec, generate_synthetic
from featfield.distiller import AdamState, TrainConfig, adam_step, \
    feature_loss, learning_rate, photometric_loss, train, _pass_backward
from featfield.errors import StructureError
from featfield.field import Field, FieldConfig, finite_difference_grad
from featfield.geometry import DepthSamples, RayBundle


class TestPhotometricLoss:
    def test_identical_inputs_zero(self):
        x = np.random.default_rng(0).random((4, 3))
        loss, grad = photometric_loss(x, x.copy())
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(x))

    def test_single_ray_square(self):
        pred = np.asarray([[0.6, 0.2, 0.9]])
        gt = np.asarray([[0.5, 0.2, 0.9]])
        loss, grad = photometric_loss(pred, gt)
        assert abs(loss - 0.01) < 1e-15
        assert np.allclose(grad, [[0.2, 0.0, 0.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pred = rng.random((5, 3))
        gt = rng.random((5, 3))
        _, grad = photometric_loss(pred, gt)
        h = 1e-7
        for i in range(5):
            for j in range(3):
                p = pred.copy()
                p[i, j] += h
                lp, _ = photometric_loss(p, gt)
                p[i, j] -= 2 * h
                lm, _ = photometric_loss(p, gt)
                num = (lp - lm) / (2 * h)
                assert abs(num - grad[i, j]) / (abs(grad[i, j]) + 1e-8) < 1e-6


class TestFeatureLoss:
    def test_identical_zero(self):
        x = np.random.default_rng(0).random((3, 8))
        loss, grad = feature_loss(x, x.copy())
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(x))

    def test_hand_example(self):
        loss, grad = feature_loss(np.asarray([[0.5, -0.5]]), np.zeros((1, 2)))
        assert loss == 1.0
        assert np.array_equal(grad, [[1.0, -1.0]])

    def test_subgradient_values(self):
        rng = np.random.default_rng(2)
        pred = rng.standard_normal((4, 6))
        gt = pred.copy()
        gt[0, 0] += 1.0
        gt[1, 2] -= 1.0
        _, grad = feature_loss(pred, gt)
        assert set(np.unique(grad)) <= {-1.0, 0.0, 1.0}
        assert grad[0, 0] == -1.0 and grad[1, 2] == 1.0
        assert grad[2, 3] == 0.0  # sign(0) := 0


class TestSchedule:
    def test_exactly_linear_through_phase_one(self):
        cfg = TrainConfig(phase1_iters=200, phase2_iters=50, lr_start=5e-4,
                          lr_end=8e-5)
        for i in (0, 1, 57, 199):
            expected = 5e-4 + (8e-5 - 5e-4) * i / 200
            assert learning_rate(i, cfg) == expected
        assert learning_rate(200, cfg) == cfg.finetune_lr
        assert learning_rate(249, cfg) == cfg.finetune_lr

    def test_invalid_rates_rejected(self):
        with pytest.raises(StructureError):
            TrainConfig(lr_start=1e-5, lr_end=1e-4)
        with pytest.raises(StructureError):
            TrainConfig(lambda_f=-0.1)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        values = np.asarray([1.0, -2.0, 3.0])
        state = AdamState.for_params(values)
        adam_step(values, np.zeros(3), state, lr=0.1)
        assert np.array_equal(values, [1.0, -2.0, 3.0])
        assert state.step == 1

    def test_step_counter_increments(self):
        values = np.zeros(2)
        state = AdamState.for_params(values)
        for i in range(5):
            adam_step(values, np.ones(2), state, lr=0.01)
        assert state.step == 5

    def test_scalar_quadratic_converges(self):
        # minimize (x - 3)^2
        x = np.asarray([-4.0])
        state = AdamState.for_params(x)
        for _ in range(2000):
            grad = 2.0 * (x - 3.0)
            adam_step(x, grad, state, lr=0.05)
        assert abs(x[0] - 3.0) < 1e-6

    def test_update_mask_freezes_entries(self):
        values = np.asarray([1.0, 1.0])
        state = AdamState.for_params(values)
        adam_step(values, np.asarray([1.0, 1.0]), state, lr=0.1,
                  update_mask=np.asarray([1.0, 0.0]))
        assert values[1] == 1.0 and values[0] != 1.0


def tiny_pipeline(seed=0, lambda_f=0.04, feature_on="coarse"):
    """A 2-ray / 4-sample miniature of one full training step."""
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(trunk_layers=2, trunk_width=8, pe_len_pos=1, pe_len_dir=1,
                      skip_at=1, feature_dim=3, head_layers_feature=2)
    coarse = Field(cfg, dtype=np.float64, rng=rng)
    fine = Field(cfg, dtype=np.float64, rng=rng)
    for f in (coarse, fine):
        f.params.values[:] = rng.uniform(-0.6, 0.6, f.params.size)
        # keep density alive: an all-negative raw density would dead-ReLU the
        # whole pass and both gradient routes would be trivially zero
        f.params.view("density.out.b")[:] = 0.5
    assert coarse.params.size + fine.params.size <= 2 * 2000
    origins = np.zeros((2, 3))
    dirs = np.asarray([[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]])
    rays = RayBundle(origins=origins, directions=dirs)
    t_c = DepthSamples(depths=np.asarray([[0.5, 1.0, 1.6, 2.2],
                                          [0.4, 1.1, 1.5, 2.4]]), far=3.0)
    t_f = DepthSamples(depths=np.sort(np.concatenate(
        [t_c.depths, rng.uniform(0.4, 2.9, (2, 4))], axis=1), axis=1), far=3.0)
    gt_rgb = rng.random((2, 3))
    gt_feat = rng.standard_normal((2, 3))
    bg = np.zeros(3)
    return cfg, coarse, fine, rays, t_c, t_f, gt_rgb, gt_feat, bg, lambda_f, feature_on


def run_step(parts, want_grads=True, frozen_weights=None):
    """One coarse+fine training step on fixed depth samples.

    With `frozen_weights`, the feature term composites with those constant
    weights instead of the live ones. That is the finite-difference face of
    the stop-gradient: the defined loss treats the density path into the
    feature term as a constant, so its FD oracle must hold it fixed too.
    """
    cfg, coarse, fine, rays, t_c, t_f, gt_rgb, gt_feat, bg, lam, feat_on = parts
    total = 0.0
    for field, depths, here in ((coarse, t_c, "coarse"), (fine, t_f, "fine")):
        pts = rays.points_at(depths.depths).reshape(-1, 3)
        dirs = np.repeat(rays.directions, depths.count, axis=0)
        out, cache = field.forward(pts, dirs, want_color=True,
                                   want_feature=feat_on == here and lam > 0,
                                   want_cache=True)
        if want_grads:
            _, lp, lf = _pass_backward(field, depths, out, cache, gt_rgb, bg,
                                       lam, gt_feat)
        else:
            from featfield.renderer import RaySampleBatch, composite
            batch = RaySampleBatch(samples=depths,
                                   sigma=out.sigma.reshape(2, -1),
                                   color=out.color.reshape(2, -1, 3),
                                   feature=None if out.feature is None else
                                   out.feature.reshape(2, -1, 3))
            w = batch.weights()
            rgb = composite(w, batch.color) + (1 - w.sum(-1))[:, None] * bg
            lp, _ = photometric_loss(rgb, gt_rgb)
            lf = 0.0
            if batch.feature is not None:
                wf = w if frozen_weights is None else frozen_weights[here]
                lf, _ = feature_loss(composite(wf, batch.feature), gt_feat)
        total += lp + lam * lf
    return total


def base_weights(parts):
    """Compositing weights of both passes at the current parameters."""
    cfg, coarse, fine, rays, t_c, t_f, *_ = parts
    from featfield.renderer import RaySampleBatch
    out = {}
    for field, depths, here in ((coarse, t_c, "coarse"), (fine, t_f, "fine")):
        pts = rays.points_at(depths.depths).reshape(-1, 3)
        ev = field.forward(pts, want_color=False)
        out[here] = RaySampleBatch(samples=depths,
                                   sigma=ev.sigma.reshape(2, -1)).weights()
    return out


class TestEndToEndGradient:
    @pytest.mark.parametrize("feature_on", ["coarse", "fine"])
    def test_total_loss_gradient_matches_fd(self, feature_on):
        parts = tiny_pipeline(seed=3, lambda_f=0.04, feature_on=feature_on)
        _, coarse, fine = parts[0], parts[1], parts[2]
        coarse.params.zero_grads()
        fine.params.zero_grads()
        run_step(parts, want_grads=True)
        frozen = base_weights(parts)
        for field in (coarse, fine):
            ana = field.params.grads.copy()
            assert np.abs(ana).max() > 0
            # h balances truncation against roundoff on O(1e-8) entries
            num = finite_difference_grad(
                lambda: run_step(parts, want_grads=False, frozen_weights=frozen),
                field.params, h=1e-4)
            rel = np.abs(ana - num) / (np.abs(ana) + 1e-8)
            assert rel.max() < 1e-4

    def test_stop_gradient_on_density(self):
        parts = list(tiny_pipeline(seed=5, lambda_f=0.04))
        cfg, coarse, fine, rays, t_c, t_f, gt_rgb, gt_feat, bg, lam, feat_on = parts
        # make the photometric term vanish: use the render itself as target
        pts = rays.points_at(t_c.depths).reshape(-1, 3)
        dirs = np.repeat(rays.directions, t_c.count, axis=0)
        out, cache = coarse.forward(pts, dirs, want_feature=True, want_cache=True)
        from featfield.renderer import RaySampleBatch, composite
        batch = RaySampleBatch(samples=t_c, sigma=out.sigma.reshape(2, -1),
                               color=out.color.reshape(2, -1, 3))
        rendered = composite(batch.weights(), batch.color)
        coarse.params.zero_grads()
        _pass_backward(coarse, t_c, out, cache, rendered, bg, lam, gt_feat)
        g = coarse.params.grads
        assert (g[coarse.params.group_mask(("density",))] == 0.0).all()
        assert (g[coarse.params.group_mask(("color",))] == 0.0).all()
        assert np.abs(g[coarse.params.group_mask(("trunk",))]).max() > 0
        assert np.abs(g[coarse.params.group_mask(("feature",))]).max() > 0

    def test_teacher_perturbation_cannot_move_density_gradients(self):
        parts = list(tiny_pipeline(seed=6, lambda_f=0.04))
        cfg, coarse, fine, rays, t_c, t_f, gt_rgb, gt_feat, bg, lam, feat_on = parts
        pts = rays.points_at(t_c.depths).reshape(-1, 3)
        dirs = np.repeat(rays.directions, t_c.count, axis=0)
        grads = []
        for teacher in (gt_feat, gt_feat + 3.0):
            out, cache = coarse.forward(pts, dirs, want_feature=True,
                                        want_cache=True)
            coarse.params.zero_grads()
            _pass_backward(coarse, t_c, out, cache, gt_rgb, bg, lam, teacher)
            grads.append(coarse.params.grads[
                coarse.params.group_mask(("density",))].copy())
        assert np.array_equal(grads[0], grads[1])


def micro_dataset(seed=0, feature_dim=8):
    spec = SyntheticSpec(
        objects=[SceneObject(kind="sphere", center=(0.0, 0.0, 0.0), radius=0.8,
                             color=(0.9, 0.2, 0.1), label="ball")],
        image_size=16, n_train=3, n_holdout=1, feature_dim=feature_dim,
        seed=seed, n_points=128)
    return generate_synthetic(spec)


def micro_train_config(**kw):
    args = dict(phase1_iters=25, phase2_iters=15, rays_per_batch=32,
                lr_start=2e-3, lr_end=1e-3, finetune_lr=5e-4,
                n_coarse=8, n_fine=8, seed=1, log_every=10)
    args.update(kw)
    return TrainConfig(**args)


class TestTrain:
    def test_dimension_mismatch_is_structural(self):
        ds = micro_dataset()
        with pytest.raises(StructureError):
            train(ds, FieldConfig.desk_scale(feature_dim=4), micro_train_config())

    def test_loss_decreases_and_log_is_written(self, tmp_path):
        ds = micro_dataset()
        cfg = FieldConfig.desk_scale(feature_dim=8, trunk_width=24,
                                     pe_len_pos=4)
        train(ds, cfg, micro_train_config(phase1_iters=120, phase2_iters=0),
              out_dir=tmp_path)
        rows = [json.loads(l) for l in
                (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert rows[0]["iter"] == 1
        assert rows[-1]["loss"] < rows[0]["loss"] * 0.6
        assert all(r["phase"] == 1 for r in rows)

    def test_lambda_zero_matches_frozen_feature_run_bitwise(self):
        ds = micro_dataset()
        cfg = FieldConfig.desk_scale(feature_dim=8, trunk_width=16, pe_len_pos=3)
        a = train(ds, cfg, micro_train_config(lambda_f=0.0))
        b = train(ds, cfg, micro_train_config(freeze_feature=True))
        for net in ("coarse", "fine"):
            pa, pb = a.net(net).params, b.net(net).params
            radiance = pa.group_mask(("trunk", "density", "color"))
            assert np.array_equal(pa.values[radiance], pb.values[radiance])
            # the untouched feature heads also stay at their shared init
            assert np.array_equal(pa.values, pb.values)

    def test_seed_reproducibility_bitwise(self):
        ds = micro_dataset()
        cfg = FieldConfig.desk_scale(feature_dim=8, trunk_width=16, pe_len_pos=3)
        a = train(ds, cfg, micro_train_config(seed=7))
        b = train(ds, cfg, micro_train_config(seed=7))
        assert np.array_equal(a.fine.params.values, b.fine.params.values)
        assert np.array_equal(a.coarse.params.values, b.coarse.params.values)

    def test_freeze_radiance_only_moves_feature_params(self):
        ds = micro_dataset()
        cfg = FieldConfig.desk_scale(feature_dim=8, trunk_width=16, pe_len_pos=3)
        base = train(ds, cfg, micro_train_config(phase1_iters=10, phase2_iters=0,
                                                 seed=3))
        cont = train(ds, cfg, micro_train_config(phase1_iters=10, phase2_iters=12,
                                                 freeze_radiance=True, seed=3))
        for net in ("coarse", "fine"):
            radiance = base.net(net).params.group_mask(("trunk", "density", "color"))
            assert np.array_equal(base.net(net).params.values[radiance],
                                  cont.net(net).params.values[radiance])
        moved = cont.net(cont.feature_from).params
        fmask = moved.group_mask(("feature",))
        assert not np.array_equal(base.net(cont.feature_from).params.values[fmask],
                                  moved.values[fmask])
