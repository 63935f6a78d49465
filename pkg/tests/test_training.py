import numpy as np
import pytest

from radiofield.arrays import (
    ArrayConfig,
    MeasurementMatrix,
    RSRPRecord,
    build_angular_grid,
    build_measurement_matrix,
    dft_codebook,
)
from radiofield.errors import TrainingDivergedError
from radiofield.field import FieldArch, FieldParams, init_params
from radiofield.pointcloud import FRAME_BS, PointCloud, VoxelSpec, voxelize
from radiofield.render import RenderConfig
from radiofield.training import (
    Adam,
    TrainConfig,
    TrainingSet,
    env_loss,
    fit,
    history_to_csv,
    load_checkpoint,
    radio_loss,
    train_step,
)

TOY_ARCH = FieldArch(enc_order_pos=3, enc_order_density=2, width=16,
                     n_atten_layers=4, n_rad_layers=3, skip_layer=3, sh_degree=1)


def toy_training_set(n_dirs=16, n_grids=3, seed=0):
    rng = np.random.default_rng(seed)
    angular = build_angular_grid(4, n_dirs // 4)
    cfg = ArrayConfig(2, 2)
    mm = build_measurement_matrix(cfg, angular, dft_codebook(cfg, 4))
    spec = VoxelSpec(np.full(3, -4.0), np.full(3, 0.5), (16, 16, 16))
    pts = rng.uniform(-3.5, 3.5, (200, 3))
    density = voxelize(PointCloud(pts, FRAME_BS), spec)
    positions = {i: rng.uniform(-2, 2, 3) for i in range(n_grids)}
    x_true = rng.random((n_grids, angular.n_angles)) * (rng.random((n_grids, angular.n_angles)) < 0.1)
    records = [RSRPRecord(i, mm.phi @ x_true[i], "base") for i in range(n_grids)]
    depth_targets = np.where(rng.random(angular.n_angles) < 0.7,
                             rng.uniform(0.5, 3.5, angular.n_angles), np.nan)
    return TrainingSet(records, positions, {"base": mm}, density,
                       angular.directions, depth_targets, 4.0)


class TestRadioLoss:
    def setup_method(self):
        rng = np.random.default_rng(1)
        self.phi = MeasurementMatrix(np.abs(rng.standard_normal((6, 20))))
        self.x = rng.random(20)
        self.y = self.phi.phi @ self.x

    def test_exact_fit_zero(self):
        value, _ = radio_loss(self.phi, self.y, self.x, lambda1=0.0)
        assert value == pytest.approx(0.0, abs=1e-18)

    def test_zero_estimate(self):
        value, _ = radio_loss(self.phi, self.y, np.zeros(20), lambda1=0.0)
        assert value == pytest.approx(float(self.y @ self.y))

    def test_l1_term(self):
        v0, _ = radio_loss(self.phi, self.y, self.x, lambda1=0.0)
        v1, _ = radio_loss(self.phi, self.y, self.x, lambda1=2.0)
        assert v1 - v0 == pytest.approx(2.0 * np.sum(self.x))

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(2)
        x_hat = rng.random(20)
        _, grad = radio_loss(self.phi, self.y, x_hat, lambda1=0.3)
        h = 1e-7
        for i in rng.choice(20, 8, replace=False):
            xp, xm = x_hat.copy(), x_hat.copy()
            xp[i] += h
            xm[i] -= h
            vp, _ = radio_loss(self.phi, self.y, xp, lambda1=0.3)
            vm, _ = radio_loss(self.phi, self.y, xm, lambda1=0.3)
            fd = (vp - vm) / (2 * h)
            assert fd == pytest.approx(grad[i], rel=1e-6, abs=1e-8)


class TestEnvLoss:
    def test_exact_match_zero(self):
        z = np.array([1.0, 2.0, 3.0])
        value, grad = env_loss(z, z.copy(), np.ones(3, dtype=bool))
        assert value == 0.0
        assert np.all(grad == 0.0)

    def test_single_ray_arithmetic(self):
        value, grad = env_loss(np.array([3.0]), np.array([1.0]), np.array([True]))
        assert value == pytest.approx(4.0)
        assert grad[0] == pytest.approx(-4.0)  # 2 (zhat - z)

    def test_empty_mask(self):
        value, grad = env_loss(np.array([3.0, 1.0]), np.array([0.0, 0.0]),
                               np.zeros(2, dtype=bool))
        assert value == 0.0
        assert np.all(grad == 0.0)


class TestTrainingSetValidation:
    def test_missing_position_rejected(self):
        ts = toy_training_set()
        with pytest.raises(ValueError, match="position"):
            TrainingSet(ts.records + [RSRPRecord(99, ts.records[0].y, "base")],
                        ts.grid_positions, ts.matrices, ts.density,
                        ts.directions, ts.depth_targets, ts.t_max)

    def test_unknown_tag_rejected(self):
        ts = toy_training_set()
        with pytest.raises(ValueError, match="tag"):
            TrainingSet([RSRPRecord(0, ts.records[0].y, "rotated")],
                        ts.grid_positions, ts.matrices, ts.density,
                        ts.directions, ts.depth_targets, ts.t_max)


class TestTrainStep:
    def make(self, **over):
        kwargs = dict(steps=3, batch_grids=2, n_sub_rays=0, train_knots=9,
                      seed=5, arch=TOY_ARCH)
        kwargs.update(over)
        cfg = TrainConfig(**kwargs)
        ts = toy_training_set()
        params = init_params(cfg.arch, cfg.seed)
        return cfg, ts, params

    def test_breakdown_sums_and_nonnegative(self):
        cfg, ts, params = self.make()
        adam = Adam(params.size)
        loss = train_step(params, adam, ts, cfg, 0)
        assert loss.radio_fit >= 0 and loss.sparsity >= 0 and loss.env >= 0
        assert loss.total == pytest.approx(loss.radio_fit + loss.sparsity + loss.env,
                                           abs=1e-12)

    def test_sm_mode_env_exactly_zero(self):
        cfg, ts, params = self.make(sm_mode=True, lambda2=0.7)
        adam = Adam(params.size)
        loss = train_step(params, adam, ts, cfg, 0)
        assert loss.env == 0.0

    def test_sm_mode_matches_lambda2_zero(self):
        cfg_a, ts, params_a = self.make(sm_mode=True, lambda2=0.7)
        cfg_b = TrainConfig(steps=3, batch_grids=2, n_sub_rays=0, train_knots=9,
                            seed=5, arch=TOY_ARCH, lambda2=0.0)
        params_b = init_params(cfg_b.arch, cfg_b.seed)
        _, hist_a = fit(ts, cfg_a, params=params_a)
        _, hist_b = fit(ts, cfg_b, params=params_b)
        for a, b in zip(hist_a, hist_b):
            assert a.total == b.total
        assert np.array_equal(params_a.theta, params_b.theta)

    def test_bitwise_deterministic_runs(self):
        cfg, ts, _ = self.make()
        p1, h1 = fit(ts, cfg)
        p2, h2 = fit(ts, cfg)
        assert np.array_equal(p1.theta, p2.theta)
        assert [x.total for x in h1] == [x.total for x in h2]

    def test_diverged_step_reported(self):
        cfg, ts, params = self.make()
        params.theta[:] = np.inf
        with pytest.raises(TrainingDivergedError) as err:
            train_step(params, Adam(params.size), ts, cfg, 7)
        assert err.value.step == 7

    def test_subsampled_rays_still_descend(self):
        cfg, ts, params = self.make(n_sub_rays=8)
        adam = Adam(params.size)
        first = train_step(params, adam, ts, cfg, 0)
        assert np.isfinite(first.total)


class TestFit:
    def test_history_length_one(self):
        cfg = TrainConfig(steps=1, batch_grids=1, n_sub_rays=0, train_knots=9,
                          seed=2, arch=TOY_ARCH)
        _, history = fit(toy_training_set(), cfg)
        assert len(history) == 1

    def test_toy_loss_drops_90_percent(self):
        cfg = TrainConfig(steps=500, batch_grids=1, n_sub_rays=0, train_knots=9,
                          seed=3, arch=TOY_ARCH, learning_rate=2e-3, lr_final=2e-4)
        ts = toy_training_set(n_grids=1)
        _, history = fit(ts, cfg)
        assert all(np.isfinite(h.total) for h in history)
        assert history[-1].total <= 0.1 * history[0].total

    def test_resume_equivalence(self, tmp_path):
        cfg = TrainConfig(steps=6, batch_grids=2, n_sub_rays=0, train_knots=9,
                          seed=4, arch=TOY_ARCH, checkpoint_every=3)
        ts = toy_training_set()
        params_full, hist_full = fit(ts, cfg, checkpoint_dir=tmp_path)
        params_resume, adam, next_step = load_checkpoint(
            tmp_path / "step_000003.ckpt", expect_arch=TOY_ARCH
        )
        assert next_step == 3
        params_done, hist_tail = fit(ts, cfg, params=params_resume, adam=adam,
                                     start_step=next_step)
        assert hist_tail[0].total == hist_full[3].total
        assert np.array_equal(params_done.theta, params_full.theta)

    def test_depth_supervision_improves_depth_mse(self):
        ts = toy_training_set(seed=9)
        mask = ~np.isnan(ts.depth_targets)

        def final_depth_mse(sm_mode):
            cfg = TrainConfig(steps=250, batch_grids=2, n_sub_rays=0, train_knots=9,
                              seed=6, arch=TOY_ARCH, sm_mode=sm_mode,
                              learning_rate=2e-3, lr_final=5e-4, lambda2=1.0)
            params, _ = fit(ts, cfg)
            from radiofield.render import make_sampling, render_grids

            sampling = make_sampling(ts.t_max, 9)
            rcfg = RenderConfig(scene_scale=ts.t_max)
            _, _, depths, _ = render_grids(
                params, ts.density, ts.directions,
                np.stack([ts.grid_positions[0]]), sampling, rcfg,
            )
            err = depths[mask] - ts.depth_targets[mask]
            return float(np.mean(err**2))

        assert final_depth_mse(False) < final_depth_mse(True)

    def test_history_csv_schema(self):
        cfg = TrainConfig(steps=2, batch_grids=1, n_sub_rays=0, train_knots=9,
                          seed=2, arch=TOY_ARCH)
        _, history = fit(toy_training_set(), cfg)
        text = history_to_csv(history)
        lines = text.strip().splitlines()
        assert lines[0] == "step,radio_fit,sparsity,env,total"
        assert len(lines) == 3


class TestEndToEndGradient:
    def test_full_loss_gradient_finite_difference(self):
        # 2 rays x 4 segments, random 32-parameter subset, rel error < 1e-3
        ts = toy_training_set()
        ts = TrainingSet(ts.records[:2], ts.grid_positions, ts.matrices, ts.density,
                         ts.directions[:2], ts.depth_targets[:2], ts.t_max)
        cfg = TrainConfig(steps=1, batch_grids=2, n_sub_rays=0, train_knots=5,
                          seed=8, arch=TOY_ARCH, lambda1=0.05, lambda2=0.8)
        params = init_params(TOY_ARCH, seed=44)
        rcfg = RenderConfig(scene_scale=ts.t_max)

        from radiofield.render import make_sampling, render_backward, render_grids

        sampling = make_sampling(ts.t_max, cfg.train_knots)
        p_grids = np.stack([ts.grid_positions[r.grid_id] for r in ts.records])

        def full_loss(theta):
            p = FieldParams(TOY_ARCH, theta)
            aps, _, depths, _ = render_grids(p, ts.density, ts.directions, p_grids,
                                             sampling, rcfg)
            total = 0.0
            for b, rec in enumerate(ts.records):
                phi_cols = ts.matrices["base"].phi[:, :2]
                resid = rec.y - phi_cols @ aps[b]
                total += float(resid @ resid) + cfg.lambda1 * float(np.sum(aps[b]))
            mask = ~np.isnan(ts.depth_targets)
            value, _ = env_loss(np.where(mask, ts.depth_targets, 0.0), depths, mask)
            return total + cfg.lambda2 * value

        aps, gains, depths, cache = render_grids(params, ts.density, ts.directions,
                                                 p_grids, sampling, rcfg, retain=True)
        d_aps = np.empty_like(aps)
        for b, rec in enumerate(ts.records):
            phi_cols = ts.matrices["base"].phi[:, :2]
            resid = rec.y - phi_cols @ aps[b]
            d_aps[b] = -2.0 * (phi_cols.T @ resid) + cfg.lambda1
        mask = ~np.isnan(ts.depth_targets)
        _, env_grad = env_loss(np.where(mask, ts.depth_targets, 0.0), depths, mask)
        grad = render_backward(params, cache, d_aps, cfg.lambda2 * env_grad)

        rng = np.random.default_rng(12)
        idx = rng.choice(params.size, size=32, replace=False)
        h = 1e-4
        worst = 0.0
        for i in idx:
            tp, tm = params.theta.copy(), params.theta.copy()
            tp[i] += h
            tm[i] -= h
            fd = (full_loss(tp) - full_loss(tm)) / (2 * h)
            scale = max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, abs(fd - grad[i]) / scale)
        assert worst < 1e-3, f"worst relative error {worst:.2e}"
