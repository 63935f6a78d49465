import numpy as np
import pytest

from radiofield.arrays import (
    ArrayConfig,
    MeasurementMatrix,
    build_angular_grid,
    build_measurement_matrix,
    dft_codebook,
    rotate_measurement_matrix,
)
from radiofield.metrics import (
    EPS_RSRP,
    NoiseConfig,
    evaluate_subtasks,
    inject_noise,
    mae_db,
    mse_aps,
    perturb_nonzero,
    report_csv,
    report_text,
    Metrics,
    SubtaskResult,
)
from radiofield.scene import SceneConfig, build_dataset, generate_scene


@pytest.fixture(scope="module")
def tiny_dataset():
    scene = generate_scene(SceneConfig(extent=(10, 10, 4), n_boxes=2, n_grids=20,
                                       seed=3, bs_position=(0.4, 0.4, 2.0)))
    angular = build_angular_grid(6, 24)
    cfg = ArrayConfig(4, 4)
    mm = build_measurement_matrix(cfg, angular, dft_codebook(cfg, 8))
    mm_rot = rotate_measurement_matrix(mm, angular, angular.tilt_step_deg,
                                       angular.azimuth_step_deg)
    return build_dataset(scene, angular, mm, mm_rot, seed=3, points_per_m2=20.0,
                         n_depth_samples=48)


class TestMae:
    def test_exact_zero(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert mae_db(y, y.copy()) == 0.0

    def test_factor_two_is_3dB(self):
        rng = np.random.default_rng(1)
        y = rng.random((5, 8)) + 0.1
        assert mae_db(y, 2.0 * y) == pytest.approx(10.0 * np.log10(2.0), abs=1e-12)

    def test_zero_entries_floored_equal(self):
        y = np.array([[0.0, 1.0]])
        assert mae_db(y, y.copy()) == 0.0

    def test_shift_covariance(self):
        rng = np.random.default_rng(2)
        y = rng.random((4, 6)) + 0.2
        pred = y * rng.uniform(0.5, 2.0, size=y.shape)
        base = mae_db(y, pred)
        for c in (3.0, 0.25):
            shifted = mae_db(y, c * pred)
            assert shifted <= base + abs(10 * np.log10(c)) + 1e-12
        assert mae_db(y, 2.0 * y) == pytest.approx(10 * np.log10(2.0), abs=1e-12)

    def test_mse_aps_normalization(self):
        x = np.zeros((2, 4))
        x_hat = np.ones((2, 4))
        assert mse_aps(x, x_hat) == pytest.approx(1.0)


class TestEvaluate:
    def test_perfect_estimates_zero_error(self, tiny_dataset):
        d = tiny_dataset
        metrics = evaluate_subtasks(d.aps, d)
        for r in (metrics.subtask1, metrics.subtask2, metrics.subtask3):
            assert r.mae_db == pytest.approx(0.0, abs=1e-9)
            assert r.mse_aps == pytest.approx(0.0, abs=1e-18)

    def test_doubled_predictions(self, tiny_dataset):
        # wiring check: evaluate == manual composition of mae_db over subtask 1
        d = tiny_dataset
        metrics = evaluate_subtasks(2.0 * d.aps, d)
        manual = mae_db(d.rsrp_rot[d.explored],
                        (2.0 * d.aps[d.explored]) @ d.matrices["rotated"].phi.T)
        assert metrics.subtask1.mae_db == pytest.approx(manual, abs=1e-12)
        # on strictly positive rows the factor-two error is exactly 3.0103 dB
        pos = np.all(d.rsrp_rot[d.explored] > 0, axis=1)
        rows = d.rsrp_rot[d.explored][pos]
        assert pos.any()
        assert mae_db(rows, 2.0 * rows) == pytest.approx(10 * np.log10(2.0), abs=1e-9)

    def test_partition_exact(self, tiny_dataset):
        d = tiny_dataset
        both = np.concatenate([d.explored, d.unexplored])
        assert len(np.unique(both)) == d.scene.n_grids

    def test_wnomp_mode_not_applicable(self, tiny_dataset):
        d = tiny_dataset
        x_hat = {int(i): d.aps[i] for i in d.explored}
        metrics = evaluate_subtasks(x_hat, d, applicable=(1,))
        assert metrics.subtask2 is None and metrics.subtask3 is None
        assert metrics.subtask1.mae_db == pytest.approx(0.0, abs=1e-9)

    def test_missing_grids_listed(self, tiny_dataset):
        d = tiny_dataset
        x_hat = {int(d.explored[0]): d.aps[d.explored[0]]}
        with pytest.raises(ValueError, match="missing spectrum"):
            evaluate_subtasks(x_hat, d)


class TestNoise:
    def test_level_zero_bitwise(self):
        rng = np.random.default_rng(3)
        values = rng.random((50, 4))
        out = perturb_nonzero(values, 0.0, np.random.default_rng(1))
        assert np.array_equal(out, values)

    def test_seeded_determinism(self, tiny_dataset):
        cfg = NoiseConfig(level_db=3.0, seed=11)
        d1 = inject_noise(tiny_dataset, cfg)
        d2 = inject_noise(tiny_dataset, cfg)
        assert np.array_equal(d1.rsrp, d2.rsrp)
        assert np.array_equal(d1.matrices["base"].phi, d2.matrices["base"].phi)

    def test_zeros_stay_zero_and_nonnegative(self):
        values = np.array([0.0, 1.0, 0.0, 2.0])
        out = perturb_nonzero(values, 5.0, np.random.default_rng(2))
        assert out[0] == 0.0 and out[2] == 0.0
        assert np.all(out >= 0)

    def test_empirical_std_matches_level(self):
        rng = np.random.default_rng(4)
        values = np.ones(100_000)
        out = perturb_nonzero(values, 3.0, rng)
        ratio_db = 10.0 * np.log10(out / values)
        assert np.std(ratio_db) == pytest.approx(3.0, rel=0.02)

    def test_matrix_and_array_paths(self, tiny_dataset):
        cfg = NoiseConfig(level_db=2.0, seed=5)
        mm = tiny_dataset.matrices["base"]
        noisy_mm = inject_noise(mm, cfg)
        assert noisy_mm.phi.shape == mm.phi.shape
        assert np.all(noisy_mm.phi >= 0)
        arr = inject_noise(np.array([1.0, 0.0, 3.0]), cfg)
        assert arr[1] == 0.0

    def test_dataset_targets_subset(self, tiny_dataset):
        cfg = NoiseConfig(level_db=2.0, targets=("rsrp",), seed=6)
        noisy = inject_noise(tiny_dataset, cfg)
        assert np.array_equal(noisy.matrices["base"].phi,
                              tiny_dataset.matrices["base"].phi)
        assert not np.array_equal(noisy.rsrp, tiny_dataset.rsrp)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            NoiseConfig(targets=("phi", "wat"))


class TestReport:
    def make_metrics(self):
        full = Metrics(SubtaskResult(1.0, 0.5), SubtaskResult(2.0, 0.25),
                       SubtaskResult(3.0, 0.125))
        partial = Metrics(SubtaskResult(1.5, 99.0), None, None)
        return {"multimodal": full, "wnomp": partial}

    def test_csv_schema(self):
        text = report_csv(self.make_metrics())
        lines = text.strip().splitlines()
        assert lines[0].startswith("method,subtask1_mae_db")
        assert len(lines) == 3
        wnomp = [l for l in lines if l.startswith("wnomp")][0]
        assert ",--,--" in wnomp

    def test_text_alignment(self):
        text = report_text(self.make_metrics(), header="comparison")
        assert text.startswith("comparison\n")
        assert "multimodal" in text and "--" in text
