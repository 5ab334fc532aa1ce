import json

import numpy as np
import pytest

import hmdr


def test_huber_branches():
    assert hmdr.huber(0.5, 0.0, 1.0) == pytest.approx(0.125)
    assert hmdr.huber(3.0, 0.0, 1.0) == pytest.approx(2.5)


def test_total_loss_all_ones():
    assert hmdr.total_loss([1.0] * 6, [1, 2, 10, 1, 1, 1]) == 16.0


def test_dense_lm_loss_zero_for_identical():
    p = np.random.default_rng(0).normal(size=(20, 3))
    assert hmdr.dense_lm_loss(p, p) == 0.0


def test_mesh_metrics_identical_are_zero():
    p = np.random.default_rng(1).normal(size=(50, 3))
    assert hmdr.chamfer(p, p) == 0.0
    assert hmdr.rms_error(p, p) == 0.0
    assert hmdr.mean_hausdorff(p, p) == 0.0


def test_image_metrics():
    x = np.random.default_rng(2).uniform(0, 0.9, size=(2, 16, 16, 3))
    assert hmdr.ssim(x, x) == 1.0
    assert hmdr.psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)


def test_bad_shape_raises():
    with pytest.raises(ValueError):
        hmdr.chamfer(np.zeros((4, 2)), np.zeros((4, 3)))


def test_config_round_trip():
    c = hmdr.desk_config()
    hmdr.validate_config(c)
    c["stage1_weights"]["adv"] = 1.0
    with pytest.raises(ValueError):
        hmdr.validate_config(c)


def test_metric_columns():
    assert hmdr.metric_columns() == [
        "FID", "MSE", "LPIPS", "SSIM", "PSNR",
        "Average Chamfer Distance", "Average RMS Error", "Average Hausdorff Distance",
    ]
    assert hmdr.landmark_configs() == ["dense216", "standard68", "focus20", "minimal10"]


def test_train_infer_evaluate(tmp_path):
    data = tmp_path / "data"
    hmdr.prepare(data, clips=1, frames=2, size=32, seed=3)
    c = hmdr.desk_config()
    c.update(frames=2, size=32, stage1_epochs=1, stage2_epochs=1)
    c["geomreg_pretrain"]["iterations"] = 2
    manifest = hmdr.train(c, data, tmp_path / "run")
    assert manifest["stage1_iterations"] == 1
    assert manifest["stage2_iterations"] == 1
    ckpt = manifest["checkpoints"]["stage2"]

    frames, meshes = hmdr.infer_clip(ckpt, data, 0)
    assert frames.shape == (2, 32, 32, 3)
    assert len(meshes) == 2 and meshes[0].shape[1] == 3

    hmdr.infer(ckpt, data, tmp_path / "pred")
    report = hmdr.evaluate(tmp_path / "pred", data, ckpt)
    assert set(report) == set(hmdr.metric_columns())
    assert all(np.isfinite(v) for v in report.values())
