import math

import numpy as np
import pytest

import segguide as sg


def test_parameter_counts():
    assert sg.network_parameter_count() == 16_863_687
    assert sg.instantiated_parameter_count(8) == sg.network_parameter_count(8)
    assert sg.attention_gate_parameter_count() == 32 * 16 * 27 + 16 + 2 * 16 + 16 * 3 + 3


def test_closed_form_losses():
    rng = np.random.default_rng(0)
    target = rng.integers(0, 4, size=(1, 6, 6, 6))
    assert sg.cross_entropy_loss(np.zeros((1, 4, 6, 6, 6)), target) == pytest.approx(math.log(4), rel=1e-12)
    assert sg.attention_loss(np.zeros((1, 3, 6, 6, 6)), target) == pytest.approx(math.log(2), rel=1e-12)


def test_dice_loss_matches_numpy():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 4, 5, 5, 5))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    target = rng.integers(0, 4, size=(2, 5, 5, 5))
    onehot = np.stack([target == c for c in range(4)], axis=1)
    inter = (probs * onehot).sum(axis=(0, 2, 3, 4))[1:]
    den = probs.sum(axis=(0, 2, 3, 4))[1:] + onehot.sum(axis=(0, 2, 3, 4))[1:]
    want = 1 - np.mean((2 * inter + 1e-5) / (den + 1e-5))
    assert sg.dice_loss(probs, target) == pytest.approx(want, rel=1e-10)


def test_metrics():
    p = np.zeros((4, 4, 4), bool)
    g = np.zeros((4, 4, 4), bool)
    p[0, 0, :] = True
    g[0, 0, :2] = True
    assert sg.dsc(p, g) == pytest.approx((4 + 1e-5) / (6 + 1e-5))
    assert sg.hd95(p, p) == 0.0
    assert math.isinf(sg.hd95(p, np.zeros_like(p)))
    assert sg.percentile([1.0, 2.0, 3.0, 4.0], 0.5) == pytest.approx(2.5)


def test_phantom_and_case_metrics():
    s = sg.generate_phantom([32, 32, 32], 0.0, 3)
    assert s["image"].shape == (4, 32, 32, 32)
    assert set(np.unique(s["labels"])) <= {0, 1, 2, 3}
    m = sg.evaluate_case(s["labels"], s["labels"])
    for region in ("ET", "TC", "WT"):
        assert m[region]["dice"] == pytest.approx(1.0)
        assert m[region]["hd95_mm"] == 0.0


def test_cohort_is_deterministic():
    a = sg.generate_phantom_cohort(2, [16, 16, 16], 0.1, 7)
    b = sg.generate_phantom_cohort(2, [16, 16, 16], 0.1, 7)
    assert [s["subject_id"] for s in a] == ["phantom_000", "phantom_001"]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x["image"], y["image"])
        np.testing.assert_array_equal(x["labels"], y["labels"])


def test_split_and_schedule():
    ids = [f"BraTS2021_{i:05d}" for i in range(1251)]
    split = sg.split_ids(ids, 42)
    counts = {k: list(split.values()).count(k) for k in ("train", "val", "test")}
    assert counts == {"train": 875, "val": 125, "test": 251}
    assert split == sg.split_ids(list(reversed(ids)), 42)
    assert sg.cosine_lr(0) == pytest.approx(1e-4)
    assert sg.cosine_lr(50) == pytest.approx(1e-6)


def test_validation_errors():
    with pytest.raises(ValueError):
        sg.cross_entropy_loss(np.zeros((1, 4, 2, 2, 2)), np.zeros((1, 3, 2, 2), dtype=np.int64))
    with pytest.raises(RuntimeError, match="checkpoint not found"):
        sg.Model("/nonexistent/best.ckpt")


def test_model_predict_roundtrip(tmp_path):
    ckpt = tmp_path / "init.ckpt"
    sg.init_checkpoint(ckpt, base_channels=2, seed=1)
    model = sg.Model(ckpt)
    assert model.epoch == 0
    assert model.num_parameters == sg.network_parameter_count(2)
    s = sg.generate_phantom([32, 32, 32], 0.0, 5)
    labels, attention = model.predict(s["image"], s["brain_mask"], patch=[32, 32, 32])
    assert labels.shape == (32, 32, 32)
    assert attention.shape == (3, 32, 32, 32)
    assert set(np.unique(labels)) <= {0, 1, 2, 3}
    # Zero-initialised gate head: every attention value is sigmoid(0).
    assert np.allclose(attention, 0.5)
