import math

import numpy as np
import pytest

import memreg


def test_generate_sample_shapes_and_determinism():
    img, lab = memreg.generate_sample("source", seed=7, index=3, image_size=32)
    assert img.shape == (3, 32, 32)
    assert img.dtype == np.float32
    assert lab.shape == (32, 32)
    assert lab.dtype == np.uint8
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert lab.max() < 5

    img2, lab2 = memreg.generate_sample("source", seed=7, index=3, image_size=32)
    assert np.array_equal(img, img2)
    assert np.array_equal(lab, lab2)

    # same geometry stream, different style
    timg, tlab = memreg.generate_sample("target", seed=7, index=3, image_size=32)
    assert np.array_equal(lab, tlab)
    assert not np.array_equal(img, timg)

    with pytest.raises(ValueError):
        memreg.generate_sample("purple", seed=1, index=0)


def test_model_forward_is_a_probability_map():
    img, _ = memreg.generate_sample("source", seed=1, index=0, image_size=32)
    model = memreg.Model(num_classes=5, seed=11)
    p_aux, p_primary = model.forward(img)
    assert p_aux.shape == (5, 32, 32)
    assert p_primary.shape == (5, 32, 32)
    for p in (p_aux, p_primary):
        sums = p.sum(axis=0)
        assert np.allclose(sums, 1.0, atol=1e-5)
        assert p.min() >= 0.0

    # inference is deterministic
    again = model.forward(img)
    assert np.array_equal(p_primary, again[1])

    fused = model.predict(img)
    assert fused.shape == (32, 32)
    assert np.array_equal(fused, memreg.fuse_labels(p_primary, p_aux))


def test_seg_ce_uniform_is_log_c():
    c, h, w = 4, 6, 6
    probs = np.full((c, h, w), 1.0 / c, dtype=np.float32)
    labels = np.random.default_rng(0).integers(0, c, size=(h, w)).astype(np.uint8)
    assert memreg.seg_ce(probs, labels) == pytest.approx(math.log(c), abs=1e-5)


def test_memory_reg_symmetric_kl_like_identities():
    h, w = 5, 5
    uniform = np.full((2, h, w), 0.5, dtype=np.float32)
    assert memreg.memory_reg(uniform, uniform) == pytest.approx(2.0 * math.log(2.0), abs=1e-5)

    # agreement on a peaked distribution costs less than disagreement
    peaked = np.zeros((2, h, w), dtype=np.float32)
    peaked[0] = 0.9
    peaked[1] = 0.1
    flipped = peaked[::-1].copy()
    assert memreg.memory_reg(peaked, peaked) < memreg.memory_reg(peaked, flipped)


def test_fuse_labels_matches_numpy_argmax():
    rng = np.random.default_rng(42)
    p_primary = rng.random((5, 8, 8), dtype=np.float32)
    p_aux = rng.random((5, 8, 8), dtype=np.float32)
    fused = memreg.fuse_labels(p_primary, p_aux)
    expect = np.argmax(p_primary + 0.5 * p_aux, axis=0).astype(np.uint8)
    assert np.array_equal(fused, expect)


def test_metric_helpers():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = a.copy()
    b[0, 0] = 1
    assert memreg.miou(a, a, num_classes=2) == pytest.approx(1.0)
    assert memreg.disagreement(a, b) == pytest.approx(1.0 / 16.0)


def test_poly_lr_endpoints():
    assert memreg.poly_lr(2e-4, 0, 100) == pytest.approx(2e-4)
    assert memreg.poly_lr(2e-4, 100, 100) == 0.0
    assert memreg.poly_lr(2e-4, 50, 100) < 2e-4
