import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from fadm.agcn import MotionState
from fadm.metrics import (
    aed,
    akd,
    evaluate_frames,
    l1,
    providers,
    psnr,
    register_provider,
    ssim,
    unregister_provider,
)
from fadm.synth import SynthSpec, landmarks


def reference_ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                 data_range=1.0, channel_axis=-1)


def checkerboard(n=32, cell=4):
    y, x = np.mgrid[:n, :n]
    board = (((x // cell) + (y // cell)) % 2).astype(np.float64)
    return np.repeat(board[..., None], 3, axis=-1)


def rand_img(seed, shape=(32, 32, 3)):
    return np.random.default_rng(seed).random(shape)


def test_identity():
    a = rand_img(0)
    assert l1(a, a) == 0.0
    assert psnr(a, a) == 100.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_zeros_vs_ones():
    z, o = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    assert l1(z, o) == 1.0
    assert psnr(z, o) == 0.0


def test_psnr_cap_for_tiny_error():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[0, 0, 0] = 1e-9
    assert psnr(a, b) == 100.0


def test_checkerboard_vs_inverse_matches_reference():
    a = checkerboard()
    b = 1.0 - a
    got, ref = ssim(a, b), reference_ssim(a, b)
    assert abs(got - ref) <= 1e-4
    assert got < -0.9


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_reference_on_random_pairs(seed):
    a = rand_img(seed)
    b = np.clip(a + 0.2 * rand_img(seed + 100) - 0.1, 0, 1)
    assert abs(ssim(a, b) - reference_ssim(a, b)) <= 1e-4


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_shape_mismatch():
    for fn in (l1, psnr, ssim):
        with pytest.raises(ValueError):
            fn(np.zeros((16, 16, 3)), np.zeros((16, 15, 3)))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_psnr_against_brute_force_mse(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
    total = 0.0
    for v1, v2 in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (v1 - v2) ** 2
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (total / a.size)), rel=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_symmetry(seed):
    a, b = rand_img(seed, (16, 16, 3)), rand_img(seed + 1, (16, 16, 3))
    assert l1(a, b) == l1(b, a)
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    p, q = a[:5, 0, :2] * 64, b[:5, 0, :2] * 64
    assert akd(p, q) == akd(q, p)
    assert aed(a[0, 0], b[0, 0]) == aed(b[0, 0], a[0, 0])


def test_akd_345_and_identity():
    assert akd([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    pts = np.random.default_rng(0).random((10, 2))
    assert akd(pts, pts) == 0.0
    with pytest.raises(ValueError):
        akd(pts, pts[:9])


def test_aed():
    assert aed([0.0, 0.0], [3.0, 4.0]) == 5.0
    assert aed([[0.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0]]) == 0.0
    with pytest.raises(ValueError):
        aed([0.0, 0.0], [0.0])


@pytest.mark.parametrize("dx, dy", [(0.1, 0.0), (0.05, -0.08), (-0.03, 0.04)])
def test_akd_planted_translation(dx, dy):
    spec = SynthSpec()
    e = np.zeros(8)
    e[0] = 0.3
    a = landmarks(spec, MotionState(e, np.zeros(4)))
    b = landmarks(spec, MotionState(e, np.array([0.0, dx, dy, 0.0])))
    expected = math.hypot(dx, dy) * spec.resolution
    assert abs(akd(a, b) - expected) < 1.0


def test_akd_planted_rotation_about_centre():
    spec = SynthSpec()
    angle = 0.2
    zero = MotionState(np.zeros(8), np.zeros(4))
    a = landmarks(spec, zero)
    b = landmarks(spec, MotionState(np.zeros(8), np.array([angle, 0.0, 0.0, 0.0])))
    # rotating the anchors about the image centre moves each by 2 r sin(angle / 2)
    r = np.linalg.norm(a - (spec.resolution - 1) / 2, axis=1)
    assert abs(akd(a, b) - float(np.mean(2 * r * math.sin(angle / 2)))) < 1.0


def test_evaluate_frames_report_and_providers():
    preds = [rand_img(i, (16, 16, 3)) for i in range(3)]
    register_provider("mean_abs", lambda p, t: float(np.mean([np.abs(a - b).mean() for a, b in zip(p, t)])))
    try:
        assert "mean_abs" in providers()
        report, rows = evaluate_frames(preds, preds, landmark_fn=lambda i, f: np.zeros((2, 2)))
    finally:
        unregister_provider("mean_abs")
    assert report["l1"] == {"mean": 0.0, "std": 0.0, "n": 3}
    assert report["ssim"]["mean"] == pytest.approx(1.0)
    assert report["psnr"]["mean"] == 100.0
    assert report["akd"]["mean"] == 0.0
    assert report["mean_abs"]["mean"] == 0.0
    assert [r["index"] for r in rows] == [0, 1, 2]
    assert "mean_abs" not in providers()
    with pytest.raises(ValueError):
        register_provider("ssim", lambda p, t: 0.0)
    with pytest.raises(ValueError):
        evaluate_frames(preds, preds[:2])
