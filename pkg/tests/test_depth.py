import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ereformer.depth import (ALPHA, compute_metrics, decode_depth, encode_depth, gradient_matching_loss,
                             normalized_to_log, read_pfm, scale_invariant_loss, valid_mask, write_pfm)
from ereformer.gradcheck import grad_check
from ereformer.tensor import Tensor


def test_codec_endpoints():
    assert decode_depth(1.0) == 80.0
    assert decode_depth(0.0, alpha=math.log(40)) == pytest.approx(2.0, rel=1e-12)
    v = np.linspace(0.01, 0.99, 50)
    np.testing.assert_allclose(encode_depth(decode_depth(v)), v, atol=1e-12)
    assert np.all(np.diff(decode_depth(v)) > 0)


def test_codec_errors():
    with pytest.raises(ValueError):
        decode_depth(1.5)
    with pytest.raises(ValueError):
        decode_depth(0.5, alpha=0)
    with pytest.raises(ValueError):
        encode_depth(-1.0)


def test_normalized_to_log_matches_decode(f64):
    v = np.array([0.1, 0.5, 0.9])
    np.testing.assert_allclose(normalized_to_log(Tensor(v)).data, np.log(decode_depth(v)), atol=1e-12)


def test_silog_loss_examples(f64):
    gt = np.log(np.array([[2.0, 7.0]]))
    mask = np.ones((1, 2), bool)
    assert scale_invariant_loss(Tensor(gt), gt, mask).item() == 0.0
    assert scale_invariant_loss(Tensor(gt + np.log(3.0)), gt, mask, lam=1.0).item() == pytest.approx(0, abs=1e-15)
    pred = gt + np.array([[math.log(2), 0.0]])
    val = scale_invariant_loss(Tensor(pred), gt, mask, lam=0.5).item()
    assert val == pytest.approx(0.375 * math.log(2) ** 2, rel=1e-12)
    assert val == pytest.approx(0.18017, abs=1e-5)


def test_silog_loss_masking_equals_removal(f64, rng):
    gt = rng.normal(size=(4, 5))
    pred = rng.normal(size=(4, 5))
    mask = rng.random((4, 5)) > 0.3
    full = scale_invariant_loss(Tensor(pred), gt, mask).item()
    flat = scale_invariant_loss(Tensor(pred[mask][None]), gt[mask][None], np.ones((1, mask.sum()), bool)).item()
    assert full == pytest.approx(flat, rel=1e-12)
    perm = rng.permutation(mask.sum())
    shuffled = scale_invariant_loss(Tensor(pred[mask][perm][None]), gt[mask][perm][None],
                                    np.ones((1, mask.sum()), bool)).item()
    assert shuffled == pytest.approx(full, rel=1e-12)


def test_loss_errors(f64):
    with pytest.raises(ValueError):
        scale_invariant_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        gradient_matching_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), bool))


def test_loss_gradients(f64, rng):
    gt = rng.normal(size=(2, 8, 8))
    mask = rng.random((2, 8, 8)) > 0.2
    x = Tensor(rng.normal(size=(2, 8, 8)))
    assert grad_check(lambda: scale_invariant_loss(x, gt, mask), x) <= 1e-5
    assert grad_check(lambda: gradient_matching_loss(x, gt, mask, scales=3), x) <= 1e-5


def test_gradient_matching_examples(f64):
    mask = np.ones((2, 2), bool)
    zero = np.zeros((2, 2))
    assert gradient_matching_loss(Tensor(np.full((2, 2), 3.0)), zero, mask, 1).item() == 0
    g = np.arange(16.0).reshape(4, 4)
    assert gradient_matching_loss(Tensor(g), g, np.ones((4, 4), bool)).item() == 0
    d = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert gradient_matching_loss(Tensor(d), zero, mask, 1).item() == 1.0


def test_metrics_perfect():
    gt = np.array([[5.0, 15.0], [25.0, 40.0]])
    r = compute_metrics(gt, gt)
    assert (r.abs_rel, r.rmse_log, r.silog) == (0, 0, 0)
    assert r.delta1 == r.delta2 == r.delta3 == 1
    assert r.err_10m == r.err_20m == r.err_30m == 0


def test_metrics_uniform_overprediction():
    gt = np.array([3.0, 7.0, 12.0, 50.0])
    r = compute_metrics(2 * gt, gt)
    assert r.abs_rel == pytest.approx(1.0, abs=1e-9)
    assert r.delta1 == 0 and r.delta3 == 0
    assert r.rmse_log == pytest.approx(math.log(2), abs=1e-9)
    assert r.silog == pytest.approx(0, abs=1e-9)


def test_metrics_cutoff_buckets():
    r = compute_metrics(np.array([6.0, 15.0, 20.0]), np.array([5.0, 15.0, 25.0]))
    assert r.err_10m == pytest.approx(1.0, abs=1e-9)
    assert r.err_20m == pytest.approx(0.5, abs=1e-9)
    assert r.err_30m == pytest.approx(2.0, abs=1e-9)
    assert (r.n_10m, r.n_20m, r.n_30m) == (1, 2, 3)


def test_metrics_absent_bucket_and_empty_mask():
    r = compute_metrics(np.array([50.0]), np.array([45.0]))
    assert r.err_10m is None and r.err_30m is None
    assert "err_10m=absent" in r.kv_lines()
    with pytest.raises(ValueError):
        compute_metrics(np.array([1.0]), np.array([1.0]), np.array([False]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_metric_properties(seed, c):
    r = np.random.default_rng(seed)
    gt = r.uniform(0.5, 79, 64)
    pred = r.uniform(0.5, 79, 64)
    m = compute_metrics(pred, gt)
    assert m.delta1 <= m.delta2 <= m.delta3
    assert m.abs_rel >= 0 and m.rmse_log >= 0 and m.silog >= -1e-15
    assert abs(compute_metrics(c * pred, gt).silog - m.silog) <= 1e-12
    s = compute_metrics(gt, pred)
    assert (s.delta1, s.delta2, s.delta3) == (m.delta1, m.delta2, m.delta3)


def test_valid_mask_rule():
    gt = np.array([np.nan, 0.05, 0.2, 80.0, 80.5, np.inf])
    assert valid_mask(gt).tolist() == [False, False, True, True, False, False]


def test_pfm_roundtrip(tmp_path, rng):
    img = rng.uniform(1, 80, (6, 9)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n9 6\n-1.0\n")
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
    # bottom row is stored first
    assert np.frombuffer(raw[len(b"Pf\n9 6\n-1.0\n"):][:4], "<f4")[0] == img[-1, 0]
    write_pfm(tmp_path / "b.pfm", read_pfm(tmp_path / "a.pfm"))
    assert (tmp_path / "b.pfm").read_bytes() == raw
