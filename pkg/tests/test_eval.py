from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftlab import adapters as A
from shiftlab.adapters import AdapterKind
from shiftlab.backbone import Backbone
from shiftlab.datagen import render_real, render_synthetic, rotate_view, tile, to_unit
from shiftlab.errors import ContractError
from shiftlab.eval import (
    CSV_COLUMNS,
    FeatureEmbedder,
    MetricsReport,
    box_iou,
    control_adherence,
    cross_view_consistency,
    domain_probe,
    fit_logistic,
    frechet_distance,
    grid_views,
    iou,
    kernel_distance,
    logistic_accuracy,
    psnr,
    read_csv,
    ssim,
    write_csv,
)

from .conftest import TINY, grid_batch, jitter


def real_views(n, side=16, seed=0):
    return np.stack([render_real(i % 8, seed + i, side).image[:, :side, :side] for i in range(n)])


def test_embedder_is_fixed_and_shaped():
    v = real_views(8)
    a, b = FeatureEmbedder(3)(v), FeatureEmbedder(3)(v)
    assert a.shape == (8, 64)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, FeatureEmbedder(4)(v))


def test_grid_views_order():
    g = np.stack([tile([np.full((3, 2, 2), k) for k in range(4)])] * 2)
    v = grid_views(g)
    assert v.shape == (8, 3, 2, 2)
    assert [int(x[0, 0, 0]) for x in v] == [0, 1, 2, 3] * 2


def test_fid_identical_sets_is_zero():
    f = FeatureEmbedder()(real_views(200))
    assert abs(frechet_distance(f, f)) < 1e-6


def test_fid_gaussians_closed_form():
    rng = np.random.default_rng(0)
    d = np.array([2.0, -1.0, 0.5, 0.0])
    a = rng.normal(size=(1000, 4))
    b = rng.normal(size=(1000, 4)) + d
    assert frechet_distance(a, b) == pytest.approx(float(d @ d), rel=0.05)


def test_fid_needs_enough_samples_and_is_not_affine_invariant():
    rng = np.random.default_rng(1)
    with pytest.raises(ContractError):
        frechet_distance(rng.normal(size=(4, 4)), rng.normal(size=(10, 4)))
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(300, 3)) + 1.0
    m = np.array([[2.0, 0.3, 0.0], [0.0, 1.0, 0.0], [0.1, 0.0, 0.5]])
    assert frechet_distance(a @ m, b @ m) != pytest.approx(frechet_distance(a, b), rel=1e-3)


def test_kid_identical_multisets():
    f = FeatureEmbedder()(real_views(500))
    assert abs(kernel_distance(f, f)) < 1e-3


def test_kid_constant_sets_closed_form():
    dim, c = 4, 0.5
    x, y = np.zeros((10, dim)), np.full((12, dim), c)
    kyy = (c * c * dim / dim + 1) ** 3
    expected = 1.0 + kyy - 2.0 * 1.0
    assert kernel_distance(x, y) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_kid_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 5)), rng.normal(size=(30, 5)) * 1.3
    assert kernel_distance(a, b) == kernel_distance(b, a)


def test_iou_hand_cases():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert iou(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0] = True
    assert iou(m, other) == 0.0
    assert box_iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == 1 / 3
    a, b = np.zeros((1, 4), bool), np.zeros((1, 4), bool)
    a[0, :2], b[0, 1:3] = True, True
    assert iou(a, b) == 1 / 3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_iou_bounds(seed):
    rng = np.random.default_rng(seed)
    v = iou(rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.5)
    assert 0.0 <= v <= 1.0


def test_control_adherence_on_ground_truth():
    s = render_synthetic(2, 9, 16)
    assert control_adherence(s.image, s.control)["iou"] == 1.0
    blank = np.ones_like(s.image)
    assert control_adherence(blank, s.control)["iou"] == 0.0


def test_cross_view_consistency_cases():
    s = render_synthetic(4, 3, 16)
    res = cross_view_consistency(s.image)
    assert res["psnr"] == 60.0 and res["ssim"] == pytest.approx(1.0)
    noisy = s.image.copy()
    noisy[:, 16:, 16:] = np.random.default_rng(0).random((3, 16, 16))
    views = [s.image[:, :16, :16], s.image[:, :16, 16:], s.image[:, 16:, :16],
             np.random.default_rng(0).random((3, 16, 16))]
    g = tile(views)
    from shiftlab.eval import silhouette_of
    ref = rotate_view(views[0], 3)
    fg = silhouette_of(ref) | silhouette_of(views[3])
    assert psnr(ref, views[3], mask=fg) < 12.0
    assert cross_view_consistency(g)["psnr"] < res["psnr"]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_ssim_symmetric_and_psnr_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 10, 10)), rng.random((3, 10, 10))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    noise = rng.standard_normal(a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_logistic_probe_separates_and_fails_gracefully():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 1, (100, 3)), rng.normal(2, 1, (100, 3))])
    y = np.repeat([0, 1], 100)
    w = fit_logistic(x[::2], y[::2])
    assert logistic_accuracy(w, x[1::2], y[1::2]) > 0.95


def probe_inputs(n=64, seed=0):
    x, _ = grid_batch(TINY, n, seed=seed)
    rng = np.random.default_rng(seed)
    return x, rng.integers(0, 8, n), rng.integers(0, 1000, n)


def test_domain_probe_zeroed_shifters_is_chance():
    model = jitter(Backbone(TINY, seed=1))
    A.attach(model, AdapterKind.SHIFTER, np.random.default_rng(0), rank=4)
    A.zero_shifters(model)
    x, ids, t = probe_inputs()
    assert domain_probe(model, x, ids, t) == 0.5


def test_domain_probe_detects_shift_and_shuffled_labels_do_not():
    model = jitter(Backbone(TINY, seed=1))
    rng = np.random.default_rng(0)
    A.attach(model, AdapterKind.SHIFTER, rng, rank=4)
    for s in A.shifters(model):
        s.w_left.data[...] = rng.normal(0, 0.5, s.w_left.shape)
        s.w_right.data[...] = rng.normal(0, 0.5, s.w_right.shape)
        s.e_syn.data[...] = rng.normal(0, 1.0, s.e_syn.shape)
        s.e_real.data[...] = rng.normal(0, 1.0, s.e_real.shape)
    x, ids, t = probe_inputs()
    assert domain_probe(model, x, ids, t) >= 0.95
    assert abs(domain_probe(model, x, ids, t, shuffle_labels=True) - 0.5) <= 0.25


def test_report_json_and_csv(tmp_path):
    r = MetricsReport("ckpt/a.rz3d", 1.5, 0.01, 2.0, -0.001, 20.0, 0.8, 0.9, 0.97)
    assert '"fid_toy_B": 1.5' in r.to_json()
    write_csv(tmp_path / "m.csv", [r])
    rows = read_csv(tmp_path / "m.csv")
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert rows[0]["checkpoint"] == "ckpt/a.rz3d" and float(rows[0]["kid_toy_I"]) == -0.001
    with pytest.raises(ContractError):
        MetricsReport("x", float("nan"), 0, 0, 0, 0, 0, 0)
