import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypseg.models.networks import build_network, describe
from hypseg.preprocessing import fit_band_stats, sample_norm
from hypseg.tensor import Tensor, no_grad
from hypseg.tiling import (
    StitchAccumulator,
    Window,
    axis_starts,
    predict_mask,
    predict_scene,
    predict_tiled,
    stitch,
    tile_plan,
    window_weight,
)

from oracles import stitch_naive


def test_axis_starts_known_sizes():
    assert axis_starts(224) == [0]
    assert axis_starts(300) == [0, 76]
    assert axis_starts(448) == [0, 112, 224]
    assert axis_starts(336) == [0, 112]
    with pytest.raises(ValueError, match="smaller"):
        axis_starts(100)
    with pytest.raises(ValueError, match="stride"):
        axis_starts(300, 10, 11)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 1.0), st.integers(0, 30), st.integers(0, 30))
def test_plan_covers_every_sounding_and_stays_inside(patch, frac, dh, dw):
    stride = max(1, int(frac * patch))
    H, W = patch + dh, patch + dw
    plan = tile_plan(H, W, patch, stride)
    cov = plan.coverage()
    assert (cov >= 1).all()
    for w in plan.windows:
        assert 0 <= w.top and w.top + w.height <= H and 0 <= w.left and w.left + w.width <= W
    assert len(set(plan.windows)) == len(plan.windows)


def _random_probs(rng, shape):
    z = rng.standard_normal(shape)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(0, 9), st.integers(0, 9), st.integers(2, 4),
       st.integers(0, 2**31))
def test_stitch_matches_naive_mean(patch, stride, dh, dw, K, seed):
    stride = min(stride, patch)
    rng = np.random.default_rng(seed)
    H, W = patch + dh, patch + dw
    plan = tile_plan(H, W, patch, stride)
    probs = [_random_probs(rng, (patch, patch, K)) for _ in plan.windows]
    got = stitch(probs, plan)
    wins = [(w.top, w.left, w.height, w.width) for w in plan.windows]
    np.testing.assert_allclose(got, stitch_naive(H, W, K, wins, probs), atol=1e-12)
    np.testing.assert_allclose(got.sum(-1), 1.0, atol=1e-12)


def test_single_window_soundings_pass_through_bit_exact():
    plan = tile_plan(6, 4, 4, 2)
    probs = [np.full((4, 4, 2), [0.3, 0.7]) for _ in plan.windows]
    got = stitch(probs, plan)
    single = plan.coverage() == 1
    assert single.any()
    assert (got[single] == np.array([0.3, 0.7])).all()


def test_stitch_rejects_bad_inputs():
    plan = tile_plan(4, 4, 4, 2)
    with pytest.raises(ValueError, match="window outputs"):
        stitch([], plan)
    acc = StitchAccumulator(4, 4, 2)
    with pytest.raises(ValueError, match="does not match"):
        acc.add(Window(0, 0, 4, 4), np.ones((3, 4, 2)))
    with pytest.raises(ValueError, match="not covered"):
        acc.result()


def test_taper_weights_are_positive_and_peak_in_centre():
    w = window_weight(5, 7, "taper")
    assert (w > 0).all() and w[2, 3] == w.max()
    with pytest.raises(ValueError):
        window_weight(3, 3, "gauss")


def test_argmax_ties_go_to_smallest_index():
    p = np.array([[[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]])
    np.testing.assert_array_equal(predict_mask(p), [[0, 1]])


def _unet(C=5, K=3, seed=0):
    return build_network(describe("unet", C, K), rng=seed).eval()


def test_single_patch_equals_direct_forward():
    net = _unet()
    cube = np.random.default_rng(0).standard_normal((16, 16, 5))
    tiled = predict_tiled(net, cube, patch=16, stride=8)
    with no_grad():
        direct = net(Tensor(sample_norm(cube[None]))).data[0]
    assert np.array_equal(tiled, direct)


def test_window_processing_order_does_not_matter():
    net = _unet(seed=1)
    cube = np.random.default_rng(1).standard_normal((24, 20, 5))
    base = predict_tiled(net, cube, patch=12, stride=6, batch_size=3)
    n = len(tile_plan(24, 20, 12, 6).windows)
    for seed in range(3):
        order = np.random.default_rng(seed).permutation(n)
        assert np.array_equal(predict_tiled(net, cube, patch=12, stride=6, batch_size=3, order=order), base)
    with pytest.raises(ValueError, match="permutation"):
        predict_tiled(net, cube, patch=12, stride=6, order=[0, 0])


def test_small_scene_is_padded_and_cropped_back():
    net = _unet()
    cube = np.random.default_rng(2).standard_normal((10, 7, 5))
    p = predict_tiled(net, cube, patch=12, stride=6)
    assert p.shape == (10, 7, 3)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_predict_scene_logs_window_count(caplog):
    net = build_network(describe("mlp", 4, 2), rng=0)
    cube = np.random.default_rng(3).uniform(1, 2, (448, 448, 4))
    stats = fit_band_stats([cube])
    with caplog.at_level("INFO", logger="hypseg.tiling"):
        probs, mask = predict_scene(net, cube, stats)
    assert "9 windows" in caplog.text
    assert probs.shape == (448, 448, 2) and mask.dtype == np.uint8
    with pytest.raises(ValueError, match="stats"):
        predict_scene(net, cube)
