import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from hypseg.preprocessing import (
    BandNormalizer,
    NanImputer,
    NormalizationStats,
    SampleNormalizer,
    apply_band_norm,
    center_crop,
    fit_band_stats,
    impute_nans,
    log_ratio,
    pad_reflect,
    pad_to_multiple,
    random_crop,
    sample_norm,
)


def test_impute_uses_spectrum_mean():
    cube = np.array([[[1.0, np.nan, 3.0], [4.0, 4.0, 4.0]]])
    out = impute_nans(cube)
    np.testing.assert_array_equal(out, [[[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]]])
    assert np.isnan(cube[0, 0, 1])  # input untouched


def test_impute_all_nan_sounding_names_it():
    cube = np.ones((2, 2, 3))
    cube[1, 0] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 0\)"):
        impute_nans(cube)


def test_band_stats_match_numpy_oracle(rng):
    cubes = [rng.gamma(2.0, size=(6, 5, 3)) for _ in range(3)]
    stats = fit_band_stats(cubes, fold=2)
    for c in range(3):
        band = np.concatenate([x[..., c].ravel() for x in cubes])
        lo, hi = np.percentile(band, 1), np.percentile(band, 99)
        clipped = np.clip(band, lo, hi)
        assert stats.clip_low[c] == pytest.approx(lo, abs=1e-12)
        assert stats.clip_high[c] == pytest.approx(hi, abs=1e-12)
        assert stats.mean[c] == pytest.approx(clipped.mean(), abs=1e-12)
        assert stats.std[c] == pytest.approx(clipped.std(), abs=1e-12)
    assert stats.fold == 2


def test_constant_band_is_degenerate_with_floored_std():
    cube = np.zeros((4, 4, 2))
    cube[..., 0] = 7.5
    cube[..., 1] = np.arange(16).reshape(4, 4)
    stats = fit_band_stats([cube])
    assert stats.clip_low[0] == stats.clip_high[0] == stats.mean[0] == 7.5
    assert stats.std[0] == 1e-8
    assert np.isfinite(apply_band_norm(cube, stats)).all()


def test_band_norm_clamps_then_standardises():
    stats = NormalizationStats([0.0], [10.0], [5.0], [2.0])
    out = apply_band_norm(np.array([[[-3.0], [5.0], [50.0]]]), stats)
    np.testing.assert_allclose(out.ravel(), [-2.5, 0.0, 2.5])


def test_band_norm_rejects_band_mismatch():
    stats = NormalizationStats([0.0], [1.0], [0.5], [1.0])
    with pytest.raises(ValueError, match="bands"):
        apply_band_norm(np.ones((2, 2, 3)), stats)


def test_stats_validation():
    with pytest.raises(ValueError):
        NormalizationStats([2.0], [1.0], [1.5], [1.0])
    with pytest.raises(ValueError):
        NormalizationStats([0.0], [1.0], [0.5], [0.0])


def test_stats_json_roundtrip_and_digest(tmp_path, validate):
    stats = fit_band_stats([np.random.default_rng(0).random((4, 4, 5))], fold=1)
    path = tmp_path / "stats.json"
    stats.save(path)
    back = NormalizationStats.load(path)
    np.testing.assert_array_equal(back.mean, stats.mean)
    assert back.digest() == stats.digest()
    import json

    validate(json.loads(path.read_text()), "stats")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(2, 5), st.integers(0, 2**31), st.floats(0.1, 100), st.floats(-50, 50))
def test_sample_norm_zero_mean_unit_std_and_affine_invariance(B, n, seed, scale, shift):
    x = np.random.default_rng(seed).standard_normal((B, n, n, 3))
    y = sample_norm(x)
    np.testing.assert_allclose(y.mean(axis=(1, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=(1, 2, 3)), 1, atol=1e-8)
    np.testing.assert_allclose(sample_norm(x * scale + shift), y, atol=1e-7)


def test_sample_norm_constant_sample_is_finite():
    assert np.isfinite(sample_norm(np.full((1, 2, 2, 2), 3.0))).all()


def test_center_crop_offsets():
    cube = np.arange(10 * 8).reshape(10, 8, 1)
    c, m = center_crop(cube, cube[..., 0], size=(5, 3))
    assert c.shape == (5, 3, 1)
    assert c[0, 0, 0] == cube[2, 2, 0]  # floor((10-5)/2), floor((8-3)/2)
    np.testing.assert_array_equal(m, c[..., 0])
    with pytest.raises(ValueError, match="smaller"):
        center_crop(cube, size=(11, 3))


def test_random_crop_is_seeded_and_aligned():
    cube = np.random.default_rng(0).random((12, 12, 2))
    mask = np.arange(144).reshape(12, 12)
    a = random_crop(cube, mask, (5, 5), 3)
    b = random_crop(cube, mask, (5, 5), 3)
    np.testing.assert_array_equal(a[0], b[0])
    r, c = divmod(int(a[1][0, 0]), 12)
    np.testing.assert_array_equal(a[0], cube[r:r + 5, c:c + 5])


def test_log_ratio_is_brightness_invariant(rng):
    x = rng.uniform(0.5, 2.0, size=(5, 7))
    np.testing.assert_allclose(log_ratio(3.7 * x), log_ratio(x), atol=1e-12)
    np.testing.assert_allclose(log_ratio(np.ones(4)), 0.0)


def test_pad_reflect_small_and_large():
    cube = np.arange(6.0).reshape(2, 3, 1)
    out = pad_reflect(cube, (4, 3))
    # pad as large as the input falls back to symmetric mirroring
    np.testing.assert_array_equal(out[..., 0], [[0, 1, 2], [3, 4, 5], [3, 4, 5], [0, 1, 2]])
    np.testing.assert_array_equal(pad_reflect(cube, (3, 3))[..., 0], [[0, 1, 2], [3, 4, 5], [0, 1, 2]])
    big = pad_reflect(cube, (9, 10))
    assert big.shape == (9, 10, 1)
    np.testing.assert_array_equal(big[:2, :3], cube)
    assert pad_to_multiple(np.ones((5, 6, 1)), 4).shape == (8, 8, 1)


def test_transformers_in_pipeline(rng):
    cubes = [rng.random((4, 4, 3)) for _ in range(2)]
    cubes[0][0, 0, 1] = np.nan
    pipe = make_pipeline(NanImputer(), BandNormalizer(fold=0), SampleNormalizer())
    out = pipe.fit(cubes).transform(cubes)
    assert len(out) == 2 and all(np.isfinite(o).all() for o in out)
    est = clone(BandNormalizer(fold=3))
    assert est.get_params() == {"fold": 3}
    stats = pipe.named_steps["bandnormalizer"].stats_
    np.testing.assert_array_equal(BandNormalizer.from_stats(stats).transform(cubes[1]),
                                  pipe.named_steps["bandnormalizer"].transform(cubes[1]))
