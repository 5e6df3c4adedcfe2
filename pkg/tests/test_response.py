import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrpost.errors import FormatError, SizeError, UndefinedMetricError
from corrpost.response import (PATCH, CropMode, MetricScores, ResponsePatch, crop, load_patch,
                               make_patch, metric_scores, normalize01, pce, peak_height,
                               peak_location, read_metrics_csv, save_patch, write_metrics_csv)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
maps = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=finite)
nonneg_maps = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                     elements=st.floats(0, 1e3))
patches = arrays(np.float64, (PATCH, PATCH), elements=finite)


def test_peak_height_examples():
    d = np.zeros((8, 8))
    d[2, 5] = 1
    assert peak_height(d) == 1.0
    assert peak_height(np.full((4, 4), 0.3)) == 0.3
    r = np.random.default_rng(0).random((16, 16))
    assert peak_height(r) == max(r.ravel().tolist())


def test_peak_location_breaks_ties_lexicographically():
    r = np.zeros((6, 6))
    r[4, 1] = r[2, 5] = r[2, 3] = 1
    assert peak_location(r) == (2, 3)


def test_pce_examples():
    d = np.zeros((8, 8))
    d[1, 1] = 3
    assert pce(d) == 1.0
    assert pce(np.full((8, 8), 2.0)) == pytest.approx(1 / 64)
    r = np.random.default_rng(1).random((64, 64))
    assert pce(r) == pytest.approx(r.max() ** 2 / np.sum(r ** 2), rel=1e-6)
    with pytest.raises(UndefinedMetricError):
        pce(np.zeros((4, 4)))


def test_pce_survives_extreme_scales():
    r = np.random.default_rng(2).random((16, 16))
    assert pce(r * 1e-200) == pytest.approx(pce(r), rel=1e-9)
    assert pce(r * 1e200) == pytest.approx(pce(r), rel=1e-9)


@given(nonneg_maps.filter(lambda r: r.max() > 0), st.floats(1e-3, 1e3))
def test_pce_scale_invariant_and_bounded(r, a):
    p = pce(r)
    assert 0 < p <= 1 + 1e-12
    assert pce(a * r) == pytest.approx(p, rel=1e-9)


@given(maps, st.floats(1e-3, 1e3))
def test_peak_height_is_positively_homogeneous(r, a):
    assert peak_height(a * r) == pytest.approx(a * peak_height(r), rel=1e-12, abs=1e-300)


def test_crop_center_examples():
    r = np.random.default_rng(3).random((32, 32))
    np.testing.assert_array_equal(crop(r, CropMode.CENTER), r)
    big = np.arange(256 * 256, dtype=float).reshape(256, 256)
    c = crop(big, "center")
    assert c[0, 0] == big[112, 112] and c[-1, -1] == big[143, 143]


def test_crop_peak_wraps_around():
    r = np.zeros((64, 64))
    r[0, 0] = 1
    r[63, 63] = 0.5
    r[1, 2] = 0.25
    c = crop(r, CropMode.PEAK)
    assert c[16, 16] == 1
    assert c[15, 15] == 0.5
    assert c[17, 18] == 0.25
    assert c.sum() == 1.75


def test_crop_rejects_small_maps():
    with pytest.raises(SizeError):
        crop(np.zeros((16, 64)))


def test_normalize_examples():
    p = np.full((PATCH, PATCH), 3.0)
    p[0, 0], p[0, 1] = 2.0, 4.0
    n = normalize01(p)
    assert (n[0, 0], n[0, 1], n[5, 5]) == (0.0, 1.0, 0.5)
    assert not normalize01(np.full((PATCH, PATCH), 7.0)).any()


@given(patches)
def test_normalize_hits_exact_bounds(p):
    n = normalize01(p)
    if p.max() > p.min():
        assert n.min() == 0.0 and n.max() == 1.0
    else:
        assert not n.any()


spread_patches = patches.filter(lambda p: p.max() - p.min() > 1e-3)


@given(spread_patches, st.floats(1e-2, 1e2), st.floats(-100, 100))
def test_normalize_affine_invariance(p, a, b):
    np.testing.assert_allclose(normalize01(a * p + b), normalize01(p), atol=1e-6)


@given(arrays(np.float64, (48, 48), elements=st.floats(0, 10)), st.sampled_from(list(CropMode)))
def test_make_patch_is_valid(r, mode):
    p = make_patch(r, mode)
    assert p.data.shape == (PATCH, PATCH)
    assert p.data.min() >= 0 and p.data.max() <= 1
    assert p.source_resolution == 48 and p.crop_mode is mode


def test_crop_mode_parse():
    assert CropMode.parse("peak") is CropMode.PEAK
    assert CropMode.parse(0) is CropMode.CENTER
    with pytest.raises(KeyError):
        CropMode.parse("middle")


def test_patch_file_round_trip(tmp_path):
    data = normalize01(np.random.default_rng(4).random((PATCH, PATCH)))
    path = tmp_path / "p.pt32"
    save_patch(path, ResponsePatch(data, 128, CropMode.PEAK))
    q = load_patch(path)
    assert q.source_resolution == 128 and q.crop_mode is CropMode.PEAK
    np.testing.assert_array_equal(q.data, data.astype(np.float32))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_patch(path)
    with pytest.raises(SizeError):
        save_patch(path, ResponsePatch(np.zeros((8, 8)), 8))


def test_metrics_csv_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    rows = []
    for i in range(5):
        r = rng.random((32, 32))
        rows.append((f"s{i}", f"{i % 2}@32", i % 2, metric_scores(r)))
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    back = read_metrics_csv(path)
    for (sid, set_id, label, m), rec in zip(rows, back):
        assert rec["sample_id"] == sid and rec["set_id"] == set_id and rec["label"] == label
        assert rec["peak"] == m.peak_height and rec["pce"] == m.pce
        assert (rec["peak_row"], rec["peak_col"]) == m.peak_location
    assert isinstance(rows[0][3], MetricScores)
