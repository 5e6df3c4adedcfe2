import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrpost.cfsynth import (FilterKind, TrainingSet, filter_digest, load_filter, save_filter,
                              synthesize_minace, synthesize_otmach)
from corrpost.errors import DegenerateFilterError, FormatError, InputError, ParameterError
from corrpost.imagefft import cross_correlate, fft2
from corrpost.response import pce


def random_images(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size)) for _ in range(n)]


def test_matched_filter_from_single_image():
    (x,) = random_images(1, 16)
    f = synthesize_otmach(TrainingSet([x]), 1.0, 0.0, 0.0)
    assert f.kind is FilterKind.OTMACH
    np.testing.assert_allclose(f.H, fft2(x), rtol=1e-12, atol=1e-12)


def test_inverse_filter_gives_delta_response():
    (x,) = random_images(1, 16, seed=1)
    f = synthesize_otmach(TrainingSet([x]), 0.0, 1.0, 0.0)
    np.testing.assert_allclose(f.H, fft2(x) / np.abs(fft2(x)) ** 2, rtol=1e-10)
    r = cross_correlate(x, f.H)
    assert r[0, 0] == pytest.approx(1.0, abs=1e-9)
    r[0, 0] = 0
    assert r.max() < 1e-9


def test_identical_images_with_similarity_term_only_are_degenerate():
    (x,) = random_images(1, 8)
    with pytest.raises(DegenerateFilterError):
        synthesize_otmach(TrainingSet([x, x.copy()]), 0.0, 0.0, 1.0)


@pytest.mark.parametrize("w", [(0, 0, 0), (-1, 1, 0), (np.nan, 1, 0), (1, np.inf, 0)])
def test_invalid_otmach_weights(w):
    with pytest.raises(ParameterError):
        synthesize_otmach(TrainingSet(random_images(1, 8)), *w)


def test_empty_or_ragged_training_set():
    with pytest.raises(InputError):
        TrainingSet([])
    with pytest.raises(InputError):
        TrainingSet([np.zeros((8, 8)), np.zeros((16, 16))])
    with pytest.raises(InputError):
        TrainingSet(random_images(2, 8), labels=[1.0])


def origin_responses(images, f):
    return np.array([cross_correlate(x, f.H)[0, 0] for x in images])


@pytest.mark.parametrize("n", [1, 3, 5])
def test_minace_origin_constraints(n):
    images = random_images(n, 32, seed=n)
    f = synthesize_minace(TrainingSet(images), noise_c=0.0 if n == 1 else None)
    assert f.kind is FilterKind.MINACE
    np.testing.assert_allclose(origin_responses(images, f), 1.0, atol=1e-4)


def test_minace_custom_constraint_values():
    images = random_images(3, 32, seed=7)
    u = [1.0, 0.0, 0.5]
    f = synthesize_minace(TrainingSet(images, labels=u), noise_c=1e-3)
    # the response is a magnitude, so compare against |u|
    np.testing.assert_allclose(origin_responses(images, f), np.abs(u), atol=1e-4)


def test_minace_duplicate_image_is_degenerate():
    (x,) = random_images(1, 16)
    with pytest.raises(DegenerateFilterError):
        synthesize_minace(TrainingSet([x, x.copy()]), noise_c=1.0)


def test_minace_negative_noise_floor():
    with pytest.raises(ParameterError):
        synthesize_minace(TrainingSet(random_images(1, 8)), noise_c=-1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 31), st.sampled_from([0.0, 1e-3, 1.0]))
def test_minace_constraints_property(n, seed, c):
    images = random_images(n, 16, seed=seed)
    f = synthesize_minace(TrainingSet(images), noise_c=c)
    np.testing.assert_allclose(origin_responses(images, f), 1.0, atol=1e-4)


def test_delta_peak_property():
    (x,) = random_images(1, 32, seed=11)
    f = synthesize_otmach(TrainingSet([x]), 0.0, 1.0, 0.0)
    assert pce(cross_correlate(x, f.H)) > 0.99


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_otmach_scaling(seed, k):
    images = random_images(2, 16, seed=seed)
    scene = np.random.default_rng(seed + 1).random((16, 16))
    f1 = synthesize_otmach(TrainingSet(images), 1.0, 0.0, 0.0)
    fk = synthesize_otmach(TrainingSet([k * x for x in images]), 1.0, 0.0, 0.0)
    np.testing.assert_allclose(fk.H, k * f1.H, rtol=1e-9, atol=1e-9 * k)
    r1 = cross_correlate(scene, f1.H)
    rk = cross_correlate(scene, fk.H)
    assert np.argmax(r1) == np.argmax(rk)


def test_synthesis_is_deterministic():
    images = random_images(3, 16, seed=3)
    a = synthesize_otmach(TrainingSet(images), 0.01, 1.0, 0.1)
    b = synthesize_otmach(TrainingSet([x.copy() for x in images]), 0.01, 1.0, 0.1)
    assert a.H.tobytes() == b.H.tobytes()
    c = synthesize_minace(TrainingSet(images))
    d = synthesize_minace(TrainingSet(images))
    assert c.H.tobytes() == d.H.tobytes()


def test_digest_identity_order_and_pixels():
    images = random_images(3, 8, seed=4)
    d = filter_digest(TrainingSet(images))
    assert len(d) == 32
    assert d == filter_digest(TrainingSet([x.copy() for x in images]))
    assert d != filter_digest(TrainingSet(images[::-1]))
    changed = [x.copy() for x in images]
    changed[1][3, 3] += 1e-9
    assert d != filter_digest(TrainingSet(changed))
    assert d != filter_digest(TrainingSet(images, labels=[1, 1, 0]))


def test_filter_file_round_trip(tmp_path):
    images = random_images(2, 16, seed=5)
    f = synthesize_otmach(TrainingSet(images), 0.01, 1.0, 0.1)
    path = tmp_path / "f.cflt"
    save_filter(path, f)
    assert path.stat().st_size == 4 + 2 + 1 + 4 + 4 + 32 + 32 + 8 * 16 * 16
    g = load_filter(path)
    assert g.kind is FilterKind.OTMACH
    assert (g.alpha, g.beta, g.gamma, g.noise_c) == (0.01, 1.0, 0.1, 0.0)
    assert g.training_digest == f.training_digest
    np.testing.assert_array_equal(g.H, f.H.astype(np.complex64))


def test_filter_file_rejects_corruption(tmp_path):
    f = synthesize_minace(TrainingSet(random_images(1, 8)))
    path = tmp_path / "f.cflt"
    save_filter(path, f)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_filter(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_filter(path)
