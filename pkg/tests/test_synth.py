import numpy as np
import pytest

from dualrc.errors import ConfigError, GenerationError
from dualrc.evaluation import Homography
from dualrc.synth import bilinear_sample, box_blur, random_homography, sample_annotations, synth


def test_identity_scene_is_bitwise_equal():
    sc = synth(0, 32, "identity", 16)
    assert np.array_equal(sc.image_a, sc.image_b)
    assert np.array_equal(sc.annotations.src, sc.annotations.dst)


def test_translation_scene():
    sc = synth(1, 64, "translation", translation=(5, 0))
    assert sc.annotations.count == 128
    assert np.allclose(sc.annotations.dst - sc.annotations.src, [5, 0])
    a, b = sc.image_a[0], sc.image_b[0]
    assert np.allclose(b[:, 5:], a[:, :-5])


@pytest.mark.parametrize("kind", ["translation", "affine", "projective"])
def test_annotations_follow_h(kind):
    sc = synth(2, 64, kind, 32)
    assert np.allclose(sc.h.apply(sc.annotations.src), sc.annotations.dst, atol=1e-6)
    for pts in (sc.annotations.src, sc.annotations.dst):
        assert pts.min() >= 0 and pts.max() <= 63


def test_seeded_scenes_repeat_bitwise():
    a, b = synth(7, 32, "projective", 8), synth(7, 32, "projective", 8)
    assert np.array_equal(a.image_b, b.image_b) and np.array_equal(a.h.H, b.h.H)
    assert not np.array_equal(a.image_a, synth(8, 32, "projective", 8).image_a)


def test_texture_range_and_smoothness():
    img = synth(0, 32, "identity", 4).image_a[0]
    assert img.min() == 0.0 and img.max() == 1.0
    assert np.abs(np.diff(img, axis=1)).mean() < 0.2


def test_helpers():
    img = np.arange(12.0).reshape(3, 4)
    assert bilinear_sample(img, np.array([1.5]), np.array([1.0]))[0] == 5.5
    assert bilinear_sample(img, np.array([-5.0]), np.array([0.0]))[0] == 0.0
    assert box_blur(np.ones((5, 5))).tolist() == np.ones((5, 5)).tolist()
    h = random_homography(np.random.default_rng(0), "translation", 64, 64)
    assert np.array_equal(h.H[:2, :2], np.eye(2)) and np.abs(h.H[:2, 2]).max() <= 8


def test_errors():
    with pytest.raises(ConfigError):
        synth(0, 30)
    with pytest.raises(ConfigError):
        synth(0, 32, "swirl")
    with pytest.raises(ConfigError):
        synth(0, 32, "affine", translation=(1, 1))
    with pytest.raises(GenerationError):
        sample_annotations(np.random.default_rng(0), Homography.translation(100, 0), (32, 32), 4)
