import numpy as np
import pytest

from advseg.cloud import class_histogram
from advseg.scenes import (SceneSpec, shape_family_cloud, source_domain_spec,
                           synth_scene, target_domain_spec)


def test_determinism():
    spec = source_domain_spec(3, num_points=3000)
    a = synth_scene(spec)
    b = synth_scene(source_domain_spec(3, num_points=3000))
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.labels, b.labels)


def test_class_frequencies_within_tolerance():
    freqs = np.array([0.6, 0.3, 0.08, 0.02])
    spec = SceneSpec(frequencies=freqs, num_points=20000, seed=1)
    cloud = synth_scene(spec)
    stats = class_histogram(cloud.labels, 4)
    for y in range(4):
        expected = freqs[y] * 20000
        if expected >= 50:
            assert abs(stats.counts[y] - expected) / expected <= 0.2


def test_single_class_spec():
    spec = SceneSpec(frequencies=np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
                     num_points=500, seed=2)
    cloud = synth_scene(spec)
    assert (cloud.labels == 1).all()


def test_total_budget_exact():
    spec = source_domain_spec(5, num_points=7777)
    assert len(synth_scene(spec)) == 7777


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        SceneSpec(num_points=0, seed=0).validate()
    with pytest.raises(ValueError):
        SceneSpec(frequencies=np.array([0.5, 0.6]), num_points=10, seed=0).validate()
    with pytest.raises(ValueError):
        SceneSpec(frequencies=np.array([-0.1, 1.1]), num_points=10, seed=0).validate()


def test_scene_is_finite_and_in_extent():
    cloud = synth_scene(source_domain_spec(9, num_points=5000))
    assert np.isfinite(cloud.points).all()
    radius = np.linalg.norm(cloud.points[:, :2], axis=1)
    assert radius.max() < 60.0
    assert cloud.intensity.min() >= 0.0 and cloud.intensity.max() <= 1.0


def test_target_domain_differs_from_source():
    src = synth_scene(source_domain_spec(1, num_points=8000))
    tgt = synth_scene(target_domain_spec(1, num_points=8000))
    fs = class_histogram(src.labels, 8).frequencies
    ft = class_histogram(tgt.labels, 8).frequencies
    assert np.abs(fs - ft).max() > 0.02


def test_shape_family_kinds_and_determinism():
    kinds = {shape_family_cloud(s).points.shape for s in range(5)}
    assert kinds == {(512, 3)}
    a, b = shape_family_cloud(11), shape_family_cloud(11)
    assert np.array_equal(a.points, b.points)
    spread = [np.linalg.norm(shape_family_cloud(s).points, axis=1).max()
              for s in range(10)]
    assert max(spread) < 2.5
