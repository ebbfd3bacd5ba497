"""Synthetic corpus: determinism, anomaly statistics, episode structure."""

import numpy as np
import pytest

from fsad.errors import CapacityError, ConfigError
from fsad.synthdata import (DatasetSpec, generate_dataset, manifest_text,
                            render_sample, sample_episode)


def small_spec(**kw):
    base = dict(seed=3, n_normal=20, n_abnormal=20)
    base.update(kw)
    return DatasetSpec(**base)


def test_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(n_normal=0)
    with pytest.raises(ConfigError):
        DatasetSpec(blob_radius_max=16.0)
    with pytest.raises(ConfigError):
        DatasetSpec(freq_min=5.0, freq_max=4.0)


def test_determinism():
    a = generate_dataset(small_spec())
    b = generate_dataset(small_spec())
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and x.label == y.label


def test_images_in_unit_range_and_shape():
    data = generate_dataset(small_spec())
    for s in data:
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_degenerate_control_erases_anomaly():
    spec = small_spec(noise_std=0.0, contrast_shift=0.0, anomaly_freq_factor=1.0)
    for i in range(10):
        planted = render_sample(spec, 1, i, with_anomaly=True)
        clean = render_sample(spec, 1, i, with_anomaly=False)
        assert np.array_equal(planted.image, clean.image)


def test_default_anomaly_changes_pixels():
    spec = small_spec()
    planted = render_sample(spec, 1, 0, with_anomaly=True)
    clean = render_sample(spec, 1, 0, with_anomaly=False)
    assert not np.array_equal(planted.image, clean.image)


def test_disk_mean_shift_matches_contrast():
    spec = DatasetSpec(seed=11, n_normal=5, n_abnormal=60)
    data = generate_dataset(spec)
    diffs = []
    for s in data:
        if s.label != 1:
            continue
        ys = np.arange(spec.height, dtype=float)[:, None]
        xs = np.arange(spec.width, dtype=float)[None, :]
        mask = (ys - s.center[0]) ** 2 + (xs - s.center[1]) ** 2 <= s.radius ** 2
        diffs.append(s.image[mask].mean() - s.image[~mask].mean())
    assert abs(np.mean(diffs) - spec.contrast_shift) < 0.05


def test_episode_structure_and_determinism():
    data = generate_dataset(small_spec(n_normal=30, n_abnormal=30))
    ep = sample_episode(data, k=4, seed=9, query_per_class=10)
    assert len(ep.support) == 8 and ep.k == 4
    assert sum(s.label for s in ep.support) == 4
    assert len(ep.query) == 20
    assert sum(s.label for s in ep.query) == 10
    assert set(ep.support_ids).isdisjoint(ep.query_ids)
    assert [ep.support[i].label for i in ep.idx_norm] == [0] * 4
    assert [ep.support[i].label for i in ep.idx_abn] == [1] * 4
    ep2 = sample_episode(data, k=4, seed=9, query_per_class=10)
    assert ep.support_ids == ep2.support_ids and ep.query_ids == ep2.query_ids


def test_episode_invariants_many_seeds():
    data = generate_dataset(small_spec(n_normal=25, n_abnormal=25))
    for seed in range(100):
        ep = sample_episode(data, k=2, seed=seed, query_per_class=5)
        labels = [s.label for s in ep.support]
        assert labels.count(0) == 2 and labels.count(1) == 2
        assert set(ep.support_ids).isdisjoint(ep.query_ids)
        assert sorted(ep.idx_norm + ep.idx_abn) == list(range(4))


def test_episode_capacity_error():
    data = generate_dataset(small_spec(n_normal=5, n_abnormal=5))
    with pytest.raises(CapacityError):
        sample_episode(data, k=4, seed=0, query_per_class=5)


def test_manifest_stable():
    spec = small_spec()
    assert manifest_text(spec) == manifest_text(small_spec())
    assert "seed=3" in manifest_text(spec)
