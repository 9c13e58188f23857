"""Synthetic dataset generation, directory round-trips, and schedule building."""

import numpy as np
import pytest

from rdi_fscil.core import ScheduleError, validate_schedule
from rdi_fscil.data import (
    ManifestAdapter,
    NuisanceSharing,
    SyntheticSpec,
    _boxes_overlap,
    _placement_grid,
    build_schedule,
    generate_synthetic,
    load_dataset,
    nuisance_carriers,
    save_dataset,
)


def small_spec(**kw):
    defaults = dict(image_size=16, class_count=6, samples_per_class=8,
                    signal_patch_size=8, nuisance_patch_size=4, seed=0)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


class TestSpecValidation:
    def test_patch_too_large(self):
        with pytest.raises(ValueError):
            small_spec(signal_patch_size=20).validate()

    def test_bad_orientations(self):
        with pytest.raises(ValueError):
            small_spec(signal_orientations=3).validate()

    def test_bad_test_fraction(self):
        with pytest.raises(ValueError):
            small_spec(test_fraction=0.0).validate()

    def test_no_test_samples(self):
        with pytest.raises(ValueError):
            small_spec(samples_per_class=2, test_fraction=0.1).validate()

    def test_negative_noise(self):
        with pytest.raises(ValueError):
            small_spec(noise_sigma=-0.1).validate()


class TestPlacementGrid:
    def test_exact_fit_single_anchor(self):
        assert _placement_grid(16, 16) == [0]

    def test_anchors_within_bounds(self):
        for image, patch in [(32, 16), (32, 8), (48, 24), (17, 5)]:
            grid = _placement_grid(image, patch)
            assert grid[0] == 0
            assert all(0 <= a <= image - patch for a in grid)
            assert grid[-1] == image - patch  # both extremes reachable

    def test_overlap_predicate(self):
        assert _boxes_overlap((0, 0, 4, 4), (2, 2, 6, 6))
        assert not _boxes_overlap((0, 0, 4, 4), (4, 0, 8, 4))  # edge contact


class TestGenerateSynthetic:
    def test_deterministic_in_seed(self):
        a = generate_synthetic(small_spec(seed=5))
        b = generate_synthetic(small_spec(seed=5))
        for c in range(6):
            for split in ("train", "test"):
                for sid in a.sample_ids(c, split):
                    np.testing.assert_array_equal(a.load_image(sid), b.load_image(sid))

    def test_different_seeds_differ(self):
        a = generate_synthetic(small_spec(seed=1))
        b = generate_synthetic(small_spec(seed=2))
        sid = a.sample_ids(0, "train")[0]
        assert not np.array_equal(a.load_image(sid), b.load_image(sid))

    def test_counts_and_splits(self):
        ds = generate_synthetic(small_spec())
        # 8 samples, test_fraction 0.25 -> 6 train / 2 test per class
        for c in range(6):
            assert len(ds.sample_ids(c, "train")) == 6
            assert len(ds.sample_ids(c, "test")) == 2

    def test_images_in_unit_range(self):
        ds = generate_synthetic(small_spec())
        sid = ds.sample_ids(0, "train")[0]
        img = ds.load_image(sid)
        assert img.dtype == np.float32
        assert img.shape == (16, 16)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_regions_within_bounds_and_disjoint(self):
        ds = generate_synthetic(small_spec())
        for c in range(6):
            for sid in ds.sample_ids(c, "train") + ds.sample_ids(c, "test"):
                reg = ds.regions_of(sid)
                sy, sx, sy1, sx1 = reg.signal
                assert 0 <= sy < sy1 <= 16 and 0 <= sx < sx1 <= 16
                assert (sy1 - sy, sx1 - sx) == (8, 8)
                if reg.nuisance is not None:
                    ny, nx, ny1, nx1 = reg.nuisance
                    assert 0 <= ny < ny1 <= 16 and 0 <= nx < nx1 <= 16
                    assert (ny1 - ny, nx1 - nx) == (4, 4)
                    assert not _boxes_overlap(reg.signal, reg.nuisance)

    def test_shared_mode_carriers_are_even_classes(self):
        spec = small_spec()
        assert nuisance_carriers(spec) == [0, 2, 4]
        ds = generate_synthetic(spec)
        for c in range(6):
            has = [ds.regions_of(sid).nuisance is not None
                   for sid in ds.sample_ids(c, "train") + ds.sample_ids(c, "test")]
            if c % 2 == 0:
                assert all(has)
            else:
                assert not any(has)

    def test_per_sample_mode_mixes_within_every_class(self):
        spec = small_spec(nuisance_sharing=NuisanceSharing.PER_CLASS_SUBSET,
                          samples_per_class=40, seed=3)
        ds = generate_synthetic(spec)
        for c in range(6):
            has = [ds.regions_of(sid).nuisance is not None
                   for sid in ds.sample_ids(c, "train") + ds.sample_ids(c, "test")]
            # with 40 coin flips both outcomes should appear
            assert any(has) and not all(has)

    def test_shared_nuisance_texture_identical_across_classes(self):
        spec = small_spec(noise_sigma=0.0, background_amplitude=0.0)
        ds = generate_synthetic(spec)
        patches = []
        for c in (0, 2):
            sid = ds.sample_ids(c, "train")[0]
            nb = ds.regions_of(sid).nuisance
            patches.append(ds.load_image(sid)[nb[0]:nb[2], nb[1]:nb[3]])
        np.testing.assert_array_equal(patches[0], patches[1])

    def test_signal_patch_matches_class_texture(self):
        # Noise-free images of one class must agree exactly inside their
        # signal boxes.
        spec = small_spec(noise_sigma=0.0, background_amplitude=0.0)
        ds = generate_synthetic(spec)
        sids = ds.sample_ids(1, "train")[:2]
        crops = []
        for sid in sids:
            sb = ds.regions_of(sid).signal
            crops.append(ds.load_image(sid)[sb[0]:sb[2], sb[1]:sb[3]])
        np.testing.assert_array_equal(crops[0], crops[1])


class TestDirectoryRoundTrip:
    def test_save_load_preserves_structure(self, tmp_path):
        ds = generate_synthetic(small_spec(noise_sigma=0.0))
        save_dataset(ds, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        assert loaded.class_ids == ds.class_ids
        for c in range(6):
            assert sorted(loaded.sample_ids(c, "train")) == sorted(ds.sample_ids(c, "train"))
            assert sorted(loaded.sample_ids(c, "test")) == sorted(ds.sample_ids(c, "test"))
        sid = ds.sample_ids(0, "train")[0]
        # PNG quantizes to 8 bits
        np.testing.assert_allclose(loaded.load_image(sid), ds.load_image(sid),
                                   atol=1.0 / 255.0)
        assert loaded.regions_of(sid) == ds.regions_of(sid)
        assert loaded.label_of(sid) == 0


class TestBuildSchedule:
    def test_structure(self):
        ds = generate_synthetic(small_spec())
        sched = build_schedule(ds, base_count=2, sessions=2, way=2, shot=1, seed=0)
        assert sched.base_classes == (0, 1)
        assert sched.num_sessions == 3
        assert sched.cumulative_class_counts() == [2, 4, 6]
        assert validate_schedule(sched) == []

    def test_shot_manifests(self):
        ds = generate_synthetic(small_spec())
        sched = build_schedule(ds, base_count=2, sessions=2, way=2, shot=3, seed=1)
        for t in (1, 2):
            for c, ids in sched.train_manifests[t].items():
                assert len(ids) == 3
                assert len(set(ids)) == 3

    def test_deterministic_in_seed(self):
        ds = generate_synthetic(small_spec())
        a = build_schedule(ds, 2, 2, 2, 1, seed=7)
        b = build_schedule(ds, 2, 2, 2, 1, seed=7)
        assert a == b

    def test_insufficient_classes(self):
        ds = generate_synthetic(small_spec())
        with pytest.raises(ScheduleError):
            build_schedule(ds, base_count=4, sessions=2, way=2, shot=1)

    def test_insufficient_shots(self):
        ds = generate_synthetic(small_spec())
        with pytest.raises(ScheduleError):
            build_schedule(ds, base_count=2, sessions=2, way=2, shot=50)

    def test_manifest_adapter_schedule_only(self):
        ad = ManifestAdapter("protocol", class_count=100, train_per_class=5,
                             test_per_class=2)
        sched = build_schedule(ad, base_count=60, sessions=8, way=5, shot=5, seed=0)
        assert sched.cumulative_class_counts() == list(range(60, 101, 5))
        assert validate_schedule(sched) == []
