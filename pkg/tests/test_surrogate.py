"""Tests for patch tiling, transforms, patch sets, k-means, and the catalog."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reidlab import surrogate as sg
from reidlab.errors import ConfigError, ValidationError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _random_image(rng, h=32, w=16):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


class TestPatchGrid:
    def test_row_major_quadrants(self, rng):
        img = _random_image(rng, 8, 4)
        patches = sg.sample_patches(img, source_image=5)
        assert [p.grid_position for p in patches] == [0, 1, 2, 3]
        assert all(p.source_image == 5 for p in patches)
        np.testing.assert_array_equal(patches[0].pixels, img[:4, :2])
        np.testing.assert_array_equal(patches[1].pixels, img[:4, 2:])
        np.testing.assert_array_equal(patches[2].pixels, img[4:, :2])
        np.testing.assert_array_equal(patches[3].pixels, img[4:, 2:])

    def test_reassembly(self, rng):
        img = _random_image(rng)
        p = sg.sample_patches(img)
        top = np.concatenate([p[0].pixels, p[1].pixels], axis=1)
        bot = np.concatenate([p[2].pixels, p[3].pixels], axis=1)
        np.testing.assert_array_equal(np.concatenate([top, bot], axis=0), img)

    def test_odd_dims_rejected(self, rng):
        with pytest.raises(ConfigError):
            sg.sample_patches(rng.integers(0, 255, size=(7, 4, 3), dtype=np.uint8))


class TestTransforms:
    def test_identity_params_reproduce_input(self, rng):
        patch = sg.Patch(_random_image(rng, 16, 8), 0, 0)
        out = sg.apply_transform(patch, sg.TransformParams())
        np.testing.assert_array_equal(out.pixels, patch.pixels)

    def test_flip_twice_is_identity(self, rng):
        patch = sg.Patch(_random_image(rng, 16, 8), 0, 0)
        t = sg.TransformParams(flip=True)
        once = sg.apply_transform(patch, t)
        twice = sg.apply_transform(once, t)
        assert not np.array_equal(once.pixels, patch.pixels)
        np.testing.assert_array_equal(twice.pixels, patch.pixels)

    def test_out_of_range_scale_rejected(self, rng):
        patch = sg.Patch(_random_image(rng), 0, 0)
        with pytest.raises(ValidationError):
            sg.apply_transform(patch, sg.TransformParams(scale=2.0))

    def test_out_of_range_rotation_rejected(self, rng):
        patch = sg.Patch(_random_image(rng), 0, 0)
        with pytest.raises(ValidationError):
            sg.apply_transform(patch, sg.TransformParams(rotate_deg=45.0))

    def test_translation_moves_content(self):
        pix = np.zeros((16, 8, 3), dtype=np.uint8)
        pix[8, 4] = 255
        patch = sg.Patch(pix, 0, 0)
        out = sg.apply_transform(patch, sg.TransformParams(translate=(0.0, 0.125)))  # 2 px down
        assert out.pixels[10, 4, 0] == 255
        assert out.pixels[8, 4, 0] == 0

    def test_jitter_only_changes_values_not_geometry(self, rng):
        patch = sg.Patch(np.full((8, 4, 3), 100, dtype=np.uint8), 0, 0)
        t = sg.TransformParams(channel_gain=(1.1, 1.0, 0.9), channel_bias=(5.0, 0.0, -5.0))
        out = sg.apply_transform(patch, t)
        np.testing.assert_array_equal(out.pixels[..., 0], np.full((8, 4), 115))
        np.testing.assert_array_equal(out.pixels[..., 1], np.full((8, 4), 100))
        np.testing.assert_array_equal(out.pixels[..., 2], np.full((8, 4), 85))

    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_same_params_same_output(self, seed):
        prng = np.random.default_rng(seed)
        patch = sg.Patch(prng.integers(0, 256, size=(12, 6, 3), dtype=np.uint8), 0, 0)
        t = sg.random_transform(prng)
        a = sg.apply_transform(patch, t)
        b = sg.apply_transform(patch, t)
        np.testing.assert_array_equal(a.pixels, b.pixels)


class TestPatchSets:
    def test_k1_identity_mean_equals_seed(self, rng):
        patch = sg.Patch(_random_image(rng, 8, 4), 0, 0)
        ps = sg.PatchSet(patch, [sg.apply_transform(patch, sg.TransformParams())], None)
        mean = sg.rgb_mean_vector(ps.members)
        np.testing.assert_array_equal(mean, patch.pixels.astype(np.float64).reshape(-1))

    def test_build_is_deterministic(self, rng):
        patches = sg.sample_patches(_random_image(rng), source_image=3)
        a = sg.build_patch_sets(patches, transforms_per_patch=4, seed=11)
        b = sg.build_patch_sets(patches, transforms_per_patch=4, seed=11)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mean_vector, y.mean_vector)
        c = sg.build_patch_sets(patches, transforms_per_patch=4, seed=12)
        assert any(not np.array_equal(x.mean_vector, y.mean_vector) for x, y in zip(a, c))

    def test_member_count(self, rng):
        patches = sg.sample_patches(_random_image(rng))
        sets = sg.build_patch_sets(patches, transforms_per_patch=6, seed=0)
        assert all(len(ps.members) == 6 for ps in sets)


class TestKMeans:
    def test_wcss_non_increasing_random_instances(self, rng):
        for trial in range(20):
            pts = rng.normal(size=(rng.integers(8, 40), rng.integers(2, 6)))
            k = int(rng.integers(1, 6))
            k = min(k, len(pts))
            _, _, hist = sg.kmeans(pts, k, seed=trial)
            assert np.all(np.diff(hist) <= 1e-9), hist

    def test_two_gaussian_clouds_recovered(self, rng):
        a = rng.normal(loc=(0, 0), scale=0.5, size=(200, 2))
        b = rng.normal(loc=(10, 10), scale=0.5, size=(200, 2))
        pts = np.concatenate([a, b])
        labels, centroids, _ = sg.kmeans(pts, 2, seed=0)
        order = np.argsort(centroids[:, 0])
        err0 = np.linalg.norm(centroids[order[0]] - a.mean(axis=0))
        err1 = np.linalg.norm(centroids[order[1]] - b.mean(axis=0))
        # centroid error well under 0.1 sigma
        assert err0 < 0.05 and err1 < 0.05
        # and the split matches the generating clouds
        assert len(np.unique(labels[:200])) == 1 and len(np.unique(labels[200:])) == 1

    def test_k_larger_than_points_rejected(self, rng):
        with pytest.raises(ValidationError):
            sg.kmeans(rng.normal(size=(3, 2)), 4)

    def test_duplicate_points_fill_all_clusters(self):
        pts = np.ones((6, 2))
        labels, centroids, hist = sg.kmeans(pts, 3, seed=0)
        assert set(np.unique(labels)) == {0, 1, 2}
        assert hist[-1] == 0.0

    def test_nearest_class_tie_breaks_low_index(self):
        cents = np.array([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
        assert sg.nearest_class(np.array([0.0, 0.0]), cents) == 0

    def test_purity_oracle(self):
        labels = np.array([0, 0, 0, 1, 1, 1])
        truth = np.array([7, 7, 8, 9, 9, 9])
        # majorities: cluster0 -> 7 (2 of 3), cluster1 -> 9 (3 of 3)
        assert sg.cluster_purity(labels, truth) == pytest.approx(5 / 6)


class TestCatalog:
    def test_save_load_round_trip(self, tmp_path, rng):
        imgs = [_random_image(rng) for _ in range(6)]
        patches = [p for i, img in enumerate(imgs) for p in sg.sample_patches(img, i)]
        sets = sg.build_patch_sets(patches, transforms_per_patch=3, seed=5)
        catalog = sg.build_catalog(sets, num_classes=4, seed=5)
        prefix = tmp_path / "catalog"
        manifest, blob = sg.save_catalog(catalog, prefix)
        assert manifest.exists() and blob.exists()
        loaded = sg.load_catalog(prefix)
        assert loaded.num_classes == 4
        assert loaded.patch_meta == catalog.patch_meta
        np.testing.assert_array_equal(loaded.patch_labels, catalog.patch_labels)
        np.testing.assert_array_equal(
            loaded.centroid_matrix(), catalog.centroid_matrix().astype(np.float32).astype(np.float64)
        )

    def test_membership_partitions_patch_sets(self, rng):
        imgs = [_random_image(rng) for _ in range(4)]
        patches = [p for i, img in enumerate(imgs) for p in sg.sample_patches(img, i)]
        sets = sg.build_patch_sets(patches, transforms_per_patch=2, seed=1)
        catalog = sg.build_catalog(sets, num_classes=3, seed=1)
        seen = sorted(m for cls in catalog.classes for m in cls.members)
        assert seen == list(range(len(sets)))
