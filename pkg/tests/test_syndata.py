import numpy as np
import pytest
from scipy.spatial import cKDTree

from pointmoe.errors import ConfigError
from pointmoe.syndata import (AugmentConfig, DatasetSpec, HELDOUT_SPACE,
                              INDOOR_SPACE, OUTDOOR_SPACE, Registry, augment,
                              default_specs, expected_ring_counts, gen_indoor,
                              gen_outdoor, generate_scene, load_scene,
                              ring_radii, save_scene)


def indoor_spec(**kw):
    base = dict(name="roomsim", generator_kind="indoor", label_space=INDOOR_SPACE,
                points_min=5000, points_max=8000, seed=11, cell_size=0.4)
    base.update(kw)
    return DatasetSpec(**base)


def outdoor_spec(**kw):
    base = dict(name="ringsim", generator_kind="outdoor", label_space=OUTDOOR_SPACE,
                points_min=2000, points_max=4000, seed=22, cell_size=1.0)
    base.update(kw)
    return DatasetSpec(**base)


def mean_nn_distance(coords):
    tree = cKDTree(coords)
    d, _ = tree.query(coords, k=2)
    return float(d[:, 1].mean())


class TestIndoor:
    def test_zero_boxes_gives_three_labels(self):
        cloud = gen_indoor(indoor_spec(num_boxes=0), scene_seed=0)
        assert set(np.unique(cloud.labels).tolist()) == {0, 1, 2}

    def test_deterministic(self):
        spec = indoor_spec()
        a, b = gen_indoor(spec, 3), gen_indoor(spec, 3)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.feats, b.feats)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        spec = indoor_spec()
        a, b = gen_indoor(spec, 0), gen_indoor(spec, 1)
        assert a.coords.shape != b.coords.shape or not np.array_equal(a.coords, b.coords)

    def test_label_histogram_matches_regeneration(self):
        spec = indoor_spec()
        hist = np.bincount(gen_indoor(spec, 5).labels, minlength=5)
        hist2 = np.bincount(gen_indoor(spec, 5).labels, minlength=5)
        assert np.array_equal(hist, hist2)
        assert hist.sum() >= 5000

    def test_point_count_in_range(self):
        cloud = gen_indoor(indoor_spec(), 2)
        assert 5000 <= cloud.num_points <= 8000

    def test_all_labels_nonnegative(self):
        cloud = gen_indoor(indoor_spec(), 4)
        assert np.all(cloud.labels >= 0)
        assert np.all(cloud.labels < len(INDOOR_SPACE.class_names))

    def test_boxes_present_when_requested(self):
        cloud = gen_indoor(indoor_spec(num_boxes=4), 0)
        assert {3, 4} <= set(np.unique(cloud.labels).tolist())

    def test_degenerate_extent_rejected(self):
        with pytest.raises(ConfigError):
            indoor_spec(room_max=-1.0)


class TestOutdoor:
    def test_only_ground_without_objects(self):
        cloud = gen_outdoor(outdoor_spec(num_poles=0, num_vehicles=0, num_walls=0), 0)
        assert set(np.unique(cloud.labels).tolist()) == {0}

    def test_ring_radii_strictly_increasing(self):
        radii = ring_radii(outdoor_spec())
        assert np.all(np.diff(radii) > 0)

    def test_density_law_recoverable_from_output(self):
        spec = outdoor_spec(num_poles=0, num_vehicles=0, num_walls=0)
        cloud = gen_outdoor(spec, 1)
        r = np.sqrt(cloud.coords[:, 0] ** 2 + cloud.coords[:, 1] ** 2)
        radii = ring_radii(spec)
        counts = np.array([int(np.sum(np.isclose(r, rad, atol=1e-9))) for rad in radii])
        assert counts.sum() == cloud.num_points
        assert np.array_equal(counts, expected_ring_counts(cloud.num_points, radii))

    def test_deterministic(self):
        spec = outdoor_spec()
        a, b = gen_outdoor(spec, 7), gen_outdoor(spec, 7)
        assert np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.labels, b.labels)

    def test_point_count_in_range(self):
        cloud = gen_outdoor(outdoor_spec(), 3)
        assert 2000 <= cloud.num_points <= 4000

    def test_all_object_classes_present(self):
        cloud = gen_outdoor(outdoor_spec(), 0)
        assert set(np.unique(cloud.labels).tolist()) == {0, 1, 2, 3}


class TestHeterogeneity:
    def test_outdoor_sparser_by_3x(self):
        specs = {s.name: s for s in default_specs()}
        indoor_nnd = np.mean([mean_nn_distance(generate_scene(specs["roomsim"], s).coords)
                              for s in range(3)])
        outdoor_nnd = np.mean([mean_nn_distance(generate_scene(specs["ringsim"], s).coords)
                               for s in range(3)])
        assert outdoor_nnd >= 3.0 * indoor_nnd

    def test_label_spaces_overlap_partially(self):
        indoor = set(INDOOR_SPACE.class_names)
        outdoor = set(OUTDOOR_SPACE.class_names)
        assert "wall" in indoor & outdoor
        assert "floor" in indoor - outdoor
        assert "ground" in outdoor - indoor
        assert "box_c" in set(HELDOUT_SPACE.class_names) - indoor


class TestRegistry:
    def test_split_is_mod_ten(self):
        reg = Registry([indoor_spec(num_scenes=100)])
        assert len(reg.val_seeds("roomsim")) == 10
        assert len(reg.train_seeds("roomsim")) == 90
        assert set(reg.val_seeds("roomsim")).isdisjoint(reg.train_seeds("roomsim"))

    def test_duplicate_names_rejected(self):
        with pytest.raises(ConfigError):
            Registry([indoor_spec(), indoor_spec()])

    def test_regeneration_identical(self):
        specs = default_specs()
        a, b = Registry(specs), Registry(specs)
        for name in a.names:
            s = a.val_seeds(name)[0]
            assert np.array_equal(a.scene(name, s).coords, b.scene(name, s).coords)


class TestAugment:
    def test_preserves_labels_and_feats(self):
        cloud = gen_indoor(indoor_spec(), 0)
        out = augment(cloud, np.random.default_rng(0))
        assert out.coords.shape == cloud.coords.shape
        assert np.array_equal(out.labels, cloud.labels)
        assert np.array_equal(out.feats, cloud.feats)
        assert not np.array_equal(out.coords, cloud.coords)

    def test_scale_bounds(self):
        cloud = gen_indoor(indoor_spec(), 1)
        cfg = AugmentConfig(rotate=False, jitter_sigma=0.0)
        out = augment(cloud, np.random.default_rng(1), cfg)
        ratio = (out.coords.max(0) - out.coords.min(0)) / \
                (cloud.coords.max(0) - cloud.coords.min(0))
        assert np.all(ratio > 0.89) and np.all(ratio < 1.11)

    def test_disabled_is_identity(self):
        cloud = gen_indoor(indoor_spec(), 2)
        out = augment(cloud, np.random.default_rng(2), AugmentConfig(enabled=False))
        assert out is cloud


class TestSceneDump:
    def test_roundtrip(self, tmp_path):
        cloud = gen_outdoor(outdoor_spec(points_min=500, points_max=800), 0)
        path = tmp_path / "scene.txt"
        save_scene(cloud, path)
        first = path.read_text().splitlines()[0].split()
        assert first == [str(cloud.num_points), "3"]
        back = load_scene(path, dataset_tag="ringsim")
        assert np.array_equal(back.coords, cloud.coords)
        assert np.array_equal(back.feats, cloud.feats)
        assert np.array_equal(back.labels, cloud.labels)
