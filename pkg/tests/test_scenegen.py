"""Generator tests: structural grammar invariants, appearance-only domain
gap, determinism, dataset IO integrity, and the dequantization transform."""

import numpy as np
import pytest

from bimal.scenegen import (
    CAR,
    NUM_CLASSES,
    PEDESTRIAN,
    ROAD,
    SIDEWALK,
    SKY,
    SceneConfig,
    generate_dataset,
    generate_scene,
    labels_to_flow_input,
    load_dataset,
    source_domain,
    target_domain,
    validate_labels,
)
from bimal.losses import LabelMap
from bimal.tenio import DataIntegrityError

CFG = SceneConfig()


def column_invariants(labels: np.ndarray) -> None:
    """The three structural rules, checked literally per column."""
    h, w = labels.shape
    for j in range(w):
        col = labels[:, j]
        sky = np.flatnonzero(col == SKY)
        road = np.flatnonzero(col == ROAD)
        if sky.size and road.size:
            assert sky.max() < road.min(), f"col {j}: sky below road"
        cars = np.flatnonzero(col == CAR)
        if cars.size:
            # nothing but road/car at or below the road band start
            band_start = min(road.min() if road.size else h, cars.min())
            assert np.isin(col[band_start:], (ROAD, CAR)).all(), f"col {j}: car off road"
        peds = np.flatnonzero(col == PEDESTRIAN)
        if peds.size:
            side = np.flatnonzero(np.isin(col, (SIDEWALK, PEDESTRIAN)))
            assert peds.min() >= side.min() and peds.max() <= side.max()
            assert np.isin(col[side.min() : side.max() + 1], (SIDEWALK, PEDESTRIAN)).all()


class TestSceneStructure:
    def test_invariants_hold_across_seeds_and_domains(self):
        for dom in (source_domain(), target_domain()):
            for seed in range(100):
                s = generate_scene(CFG, dom, seed)
                column_invariants(s.labels.labels)
                assert validate_labels(s.labels.labels)

    def test_all_classes_reachable(self):
        seen = set()
        for seed in range(200):
            seen.update(np.unique(generate_scene(CFG, source_domain(), seed).labels.labels))
        assert seen == set(range(NUM_CLASSES))

    def test_deterministic_per_seed(self):
        a = generate_scene(CFG, source_domain(), 123)
        b = generate_scene(CFG, source_domain(), 123)
        assert np.array_equal(a.image.data, b.image.data)
        assert np.array_equal(a.labels.labels, b.labels.labels)
        c = generate_scene(CFG, source_domain(), 124)
        assert not np.array_equal(a.labels.labels, c.labels.labels) or not np.array_equal(
            a.image.data, c.image.data
        )

    def test_labels_in_range_and_shapes(self):
        s = generate_scene(CFG, target_domain(), 5)
        assert s.image.shape == (32, 32, 3)
        assert s.labels.labels.shape == (32, 32)
        assert 0.0 <= s.image.data.min() and s.image.data.max() <= 1.0


class TestDomainGap:
    def test_clean_domain_pixels_are_exact_class_colors(self):
        dom = source_domain(noise_std=0.0, brightness=0.0)
        s = generate_scene(CFG, dom, 9)
        want = dom.class_colors[s.labels.labels].astype(np.float32).astype(np.float64)
        assert np.array_equal(s.image.data, want)

    def test_class_frequencies_agree_within_5_percent(self):
        n = 200
        freq = {}
        for dom in (source_domain(), target_domain()):
            counts = np.zeros(NUM_CLASSES)
            for i in range(n):
                labs = generate_scene(CFG, dom, 1000 ^ i).labels.labels
                counts += np.bincount(labs.reshape(-1), minlength=NUM_CLASSES)
            freq[dom.name] = counts / counts.sum()
        diff = np.abs(freq["source"] - freq["target"])
        assert diff.max() < 0.05, f"per-class frequency gap {diff}"

    def test_mean_brightness_gap_exceeds_threshold(self):
        n = 50
        means = {}
        for dom in (source_domain(), target_domain()):
            vals = [generate_scene(CFG, dom, 7 ^ i).image.data.mean() for i in range(n)]
            means[dom.name] = np.mean(vals)
        assert means["source"] - means["target"] > 0.1

    def test_same_seed_same_layout_across_domains(self):
        # horizon shift aside, object placement draws are shared
        src = generate_scene(CFG, source_domain(), 77)
        tgt = generate_scene(CFG, target_domain(), 77)
        assert not np.array_equal(src.image.data, tgt.image.data)


class TestValidator:
    def test_rejects_shuffled_maps(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            labs = generate_scene(CFG, source_domain(), seed).labels.labels
            flat = labs.reshape(-1).copy()
            rng.shuffle(flat)
            assert not validate_labels(flat.reshape(labs.shape))

    def test_rejects_inverted_map(self):
        labs = generate_scene(CFG, source_domain(), 3).labels.labels
        assert not validate_labels(labs[::-1].copy())

    def test_rejects_out_of_range(self):
        labs = np.zeros((32, 32), dtype=np.int64)
        labs[0, 0] = 17
        assert not validate_labels(labs)

    def test_accepts_hand_built_minimal_scene(self):
        labs = np.full((16, 16), ROAD, dtype=np.int64)
        labs[:4] = SKY
        labs[4:8] = 1  # building
        labs[8:10] = SIDEWALK
        labs[9, 2:4] = PEDESTRIAN
        labs[12:14, 5:9] = CAR
        assert validate_labels(labs)


class TestDatasetIO:
    def test_roundtrip_bitexact(self, tmp_path):
        out = generate_dataset(CFG, source_domain(), 3, 42, tmp_path / "d")
        ds = load_dataset(out)
        assert len(ds) == 3
        for i in range(3):
            s = generate_scene(CFG, source_domain(), 42 ^ i)
            assert np.array_equal(ds.images[i], s.image.data)
            assert np.array_equal(ds.labels[i], s.labels.labels)

    def test_manifest_echo(self, tmp_path):
        out = generate_dataset(CFG, target_domain(), 2, 7, tmp_path / "d")
        ds = load_dataset(out)
        m = ds.manifest
        assert m["domain"] == "target"
        assert m["seed"] == 7 and m["n"] == 2
        assert m["scene_config"]["height"] == 32
        assert len(m["content_hash"]) == 64

    def test_corruption_detected(self, tmp_path):
        out = generate_dataset(CFG, source_domain(), 2, 1, tmp_path / "d")
        raw = bytearray((out / "labels.ten").read_bytes())
        raw[-1] ^= 0x01
        (out / "labels.ten").write_bytes(bytes(raw))
        with pytest.raises(DataIntegrityError, match="hash"):
            load_dataset(out)

    def test_n_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError, match=">= 1"):
            generate_dataset(CFG, source_domain(), 0, 1, tmp_path / "d")

    def test_subset_view(self, tmp_path):
        out = generate_dataset(CFG, source_domain(), 5, 3, tmp_path / "d")
        ds = load_dataset(out)
        sub = ds.subset(1, 3)
        assert len(sub) == 2
        assert np.array_equal(sub.images[0], ds.images[1])


class TestFlowInput:
    def test_exact_one_hot_at_zero_settings(self):
        labels = LabelMap(generate_scene(CFG, source_domain(), 2).labels.labels, 6)
        y = labels_to_flow_input(labels, eps=0.0, noise_amp=0.0)
        assert np.array_equal(y.data, labels.one_hot())

    def test_smoothing_values(self):
        labels = LabelMap(np.zeros((4, 4), dtype=np.int64), 6)
        y = labels_to_flow_input(labels, eps=0.05, noise_amp=0.0).data
        np.testing.assert_allclose(y[:, :, 0], 0.95, atol=1e-12)
        np.testing.assert_allclose(y[:, :, 1:], 0.01, atol=1e-12)

    def test_noised_rows_renormalized(self):
        labels = LabelMap(generate_scene(CFG, source_domain(), 4).labels.labels, 6)
        y = labels_to_flow_input(labels, eps=0.05, noise_amp=0.01, seed=11).data
        np.testing.assert_allclose(y.sum(axis=2), 1.0, atol=1e-12)
        assert y.min() > 0.0  # noise amplitude cannot reach the smoothing floor

    def test_noise_is_seeded(self):
        labels = LabelMap(generate_scene(CFG, source_domain(), 4).labels.labels, 6)
        a = labels_to_flow_input(labels, seed=5).data
        b = labels_to_flow_input(labels, seed=5).data
        c = labels_to_flow_input(labels, seed=6).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_validation(self):
        labels = LabelMap(np.zeros((4, 4), dtype=np.int64), 6)
        with pytest.raises(ValueError):
            labels_to_flow_input(labels, eps=1.0)
        with pytest.raises(ValueError):
            labels_to_flow_input(labels, noise_amp=-0.1)


class TestConfigValidation:
    def test_class_count_fixed(self):
        with pytest.raises(ValueError, match="fixed"):
            SceneConfig(num_classes=5)

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            SceneConfig(height=8)
