import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from clsp.data import (
    AugmentationPolicy,
    Dataset,
    augment_synthetic,
    augment_views,
    generate_toy_dataset,
    load_cifar10_binary,
    load_dataset,
    resize_plain,
    sample_crop,
    save_dataset,
    standardize,
)
from clsp.errors import InvalidArgumentError


class TestDataset:
    def test_toy_dataset_shape_and_balance(self, tiny_dataset):
        assert tiny_dataset.pixels.shape == (16, 32, 32, 3)
        assert tiny_dataset.pixels.dtype == np.uint8
        assert tiny_dataset.num_classes == 2
        assert (tiny_dataset.labels == np.arange(16) % 2).all()

    def test_toy_dataset_deterministic(self):
        a = generate_toy_dataset(3, 32, seed=4)
        b = generate_toy_dataset(3, 32, seed=4)
        assert np.array_equal(a.pixels, b.pixels)
        assert a.digest == b.digest
        c = generate_toy_dataset(3, 32, seed=5)
        assert a.digest != c.digest

    def test_prefix_stability(self):
        # growing the dataset must not reshuffle earlier images
        small = generate_toy_dataset(3, 32, seed=4)
        large = generate_toy_dataset(5, 32, seed=4)
        assert np.array_equal(small.pixels[:4], large.pixels[:4])

    def test_digest_tracks_content(self, tiny_dataset):
        altered = Dataset(
            name=tiny_dataset.name, pixels=tiny_dataset.pixels.copy(), labels=tiny_dataset.labels.copy()
        )
        altered.pixels[0, 0, 0, 0] ^= 1
        assert altered.digest != tiny_dataset.digest

    def test_channel_stats_oracle(self, tiny_dataset):
        mean, std = tiny_dataset.channel_stats
        scaled = tiny_dataset.pixels.astype(np.float64) / 255.0
        for c in range(3):
            assert mean[c] == pytest.approx(scaled[..., c].mean(), abs=1e-12)
            assert std[c] == pytest.approx(scaled[..., c].std(), abs=1e-12)

    def test_records_carry_index_and_label(self, tiny_dataset):
        rec = tiny_dataset.record(3)
        assert rec.index == 3 and rec.label == 1
        assert rec.pixels.shape == (32, 32, 3)
        assert sum(1 for _ in tiny_dataset.records()) == 16

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(name="x", pixels=np.zeros((2, 4, 4, 3), dtype=np.float32), labels=np.zeros(2))
        with pytest.raises(InvalidArgumentError):
            Dataset(name="x", pixels=np.zeros((2, 4, 4, 3), dtype=np.uint8), labels=np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            generate_toy_dataset(0, 32, seed=1)
        with pytest.raises(InvalidArgumentError):
            generate_toy_dataset(4, 8, seed=1)


class TestPersistence:
    def test_round_trip(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert np.array_equal(loaded.pixels, tiny_dataset.pixels)
        assert np.array_equal(loaded.labels, tiny_dataset.labels)
        assert loaded.digest == tiny_dataset.digest
        assert loaded.name == tiny_dataset.name
        assert loaded.seed == tiny_dataset.seed

    def test_corrupted_blob_rejected(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "d")
        blob = tmp_path / "d" / "images.blob"
        raw = bytearray(blob.read_bytes())
        raw[100] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(InvalidArgumentError, match="digest"):
            load_dataset(tmp_path / "d")

    def test_truncated_blob_rejected(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "d")
        blob = tmp_path / "d" / "images.blob"
        blob.write_bytes(blob.read_bytes()[:-7])
        with pytest.raises(InvalidArgumentError, match="blob"):
            load_dataset(tmp_path / "d")

    def test_cifar_binary_layout(self, tmp_path):
        # two records: label byte then R, G, B planes of 1024 bytes each
        rec0 = bytes([7]) + bytes([10] * 1024) + bytes([20] * 1024) + bytes([30] * 1024)
        rec1 = bytes([2]) + bytes(range(256)) * 4 + bytes([0] * 2048)
        path = tmp_path / "batch.bin"
        path.write_bytes(rec0 + rec1)
        ds = load_cifar10_binary([path])
        assert ds.pixels.shape == (2, 32, 32, 3)
        assert list(ds.labels) == [7, 2]
        assert (ds.pixels[0, :, :, 0] == 10).all()
        assert (ds.pixels[0, :, :, 1] == 20).all()
        assert (ds.pixels[0, :, :, 2] == 30).all()
        assert ds.pixels[1, 0, 0, 0] == 0 and ds.pixels[1, 0, 1, 0] == 1

    def test_cifar_binary_size_check(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(100))
        with pytest.raises(InvalidArgumentError):
            load_cifar10_binary([path])


class TestCrop:
    @given(st.integers(min_value=0, max_value=10**6))
    def test_crop_always_inside(self, stream):
        rng = np.random.default_rng(stream)
        top, left, h, w = sample_crop(rng, 32, 32, (0.2, 1.0), (0.75, 4.0 / 3.0))
        assert 0 <= top and top + h <= 32
        assert 0 <= left and left + w <= 32
        assert h > 0 and w > 0

    def test_fallback_is_full_frame_for_square(self):
        rng = np.random.default_rng(0)
        top, left, h, w = sample_crop(rng, 32, 32, (1.0, 1.0), (0.9999, 1.0001), attempts=0)
        assert (top, left, h, w) == (0, 0, 32, 32)


class TestAugmentation:
    def test_views_shape_range_and_distinctness(self, tiny_dataset, rng):
        policy = AugmentationPolicy(output_size=24)
        v1, v2 = augment_views(tiny_dataset.record(0), policy, rng)
        for v in (v1, v2):
            assert v.shape == (3, 24, 24)
            assert v.dtype == torch.float32
            assert float(v.min()) >= 0.0 and float(v.max()) <= 1.0
        assert not torch.equal(v1, v2)

    def test_views_reproducible_per_stream(self, tiny_dataset):
        policy = AugmentationPolicy(output_size=32)
        a = augment_views(tiny_dataset.record(1), policy, np.random.default_rng(9))
        b = augment_views(tiny_dataset.record(1), policy, np.random.default_rng(9))
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_identity_policy_is_plain_resize(self, tiny_dataset):
        policy = AugmentationPolicy.identity(32)
        v1, v2 = augment_views(tiny_dataset.record(2), policy, np.random.default_rng(0))
        expected = resize_plain(tiny_dataset.pixels[2], 32)
        assert torch.equal(v1, expected)
        assert torch.equal(v2, expected)

    def test_synthetic_uses_same_pipeline(self, tiny_dataset):
        policy = AugmentationPolicy(output_size=32)
        pixels = tiny_dataset.pixels[0]
        v = augment_synthetic(pixels, policy, np.random.default_rng(3))
        w1, _ = augment_views(tiny_dataset.record(0), policy, np.random.default_rng(3))
        assert torch.equal(v, w1)

    def test_synthetic_shape_guard(self, tiny_dataset):
        policy = AugmentationPolicy(output_size=32)
        with pytest.raises(InvalidArgumentError, match="shape"):
            augment_synthetic(
                np.zeros((16, 16, 3), dtype=np.uint8), policy, np.random.default_rng(0), (32, 32, 3)
            )

    def test_policy_validation(self):
        with pytest.raises(InvalidArgumentError):
            AugmentationPolicy(flip_probability=1.5)
        with pytest.raises(InvalidArgumentError):
            AugmentationPolicy(crop_scale_range=(0.9, 0.2))
        with pytest.raises(InvalidArgumentError):
            AugmentationPolicy(solarize_threshold=300)
        with pytest.raises(InvalidArgumentError):
            AugmentationPolicy(hue=0.9)


class TestStandardize:
    def test_oracle(self):
        views = torch.arange(2 * 3 * 2 * 2, dtype=torch.float32).reshape(2, 3, 2, 2) / 24.0
        mean, std = (0.1, 0.2, 0.3), (0.5, 0.25, 2.0)
        out = standardize(views, mean, std)
        for c in range(3):
            expected = (views[:, c] - mean[c]) / std[c]
            assert torch.allclose(out[:, c], expected)

    def test_resize_noop_when_sizes_match(self, tiny_dataset):
        out = resize_plain(tiny_dataset.pixels[0], 32)
        expected = torch.from_numpy(tiny_dataset.pixels[0]).permute(2, 0, 1).float() / 255.0
        assert torch.equal(out, expected)

    def test_resize_changes_size(self, tiny_dataset):
        assert resize_plain(tiny_dataset.pixels[0], 16).shape == (3, 16, 16)
