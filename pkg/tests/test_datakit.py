import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kecae import datakit
from kecae.datakit import (
    KL0,
    KL2,
    extract_patches,
    make_pairs,
    patch_geometry,
    read_pairs_csv,
    read_pgm,
    sample_pairs,
    split_oversample,
    synth_generate,
    write_pairs_csv,
    write_pgm,
)
from kecae.errors import DataError, PgmParseError


class TestSynthGenerate:
    def test_deterministic(self):
        a = synth_generate(KL0, seed=5, side=64)
        b = synth_generate(KL0, seed=5, side=64)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.gap_width == b.gap_width

    def test_class_attribute_contracts(self):
        for seed in range(20):
            img0 = synth_generate(KL0, seed=seed, side=64)
            assert 0.18 * 64 <= img0.gap_width <= 0.28 * 64
            assert img0.osteo_amp == 0.0
            img2 = synth_generate(KL2, seed=seed, side=64)
            assert 0.06 * 64 <= img2.gap_width <= 0.12 * 64
            assert 0.02 * 64 <= img2.osteo_amp <= 0.05 * 64

    def test_mean_pixel_interior(self):
        img = synth_generate(KL2, seed=9, side=64)
        assert 0.0 < img.pixels.mean() < 1.0

    def test_values_in_unit_range(self):
        img = synth_generate(KL0, seed=3, side=64)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_side_minimum(self):
        with pytest.raises(DataError):
            synth_generate(KL0, seed=1, side=16)

    def test_noiseless_differs_from_noisy(self):
        clean = synth_generate(KL0, seed=4, side=64, noise_sigma=0.0)
        noisy = synth_generate(KL0, seed=4, side=64)
        assert clean.gap_width == noisy.gap_width
        assert not np.array_equal(clean.pixels, noisy.pixels)


class TestSplitOversample:
    @staticmethod
    def ids(grade, n):
        return [f"kl{grade}_{i:05d}" for i in range(n)]

    def test_paper_scale_counts_balance(self):
        splits = split_oversample(
            {KL0: self.ids(KL0, 3185), KL2: self.ids(KL2, 2126)}, seed=1
        )
        per_class = {KL0: 0, KL2: 0}
        for name in ("train", "val", "test"):
            for _, grade in splits[name]:
                per_class[grade] += 1
        assert per_class == {KL0: 3185, KL2: 3185}

    def test_ratio_within_one_item(self):
        splits = split_oversample(
            {KL0: self.ids(KL0, 317), KL2: self.ids(KL2, 203)}, seed=7
        )
        for grade in (KL0, KL2):
            sizes = {
                name: sum(1 for _, g in splits[name] if g == grade)
                for name in ("train", "val", "test")
            }
            total = sum(sizes.values())
            assert abs(sizes["train"] - 0.7 * total) <= 1
            assert abs(sizes["val"] - 0.1 * total) <= 1
            assert abs(sizes["test"] - 0.2 * total) <= 1

    def test_no_duplicates_outside_train(self):
        splits = split_oversample(
            {KL0: self.ids(KL0, 100), KL2: self.ids(KL2, 60)}, seed=3
        )
        for name in ("val", "test"):
            ids = [i for i, _ in splits[name]]
            assert len(ids) == len(set(ids))

    def test_no_heldout_source_duplicated_into_train(self):
        splits = split_oversample(
            {KL0: self.ids(KL0, 100), KL2: self.ids(KL2, 60)}, seed=3
        )
        train_ids = {i for i, _ in splits["train"]}
        held = {i for name in ("val", "test") for i, _ in splits[name]}
        assert not train_ids & held

    def test_empty_class_rejected(self):
        with pytest.raises(DataError):
            split_oversample({KL0: [], KL2: self.ids(KL2, 20)}, seed=1)

    def test_tiny_class_rejected(self):
        with pytest.raises(DataError):
            split_oversample({KL0: self.ids(KL0, 5), KL2: self.ids(KL2, 20)}, seed=1)

    def test_deterministic(self):
        args = {KL0: self.ids(KL0, 40), KL2: self.ids(KL2, 25)}
        assert split_oversample(args, seed=9) == split_oversample(args, seed=9)


class TestPairs:
    def test_small_cartesian_product(self):
        idx = make_pairs(["a", "b"], ["x", "y", "z"])
        assert len(idx) == 6
        pairs = [idx[i] for i in range(6)]
        assert len(set(pairs)) == 6

    def test_paper_total_is_perfect_square(self):
        total = 3_455_881
        root = math.isqrt(total)
        assert root * root == total
        assert root == 1859
        idx = make_pairs([f"a{i}" for i in range(1859)], [f"b{i}" for i in range(1859)])
        assert len(idx) == total

    def test_single_pair(self):
        idx = make_pairs(["a"], ["b"])
        assert len(idx) == 1 and idx[0] == ("a", "b")

    @settings(max_examples=60, deadline=None)
    @given(n0=st.integers(1, 1000), n2=st.integers(1, 1000))
    def test_index_size_property(self, n0, n2):
        idx = make_pairs(
            [f"a{i}" for i in range(n0)], [f"b{i}" for i in range(n2)]
        )
        assert len(idx) == n0 * n2

    def test_sample_without_replacement(self):
        idx = make_pairs([f"a{i}" for i in range(40)], [f"b{i}" for i in range(50)])
        got = sample_pairs(idx, 300, seed=2)
        assert len(got) == 300
        assert len(set(got)) == 300

    def test_sample_full_is_permutation(self):
        idx = make_pairs(["a", "b", "c"], ["x", "y"])
        got = sample_pairs(idx, 6, seed=1)
        assert sorted(got) == sorted(idx[i] for i in range(6))

    def test_sample_deterministic(self):
        idx = make_pairs([f"a{i}" for i in range(30)], [f"b{i}" for i in range(30)])
        assert sample_pairs(idx, 100, seed=5) == sample_pairs(idx, 100, seed=5)

    def test_oversized_sample_rejected(self):
        idx = make_pairs(["a"], ["b"])
        with pytest.raises(ValueError):
            sample_pairs(idx, 2, seed=1)

    def test_pairs_csv_roundtrip(self, tmp_path):
        pairs = [("a1", "b1"), ("a2", "b9")]
        path = tmp_path / "pairs.csv"
        write_pairs_csv(path, pairs)
        assert read_pairs_csv(path) == pairs


class TestPatches:
    def test_paper_ratio_gives_128(self):
        q, _, _, _ = patch_geometry(299)
        assert q == 128

    def test_desk_side_gives_27(self):
        q, _, _, _ = patch_geometry(64)
        assert q == 27

    def test_flip_involution(self):
        img = np.random.default_rng(0).random((64, 64))
        _, medial = extract_patches(img)
        q, row0, _, col_med = patch_geometry(64)
        unflipped = medial[:, ::-1]
        np.testing.assert_array_equal(
            unflipped, img[row0 : row0 + q, col_med : col_med + q]
        )

    def test_patches_square_and_equal(self):
        img = np.random.default_rng(1).random((80, 80))
        lat, med = extract_patches(img)
        assert lat.shape == med.shape
        assert lat.shape[0] == lat.shape[1] == patch_geometry(80)[0]

    def test_nonsquare_rejected(self):
        with pytest.raises(DataError):
            extract_patches(np.zeros((40, 20)))


class TestPgm:
    def test_constant_half_writes_128(self, tmp_path):
        path = tmp_path / "half.pgm"
        write_pgm(path, np.full((4, 4), 0.5))
        raw = path.read_bytes()
        header_end = raw.index(b"255\n") + 4
        assert set(raw[header_end:]) == {128}

    def test_roundtrip_quantization_bound(self, tmp_path):
        img = np.random.default_rng(2).random((16, 16))
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert np.abs(back - img).max() <= 1.0 / 255.0

    def test_double_roundtrip_idempotent(self, tmp_path):
        img = np.random.default_rng(3).random((8, 8))
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        write_pgm(p1, img)
        first = read_pgm(p1)
        write_pgm(p2, first)
        np.testing.assert_array_equal(first, read_pgm(p2))

    def test_truncated_file_is_parse_error(self, tmp_path):
        path = tmp_path / "t.pgm"
        write_pgm(path, np.zeros((6, 6)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(PgmParseError) as err:
            read_pgm(path)
        assert err.value.offset > 0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(PgmParseError):
            read_pgm(path)

    def test_comments_in_header_ok(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x40\x80\xff")
        img = read_pgm(path)
        np.testing.assert_allclose(img.ravel() * 255, [0, 64, 128, 255])

    def test_out_of_range_write_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_pgm(tmp_path / "x.pgm", np.full((2, 2), 1.5))


class TestDatasetDirs:
    def test_pool_dataset_roundtrip(self, tmp_path):
        pool_imgs = datakit.build_pool(12, 10, side=64, seed=4)
        pool_dir = tmp_path / "pool"
        datakit.write_pool(pool_dir, pool_imgs)
        back = datakit.read_pool(pool_dir)
        assert len(back) == 22
        by_id = {i.image_id: i for i in pool_imgs}
        for img in back:
            assert np.abs(img.pixels - by_id[img.image_id].pixels).max() <= 1 / 255
            assert img.gap_width == pytest.approx(by_id[img.image_id].gap_width)

        splits = split_oversample(
            {
                KL0: [i.image_id for i in pool_imgs if i.kl_grade == KL0],
                KL2: [i.image_id for i in pool_imgs if i.kl_grade == KL2],
            },
            seed=8,
        )
        ds_dir = tmp_path / "ds"
        datakit.write_dataset(ds_dir, splits, {i.image_id: i for i in back})
        train = datakit.load_split(ds_dir, "train")
        assert sorted(train.records) == sorted(splits["train"])
        some_id = train.records[0][0]
        assert train.images[some_id].shape == (64, 64)

    def test_load_missing_split_rejected(self, tmp_path):
        with pytest.raises(DataError):
            datakit.load_split(tmp_path, "train")


class TestAugment:
    def test_rotation_preserves_shape_and_range(self):
        from kecae.rng import Rng

        img = synth_generate(KL0, seed=2, side=64).pixels
        rot = datakit.rotate_bilinear(img, 7.3)
        assert rot.shape == img.shape
        assert rot.min() >= 0.0 and rot.max() <= 1.0

    def test_zero_rotation_is_identity(self):
        img = np.random.default_rng(5).random((32, 32))
        np.testing.assert_allclose(datakit.rotate_bilinear(img, 0.0), img, atol=1e-12)

    def test_augment_deterministic_per_stream(self):
        from kecae.rng import Rng

        img = synth_generate(KL2, seed=3, side=64).pixels
        a = datakit.augment_image(img, Rng(77))
        b = datakit.augment_image(img, Rng(77))
        np.testing.assert_array_equal(a, b)
