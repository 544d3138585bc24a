"""CSV parsing, augmentation, masks, PGM, dataset directories."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perturb.data import (
    AugmentConfig,
    DataError,
    Dataset,
    EMOTIONS,
    IMAGE_SIZE,
    MaskSpec,
    apply_mask,
    augment,
    batch_digest,
    class_distribution,
    load_dataset_dir,
    lower_half_mask,
    mask_dataset,
    parse_fer_csv,
    read_pgm,
    save_dataset_dir,
    serialize_fer_csv,
    write_pgm,
)


def make_csv(path, rows):
    lines = ["emotion,pixels,Usage"]
    for label, fill, usage in rows:
        lines.append(f"{label},{' '.join([str(fill)] * 2304)},{usage}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def tiny_csv(tmp_path):
    rows = [
        (0, 0, "Training"),
        (3, 128, "Training"),
        (6, 255, "Training"),
        (1, 10, "PublicTest"),
        (4, 20, "PrivateTest"),
        (4, 30, "PrivateTest"),
    ]
    return make_csv(tmp_path / "mini.csv", rows)


class TestParse:
    def test_split_routing_and_normalization(self, tiny_csv):
        ds = parse_fer_csv(tiny_csv)
        assert ds.sizes() == {"train": 3, "val": 1, "test": 2}
        assert ds.train_images.shape == (3, 48, 48)
        assert ds.train_images.max() == 1.0 and ds.train_images.min() == 0.0
        assert ds.train_images[1, 0, 0] == pytest.approx(128 / 255)
        assert ds.train_labels.tolist() == [0, 3, 6]
        assert ds.test_labels.tolist() == [4, 4]

    def test_emotion_names(self):
        assert EMOTIONS == ("Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral")

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("foo,bar,baz\n")
        with pytest.raises(DataError, match="header"):
            parse_fer_csv(p)

    def test_row_number_in_errors(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("emotion,pixels,Usage\n" f"0,{' '.join(['0'] * 2304)},Training\n" f"9,{' '.join(['0'] * 2304)},Training\n")
        with pytest.raises(DataError, match="row 3"):
            parse_fer_csv(p)

    def test_wrong_pixel_count(self, tmp_path):
        p = tmp_path / "short.csv"
        p.write_text("emotion,pixels,Usage\n0,1 2 3,Training\n")
        with pytest.raises(DataError, match="2304"):
            parse_fer_csv(p)

    def test_pixel_out_of_byte_range(self, tmp_path):
        p = make_csv(tmp_path / "range.csv", [(0, 256, "Training")])
        with pytest.raises(DataError, match="0..255"):
            parse_fer_csv(p)

    def test_unknown_usage(self, tmp_path):
        p = make_csv(tmp_path / "usage.csv", [(0, 0, "Validation")])
        with pytest.raises(DataError, match="usage"):
            parse_fer_csv(p)

    def test_round_trip(self, tiny_csv, tmp_path):
        ds = parse_fer_csv(tiny_csv)
        out = tmp_path / "round.csv"
        serialize_fer_csv(ds, out)
        ds2 = parse_fer_csv(out)
        for split in ("train", "val", "test"):
            a_img, a_lab = ds.split(split)
            b_img, b_lab = ds2.split(split)
            assert np.array_equal(a_img, b_img)
            assert np.array_equal(a_lab, b_lab)

    def test_class_distribution(self, tiny_csv):
        dist = class_distribution(parse_fer_csv(tiny_csv))
        assert dist["train"] == [1, 0, 0, 1, 0, 0, 1]
        assert dist["test"] == [0, 0, 0, 0, 2, 0, 0]
        assert sum(dist["val"]) == 1


class TestAugment:
    def test_reproducible_from_equal_seeds(self, rng):
        img = rng.uniform(size=(48, 48))
        cfg = AugmentConfig()
        a = augment(img, np.random.default_rng(42), cfg)
        b = augment(img, np.random.default_rng(42), cfg)
        assert np.array_equal(a, b)

    def test_output_range_and_shape(self, rng):
        cfg = AugmentConfig(flip_prob=1.0, erase_prob=1.0)
        for i in range(20):
            out = augment(rng.uniform(size=(48, 48)), np.random.default_rng(i), cfg)
            assert out.shape == (48, 48)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_flip_only(self, rng):
        img = rng.uniform(size=(48, 48))
        cfg = AugmentConfig(flip_prob=1.0, crop_pad=0, erase_prob=0.0)
        out = augment(img, np.random.default_rng(0), cfg)
        assert np.array_equal(out, img[:, ::-1])

    def test_disabled_everything_is_identity(self, rng):
        img = rng.uniform(size=(48, 48))
        cfg = AugmentConfig(flip_prob=0.0, crop_pad=0, erase_prob=0.0)
        assert np.array_equal(augment(img, np.random.default_rng(0), cfg), img)

    def test_input_never_mutated(self, rng):
        img = rng.uniform(size=(48, 48))
        keep = img.copy()
        augment(img, np.random.default_rng(3), AugmentConfig(erase_prob=1.0))
        assert np.array_equal(img, keep)

    def test_erase_changes_a_plausible_area(self):
        # fixed ~10% target area: between 5% and 20% of pixels may differ
        img = np.zeros((48, 48))
        cfg = AugmentConfig(flip_prob=0.0, crop_pad=0, erase_prob=1.0, erase_area=(0.1, 0.1), erase_aspect=(1.0, 1.0))
        out = augment(img, np.random.default_rng(11), cfg)
        changed = (out != img).sum()
        assert 0.05 * 2304 <= changed <= 0.2 * 2304

    def test_bad_config(self):
        with pytest.raises(DataError):
            AugmentConfig(flip_prob=1.5)
        with pytest.raises(DataError):
            AugmentConfig(erase_area=(0.5, 0.2))


class TestMasks:
    def test_lower_half_pixel_count(self):
        # rows 24..47 over all 48 columns
        assert lower_half_mask(0.0).pixel_count() == 1152

    def test_apply_constant_fill(self, rng):
        img = rng.uniform(size=(48, 48))
        out = apply_mask(img, MaskSpec.rect(0, 2, 0, 48, fill=0.25))
        assert np.all(out[:2] == 0.25)
        assert np.array_equal(out[2:], img[2:])

    def test_apply_mean_fill(self):
        img = np.zeros((48, 48))
        img[:24] = 0.5  # unmasked half
        out = apply_mask(img, lower_half_mask("mean"))
        assert np.allclose(out[24:], 0.5)

    def test_mean_fill_on_full_mask(self, rng):
        spec = MaskSpec.from_pixels(np.ones((48, 48), dtype=bool), "mean")
        out = apply_mask(rng.uniform(size=(48, 48)), spec)
        assert not out.any()

    def test_rect_outside_grid(self):
        with pytest.raises(DataError, match="outside"):
            MaskSpec.rect(0, 49, 0, 10)

    def test_bad_fill(self):
        with pytest.raises(DataError):
            MaskSpec.rect(0, 1, 0, 1, fill=1.5)
        with pytest.raises(DataError):
            MaskSpec.rect(0, 1, 0, 1, fill="median")

    def test_polygon_square_matches_rect(self):
        poly = MaskSpec.polygon([(10, 10), (10, 19.999), (19.999, 19.999), (19.999, 10)])
        rect = MaskSpec.rect(10, 20, 10, 20)
        assert np.array_equal(poly.region, rect.region)

    def test_polygon_needs_three_vertices(self):
        with pytest.raises(DataError, match="3 vertices"):
            MaskSpec.polygon([(0, 0), (1, 1)])

    def test_input_not_mutated(self, rng):
        img = rng.uniform(size=(48, 48))
        keep = img.copy()
        apply_mask(img, lower_half_mask(0.0))
        assert np.array_equal(img, keep)

    def test_mask_dataset_preserves_labels_and_splits(self, tmp_path, rng):
        n = 6
        imgs = rng.uniform(size=(n, 48, 48))
        labels = np.array([0, 1, 2, 3, 4, 5])
        ds = Dataset(imgs, labels, imgs[:2].copy(), labels[:2].copy(), imgs[:3].copy(), labels[:3].copy())
        masked = mask_dataset(ds, lower_half_mask(0.0))
        assert masked.sizes() == ds.sizes()
        assert np.array_equal(masked.train_labels, ds.train_labels)
        assert np.all(masked.train_images[:, 24:, :] == 0.0)
        assert np.array_equal(masked.train_images[:, :24, :], ds.train_images[:, :24, :])


@given(st.floats(0.0, 1.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_constant_fill_masking_is_idempotent(fill, seed):
    img = np.random.default_rng(seed).uniform(size=(48, 48))
    spec = MaskSpec.rect(5, 30, 2, 40, fill=fill)
    once = apply_mask(img, spec)
    twice = apply_mask(once, spec)
    assert np.array_equal(once, twice)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_augment_stays_in_unit_interval(seed):
    r = np.random.default_rng(seed)
    img = r.uniform(size=(48, 48))
    out = augment(img, r, AugmentConfig())
    assert out.shape == (48, 48) and out.min() >= 0.0 and out.max() <= 1.0


class TestPgmAndDirs:
    def test_pgm_round_trip_bytes(self, tmp_path):
        img = (np.arange(48 * 48).reshape(48, 48) % 256).astype(np.uint8)
        p = tmp_path / "img.pgm"
        write_pgm(p, img)
        assert np.array_equal(read_pgm(p), img)

    def test_pgm_float_scaling(self, tmp_path):
        p = tmp_path / "f.pgm"
        write_pgm(p, np.full((4, 4), 0.5))
        assert np.all(read_pgm(p) == 128)

    def test_dataset_dir_round_trip(self, tmp_path, tiny_csv):
        ds = parse_fer_csv(tiny_csv)
        save_dataset_dir(ds, tmp_path / "d")
        ds2 = load_dataset_dir(tmp_path / "d")
        for split in ("train", "val", "test"):
            assert np.array_equal(ds.split(split)[0], ds2.split(split)[0])
            assert np.array_equal(ds.split(split)[1], ds2.split(split)[1])
        meta = (tmp_path / "d" / "metadata.json").read_text()
        assert '"schema_version": 1' in meta

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataError, match="data.csv"):
            load_dataset_dir(tmp_path / "nope")

    def test_batch_digest_sensitivity(self, rng):
        a = rng.uniform(size=(4, 48, 48))
        b = a.copy()
        assert batch_digest(a) == batch_digest(b)
        b[0, 0, 0] += 1e-12
        assert batch_digest(a) != batch_digest(b)
