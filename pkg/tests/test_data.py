import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kaseg import data as D
from kaseg import netpbm

SMALL = D.DatasetSpec(num_train=6, num_val=3, image_size=32, seed=3)


def digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    D.generate(SMALL, root)
    return root


def test_generate_is_deterministic(small_set, tmp_path):
    D.generate(SMALL, tmp_path)
    assert digest(small_set) == digest(tmp_path)


def test_different_seed_differs(small_set, tmp_path):
    D.generate(D.DatasetSpec(6, 3, 32, seed=4), tmp_path)
    assert digest(small_set) != digest(tmp_path)


def test_manifest_layout(small_set):
    lines = (small_set / "train.txt").read_text().splitlines()
    assert lines[0] == D.MANIFEST_MAGIC
    assert lines[1].startswith("# spec: ")
    assert lines[2] == "train/00000.ppm\ttrain/00000.pgm"
    assert len(lines) == 2 + SMALL.num_train
    spec, pairs = D.read_manifest(small_set / "val.txt")
    assert spec == SMALL
    assert len(pairs) == SMALL.num_val


def test_load_shapes_and_ranges(small_set):
    ds = D.load(small_set / "train.txt")
    assert ds.images.shape == (6, 3, 32, 32) and ds.images.dtype == np.float32
    assert ds.masks.shape == (6, 32, 32)
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    assert ds.masks.max() < SMALL.num_classes
    assert len(ds) == 6


def test_zero_shapes_gives_background(tmp_path):
    spec = D.DatasetSpec(4, 1, 16, min_shapes=0, max_shapes=0)
    D.generate(spec, tmp_path)
    assert np.all(D.load(tmp_path / "train.txt").masks == 0)


def test_all_classes_appear_in_100_masks():
    spec = D.DatasetSpec()
    masks = [D.render_sample(spec, D._sample_rng(0, 0, i))[1] for i in range(100)]
    assert set(np.unique(np.stack(masks))) == set(range(spec.num_classes))


def test_mask_pixels_take_shape_color():
    # every labelled pixel sits inside a filled shape, so before noise the
    # image is flat on each shape; with zero noise masks and colors agree
    spec = D.DatasetSpec(image_size=32, noise=0.0, min_shapes=1, max_shapes=1)
    image, mask = D.render_sample(spec, np.random.default_rng(5))
    fg = image[mask > 0]
    assert len(fg) > 0
    assert np.all(fg == fg[0])


@pytest.mark.parametrize("kwargs", [
    {"num_classes": 5}, {"num_classes": 1}, {"min_shapes": 3, "max_shapes": 2},
    {"image_size": 4}, {"noise": -1.0}, {"num_train": -1},
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        D.DatasetSpec(**kwargs)


def test_bad_mask_value_names_file(small_set, tmp_path):
    D.generate(SMALL, tmp_path)
    bad = tmp_path / "train" / "00002.pgm"
    mask = netpbm.read(bad)
    mask[0, 0] = 7
    netpbm.write(bad, mask)
    with pytest.raises(D.DataError, match="00002.pgm.*7"):
        D.load(tmp_path / "train.txt")


def test_ignore_label_accepted(tmp_path):
    D.generate(SMALL, tmp_path)
    path = tmp_path / "val" / "00000.pgm"
    mask = netpbm.read(path)
    mask[:2] = 255
    netpbm.write(path, mask)
    assert np.all(D.load(tmp_path / "val.txt").masks[0, :2] == 255)


def test_corrupt_image_names_file(tmp_path):
    D.generate(SMALL, tmp_path)
    path = tmp_path / "train" / "00001.ppm"
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(D.DataError, match="00001.ppm"):
        D.load(tmp_path / "train.txt")


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("hello\n")
    with pytest.raises(D.DataError, match="not a dataset manifest"):
        D.read_manifest(p)
    p.write_text(D.MANIFEST_MAGIC + "\na\tb\n")
    with pytest.raises(D.DataError, match="spec"):
        D.read_manifest(p)
    with pytest.raises(D.DataError):
        D.read_manifest(tmp_path / "absent.txt")


def test_netpbm_round_trip_and_comments(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    netpbm.write(tmp_path / "a.ppm", img)
    assert np.array_equal(netpbm.read(tmp_path / "a.ppm"), img)
    gray = rng.integers(0, 256, (4, 3), dtype=np.uint8)
    (tmp_path / "b.pgm").write_bytes(b"P5\n# a comment\n3 4\n# another\n255\n" + gray.tobytes())
    assert np.array_equal(netpbm.read(tmp_path / "b.pgm"), gray)
    (tmp_path / "c.pgm").write_bytes(b"P5\n3 4\n65535\n" + bytes(24))
    with pytest.raises(netpbm.ImageFormatError, match="8-bit"):
        netpbm.read(tmp_path / "c.pgm")


# augmentation


def probe_sample():
    image = np.zeros((3, 8, 8), np.float32)
    image[:, :, :2] = 1.0  # bright left edge
    mask = np.zeros((8, 8), np.uint8)
    mask[:, :2] = 1
    return image, mask


def test_flip_moves_mask_with_image():
    img, mask = D.hflip(*probe_sample())
    assert np.all(img[:, :, -2:] == 1) and np.all(mask[:, -2:] == 1)
    assert np.all((img[0] == 1) == (mask == 1))


def test_rescale_then_center_crop_restores_size(rng):
    image = rng.random((3, 32, 32)).astype(np.float32)
    mask = rng.integers(0, 4, (32, 32)).astype(np.uint8)
    big_img, big_mask = D.rescale(image, mask, 1.25)
    assert big_mask.shape == (40, 40) and big_img.shape == (3, 40, 40)
    img, m = D.crop_or_pad(big_img, big_mask, (32, 32))
    assert img.shape == (3, 32, 32) and m.shape == (32, 32)


def test_rescale_mask_is_nearest(rng):
    mask = rng.integers(0, 3, (8, 8)).astype(np.uint8)
    _, up = D.rescale(np.zeros((3, 8, 8), np.float32), mask, 2.0)
    assert np.array_equal(up, np.repeat(np.repeat(mask, 2, 0), 2, 1))


def test_pad_uses_ignore_label():
    img, mask = D.crop_or_pad(np.ones((3, 4, 4), np.float32), np.zeros((4, 4), np.uint8), (6, 6))
    assert mask[0, 0] == 255 and mask[1, 1] == 0
    assert img[:, 0, 0].sum() == 0 and img[:, 1, 1].sum() == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_keeps_valid_labels_and_size(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((3, 16, 16)).astype(np.float32)
    mask = rng.integers(0, 4, (16, 16)).astype(np.uint8)
    img, m = D.augment(image, mask, rng)
    assert img.shape == image.shape and m.shape == mask.shape
    assert set(np.unique(m)) <= {0, 1, 2, 3, 255}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 50))
def test_epoch_order_is_pure(seed, epoch):
    a = D.BatchSampler(10, 3, seed).epoch_order(epoch)
    b = D.BatchSampler(10, 3, seed, position=77).epoch_order(epoch)
    assert np.array_equal(a, b)
    assert sorted(a) == list(range(10))


def test_sampler_resume_from_position():
    full = D.BatchSampler(7, 3, seed=2)
    stream = [full.next_indices() for _ in range(6)]
    resumed = D.BatchSampler(7, 3, seed=2, position=9)
    assert all(np.array_equal(resumed.next_indices(), s) for s in stream[3:])
    # every epoch visits each index once
    flat = np.concatenate(stream)[:14]
    assert sorted(flat[:7]) == list(range(7)) and sorted(flat[7:]) == list(range(7))


def test_unaugmented_batches_repeat(small_set):
    ds = D.load(small_set / "train.txt")
    a = D.next_batch(ds, D.BatchSampler(len(ds), 4, 0), False)
    b = D.next_batch(ds, D.BatchSampler(len(ds), 4, 0), False)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[1].dtype == np.int64


def test_augmented_batch_needs_rng(small_set):
    ds = D.load(small_set / "train.txt")
    with pytest.raises(ValueError, match="rng"):
        D.next_batch(ds, D.BatchSampler(len(ds), 2, 0), True)
