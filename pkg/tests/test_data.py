import numpy as np
import pytest
from PIL import Image

from retinavit.data import (
    DataError,
    decode_cifar,
    encode_cifar,
    load_cifar,
    load_image_folder,
    synthetic,
    synthetic_pixels,
    upscale,
)


def test_cifar_record_layout():
    # one record: label 7, red plane 0..1023 mod 256, green all 1, blue all 2
    red = (np.arange(1024) % 256).astype(np.uint8)
    raw = bytes([7]) + red.tobytes() + bytes([1]) * 1024 + bytes([2]) * 1024
    pixels, labels = decode_cifar(raw)
    assert labels.tolist() == [7]
    assert pixels.shape == (1, 32, 32, 3)
    assert pixels[0, 0, 1, 0] == 1 and pixels[0, 1, 0, 0] == 32 % 256
    assert (pixels[0, :, :, 1] == 1).all() and (pixels[0, :, :, 2] == 2).all()


def test_cifar_round_trip(tmp_path):
    pixels, labels = synthetic_pixels(5, seed=3)
    raw = encode_cifar(pixels, labels)
    assert len(raw) == 5 * 3073
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(raw)
    ds = load_cifar(path)
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_array_equal(ds.images, pixels / 255.0)
    assert encode_cifar(*decode_cifar(raw)) == raw


def test_cifar_bad_size():
    with pytest.raises(DataError):
        decode_cifar(b"\x00" * 100)


def test_cifar_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_cifar(tmp_path / "nope.bin")


def test_upscale_replicates():
    img = np.arange(4.0).reshape(1, 2, 2, 1)
    up = upscale(img, 4)
    assert up[0, :, :, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
    with pytest.raises(DataError):
        upscale(img, 5)


def test_image_folder(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {}
    for cls in ("cat", "ant"):
        (tmp_path / cls).mkdir()
        for i in range(2):
            arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / cls / f"{i}.{'png' if i else 'ppm'}")
            arrays[(cls, i)] = arr
    ds = load_image_folder(tmp_path, base_edge=16)
    assert ds.images.shape == (4, 16, 16, 3)
    assert ds.labels.tolist() == [0, 0, 1, 1]  # 'ant' sorts first
    np.testing.assert_array_equal(ds.images[0, ::2, ::2], arrays[("ant", 0)] / 255.0)


def test_image_folder_empty(tmp_path):
    with pytest.raises(DataError):
        load_image_folder(tmp_path)


def test_synthetic_seeded_and_balanced():
    a, b = synthetic(40, seed=5), synthetic(40, seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [4] * 10
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(synthetic(40, seed=6).images, a.images)
    assert synthetic(3, base_edge=64).images.shape == (3, 64, 64, 3)
