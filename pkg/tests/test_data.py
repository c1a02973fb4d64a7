import pickle

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gtabench.data import (
    AttackBudget,
    DatasetError,
    DeskSpec,
    LabeledImageSet,
    coordinate_map,
    crop_top_left,
    desk_train_test,
    generate_desk_dataset,
    load_external_dataset,
    resize,
    resize_batch,
    save_archive,
    to_images,
    to_tensor,
)


def test_budget_validation_and_step_size():
    assert AttackBudget(15, 10).step_size == 1.5
    with pytest.raises(ValueError):
        AttackBudget(-1, 10)
    with pytest.raises(ValueError):
        AttackBudget(15, 0)


def test_tensor_round_trip_is_exact():
    imgs = np.random.default_rng(0).uniform(0, 255, (3, 5, 7, 3))
    t = to_tensor(imgs, torch.float64)
    assert t.shape == (3, 3, 5, 7)
    assert np.array_equal(to_images(t), imgs)
    assert to_tensor(imgs[0]).shape == (1, 3, 5, 7)


def test_checkerboard_downscale_averages_to_mid_grey():
    board = np.zeros((2, 2, 3))
    board[0, 0] = board[1, 1] = 255.0
    out = resize(board, (1, 1))
    assert out.shape == (1, 1, 3)
    assert np.allclose(out, 127.5, atol=1e-12)


def test_four_by_four_checkerboard_halves_to_mid_grey():
    board = np.zeros((4, 4, 3))
    board[(np.indices((4, 4)).sum(0) % 2) == 0] = 255.0
    out = resize(board, (2, 2))
    assert np.allclose(out, 127.5, atol=1e-12)


def test_constant_image_upscale_stays_constant():
    out = resize(np.full((32, 32, 3), 100.0), (64, 64))
    assert out.shape == (64, 64, 3)
    assert np.allclose(out, 100.0, atol=1e-12)


def test_resize_same_shape_is_identity_copy():
    img = np.random.default_rng(1).uniform(0, 255, (6, 4, 3))
    out = resize(img, (6, 4))
    assert np.array_equal(out, img) and out is not img


def test_resize_rejects_non_positive_target():
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4, 3)), (0, 4))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 20), st.integers(1, 20))
def test_resize_stays_in_pixel_range(h, w, th, tw):
    img = np.random.default_rng(h * 100 + w).uniform(0, 255, (h, w, 3))
    out = resize(img, (th, tw))
    assert out.shape == (th, tw, 3)
    assert out.min() >= 0 and out.max() <= 255


def test_resize_batch_constant_image_stays_constant():
    x = torch.full((1, 3, 8, 8), 42.0, dtype=torch.float64)
    assert torch.allclose(resize_batch(x, (5, 11)), torch.tensor(42.0, dtype=torch.float64))


def test_coordinate_map_example():
    cm = coordinate_map(2, 3)
    assert np.array_equal(cm.x_map, [[0, 1, 2], [0, 1, 2]])
    assert np.array_equal(cm.y_map, [[0, 0, 0], [1, 1, 1]])


def test_crop_top_left_example_and_precondition():
    ramp = np.arange(16, dtype=float).reshape(4, 4)[..., None].repeat(3, -1)
    out = crop_top_left(ramp, (2, 2))
    assert np.array_equal(out[..., 0], [[0, 1], [4, 5]])
    with pytest.raises(ValueError):
        crop_top_left(ramp, (5, 4))


def test_labeled_set_validation():
    with pytest.raises(DatasetError):
        LabeledImageSet("x", np.zeros((2, 4, 4, 3)), [0, 5], 3)
    with pytest.raises(DatasetError):
        LabeledImageSet("x", np.full((1, 4, 4, 3), 300.0), [0], 3)
    with pytest.raises(DatasetError):
        LabeledImageSet("x", np.zeros((2, 4, 4, 3)), [0], 3)


def test_desk_spec_validation():
    with pytest.raises(DatasetError):
        DeskSpec("x", (8, 8))
    with pytest.raises(DatasetError):
        DeskSpec("x", num_classes=1)
    with pytest.raises(DatasetError):
        DeskSpec("x", num_classes=1000)


def test_desk_generation_is_deterministic_and_splits_differ():
    spec = DeskSpec("d", (20, 24), 4, 3, seed=7)
    a = generate_desk_dataset(spec)
    b = generate_desk_dataset(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (12, 20, 24, 3)
    assert sorted(set(a.labels.tolist())) == [0, 1, 2, 3]
    train, test = desk_train_test(spec, test_per_class=2)
    assert len(test) == 8
    assert not np.array_equal(train.images[:8], test.images)
    with pytest.raises(DatasetError):
        generate_desk_dataset(spec, "validation")


def test_archive_round_trip(tmp_path):
    ds = generate_desk_dataset(DeskSpec("rt", (16, 16), 3, 2, seed=1))
    save_archive(ds, tmp_path / "a.gtads")
    back = load_external_dataset(tmp_path / "a.gtads", "archive")
    assert back.name == "rt-train" and back.num_classes == 3
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_truncated_archive_is_rejected(tmp_path):
    ds = generate_desk_dataset(DeskSpec("rt", (16, 16), 2, 1, seed=1))
    save_archive(ds, tmp_path / "a.gtads")
    raw = (tmp_path / "a.gtads").read_bytes()
    (tmp_path / "b.gtads").write_bytes(raw[:-10])
    with pytest.raises(DatasetError):
        load_external_dataset(tmp_path / "b.gtads", "archive")
    (tmp_path / "c.gtads").write_bytes(b"NOTADSET" + raw[8:])
    with pytest.raises(DatasetError):
        load_external_dataset(tmp_path / "c.gtads", "archive")


def _cifar_record(label, value):
    return bytes([label]) + bytes([value]) * 3072


def test_cifar_binary_reader(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(_cifar_record(3, 10) + _cifar_record(7, 200))
    ds = load_external_dataset(tmp_path, "cifar")
    assert ds.images.shape == (2, 32, 32, 3)
    assert ds.labels.tolist() == [3, 7]
    assert ds.images[1].min() == ds.images[1].max() == 200


def test_cifar_pickle_reader_and_label_range(tmp_path):
    data = np.zeros((1, 3072), dtype=np.uint8)
    data[0, :1024] = 255  # red plane
    (tmp_path / "data_batch_1").write_bytes(
        pickle.dumps({b"data": data, b"labels": [2]}, protocol=2))
    ds = load_external_dataset(tmp_path, "cifar")
    assert ds.images[0, 5, 5].tolist() == [255, 0, 0]
    (tmp_path / "bad.bin").write_bytes(_cifar_record(12, 0))
    with pytest.raises(DatasetError):
        load_external_dataset(tmp_path / "bad.bin", "cifar")


def test_png_dir_reader(tmp_path):
    for k, name in enumerate(["cat", "dog"]):
        (tmp_path / name).mkdir()
        for i in range(2):
            arr = np.full((6, 6, 3), 40 * (k + 1) + i, dtype=np.uint8)
            Image.fromarray(arr).save(tmp_path / name / f"{i}.png")
    ds = load_external_dataset(tmp_path, "png-dir")
    assert ds.labels.tolist() == [0, 0, 1, 1]
    assert ds.metadata["classes"] == ["cat", "dog"]
    assert ds.images[2, 0, 0, 0] == 80


def test_unknown_format_and_missing_path(tmp_path):
    with pytest.raises(DatasetError):
        load_external_dataset(tmp_path, "jpeg-zip")
    with pytest.raises(DatasetError):
        load_external_dataset(tmp_path / "nope", "archive")
