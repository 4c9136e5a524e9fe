#!/usr/bin/env python3
"""Test dataset loading, the toy task and corruptions."""

import numpy as np
import pytest
import torch
from PIL import Image

from src.datasets import (
    CorruptionSpec,
    LabeledImageSet,
    concat_sets,
    corrupt,
    load_dataset_cache,
    load_image_folder,
    make_loader,
    make_toy_dataset,
    save_dataset_cache,
    stratified_split,
)
from src.errors import DatasetError


def _write_png(path, array):
    Image.fromarray(array).save(path)


def test_toy_dataset_shape_and_range():
    data = make_toy_dataset(10, 32, seed=3)
    assert data.images.shape == (20, 3, 32, 32)
    assert data.class_names == ('bar', 'arc')
    assert int((data.labels == 0).sum()) == 10
    assert int((data.labels == 1).sum()) == 10
    assert float(data.images.min()) >= 0.0
    assert float(data.images.max()) <= 1.0


def test_toy_dataset_is_deterministic():
    a = make_toy_dataset(100, 32, 7)
    b = make_toy_dataset(100, 32, 7)
    assert torch.equal(a.images, b.images)
    assert torch.equal(a.labels, b.labels)
    assert not torch.equal(a.images, make_toy_dataset(100, 32, 8).images)


def test_toy_dataset_rejects_bad_arguments():
    with pytest.raises(DatasetError):
        make_toy_dataset(0, 32, 0)
    with pytest.raises(DatasetError):
        make_toy_dataset(5, 8, 0)


def test_toy_classes_differ_in_the_lower_third():
    data = make_toy_dataset(500, 32, seed=0)
    bar = data.of_class(0).images.mean(dim=0)
    arc = data.of_class(1).images.mean(dim=0)
    difference = (bar - arc).abs().mean(dim=0)
    top_decile = difference.flatten().topk(difference.numel() // 10).indices
    rows = top_decile // 32
    assert int(rows.min()) >= 32 * 2 // 3


def test_labeled_image_set_validation():
    images = torch.rand(4, 3, 8, 8)
    with pytest.raises(DatasetError):
        LabeledImageSet(images, torch.tensor([0, 1, 2, 0]), ('a', 'b'))
    with pytest.raises(DatasetError):
        LabeledImageSet(images * 2 + 0.5, torch.tensor([0, 1, 1, 0]), ('a', 'b'))
    with pytest.raises(DatasetError):
        LabeledImageSet(images, torch.tensor([0, 1, 1, 0]), ('a', 'b'), split_tag='holdout')
    data = LabeledImageSet(images, [0, 1, 1, 0], ('a', 'b'))
    assert data.labels.dtype == torch.long
    assert len(data.of_class(1)) == 2


def test_load_image_folder_counts(tmp_path):
    rng = np.random.default_rng(0)
    for name in ('cat', 'dog'):
        (tmp_path / name).mkdir()
        for i in range(5):
            _write_png(tmp_path / name / f'{i}.png', rng.integers(0, 256, (40, 40, 3), dtype=np.uint8))

    data = load_image_folder(str(tmp_path), 32, {'cat': 0, 'dog': 1})
    assert len(data) == 10
    assert data.images.shape == (10, 3, 32, 32)
    assert data.class_names == ('cat', 'dog')


def test_load_image_folder_grayscale_becomes_rgb(tmp_path):
    (tmp_path / 'a').mkdir()
    gray = np.zeros((16, 16), dtype=np.uint8)
    gray[:, 8:] = 255
    _write_png(tmp_path / 'a' / 'g.png', gray)

    data = load_image_folder(str(tmp_path), 16, {'a': 0})
    assert data.images.shape == (1, 3, 16, 16)
    assert torch.equal(data.images[0, 0], data.images[0, 1])
    assert float(data.images.min()) == 0.0
    assert float(data.images.max()) == 1.0


def test_load_image_folder_errors(tmp_path):
    with pytest.raises(DatasetError, match='not found'):
        load_image_folder(str(tmp_path / 'missing'), 32, {'a': 0})

    (tmp_path / 'empty').mkdir()
    with pytest.raises(DatasetError, match="class 'empty' has no images"):
        load_image_folder(str(tmp_path), 32, {'empty': 0})


def test_load_image_folder_skips_unreadable_files(tmp_path):
    (tmp_path / 'a').mkdir()
    _write_png(tmp_path / 'a' / 'ok.png', np.full((8, 8, 3), 128, dtype=np.uint8))
    (tmp_path / 'a' / 'broken.png').write_bytes(b'not an image')

    data = load_image_folder(str(tmp_path), 8, {'a': 0})
    assert len(data) == 1


def test_corrupt_severity_zero_is_identity(toy_set):
    for kind in ('gaussian_noise', 'blur', 'brightness_shift', 'occlusion_mask'):
        out = corrupt(toy_set, CorruptionSpec(kind, 0.0))
        assert torch.equal(out.images, toy_set.images)
        assert torch.equal(out.labels, toy_set.labels)


def test_corrupt_noise_is_seeded_and_matches_sigma():
    clean = make_toy_dataset(50, 32, seed=1)
    spec = CorruptionSpec('gaussian_noise', 0.5, seed=4)
    a = corrupt(clean, spec)
    b = corrupt(clean, spec)
    assert torch.equal(a.images, b.images)

    # Pixels far from the clip bounds keep the unclipped noise
    diff = (a.images - clean.images)[(clean.images > 0.45) & (clean.images < 0.75)]
    assert diff.numel() > 10_000
    assert abs(float(diff.std()) - 0.2) < 0.2 * 0.2


def test_corrupt_kinds_change_images(toy_set):
    for kind in ('gaussian_noise', 'blur', 'brightness_shift', 'occlusion_mask'):
        out = corrupt(toy_set, CorruptionSpec(kind, 1.0, seed=2))
        assert not torch.equal(out.images, toy_set.images)
        assert float(out.images.min()) >= 0.0
        assert float(out.images.max()) <= 1.0


def test_occlusion_square_size(toy_set):
    out = corrupt(toy_set, CorruptionSpec('occlusion_mask', 0.5, seed=0))
    # side = round(0.5 * 0.5 * 32) = 8; toy pixels are never exactly zero
    zeros = (out.images == 0).all(dim=1).flatten(start_dim=1).sum(dim=1)
    assert torch.all(zeros == 64)


def test_corrupt_unknown_kind(toy_set):
    with pytest.raises(DatasetError):
        corrupt(toy_set, CorruptionSpec('fog', 0.5))
    with pytest.raises(DatasetError):
        CorruptionSpec('blur', 1.5)


def test_stratified_split(toy_set):
    train, test = stratified_split(toy_set, test_fraction=0.1, seed=5)
    assert len(train) + len(test) == len(toy_set)
    assert train.split_tag == 'train' and test.split_tag == 'test'
    for label in (0, 1):
        assert len(test.of_class(label)) == 4
        assert len(train.of_class(label)) == 36

    again_train, _ = stratified_split(toy_set, test_fraction=0.1, seed=5)
    assert torch.equal(train.images, again_train.images)


def test_make_loader_batches(toy_set):
    batches = list(make_loader(toy_set, batch_size=32, shuffle=True, seed=0))
    assert [b[0].shape[0] for b in batches] == [32, 32, 16]
    first = next(iter(make_loader(toy_set, batch_size=32, shuffle=True, seed=0)))
    assert torch.equal(first[1], batches[0][1])


def test_dataset_cache_roundtrip(tmp_path, toy_set):
    path = tmp_path / 'cache' / 'toy.pt'
    save_dataset_cache(toy_set, str(path), {'seed': 0})
    loaded, manifest = load_dataset_cache(str(path))
    assert torch.equal(loaded.images, toy_set.images)
    assert manifest['n'] == len(toy_set)
    assert manifest['seed'] == 0
    with pytest.raises(DatasetError):
        load_dataset_cache(str(tmp_path / 'nope.pt'))


def test_concat_sets(toy_set):
    both = concat_sets([toy_set.of_class(0), toy_set.of_class(1)])
    assert len(both) == len(toy_set)
    with pytest.raises(DatasetError):
        concat_sets([])
