#!/usr/bin/env python3
"""Test the training loops."""

from dataclasses import replace

import pytest
import torch

from src.classifier import (
    accuracy,
    duq_accuracy,
    load_bundle,
    predict_logits,
    predicted_loss,
    save_bundle,
    uncertainty,
)
from src.datasets import LabeledImageSet, make_toy_dataset, stratified_split
from src.errors import ConfigError, TrainingDivergenceError
from src.training import TrainingConfig, train_bundle, train_classifier, train_duq, train_joint_dep


def test_training_metadata(dep_bundle, tiny_config):
    meta = dep_bundle.metadata
    assert meta['mode'] == 'dep'
    assert meta['num_classes'] == 2
    assert meta['input_size'] == [3, 32, 32]
    assert len(meta['history']) == tiny_config.epochs
    assert {'ce', 'aux'} <= set(meta['history'][0])
    assert 0.0 <= meta['val_accuracy'] <= 1.0
    assert 'mean' in dep_bundle.train_loss_stats


def test_duq_training_produces_head(duq_bundle):
    assert duq_bundle.duq_head is not None
    assert duq_bundle.loss_predictor is None
    assert {'bce', 'gradient_penalty', 'ce'} <= set(duq_bundle.metadata['history'][0])
    assert 0.0 <= duq_bundle.metadata['val_duq_accuracy'] <= 1.0


def test_same_seed_same_weights(toy_splits, tiny_config):
    config = replace(tiny_config, epochs=1)
    a = train_classifier(toy_splits[0], config)
    b = train_classifier(toy_splits[0], config)
    images = toy_splits[1].images
    assert torch.equal(predict_logits(a, images), predict_logits(b, images))


def test_one_epoch_on_ten_samples(tmp_path, tiny_config):
    data = make_toy_dataset(5, 32, seed=2)
    bundle = train_classifier(data, replace(tiny_config, epochs=1, batch_size=4))
    save_bundle(bundle, str(tmp_path))
    reloaded = load_bundle(str(tmp_path))
    assert torch.equal(predict_logits(bundle, data.images), predict_logits(reloaded, data.images))


def test_training_requires_train_split(toy_splits, tiny_config):
    with pytest.raises(ConfigError, match='train split'):
        train_classifier(toy_splits[1], tiny_config)


def test_non_finite_loss_names_the_batch(tiny_config):
    images = torch.full((8, 3, 32, 32), float('nan'))
    data = LabeledImageSet(images, torch.tensor([0, 1] * 4), ('a', 'b'))
    with pytest.raises(TrainingDivergenceError, match='epoch 1, batch index 0'):
        train_classifier(data, replace(tiny_config, val_fraction=0.0))


def test_invalid_training_config(toy_set):
    with pytest.raises(ConfigError):
        train_bundle(toy_set, TrainingConfig(mode='gan'))
    with pytest.raises(ConfigError):
        train_classifier(toy_set, TrainingConfig(learning_rate=0.0))


@pytest.mark.slow
def test_toy_task_is_learnable():
    train, test = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_classifier(train, TrainingConfig(epochs=10))
    assert accuracy(bundle, test) >= 0.95


@pytest.mark.slow
def test_shuffled_labels_stay_at_chance():
    data = make_toy_dataset(500, 32, seed=0)
    g = torch.Generator().manual_seed(1)
    shuffled = LabeledImageSet(data.images, data.labels[torch.randperm(len(data), generator=g)], data.class_names)
    train, test = stratified_split(shuffled, 0.1, seed=0)
    bundle = train_classifier(train, TrainingConfig(epochs=5))
    assert abs(accuracy(bundle, test) - 0.5) <= 0.1


@pytest.mark.slow
def test_dep_predictor_ranks_held_out_losses():
    train, test = stratified_split(make_toy_dataset(500, 32, seed=0), 0.2, seed=0)
    bundle = train_joint_dep(train, TrainingConfig(mode='dep', epochs=10))
    logits = predict_logits(bundle, test.images)
    s = torch.nn.functional.cross_entropy(logits, test.labels, reduction='none')
    shat = predicted_loss(bundle, test.images)
    ds = s.unsqueeze(0) - s.unsqueeze(1)
    dshat = shat.unsqueeze(0) - shat.unsqueeze(1)
    valid = ds != 0
    agreement = (torch.sign(ds) == torch.sign(dshat))[valid].float().mean()
    assert float(agreement) >= 0.7


@pytest.mark.slow
def test_beta2_zero_matches_plain_training():
    train, test = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    plain = train_classifier(train, TrainingConfig(epochs=10))
    joint = train_joint_dep(train, TrainingConfig(mode='dep', epochs=10, beta2=0.0))
    assert abs(accuracy(plain, test) - accuracy(joint, test)) <= 0.02


@pytest.mark.slow
def test_duq_toy_accuracy():
    train, test = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_duq(train, TrainingConfig(mode='duq', epochs=10))
    assert duq_accuracy(bundle, test) >= 0.9


@pytest.mark.slow
def test_duq_uncertainty_flags_noise_images():
    train, test = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_duq(train, TrainingConfig(mode='duq', epochs=10))
    in_dist = uncertainty(bundle, test.images)
    noise = uncertainty(bundle, torch.rand(100, 3, 32, 32, generator=torch.Generator().manual_seed(0)))
    assert float(noise.median()) > float(torch.quantile(in_dist, 0.9))


@pytest.mark.slow
def test_duq_centroids_sit_nearest_their_own_class():
    train, _ = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_duq(train, TrainingConfig(mode='duq', epochs=10))
    head = bundle.duq_head
    with torch.no_grad():
        z = head.embed(bundle.classifier.features(train.images))
        distances = torch.cdist(head.centroids, z)
    nearest = distances.argmin(dim=1)
    own_class = train.labels[nearest] == torch.arange(bundle.num_classes)
    assert float(own_class.float().mean()) >= 0.9
