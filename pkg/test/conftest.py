"""Shared fixtures: a small toy dataset and quickly trained bundles."""

import logging
from dataclasses import replace

import pytest
import torch

from src.datasets import make_toy_dataset, stratified_split
from src.logger import LOGGER_NAME
from src.training import TrainingConfig, train_classifier, train_duq, train_joint_dep

TINY_WIDTHS = [8, 8, 16, 16]


@pytest.fixture(scope='session')
def toy_set():
    """80 toy images of 32x32 (40 per class)."""
    return make_toy_dataset(40, 32, seed=0)


@pytest.fixture(scope='session')
def toy_splits(toy_set):
    return stratified_split(toy_set, test_fraction=0.25, seed=0)


@pytest.fixture(scope='session')
def tiny_config():
    return TrainingConfig(
        widths=TINY_WIDTHS,
        epochs=2,
        batch_size=16,
        predictor_width=16,
        embedding_dim=8,
    )


@pytest.fixture(scope='session')
def plain_bundle(toy_splits, tiny_config):
    return train_classifier(toy_splits[0], replace(tiny_config))


@pytest.fixture(scope='session')
def dep_bundle(toy_splits, tiny_config):
    return train_joint_dep(toy_splits[0], replace(tiny_config))


@pytest.fixture(scope='session')
def duq_bundle(toy_splits, tiny_config):
    return train_duq(toy_splits[0], replace(tiny_config))


@pytest.fixture
def query(toy_set):
    """One class-0 image."""
    return toy_set.of_class(0).images[0].clone()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(autouse=True)
def _reset_logging():
    """Drop handlers installed by main() so they never outlive a captured stream."""
    yield
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()
