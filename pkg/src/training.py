"""Training loops for the plain classifier, the joint DEP model and the DUQ model."""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from tqdm import tqdm

from src.classifier import (
    ClassifierModel,
    DUQHead,
    LossPredictor,
    TrainedBundle,
    accuracy,
    compute_train_loss_stats,
    contrastive_aux_loss,
    duq_accuracy,
    make_rank_pairs,
)
from src.datasets import LabeledImageSet, make_loader, stratified_split
from src.errors import ConfigError, TrainingDivergenceError
from src.logger import get_logger

logger = get_logger()

TRAINING_MODES = ('plain', 'dep', 'duq')


@dataclass
class TrainingConfig:
    """Hyperparameters shared by all training modes.

    Desk-scale defaults; the full-scale setup (ResNet-18, 96x96, batch 128,
    learning rate 1e-4) is reachable through the same fields.
    """

    mode: str = 'plain'
    arch: str = 'conv4'
    widths: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    hflip: bool = False
    device: str = 'cpu'
    # DEP
    beta1: float = 1.0
    beta2: float = 0.5
    gamma: float = 1.0
    predictor_width: int = 128
    # DUQ
    embedding_dim: int = 64
    length_scale: float = 0.5
    centroid_momentum: float = 0.999
    gradient_penalty: float = 0.5

    def validate(self) -> None:
        if self.mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode '{self.mode}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


def _random_hflip(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=generator) < 0.5
    if flip.any():
        x = x.clone()
        x[flip] = x[flip].flip(-1)
    return x


def _gradient_penalty(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Two-sided penalty (||d sum_y K / dx||^2 - 1)^2, averaged over the batch."""
    grads = torch.autograd.grad(kernel.sum(), x, create_graph=True)[0]
    squared_norm = grads.flatten(start_dim=1).pow(2).sum(dim=1)
    return (squared_norm - 1.0).pow(2).mean()


def _run_training(data: LabeledImageSet, config: TrainingConfig) -> TrainedBundle:
    config.validate()
    if data.split_tag != 'train':
        raise ConfigError(f"training needs a train split, got '{data.split_tag}'")

    torch.manual_seed(config.seed)
    device = torch.device(config.device)
    if config.val_fraction > 0 and len(data) >= 2 * data.num_classes:
        train_set, val_set = stratified_split(data, config.val_fraction, config.seed, test_tag='val')
    else:
        train_set, val_set = data, None

    classifier = ClassifierModel(
        num_classes=data.num_classes,
        input_shape=data.image_shape,
        arch=config.arch,
        widths=config.widths,
    ).to(device)
    loss_predictor: Optional[LossPredictor] = None
    duq_head: Optional[DUQHead] = None
    params = list(classifier.parameters())
    if config.mode == 'dep':
        loss_predictor = LossPredictor(classifier.tap_channels, config.predictor_width).to(device)
        params += list(loss_predictor.parameters())
    elif config.mode == 'duq':
        duq_head = DUQHead(
            classifier.feature_dim,
            data.num_classes,
            embedding_dim=config.embedding_dim,
            length_scale=config.length_scale,
            centroid_momentum=config.centroid_momentum,
            gradient_penalty_weight=config.gradient_penalty,
        ).to(device)
        params += list(duq_head.parameters())

    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    loader = make_loader(train_set, config.batch_size, shuffle=True, seed=config.seed)
    flip_generator = torch.Generator().manual_seed(config.seed + 1)

    logger.info(
        f"Training {config.mode} model: arch={config.arch}, n={len(train_set)}, "
        f"epochs={config.epochs}, batch={config.batch_size}, lr={config.learning_rate}"
    )
    history: List[Dict[str, float]] = []
    for epoch in range(config.epochs):
        classifier.train()
        for module in (loss_predictor, duq_head):
            if module is not None:
                module.train()
        running: Dict[str, float] = {}
        batches = tqdm(loader, desc=f'epoch {epoch + 1}/{config.epochs}', leave=False, disable=None)
        for batch_idx, (x, y) in enumerate(batches):
            if config.hflip:
                x = _random_hflip(x, flip_generator)
            x, y = x.to(device), y.to(device)

            if config.mode == 'duq':
                x.requires_grad_(True)
                logits, taps = classifier.forward_with_taps(x)
                z = duq_head.embed(classifier.pool(taps[-1]))
                kernel = duq_head.kernel_from_embedding(z)
                bce = F.binary_cross_entropy(kernel, F.one_hot(y, data.num_classes).float())
                penalty = _gradient_penalty(x, kernel)
                ce = F.cross_entropy(logits, y)
                loss = bce + config.gradient_penalty * penalty + ce
                parts = {'bce': bce, 'gradient_penalty': penalty, 'ce': ce}
            else:
                logits, taps = classifier.forward_with_taps(x)
                per_sample = F.cross_entropy(logits, y, reduction='none')
                primary = per_sample.mean()
                parts = {'ce': primary}
                if config.mode == 'dep':
                    shat = loss_predictor(taps)
                    pairs = make_rank_pairs(x.shape[0]).to(device)
                    aux = contrastive_aux_loss(
                        per_sample.detach()[pairs], shat[pairs], config.gamma, reduction='mean'
                    )
                    loss = config.beta1 * primary + config.beta2 * aux
                    parts['aux'] = aux
                else:
                    loss = primary

            if not torch.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch + 1}, batch index {batch_idx}"
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if duq_head is not None:
                duq_head.update_centroids(z.detach(), y)

            for name, value in parts.items():
                running[name] = running.get(name, 0.0) + float(value.detach())

        epoch_stats = {name: total / max(1, len(loader)) for name, total in running.items()}
        history.append(epoch_stats)
        logger.debug(f"epoch {epoch + 1}: {epoch_stats}", extra={'epoch': epoch + 1, **epoch_stats})

    bundle = TrainedBundle(
        classifier=classifier,
        loss_predictor=loss_predictor,
        duq_head=duq_head,
        metadata={
            'mode': config.mode,
            'num_classes': data.num_classes,
            'input_size': list(data.image_shape),
            'class_names': list(data.class_names),
            'seeds': {'train': config.seed},
            'beta1': config.beta1,
            'beta2': config.beta2,
            'gamma': config.gamma,
            'training_config': asdict(config),
            'history': history,
        },
    ).freeze()

    bundle.train_loss_stats = compute_train_loss_stats(classifier, train_set)
    if val_set is not None:
        bundle.metadata['val_accuracy'] = accuracy(bundle, val_set)
        if duq_head is not None:
            bundle.metadata['val_duq_accuracy'] = duq_accuracy(bundle, val_set)
    else:
        bundle.metadata['val_accuracy'] = None
    logger.info(
        f"Training finished: val_accuracy={bundle.metadata['val_accuracy']}",
        extra={'val_accuracy': bundle.metadata['val_accuracy']},
    )
    return bundle


def train_classifier(data: LabeledImageSet, config: TrainingConfig) -> TrainedBundle:
    """Train the classifier F alone with cross-entropy.

    Raises:
        TrainingDivergenceError: If a batch produces a non-finite loss
    """
    return _run_training(data, replace(config, mode='plain'))


def train_joint_dep(data: LabeledImageSet, config: TrainingConfig) -> TrainedBundle:
    """Jointly train F and the loss predictor G on beta1 * CE + beta2 * ranking loss."""
    return _run_training(data, replace(config, mode='dep'))


def train_duq(data: LabeledImageSet, config: TrainingConfig) -> TrainedBundle:
    """Train the backbone with a DUQ head (plus the linear head of F).

    The DUQ head is fit with binary cross-entropy on the kernel values and the
    two-sided gradient penalty; centroids follow an EMA of class embeddings.
    """
    return _run_training(data, replace(config, mode='duq'))


def train_bundle(data: LabeledImageSet, config: TrainingConfig) -> TrainedBundle:
    """Dispatch on ``config.mode``."""
    trainers = {'plain': train_classifier, 'dep': train_joint_dep, 'duq': train_duq}
    if config.mode not in trainers:
        raise ConfigError(f"unknown training mode '{config.mode}'")
    return trainers[config.mode](data, config)

