"""Classifier F with feature taps, the DEP loss predictor G and the DUQ head."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet18

from src.datasets import LabeledImageSet
from src.errors import ConfigError, IncompatibilityError, MissingArtifactError, ShapeError
from src.logger import get_logger

logger = get_logger()

BUNDLE_SCHEMA_VERSION = 1
WEIGHTS_FILE = 'weights.pt'
MANIFEST_FILE = 'manifest.json'
# Metadata entries stored at the top level of the manifest
MANIFEST_FIELDS = ('beta1', 'beta2', 'gamma', 'seeds')
ARCHITECTURES = ('conv4', 'resnet18')


class ClassifierModel(nn.Module):
    """Image classifier exposing the output of every block as a named tap.

    Inputs are images in [0, 1]; standardization to [-1, 1] happens inside
    the model so that inversion works in displayable pixel space.
    """

    def __init__(
        self,
        num_classes: int,
        input_shape: Sequence[int] = (3, 32, 32),
        arch: str = 'conv4',
        widths: Sequence[int] = (16, 32, 64, 128),
    ) -> None:
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown classifier arch '{arch}'")
        self.num_classes: int = num_classes
        self.input_shape: Tuple[int, int, int] = tuple(input_shape)
        self.arch: str = arch
        self.widths: Tuple[int, ...] = tuple(widths)
        in_channels = self.input_shape[0]

        if arch == 'conv4':
            if len(self.widths) != 4:
                raise ConfigError(f"conv4 needs 4 block widths, got {len(self.widths)}")
            self.stem = nn.Identity()
            blocks = []
            prev = in_channels
            for idx, width in enumerate(self.widths):
                layers = [
                    nn.Conv2d(prev, width, 3, padding=1, bias=False),
                    nn.BatchNorm2d(width),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(width, width, 3, padding=1, bias=False),
                    nn.BatchNorm2d(width),
                    nn.ReLU(inplace=True),
                ]
                if idx < len(self.widths) - 1:
                    layers.append(nn.MaxPool2d(2))
                blocks.append(nn.Sequential(*layers))
                prev = width
            self.blocks = nn.ModuleList(blocks)
            self.tap_channels: List[int] = list(self.widths)
        else:
            net = resnet18(weights=None, num_classes=num_classes)
            if in_channels != 3:
                net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
            self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            self.blocks = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
            self.tap_channels = [64, 128, 256, 512]

        self.tap_names: List[str] = [f'block{i + 1}' for i in range(len(self.blocks))]
        self.feature_dim: int = self.tap_channels[-1]
        self.head = nn.Linear(self.feature_dim, num_classes)

    def _standardize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - 0.5) / 0.5

    def forward_with_taps(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Return logits and the feature map after every block, in tap order."""
        h = self.stem(self._standardize(x))
        taps = []
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        return self.head(self.pool(taps[-1])), taps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]

    @staticmethod
    def pool(feature_map: torch.Tensor) -> torch.Tensor:
        """Global average pooling to a (N, C) feature vector."""
        return feature_map.mean(dim=(2, 3))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled penultimate features."""
        return self.pool(self.forward_with_taps(x)[1][-1])


class LossPredictor(nn.Module):
    """DEP loss predictor G: estimates the classifier's per-sample loss from its taps.

    Each tap is average-pooled and projected to ``width`` units with a ReLU;
    the concatenated projections are fused into one non-negative score.
    """

    def __init__(self, tap_channels: Sequence[int], width: int = 128) -> None:
        super().__init__()
        self.tap_channels: List[int] = list(tap_channels)
        self.width: int = width
        self.projections = nn.ModuleList(
            nn.Sequential(nn.Linear(c, width), nn.ReLU(inplace=True)) for c in self.tap_channels
        )
        self.fusion = nn.Linear(width * len(self.tap_channels), 1)

    def forward(self, taps: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(taps) != len(self.projections):
            raise ShapeError((len(self.projections),), (len(taps),), what='tap list')
        pooled = [proj(ClassifierModel.pool(t)) for proj, t in zip(self.projections, taps)]
        return F.softplus(self.fusion(torch.cat(pooled, dim=1))).squeeze(1)


class DUQHead(nn.Module):
    """RBF head with one centroid per class, updated by exponential moving average.

    ``kernel_similarity`` returns exp(-||embed(f) - phi(y)||^2 / (2 l^2)) for
    every class y, which lies in (0, 1].
    """

    def __init__(
        self,
        feature_dim: int,
        num_classes: int,
        embedding_dim: int = 64,
        length_scale: float = 0.5,
        centroid_momentum: float = 0.999,
        gradient_penalty_weight: float = 0.5,
    ) -> None:
        super().__init__()
        if length_scale <= 0:
            raise ConfigError(f"length_scale must be positive, got {length_scale}")
        if not 0.0 < centroid_momentum < 1.0:
            raise ConfigError(f"centroid_momentum must lie in (0, 1), got {centroid_momentum}")
        self.num_classes: int = num_classes
        self.embedding_dim: int = embedding_dim
        self.length_scale: float = length_scale
        self.centroid_momentum: float = centroid_momentum
        self.gradient_penalty_weight: float = gradient_penalty_weight

        self.embedding = nn.Linear(feature_dim, embedding_dim)
        # Running class counts N_c and embedding sums m_c; centroids are m_c / N_c
        self.register_buffer('class_counts', torch.full((num_classes,), 13.0))
        self.register_buffer(
            'embedding_sums', torch.normal(0.0, 0.05, (num_classes, embedding_dim)) * 13.0
        )

    @property
    def centroids(self) -> torch.Tensor:
        return self.embedding_sums / self.class_counts.unsqueeze(1)

    def embed(self, features: torch.Tensor) -> torch.Tensor:
        return self.embedding(features)

    def kernel_from_embedding(self, z: torch.Tensor) -> torch.Tensor:
        distances = (z.unsqueeze(1) - self.centroids.unsqueeze(0)).pow(2).sum(dim=2)
        return torch.exp(-distances / (2 * self.length_scale ** 2))

    def kernel_similarity(self, features: torch.Tensor) -> torch.Tensor:
        """Return the (N, num_classes) kernel values K(x, y)."""
        return self.kernel_from_embedding(self.embed(features))

    @torch.no_grad()
    def update_centroids(self, z: torch.Tensor, labels: torch.Tensor) -> None:
        """EMA update of class counts and embedding sums from one batch."""
        one_hot = F.one_hot(labels, self.num_classes).to(z.dtype)
        gamma = self.centroid_momentum
        self.class_counts.mul_(gamma).add_((1 - gamma) * one_hot.sum(dim=0))
        self.embedding_sums.mul_(gamma).add_((1 - gamma) * one_hot.t() @ z)


@dataclass
class TrainedBundle:
    """Trained classifier plus optional loss predictor and DUQ head."""

    classifier: ClassifierModel
    loss_predictor: Optional[LossPredictor] = None
    duq_head: Optional[DUQHead] = None
    train_loss_stats: Dict[str, float] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def tap_names(self) -> List[str]:
        return list(self.classifier.tap_names)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.classifier.input_shape

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def modules(self) -> List[nn.Module]:
        return [m for m in (self.classifier, self.loss_predictor, self.duq_head) if m is not None]

    def freeze(self) -> 'TrainedBundle':
        """Switch every part to evaluation mode and stop parameter gradients."""
        for module in self.modules():
            module.eval()
            for param in module.parameters():
                param.requires_grad_(False)
        return self

    def to(self, device) -> 'TrainedBundle':
        for module in self.modules():
            module.to(device)
        return self

    @property
    def device(self) -> torch.device:
        return next(self.classifier.parameters()).device

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(('N',) + self.input_shape, tuple(x.shape))


def make_rank_pairs(batch_size: int) -> torch.Tensor:
    """Index pairs for the ranking loss within one batch.

    The batch is split in half; the first-half element k is paired with the
    second-half element k, then ordered cross pairs (i, j), i != j, are added
    until batch_size pairs exist.

    Returns:
        LongTensor of shape (P, 2), P <= batch_size
    """
    half = batch_size // 2
    pairs = [(k, half + k) for k in range(half)]
    for i in range(half):
        for j in range(half):
            if len(pairs) >= batch_size:
                break
            if i != j:
                pairs.append((i, half + j))
    return torch.tensor(pairs, dtype=torch.long).reshape(-1, 2)


def contrastive_aux_loss(
    s_pairs,
    shat_pairs,
    gamma: float = 1.0,
    reduction: str = 'sum',
) -> torch.Tensor:
    """Ranking hinge between true losses s and predicted losses s_hat.

    For each pair, I = 1 if s_i > s_j else -1 (ties map to -1), and the
    pair contributes max(0, -I * (s_hat_i - s_hat_j) + gamma).

    Args:
        s_pairs: (P, 2) true losses (treated as constants)
        shat_pairs: (P, 2) predicted losses
        gamma: Margin (>= 0)
        reduction: 'sum' or 'mean' over pairs

    Returns:
        Scalar loss tensor
    """
    s = torch.as_tensor(s_pairs, dtype=torch.float32).reshape(-1, 2).detach()
    shat = torch.as_tensor(shat_pairs).reshape(-1, 2)
    if s.shape != shat.shape:
        raise ShapeError(tuple(s.shape), tuple(shat.shape), what='pair list')
    if s.shape[0] == 0:
        return shat.sum() * 0.0
    indicator = (s[:, 0] > s[:, 1]).to(shat.dtype) * 2 - 1
    hinge = torch.clamp(-indicator * (shat[:, 0] - shat[:, 1]) + gamma, min=0.0)
    if reduction == 'mean':
        return hinge.mean()
    return hinge.sum()


@torch.no_grad()
def predict_with_taps(
    bundle: TrainedBundle,
    x: torch.Tensor,
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Evaluation-mode forward returning logits and taps in declared order.

    Raises:
        ShapeError: If x does not match the bundle's input shape
    """
    bundle.check_input(x)
    bundle.classifier.eval()
    return bundle.classifier.forward_with_taps(x.to(bundle.device))


@torch.no_grad()
def predict_logits(bundle: TrainedBundle, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Evaluation-mode logits for a large image tensor, batched."""
    bundle.check_input(images)
    bundle.classifier.eval()
    chunks = [
        bundle.classifier(images[i:i + batch_size].to(bundle.device)).cpu()
        for i in range(0, images.shape[0], batch_size)
    ]
    return torch.cat(chunks)


@torch.no_grad()
def predicted_loss(bundle: TrainedBundle, images: torch.Tensor) -> torch.Tensor:
    """DEP estimate G(x) for every image."""
    if bundle.loss_predictor is None:
        raise IncompatibilityError("bundle lacks loss predictor")
    bundle.classifier.eval()
    bundle.loss_predictor.eval()
    _, taps = bundle.classifier.forward_with_taps(images.to(bundle.device))
    return bundle.loss_predictor(taps).cpu()


@torch.no_grad()
def kernel_values(bundle: TrainedBundle, images: torch.Tensor) -> torch.Tensor:
    """DUQ kernel similarities (N, num_classes)."""
    if bundle.duq_head is None:
        raise IncompatibilityError("bundle lacks DUQ head")
    bundle.classifier.eval()
    feats = bundle.classifier.features(images.to(bundle.device))
    return bundle.duq_head.kernel_similarity(feats).cpu()


def uncertainty(bundle: TrainedBundle, images: torch.Tensor) -> torch.Tensor:
    """DUQ uncertainty score 1 - max_y K(x, y)."""
    return 1.0 - kernel_values(bundle, images).max(dim=1).values


def accuracy(bundle: TrainedBundle, data: LabeledImageSet) -> float:
    """Top-1 accuracy of the classifier head on ``data``."""
    predictions = predict_logits(bundle, data.images).argmax(dim=1)
    return float((predictions == data.labels).float().mean())


def duq_accuracy(bundle: TrainedBundle, data: LabeledImageSet) -> float:
    """Accuracy of argmax_y K(x, y)."""
    predictions = kernel_values(bundle, data.images).argmax(dim=1)
    return float((predictions == data.labels).float().mean())


@torch.no_grad()
def compute_train_loss_stats(classifier: ClassifierModel, data: LabeledImageSet) -> Dict[str, float]:
    """Mean and percentiles of the per-sample loss over correctly classified samples."""
    classifier.eval()
    device = next(classifier.parameters()).device
    losses = []
    for i in range(0, len(data), 256):
        x = data.images[i:i + 256].to(device)
        y = data.labels[i:i + 256].to(device)
        logits = classifier(x)
        per_sample = F.cross_entropy(logits, y, reduction='none')
        losses.append(per_sample[logits.argmax(dim=1) == y].cpu())
    values = torch.cat(losses).numpy().astype(np.float64)
    if values.size == 0:
        logger.warning("No correctly classified training samples; loss stats are empty")
        return {'count': 0}
    stats = {'mean': float(values.mean()), 'count': int(values.size)}
    for q in (10, 25, 50, 75, 90):
        stats[f'p{q}'] = float(np.percentile(values, q))
    return stats


def save_bundle(bundle: TrainedBundle, directory: str) -> Path:
    """Write ``weights.pt`` and ``manifest.json`` to ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    state = {'classifier': bundle.classifier.state_dict()}
    if bundle.loss_predictor is not None:
        state['loss_predictor'] = bundle.loss_predictor.state_dict()
    if bundle.duq_head is not None:
        state['duq_head'] = bundle.duq_head.state_dict()
    torch.save(state, out / WEIGHTS_FILE)

    classifier = bundle.classifier
    manifest: Dict[str, Any] = {
        'schema_version': BUNDLE_SCHEMA_VERSION,
        'num_classes': classifier.num_classes,
        'input_size': list(classifier.input_shape),
        'arch': classifier.arch,
        'widths': list(classifier.widths),
        'tap_names': list(classifier.tap_names),
        'loss_predictor': None,
        'duq': None,
        'train_loss_stats': bundle.train_loss_stats,
        **{key: bundle.metadata[key] for key in MANIFEST_FIELDS if key in bundle.metadata},
        'metadata': {key: value for key, value in bundle.metadata.items() if key not in MANIFEST_FIELDS},
    }
    if bundle.loss_predictor is not None:
        manifest['loss_predictor'] = {'width': bundle.loss_predictor.width}
    if bundle.duq_head is not None:
        head = bundle.duq_head
        manifest['duq'] = {
            'embedding_dim': head.embedding_dim,
            'length_scale': head.length_scale,
            'centroid_momentum': head.centroid_momentum,
            'gradient_penalty': head.gradient_penalty_weight,
        }
    with open(out / MANIFEST_FILE, 'w', encoding='utf-8') as fh:
        json.dump(manifest, fh, indent=2)
    logger.info(f"Bundle saved: {out}")
    return out


def load_bundle(directory: str, device: str = 'cpu') -> TrainedBundle:
    """Rebuild a bundle written by :func:`save_bundle`.

    Raises:
        MissingArtifactError: If the weights or manifest are absent
    """
    src = Path(directory)
    if not (src / WEIGHTS_FILE).exists() or not (src / MANIFEST_FILE).exists():
        raise MissingArtifactError(f"bundle not found: {src}")
    with open(src / MANIFEST_FILE, 'r', encoding='utf-8') as fh:
        manifest = json.load(fh)
    if manifest.get('schema_version') != BUNDLE_SCHEMA_VERSION:
        raise ConfigError(f"unsupported bundle schema_version {manifest.get('schema_version')}")

    state = torch.load(src / WEIGHTS_FILE, map_location='cpu')
    classifier = ClassifierModel(
        num_classes=manifest['num_classes'],
        input_shape=manifest['input_size'],
        arch=manifest['arch'],
        widths=manifest['widths'],
    )
    classifier.load_state_dict(state['classifier'])

    loss_predictor = None
    if manifest.get('loss_predictor'):
        loss_predictor = LossPredictor(classifier.tap_channels, manifest['loss_predictor']['width'])
        loss_predictor.load_state_dict(state['loss_predictor'])

    duq_head = None
    if manifest.get('duq'):
        duq = manifest['duq']
        duq_head = DUQHead(
            classifier.feature_dim,
            classifier.num_classes,
            embedding_dim=duq['embedding_dim'],
            length_scale=duq['length_scale'],
            centroid_momentum=duq['centroid_momentum'],
            gradient_penalty_weight=duq['gradient_penalty'],
        )
        duq_head.load_state_dict(state['duq_head'])

    bundle = TrainedBundle(
        classifier=classifier,
        loss_predictor=loss_predictor,
        duq_head=duq_head,
        train_loss_stats=manifest.get('train_loss_stats', {}),
        metadata={
            **manifest.get('metadata', {}),
            **{key: manifest[key] for key in MANIFEST_FIELDS if key in manifest},
        },
    )
    logger.debug(f"Bundle loaded from {src}")
    return bundle.to(device).freeze()
