"""Image datasets: folder loading, the synthetic toy task and test-time corruptions."""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, TensorDataset
from torchvision.transforms.functional import gaussian_blur

from src.errors import DatasetError
from src.logger import get_logger

logger = get_logger()

SPLIT_TAGS = ('train', 'val', 'test')
CORRUPTION_KINDS = ('gaussian_noise', 'blur', 'brightness_shift', 'occlusion_mask')
IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg')

# Severity -> corruption parameter table (see CONFIG.md)
NOISE_SIGMA_PER_SEVERITY = 0.4
BLUR_SIGMA_PER_SEVERITY = 3.0
BRIGHTNESS_PER_SEVERITY = 0.5
OCCLUSION_FRACTION_PER_SEVERITY = 0.5


@dataclass(frozen=True)
class LabeledImageSet:
    """Images of shape (N, C, H, W) in [0, 1] with integer labels.

    Instances are treated as immutable: operations return new sets.
    """

    images: torch.Tensor
    labels: torch.Tensor
    class_names: Tuple[str, ...]
    split_tag: str = 'train'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'class_names', tuple(self.class_names))
        object.__setattr__(self, 'labels', torch.as_tensor(self.labels, dtype=torch.long))
        if self.images.dim() != 4:
            raise DatasetError(f"images must be (N, C, H, W), got shape {tuple(self.images.shape)}")
        n = self.images.shape[0]
        if n == 0:
            raise DatasetError("image set is empty")
        if self.labels.shape != (n,):
            raise DatasetError(f"expected {n} labels, got shape {tuple(self.labels.shape)}")
        if self.split_tag not in SPLIT_TAGS:
            raise DatasetError(f"unknown split tag '{self.split_tag}'")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DatasetError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise DatasetError(
                f"labels must lie in [0, {len(self.class_names)}), "
                f"got range [{int(self.labels.min())}, {int(self.labels.max())}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split_tag: Optional[str] = None) -> 'LabeledImageSet':
        """Return the samples at ``indices`` as a new set."""
        index = torch.as_tensor(indices, dtype=torch.long)
        return LabeledImageSet(
            images=self.images[index],
            labels=self.labels[index],
            class_names=self.class_names,
            split_tag=split_tag or self.split_tag,
        )

    def of_class(self, label: int) -> 'LabeledImageSet':
        """Return only the samples carrying ``label``."""
        indices = torch.nonzero(self.labels == label).flatten()
        if indices.numel() == 0:
            raise DatasetError(f"class {label} has no samples in the {self.split_tag} split")
        return self.subset(indices)


@dataclass(frozen=True)
class CorruptionSpec:
    """Test-time corruption of a given kind and severity in [0, 1]."""

    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.severity <= 1.0:
            raise DatasetError(f"corruption severity must lie in [0, 1], got {self.severity}")

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'severity': self.severity, 'seed': self.seed}


def load_image_folder(
    path: str,
    image_size: int,
    class_map: Mapping[str, int],
    split_tag: str = 'train',
) -> LabeledImageSet:
    """Load an ``<root>/<class_name>/*.png|jpg`` folder.

    Grayscale and palette images are converted to RGB; every image is resized
    to (image_size, image_size) and scaled to [0, 1].

    Args:
        path: Root directory with one subdirectory per class
        image_size: Output side length in pixels
        class_map: Mapping of class directory name to label
        split_tag: Split tag recorded on the returned set

    Returns:
        LabeledImageSet with channels-first images

    Raises:
        DatasetError: If the root or a class directory is missing, or a class
            ends up with no readable images
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"image folder not found: {root}")

    num_classes = max(class_map.values()) + 1
    class_names = [''] * num_classes
    for name, label in class_map.items():
        class_names[label] = name

    images: List[torch.Tensor] = []
    labels: List[int] = []
    for name, label in sorted(class_map.items(), key=lambda item: item[1]):
        class_dir = root / name
        if not class_dir.is_dir():
            raise DatasetError(f"class directory not found: {class_dir}")

        count = 0
        for file_path in sorted(class_dir.iterdir()):
            if file_path.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            try:
                with Image.open(file_path) as img:
                    img = img.convert('RGB').resize((image_size, image_size), Image.BILINEAR)
                    array = np.asarray(img, dtype=np.uint8)
            except (OSError, UnidentifiedImageError) as e:
                logger.warning(f"Skipping unreadable image {file_path}: {e}")
                continue
            images.append(torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0)
            labels.append(label)
            count += 1

        if count == 0:
            raise DatasetError(f"class '{name}' has no images")
        logger.debug(f"Loaded {count} images for class '{name}'")

    logger.info(f"Loaded {len(images)} images from {root}")
    return LabeledImageSet(
        images=torch.stack(images),
        labels=torch.tensor(labels),
        class_names=tuple(class_names),
        split_tag=split_tag,
    )


def _smooth_noise(generator: torch.Generator, n: int, channels: int, size: int) -> torch.Tensor:
    """Low-frequency noise in [-1, 1] made by upsampling a coarse random grid."""
    coarse = torch.rand(n, channels, 4, 4, generator=generator) * 2 - 1
    return F.interpolate(coarse, size=(size, size), mode='bicubic', align_corners=False).clamp(-1, 1)


def make_toy_dataset(n_per_class: int, image_size: int, seed: int) -> LabeledImageSet:
    """Generate the two-class "mouth" toy task.

    Class 0 carries a dark horizontal bar in the lower third of the image,
    class 1 an upward-curved arc (a smile) in the same region. Backgrounds are
    smooth random textures; feature position and contrast are jittered per
    sample. The output depends only on the arguments.

    Args:
        n_per_class: Samples per class (>= 1)
        image_size: Side length in pixels (>= 16)
        seed: Random seed

    Returns:
        LabeledImageSet with 3-channel images, class names ('bar', 'arc')
    """
    if n_per_class < 1:
        raise DatasetError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < 16:
        raise DatasetError(f"image_size must be >= 16, got {image_size}")

    g = torch.Generator().manual_seed(seed)
    n = 2 * n_per_class
    size = image_size
    labels = torch.arange(n) % 2

    background = 0.6 + 0.15 * _smooth_noise(g, n, 3, size)
    background = background + 0.03 * (torch.rand(n, 3, size, size, generator=g) * 2 - 1)

    jitter = max(1, size // 16)
    shift_x = torch.randint(-jitter, jitter + 1, (n,), generator=g).float()
    shift_y = torch.randint(-jitter, jitter + 1, (n,), generator=g).float()
    contrast = 0.6 + 0.4 * torch.rand(n, generator=g)

    rows = torch.arange(size, dtype=torch.float32).view(1, size, 1)
    cols = torch.arange(size, dtype=torch.float32).view(1, 1, size)
    center_x = (size - 1) / 2 + shift_x.view(n, 1, 1)
    center_y = round(0.8 * size) + shift_y.view(n, 1, 1)
    half_width = size / 4
    depth = size / 8
    thickness = max(1.0, size / 20)

    t = ((cols - center_x) / half_width).clamp(-1.5, 1.5)
    curve = center_y + depth * (0.5 - t ** 2)
    is_arc = (labels == 1).view(n, 1, 1).float()
    path_y = is_arc * curve + (1 - is_arc) * center_y

    inside = ((cols - center_x).abs() <= half_width).float()
    mask = (1 - (rows - path_y).abs() / thickness).clamp(0, 1) * inside
    mask = (mask * contrast.view(n, 1, 1)).unsqueeze(1)

    images = (background * (1 - mask) + 0.05 * mask).clamp(0, 1)
    logger.debug(f"Generated toy dataset: n={n}, size={size}, seed={seed}")
    return LabeledImageSet(images=images, labels=labels, class_names=('bar', 'arc'))


def corrupt(data: LabeledImageSet, spec: CorruptionSpec) -> LabeledImageSet:
    """Apply a seeded test-time corruption; labels are preserved.

    Raises:
        DatasetError: If the corruption kind is unknown
    """
    if spec.kind not in CORRUPTION_KINDS:
        raise DatasetError(
            f"unknown corruption kind '{spec.kind}' (expected one of {', '.join(CORRUPTION_KINDS)})"
        )

    images = data.images
    s = float(spec.severity)
    if s == 0.0:
        out = images.clone().clamp(0, 1)
    elif spec.kind == 'gaussian_noise':
        g = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(images.shape, generator=g) * (NOISE_SIGMA_PER_SEVERITY * s)
        out = (images + noise).clamp(0, 1)
    elif spec.kind == 'blur':
        sigma = BLUR_SIGMA_PER_SEVERITY * s
        kernel = 2 * math.ceil(3 * sigma) + 1
        out = gaussian_blur(images, kernel_size=[kernel, kernel], sigma=[sigma, sigma]).clamp(0, 1)
    elif spec.kind == 'brightness_shift':
        out = (images + BRIGHTNESS_PER_SEVERITY * s).clamp(0, 1)
    else:
        g = torch.Generator().manual_seed(spec.seed)
        n, _, h, w = images.shape
        side = max(1, round(OCCLUSION_FRACTION_PER_SEVERITY * s * min(h, w)))
        tops = torch.randint(0, h - side + 1, (n,), generator=g)
        lefts = torch.randint(0, w - side + 1, (n,), generator=g)
        out = images.clone()
        for i in range(n):
            top, left = int(tops[i]), int(lefts[i])
            out[i, :, top:top + side, left:left + side] = 0.0

    return LabeledImageSet(
        images=out,
        labels=data.labels.clone(),
        class_names=data.class_names,
        split_tag=data.split_tag,
    )


def stratified_split(
    data: LabeledImageSet,
    test_fraction: float = 0.1,
    seed: int = 0,
    test_tag: str = 'test',
) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Split per class into (train, held-out) parts.

    Every class with at least two samples keeps one sample on each side.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")

    g = torch.Generator().manual_seed(seed)
    train_idx: List[torch.Tensor] = []
    test_idx: List[torch.Tensor] = []
    for label in range(data.num_classes):
        members = torch.nonzero(data.labels == label).flatten()
        if members.numel() == 0:
            continue
        members = members[torch.randperm(members.numel(), generator=g)]
        n_test = int(round(members.numel() * test_fraction))
        if members.numel() >= 2:
            n_test = min(max(n_test, 1), members.numel() - 1)
        else:
            n_test = 0
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])

    train = torch.sort(torch.cat(train_idx)).values
    test = torch.sort(torch.cat(test_idx)).values
    if test.numel() == 0:
        raise DatasetError("held-out split is empty; need at least two samples in some class")
    return data.subset(train, split_tag='train'), data.subset(test, split_tag=test_tag)


def make_loader(
    data: LabeledImageSet,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
) -> DataLoader:
    """Seeded DataLoader yielding (images, labels) batches."""
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(
        TensorDataset(data.images, data.labels),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
    )


def save_dataset_cache(
    data: LabeledImageSet,
    path: str,
    manifest: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write a dataset archive plus its JSON sidecar manifest.

    Args:
        data: Dataset to store
        path: Archive path (``.pt``); the sidecar is ``<path>.json``
        manifest: Extra manifest fields (seed, corruption, ...)

    Returns:
        Path of the archive
    """
    archive = Path(path)
    archive.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            'images': data.images,
            'labels': data.labels,
            'class_names': list(data.class_names),
            'split_tag': data.split_tag,
        },
        archive,
    )
    sidecar = {
        'n': len(data),
        'image_size': data.images.shape[-1],
        'class_names': list(data.class_names),
        'seed': None,
        'corruption': None,
    }
    sidecar.update(manifest or {})
    with open(archive.with_suffix(archive.suffix + '.json'), 'w', encoding='utf-8') as fh:
        json.dump(sidecar, fh, indent=2)
    logger.debug(f"Dataset cached: {archive}")
    return archive


def load_dataset_cache(path: str) -> Tuple[LabeledImageSet, Dict[str, Any]]:
    """Read an archive written by :func:`save_dataset_cache`.

    Returns:
        Tuple of (dataset, manifest)
    """
    archive = Path(path)
    sidecar = archive.with_suffix(archive.suffix + '.json')
    if not archive.exists() or not sidecar.exists():
        raise DatasetError(f"dataset cache not found: {archive}")
    payload = torch.load(archive, map_location='cpu')
    with open(sidecar, 'r', encoding='utf-8') as fh:
        manifest = json.load(fh)
    data = LabeledImageSet(
        images=payload['images'],
        labels=payload['labels'],
        class_names=tuple(payload['class_names']),
        split_tag=payload['split_tag'],
    )
    return data, manifest


def concat_sets(
    parts: Sequence[LabeledImageSet],
    split_tag: str = 'train',
    class_names: Optional[Sequence[str]] = None,
) -> LabeledImageSet:
    """Concatenate image sets that share an image shape."""
    if not parts:
        raise DatasetError("nothing to concatenate")
    return LabeledImageSet(
        images=torch.cat([p.images for p in parts]),
        labels=torch.cat([p.labels for p in parts]),
        class_names=tuple(class_names or parts[0].class_names),
        split_tag=split_tag,
    )
