"""Counterfactual quality measures: pixel MSE, concentration score and
classifier discrepancy, plus the aggregated report."""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.stats import mannwhitneyu

from src.classifier import TrainedBundle, predict_logits, predicted_loss
from src.datasets import LabeledImageSet, concat_sets
from src.engine import CFResult, derive_seed
from src.errors import ConfigError, DatasetError, ShapeError, TrainingDivergenceError
from src.logger import get_logger
from src.training import TrainingConfig, train_classifier

logger = get_logger()

DEFAULT_THRESHOLD = 0.05
DEFAULT_REPEATS = 5


def _check_same_shape(x: torch.Tensor, x_bar: torch.Tensor) -> None:
    if x.shape != x_bar.shape:
        raise ShapeError(x.shape, x_bar.shape, what='counterfactual')


def mse(x: torch.Tensor, x_bar: torch.Tensor) -> float:
    """Mean squared pixel error between query and counterfactual."""
    _check_same_shape(x, x_bar)
    diff = x.detach().double() - x_bar.detach().double()
    return float(diff.pow(2).mean())


def concentration(x: torch.Tensor, x_bar: torch.Tensor, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Normalized area of the bounding box around all changed pixels.

    The difference image is reduced over channels by max and a pixel counts as
    changed when that value is >= threshold. Returns 0 when nothing changed.

    Args:
        x: Query, (C, H, W) or (H, W)
        x_bar: Counterfactual with the same shape
        threshold: Change threshold on the [0, 1] scale

    Returns:
        Box area divided by H * W, in [0, 1]
    """
    _check_same_shape(x, x_bar)
    diff = (x.detach() - x_bar.detach()).abs()
    if diff.dim() == 3:
        diff = diff.amax(dim=0)
    mask = diff >= threshold
    if not mask.any():
        return 0.0
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    height, width = mask.shape
    area = (int(rows[-1]) - int(rows[0]) + 1) * (int(cols[-1]) - int(cols[0]) + 1)
    return area / (height * width)


@dataclass
class DiscrepancyResult:
    """Classifier discrepancy over repeated secondary trainings."""

    cd: float
    std: float
    repeats: int
    reference_accuracy: float
    secondary_accuracies: List[float] = field(default_factory=list)
    dropped_repeats: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'cd': self.cd,
            'std': self.std,
            'repeats': self.repeats,
            'reference_accuracy': self.reference_accuracy,
            'secondary_accuracies': self.secondary_accuracies,
            'dropped_repeats': self.dropped_repeats,
        }


def _pair_accuracy(logits: torch.Tensor, labels: torch.Tensor, columns: Sequence[int]) -> float:
    """Accuracy when the decision is restricted to ``columns``; labels index into columns."""
    predictions = logits[:, list(columns)].argmax(dim=1)
    return float((predictions == labels).float().mean())


def classifier_discrepancy(
    source_images: LabeledImageSet,
    counterfactuals: torch.Tensor,
    test: LabeledImageSet,
    bundle: TrainedBundle,
    trainer_config: TrainingConfig,
    source_label: int = 0,
    target_label: int = 1,
    repeats: int = DEFAULT_REPEATS,
    seed: int = 0,
) -> DiscrepancyResult:
    """Test-accuracy gap between F and secondary classifiers trained on CFs.

    Each repeat trains F^c from scratch on the real source-class images
    (relabelled 0) and the counterfactuals (relabelled 1) with a fresh seed.
    Both classifiers are scored on the source and target samples of ``test``;
    F decides between its source and target logits only.

    Args:
        source_images: Real training images of the source class
        counterfactuals: (N, C, H, W) counterfactuals generated from source images
        test: Held-out set, disjoint from both trainings
        bundle: Reference classifier F
        trainer_config: Training settings reused for F^c (mode forced to plain)
        source_label: Label the counterfactuals started from
        target_label: Label the counterfactuals were pushed to
        repeats: Number of secondary trainings
        seed: Base seed for the secondary trainings

    Returns:
        DiscrepancyResult with mean and population std over kept repeats

    Raises:
        ConfigError: If the counterfactual set is empty or repeats < 1
        TrainingDivergenceError: If every secondary training diverges
    """
    if counterfactuals.shape[0] == 0:
        raise ConfigError("classifier discrepancy needs at least one counterfactual")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")

    names = (test.class_names[source_label], test.class_names[target_label])
    keep = torch.nonzero((test.labels == source_label) | (test.labels == target_label)).flatten()
    if keep.numel() == 0:
        raise DatasetError("test split has no samples of the source or target class")
    pair_images = test.images[keep]
    pair_labels = (test.labels[keep] == target_label).long()

    reference = _pair_accuracy(predict_logits(bundle, pair_images), pair_labels, (source_label, target_label))

    train_set = concat_sets(
        [
            LabeledImageSet(source_images.images, torch.zeros(len(source_images), dtype=torch.long), names),
            LabeledImageSet(counterfactuals.detach().cpu().clamp(0, 1),
                            torch.ones(counterfactuals.shape[0], dtype=torch.long), names),
        ],
        split_tag='train',
        class_names=names,
    )

    gaps: List[float] = []
    accuracies: List[float] = []
    dropped: List[int] = []
    for r in range(repeats):
        config = replace(trainer_config, mode='plain', seed=derive_seed(seed, r))
        try:
            secondary = train_classifier(train_set, config)
        except TrainingDivergenceError as e:
            logger.warning(f"Secondary training {r} dropped: {e}")
            dropped.append(r)
            continue
        acc = _pair_accuracy(predict_logits(secondary, pair_images), pair_labels, (0, 1))
        accuracies.append(acc)
        gaps.append(reference - acc)
        logger.info(f"CD repeat {r}: Acc(F)={reference:.4f}, Acc(F^c)={acc:.4f}",
                    extra={'repeat': r, 'reference_accuracy': reference, 'secondary_accuracy': acc})

    if not gaps:
        raise TrainingDivergenceError(f"all {repeats} secondary trainings diverged")
    values = np.asarray(gaps, dtype=np.float64)
    return DiscrepancyResult(
        cd=float(values.mean()),
        std=float(values.std()),
        repeats=len(gaps),
        reference_accuracy=reference,
        secondary_accuracies=accuracies,
        dropped_repeats=dropped,
    )


@dataclass
class MetricReport:
    """Aggregated quality of one batch of counterfactuals.

    Means and stds are over successful counterfactuals only and are None when
    there are none. ``rows`` holds one entry per result.
    """

    n: int
    n_total: int
    success_rate: float
    mse_mean: Optional[float] = None
    mse_std: Optional[float] = None
    concentration_mean: Optional[float] = None
    concentration_std: Optional[float] = None
    threshold: float = DEFAULT_THRESHOLD
    cd: Optional[DiscrepancyResult] = None
    fingerprint: str = ''
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n': self.n,
            'n_total': self.n_total,
            'success_rate': self.success_rate,
            'mse': {'mean': self.mse_mean, 'std': self.mse_std},
            'concentration': {'mean': self.concentration_mean, 'std': self.concentration_std,
                              'threshold': self.threshold},
            'cd': self.cd.to_dict() if self.cd is not None else None,
            'fingerprint': self.fingerprint,
        }


def per_sample_rows(results: Sequence[CFResult], threshold: float = DEFAULT_THRESHOLD) -> List[Dict[str, Any]]:
    """One row per result with the columns of ``per_sample.csv``."""
    return [
        {
            'idx': r.index,
            'success': bool(r.success),
            'mse': mse(r.query, r.counterfactual),
            'concentration': concentration(r.query, r.counterfactual, threshold),
            'final_fc_prob': float(r.final_fc_prob),
        }
        for r in results
    ]


def summarize_rows(rows: Sequence[Dict[str, Any]]) -> Dict[str, Optional[float]]:
    """Success rate and mean/std of mse and concentration over successful rows."""
    if not rows:
        raise ConfigError("cannot summarize an empty result set")
    ok = [row for row in rows if row['success']]
    summary: Dict[str, Optional[float]] = {
        'n': len(ok),
        'n_total': len(rows),
        'success_rate': len(ok) / len(rows),
        'mse_mean': None,
        'mse_std': None,
        'concentration_mean': None,
        'concentration_std': None,
    }
    if ok:
        for key in ('mse', 'concentration'):
            values = np.asarray([row[key] for row in ok], dtype=np.float64)
            summary[f'{key}_mean'] = float(values.mean())
            summary[f'{key}_std'] = float(values.std())
    return summary


def aggregate_report(
    results: Sequence[CFResult],
    threshold: float = DEFAULT_THRESHOLD,
    fingerprint: str = '',
    discrepancy: Optional[DiscrepancyResult] = None,
) -> MetricReport:
    """Build the MetricReport of a batch.

    Args:
        results: Generation results (non-empty)
        threshold: Concentration threshold
        fingerprint: Config fingerprint of the evaluated generation
        discrepancy: Classifier discrepancy computed for this batch, if any

    Returns:
        MetricReport; metrics are None and success_rate is 0 when nothing succeeded
    """
    rows = per_sample_rows(results, threshold)
    summary = summarize_rows(rows)
    if summary['n'] == 0:
        logger.warning("No successful counterfactuals; metrics are reported as absent")
    return MetricReport(
        threshold=threshold,
        cd=discrepancy,
        fingerprint=fingerprint,
        rows=rows,
        **summary,
    )


def dep_shift_test(
    bundle: TrainedBundle,
    clean: torch.Tensor,
    corrupted: torch.Tensor,
) -> Dict[str, float]:
    """Check that the DEP estimate rises under a distribution shift.

    Uses a one-sided Mann-Whitney rank-sum test of G(corrupted) > G(clean).

    Returns:
        Dict with median_clean, median_corrupted and p_value
    """
    g_clean = predicted_loss(bundle, clean).cpu().numpy().astype(np.float64)
    g_corrupted = predicted_loss(bundle, corrupted).cpu().numpy().astype(np.float64)
    test = mannwhitneyu(g_corrupted, g_clean, alternative='greater')
    result = {
        'median_clean': float(np.median(g_clean)),
        'median_corrupted': float(np.median(g_corrupted)),
        'p_value': float(test.pvalue),
    }
    logger.info(f"DEP shift test: {result}", extra=result)
    return result
