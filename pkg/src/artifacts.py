"""Reading and writing run artifacts: images, trajectories, summaries and reports."""

import csv
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from src.engine import CFResult
from src.errors import MissingArtifactError
from src.logger import get_logger
from src.metrics import MetricReport
from src.objectives import TargetSpec

logger = get_logger()

SUMMARY_FILE = 'summary.json'
ARCHIVE_FILE = 'counterfactuals.pt'
REPORT_FILE = 'report.json'
PER_SAMPLE_FILE = 'per_sample.csv'


def to_png(image: torch.Tensor, path: Path) -> None:
    """Write a (C, H, W) image in [0, 1] as an 8-bit PNG."""
    array = image.detach().cpu().clamp(0, 1).mul(255).round().to(torch.uint8)
    array = array.permute(1, 2, 0).numpy()
    if array.shape[2] == 1:
        array = array[:, :, 0]
    Image.fromarray(np.ascontiguousarray(array)).save(path)


def diff_image(query: torch.Tensor, counterfactual: torch.Tensor) -> torch.Tensor:
    """|x - x_bar| rescaled so its maximum maps to 1."""
    diff = (query - counterfactual).abs()
    peak = float(diff.max())
    return diff / peak if peak > 0 else diff


def save_cf_outputs(result: CFResult, directory: str, save_stages: bool = False) -> None:
    """Write the PNG triplet and trajectory of one result.

    Args:
        result: Generation result
        directory: Output directory
        save_stages: Also write one ``stage_<idx>_<stage>.png`` per stage
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    idx = result.index
    to_png(result.counterfactual, out / f'cf_{idx}.png')
    to_png(result.query, out / f'query_{idx}.png')
    to_png(diff_image(result.query, result.counterfactual), out / f'diff_{idx}.png')
    with open(out / f'trajectory_{idx}.json', 'w', encoding='utf-8') as fh:
        json.dump(result.to_dict(), fh, indent=2)
    if save_stages:
        for stage, snapshot in enumerate(result.stage_snapshots, start=1):
            to_png(snapshot, out / f'stage_{idx}_{stage}.png')


def build_summary(results: Sequence[CFResult], fingerprint: str) -> Dict[str, Any]:
    """Batch-level summary; contains no timestamps so reruns compare bitwise."""
    n_success = sum(1 for r in results if r.success)
    return {
        'fingerprint': fingerprint,
        'n': len(results),
        'n_success': n_success,
        'success_rate': n_success / len(results) if results else 0.0,
        'n_diverged': sum(1 for r in results if r.diverged),
        'n_failed': sum(1 for r in results if r.error is not None and not r.diverged),
        'queries': [
            {
                'index': r.index,
                'seed': r.seed,
                'source_label': r.target.source_label,
                'target_label': r.target.target_label,
                'success': r.success,
                'diverged': r.diverged,
                'final_fc_prob': r.final_fc_prob,
                'predicted_label': r.predicted_label,
                'stages_executed': r.stages_executed,
                'error': r.error,
            }
            for r in results
        ],
    }


def write_summary(results: Sequence[CFResult], directory: str, fingerprint: str) -> Path:
    target = Path(directory) / SUMMARY_FILE
    with open(target, 'w', encoding='utf-8') as fh:
        json.dump(build_summary(results, fingerprint), fh, indent=2, sort_keys=True)
    logger.info(f"Summary written: {target}")
    return target


def load_summary(directory: str) -> Dict[str, Any]:
    """Read ``summary.json`` written by the generate command.

    Raises:
        MissingArtifactError: If the file doesn't exist
    """
    path = Path(directory) / SUMMARY_FILE
    if not path.exists():
        raise MissingArtifactError(f"generation summary not found: {path}")
    with open(path, 'r', encoding='utf-8') as fh:
        return json.load(fh)


def save_cf_archive(results: Sequence[CFResult], directory: str) -> Path:
    """Store exact query and counterfactual tensors for later evaluation."""
    target = Path(directory) / ARCHIVE_FILE
    torch.save(
        {
            'queries': torch.stack([r.query for r in results]),
            'counterfactuals': torch.stack([r.counterfactual for r in results]),
            'source_labels': [r.target.source_label for r in results],
            'target_labels': [r.target.target_label for r in results],
            'success': [r.success for r in results],
            'diverged': [r.diverged for r in results],
            'final_fc_prob': [r.final_fc_prob for r in results],
            'predicted_label': [r.predicted_label for r in results],
            'index': [r.index for r in results],
            'seed': [r.seed for r in results],
            'error': [r.error for r in results],
            'fingerprint': results[0].fingerprint if results else '',
        },
        target,
    )
    return target


def load_cf_archive(directory: str) -> List[CFResult]:
    """Rebuild results (without trajectories) from ``counterfactuals.pt``.

    Raises:
        MissingArtifactError: If the archive doesn't exist
    """
    path = Path(directory) / ARCHIVE_FILE
    if not path.exists():
        raise MissingArtifactError(f"counterfactual archive not found: {path}")
    payload = torch.load(path, map_location='cpu')
    results = []
    for i in range(len(payload['index'])):
        target = TargetSpec(
            target_label=payload['target_labels'][i],
            source_label=payload['source_labels'][i],
        )
        results.append(CFResult(
            counterfactual=payload['counterfactuals'][i],
            query=payload['queries'][i],
            target=target,
            success=payload['success'][i],
            diverged=payload['diverged'][i],
            final_fc_prob=payload['final_fc_prob'][i],
            predicted_label=payload['predicted_label'][i],
            fingerprint=payload['fingerprint'],
            index=payload['index'][i],
            seed=payload['seed'][i],
            error=payload['error'][i],
        ))
    logger.debug(f"Loaded {len(results)} counterfactuals from {path}")
    return results


class PerSampleCSV:
    """Per-sample metric table written next to ``report.json``."""

    # CSV file headers
    HEADERS: List[str] = ['idx', 'success', 'mse', 'concentration', 'final_fc_prob']

    def __init__(self, csv_path: str) -> None:
        self.csv_path: str = csv_path

    def write_rows(self, rows: Sequence[Dict[str, Any]]) -> None:
        """Replace the file with ``rows`` (floats keep full precision)."""
        with open(self.csv_path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.DictWriter(fh, fieldnames=self.HEADERS)
            writer.writeheader()
            for row in rows:
                writer.writerow({key: row[key] for key in self.HEADERS})
        logger.debug(f"Wrote {len(rows)} rows to {self.csv_path}")

    def read_rows(self) -> List[Dict[str, Any]]:
        """Read rows back with their original types."""
        if not os.path.exists(self.csv_path):
            raise MissingArtifactError(f"per-sample table not found: {self.csv_path}")
        with open(self.csv_path, 'r', newline='', encoding='utf-8') as fh:
            return [
                {
                    'idx': int(record['idx']),
                    'success': record['success'] == 'True',
                    'mse': float(record['mse']),
                    'concentration': float(record['concentration']),
                    'final_fc_prob': float(record['final_fc_prob']),
                }
                for record in csv.DictReader(fh)
            ]


def write_report(
    report: MetricReport,
    directory: str,
    generation_fingerprint: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``report.json`` and ``per_sample.csv``.

    Args:
        report: Aggregated metrics
        directory: Output directory
        generation_fingerprint: Fingerprint read from the generation summary
        extra: Additional top-level fields

    Returns:
        Path of ``report.json``
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    PerSampleCSV(str(out / PER_SAMPLE_FILE)).write_rows(report.rows)
    document = report.to_dict()
    document['generation_fingerprint'] = generation_fingerprint
    document.update(extra or {})
    target = out / REPORT_FILE
    with open(target, 'w', encoding='utf-8') as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
    logger.info(f"Report written: {target}")
    return target
