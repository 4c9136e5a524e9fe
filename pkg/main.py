#!/usr/bin/env python3
"""Main CLI for counterfactual generation and evaluation."""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import torch
from dotenv import load_dotenv

from src.artifacts import (
    load_cf_archive,
    load_summary,
    save_cf_archive,
    save_cf_outputs,
    write_report,
    write_summary,
)
from src.classifier import load_bundle, save_bundle
from src.config import RunConfig, load_run_config, write_resolved_config
from src.datasets import (
    LabeledImageSet,
    corrupt,
    load_dataset_cache,
    load_image_folder,
    make_toy_dataset,
    save_dataset_cache,
    stratified_split,
)
from src.engine import batch_generate
from src.errors import DiscError, MissingArtifactError
from src.logger import get_logger, progress, setup_logging
from src.metrics import aggregate_report, classifier_discrepancy
from src.training import train_bundle

TEST_SPLIT_FILE = 'test_split.pt'

logger = get_logger()


def _full_dataset(config: RunConfig) -> LabeledImageSet:
    """Build (or read from DISC_CACHE_DIR) the complete labelled dataset."""
    data = config.data
    if data.source == 'folder':
        return load_image_folder(data.path, data.image_size, data.class_map)

    cache_dir = os.getenv('DISC_CACHE_DIR')
    cache_path = None
    if cache_dir:
        cache_path = Path(cache_dir) / f'toy_{data.n_per_class}_{data.image_size}_{data.seed}.pt'
        if cache_path.exists():
            logger.debug(f"Using cached toy dataset: {cache_path}")
            return load_dataset_cache(str(cache_path))[0]

    full = make_toy_dataset(data.n_per_class, data.image_size, data.seed)
    if cache_path is not None:
        save_dataset_cache(full, str(cache_path), {'seed': data.seed})
    return full


def _splits(config: RunConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    return stratified_split(_full_dataset(config), config.data.test_fraction, config.data.seed)


def _test_split(config: RunConfig, fallback: LabeledImageSet) -> LabeledImageSet:
    path = Path(config.classifier.bundle_dir) / TEST_SPLIT_FILE
    if path.exists():
        return load_dataset_cache(str(path))[0]
    logger.warning(f"{path} not found; using the test split rebuilt from the data section")
    return fallback


def _queries(config: RunConfig) -> Tuple[LabeledImageSet, LabeledImageSet, LabeledImageSet]:
    """Return (queries, train split, test split)."""
    train, rebuilt_test = _splits(config)
    test = _test_split(config, rebuilt_test)
    pool = train if config.data.query_split == 'train' else test
    queries = pool.of_class(config.data.source_label)
    queries = queries.subset(range(min(config.data.num_queries, len(queries))))
    if config.data.corruption is not None:
        queries = corrupt(queries, config.data.corruption.to_spec())
        logger.info(f"Queries corrupted: {config.data.corruption}")
    return queries, train, test


def cmd_train(config: RunConfig) -> int:
    """Train a bundle and write weights, manifest, test split and resolved config."""
    out_dir = config.classifier.bundle_dir
    train, test = _splits(config)
    training_config = config.classifier.to_training_config(config.master_seed, config.device)

    progress(f"📦 Training {training_config.mode} bundle on {len(train)} images...")
    bundle = train_bundle(train, training_config)
    bundle.metadata['seeds']['data'] = config.data.seed
    save_bundle(bundle, out_dir)
    save_dataset_cache(test, str(Path(out_dir) / TEST_SPLIT_FILE), {'seed': config.data.seed})
    write_resolved_config(config, out_dir)

    metrics = {
        'command': 'train-classifier',
        'mode': training_config.mode,
        'val_accuracy': bundle.metadata.get('val_accuracy'),
        'val_duq_accuracy': bundle.metadata.get('val_duq_accuracy'),
        'train_loss_mean': bundle.train_loss_stats.get('mean'),
    }
    print(json.dumps(metrics), flush=True)
    progress(f"✓ Bundle written to {out_dir}")
    return 0


def cmd_generate(config: RunConfig, workers: int = 1) -> int:
    """Generate counterfactuals for the configured queries."""
    out_dir = config.output.dir
    bundle = load_bundle(config.classifier.bundle_dir, config.device)
    objective = config.objective.to_spec()
    objective.check_bundle(bundle)

    queries, _, _ = _queries(config)
    fingerprint = config.fingerprint()
    progress(f"🎯 Generating {len(queries)} counterfactuals with the {config.prior.kind} prior...")

    results = batch_generate(
        queries,
        {config.data.source_label: config.data.target_label},
        bundle,
        config.prior.kind,
        objective,
        config.policy.to_policy(),
        master_seed=config.master_seed,
        workers=workers,
        warm_start_steps=config.prior.warm_start_steps,
        warm_start_learning_rate=config.prior.warm_start_learning_rate,
        prior_options=config.prior.options(),
        fingerprint=fingerprint,
    )

    Path(out_dir).mkdir(parents=True, exist_ok=True)
    for result in results:
        save_cf_outputs(result, out_dir, config.output.save_stages)
    write_summary(results, out_dir, fingerprint)
    save_cf_archive(results, out_dir)
    write_resolved_config(config, out_dir)

    n_success = sum(1 for r in results if r.success)
    logger.info(
        f"Generated {len(results)} counterfactuals, {n_success} successful",
        extra={'n': len(results), 'n_success': n_success},
    )
    progress(f"✓ {n_success}/{len(results)} successful counterfactuals in {out_dir}")
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    """Score generated counterfactuals and write report.json + per_sample.csv."""
    out_dir = config.output.dir
    summary = load_summary(out_dir)
    results = load_cf_archive(out_dir)
    if not results:
        raise MissingArtifactError(f"no counterfactuals stored in {out_dir}")

    discrepancy = None
    successful = [r for r in results if r.success]
    if config.metrics.compute_cd and successful:
        bundle = load_bundle(config.classifier.bundle_dir, config.device)
        train, rebuilt_test = _splits(config)
        test = _test_split(config, rebuilt_test)
        progress(f"📊 Training {config.metrics.cd_repeats} secondary classifiers...")
        discrepancy = classifier_discrepancy(
            train.of_class(config.data.source_label),
            torch.stack([r.counterfactual for r in successful]),
            test,
            bundle,
            config.classifier.to_training_config(config.master_seed, config.device),
            source_label=config.data.source_label,
            target_label=config.data.target_label,
            repeats=config.metrics.cd_repeats,
            seed=config.master_seed,
        )

    report = aggregate_report(
        results,
        threshold=config.metrics.threshold,
        fingerprint=config.fingerprint(),
        discrepancy=discrepancy,
    )
    write_report(report, out_dir, generation_fingerprint=summary.get('fingerprint'))
    write_resolved_config(config, out_dir)
    logger.info(
        f"Evaluation finished: success_rate={report.success_rate:.3f}",
        extra={'report': report.to_dict()},
    )
    progress(f"✓ Report written to {out_dir}")
    return 0


def cmd_discrepancy(config: RunConfig, workers: int = 1) -> int:
    """Generate counterfactuals, then evaluate them with classifier discrepancy."""
    code = cmd_generate(config, workers)
    if code != 0:
        return code
    return cmd_evaluate(replace(config, metrics=replace(config.metrics, compute_cd=True)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Synthesize and evaluate counterfactual explanations for an image classifier'
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, help_text in (
        ('train-classifier', 'Train a classifier bundle (plain, DEP or DUQ)'),
        ('generate', 'Generate counterfactuals for the configured queries'),
        ('evaluate', 'Compute MSE, concentration and classifier discrepancy'),
        ('discrepancy', 'Generate counterfactuals, then evaluate them'),
    ):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument('--config', default=None, help='Path to the JSON run config')
        sub.add_argument(
            '--output-dir',
            default=None,
            help='Override output.dir (classifier.bundle_dir for train-classifier)'
        )
        sub.add_argument('--seed', type=int, default=None, help='Override master_seed')
        sub.add_argument('--workers', type=int, default=1, help='Parallel generation workers')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the counterfactual CLI."""
    load_dotenv()
    setup_logging()

    logger.info("=" * 60)
    logger.info("Counterfactual Explanations - Starting")
    logger.info("=" * 60)

    args = build_parser().parse_args(argv)
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            config = replace(config, master_seed=args.seed)
        if args.output_dir is not None:
            if args.command == 'train-classifier':
                config.classifier.bundle_dir = args.output_dir
            else:
                config.output.dir = args.output_dir
        logger.debug(f"Resolved config: {config.to_dict()}")

        if args.command == 'train-classifier':
            return cmd_train(config)
        if args.command == 'generate':
            return cmd_generate(config, args.workers)
        if args.command == 'evaluate':
            return cmd_evaluate(config)
        return cmd_discrepancy(config, args.workers)
    except DiscError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ Error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
