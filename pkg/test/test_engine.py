#!/usr/bin/env python3
"""Test the progressive counterfactual engine."""

import json
import logging

import pytest
import torch

from src.classifier import predict_logits
from src.datasets import LabeledImageSet, make_toy_dataset, stratified_split
from src.engine import (
    WARM_START_LEARNING_RATES,
    WARM_START_STEPS,
    CFResult,
    StagePolicy,
    batch_generate,
    derive_seed,
    generate_cf,
    stage_lambda1,
    warm_start_prior,
)
from src.errors import ConfigError, IncompatibilityError
from src.logger import LOGGER_NAME
from src.objectives import ObjectiveSpec, TargetSpec
from src.priors import build_prior, psnr
from src.training import TrainingConfig, train_classifier, train_joint_dep

FLIP = TargetSpec(target_label=1, source_label=0)
SMALL_INR = {'num_frequencies': 32, 'hidden_layers': 2, 'hidden_width': 32}
SMALL_DIP = {'scales': 2, 'width': 8, 'noise_channels': 8, 'skip_channels': 2}
# success_prob above 1 never stops early
NO_EARLY_EXIT = dict(plateau_window=10_000, success_prob=2.0)


def _pixel_prior(query, seed=0):
    state = build_prior('pixel', query.shape, seed=seed, query=query)
    state.snapshot_initialization()
    return state


def _queries(toy_set, n):
    sources = toy_set.of_class(0)
    return LabeledImageSet(sources.images[:n], sources.labels[:n], sources.class_names)


def test_stage_lambda1_schedule():
    assert stage_lambda1(1.0, 2.0, 1) == 1.0
    assert stage_lambda1(1.0, 2.0, 3) == 0.25
    assert stage_lambda1(0.5, 4.0, 2) == 0.125


def test_policy_num_stages():
    assert StagePolicy().num_stages(5) == 5
    assert StagePolicy(max_stages=2).num_stages(5) == 2
    assert StagePolicy(max_stages=9).num_stages(5) == 5
    assert StagePolicy(max_stages=0).num_stages(5) == 0


def test_derive_seed():
    assert derive_seed(0, 3) == derive_seed(0, 3)
    seeds = {derive_seed(0, i) for i in range(100)}
    assert len(seeds) == 100
    assert derive_seed(0, 0) != derive_seed(1, 0)
    assert all(0 <= s < 2 ** 31 for s in seeds)


def test_zero_stages_leaves_query(dep_bundle, query):
    result = generate_cf(query, FLIP, dep_bundle, _pixel_prior(query), ObjectiveSpec(), StagePolicy(max_stages=0))
    assert result.trajectory == []
    assert result.stages_executed == 0
    assert torch.allclose(result.counterfactual, query, atol=1e-5)


def test_trajectory_records(dep_bundle, query):
    policy = StagePolicy(steps_per_stage=5, **NO_EARLY_EXIT)
    result = generate_cf(query, FLIP, dep_bundle, _pixel_prior(query), ObjectiveSpec(), policy)
    assert len(result.trajectory) == 5
    record = result.trajectory[0]
    assert {'stage', 'step', 'lambda1', 'total', 'semantics', 'mc', 'fc', 'predicted_label', 'target_prob'} <= set(record)
    assert [r['step'] for r in result.trajectory] == list(range(5))
    assert result.stage_lambda1 == [1.0]
    assert result.success == (result.predicted_label == FLIP.target_label)
    assert 0.0 <= result.final_fc_prob <= 1.0
    json.dumps(result.to_dict())


def test_lambda1_relaxes_per_stage(dep_bundle, query):
    state = build_prior('inr', query.shape, seed=0, inr=SMALL_INR)
    state.snapshot_initialization()
    policy = StagePolicy(steps_per_stage=2, **NO_EARLY_EXIT)
    result = generate_cf(query, FLIP, dep_bundle, state, ObjectiveSpec(kappa=2.0), policy)
    assert result.stage_lambda1 == [1.0, 0.5, 0.25]
    assert result.stages_executed == 3
    assert [r['lambda1'] for r in result.trajectory] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


def _inr_prior(query):
    state = build_prior('inr', query.shape, seed=0, inr=SMALL_INR)
    state.snapshot_initialization()
    return state


def test_plateau_ends_stage_early(dep_bundle, query):
    policy = StagePolicy(steps_per_stage=20, plateau_window=1, plateau_rel_tol=1e9, min_stage_steps=0,
                         success_prob=2.0)
    result = generate_cf(query, FLIP, dep_bundle, _inr_prior(query), ObjectiveSpec(), policy)
    # stages 1 and 2 advance after two steps; the final stage spends its whole budget
    assert [r['stage'] for r in result.trajectory] == [1, 1, 2, 2] + [3] * 20


def test_plateau_waits_for_minimum_stage_steps(dep_bundle, query):
    policy = StagePolicy(steps_per_stage=20, plateau_window=1, plateau_rel_tol=1e9, min_stage_steps=5,
                         success_prob=2.0)
    result = generate_cf(query, FLIP, dep_bundle, _inr_prior(query), ObjectiveSpec(), policy)
    assert [r['stage'] for r in result.trajectory] == [1] * 5 + [2] * 5 + [3] * 20


def test_plateau_never_cuts_a_single_stage_short(dep_bundle, query):
    policy = StagePolicy(steps_per_stage=6, plateau_window=1, plateau_rel_tol=1e9, min_stage_steps=0,
                         success_prob=2.0)
    result = generate_cf(query, FLIP, dep_bundle, _pixel_prior(query), ObjectiveSpec(), policy)
    assert len(result.trajectory) == 6


@pytest.mark.parametrize('overrides', [
    {'steps_per_stage': 0},
    {'plateau_window': 0},
    {'plateau_rel_tol': -1e-3},
    {'plateau_rel_tol': float('nan')},
    {'min_stage_steps': -1},
    {'max_stages': -1},
    {'learning_rate': 0.0},
    {'success_prob': -0.1},
])
def test_stage_policy_rejects_invalid_values(overrides):
    with pytest.raises(ConfigError):
        StagePolicy(**overrides)


def test_frozen_groups_intact_after_run(dep_bundle, query):
    state = build_prior('dip', query.shape, seed=0, dip=SMALL_DIP)
    state.snapshot_initialization()
    policy = StagePolicy(steps_per_stage=3, max_stages=2, **NO_EARLY_EXIT)
    generate_cf(query, FLIP, dep_bundle, state, ObjectiveSpec(), policy)
    assert state.unlock_index == 2
    assert state.frozen_groups_intact()


def test_warm_start_zero_steps_is_identity(query):
    state = build_prior('inr', query.shape, seed=0, inr=SMALL_INR)
    state.snapshot_initialization()
    before = state.render().detach().clone()
    assert warm_start_prior(state, query, 0) is state
    assert torch.equal(state.render(), before)


def test_warm_start_step_size_depends_on_prior_kind():
    assert WARM_START_LEARNING_RATES['inr'] == 1e-4
    assert WARM_START_LEARNING_RATES['dip'] == 1e-3
    assert StagePolicy().learning_rate != WARM_START_LEARNING_RATES['inr']


def test_warm_start_warns_on_poor_fit(query, caplog, monkeypatch):
    monkeypatch.setattr(logging.getLogger(LOGGER_NAME), 'propagate', True)
    state = build_prior('inr', query.shape, seed=0, inr=SMALL_INR)
    state.snapshot_initialization()
    with caplog.at_level(logging.WARNING, logger=LOGGER_NAME):
        warm_start_prior(state, query, 1)
    assert any('Warm start reached only' in r.getMessage() for r in caplog.records)


def test_warm_start_moves_towards_query(query):
    state = build_prior('inr', query.shape, seed=0, inr=SMALL_INR)
    state.snapshot_initialization()
    start = float(torch.nn.functional.mse_loss(state.render(), query))
    warm_start_prior(state, query, 100, learning_rate=1e-3)
    assert float(torch.nn.functional.mse_loss(state.render(), query)) < start
    assert state.unlock_index == 0
    assert state.frozen_groups_intact()


def test_divergence_is_recorded(dep_bundle, query):
    broken = query.clone()
    broken[0, 0, 0] = float('nan')
    state = build_prior('pixel', broken.shape, query=broken)
    state.snapshot_initialization()
    result = generate_cf(broken, FLIP, dep_bundle, state, ObjectiveSpec(), StagePolicy(steps_per_stage=5))
    assert result.diverged
    assert not result.success
    assert 'stage 1, step 0' in result.error
    assert result.trajectory == []


def test_batch_of_one_matches_generate_cf(dep_bundle, toy_set):
    queries = _queries(toy_set, 1)
    objective = ObjectiveSpec()
    policy = StagePolicy(steps_per_stage=5)
    [batched] = batch_generate(queries, {0: 1}, dep_bundle, 'pixel', objective, policy, master_seed=3)

    query = queries.images[0]
    state = build_prior('pixel', query.shape, seed=derive_seed(3, 0), query=query)
    state.snapshot_initialization()
    direct = generate_cf(query, FLIP, dep_bundle, state, objective, policy)
    assert torch.equal(batched.counterfactual, direct.counterfactual)
    assert batched.success == direct.success
    assert batched.seed == derive_seed(3, 0)


def test_workers_do_not_change_results(dep_bundle, toy_set):
    queries = _queries(toy_set, 4)
    objective = ObjectiveSpec()
    policy = StagePolicy(steps_per_stage=4)
    serial = batch_generate(queries, {0: 1}, dep_bundle, 'inr', objective, policy, master_seed=1,
                            warm_start_steps=5, prior_options={'inr': SMALL_INR})
    threaded = batch_generate(queries, {0: 1}, dep_bundle, 'inr', objective, policy, master_seed=1, workers=4,
                              warm_start_steps=5, prior_options={'inr': SMALL_INR})
    assert [r.index for r in threaded] == [0, 1, 2, 3]
    for a, b in zip(serial, threaded):
        assert a.seed == b.seed
        assert torch.equal(a.counterfactual, b.counterfactual)
        assert a.final_fc_prob == b.final_fc_prob
        assert a.success == b.success


def test_failures_stay_local(dep_bundle, toy_set):
    good = toy_set.of_class(0).images[0].clone()
    broken = good.clone()
    broken[0, 0, 0] = float('nan')
    other = toy_set.of_class(1).images[0].clone()
    queries = LabeledImageSet(torch.stack([broken, good, other]), torch.tensor([0, 0, 1]), toy_set.class_names)

    results = batch_generate(queries, {0: 1}, dep_bundle, 'pixel', ObjectiveSpec(), StagePolicy(steps_per_stage=3))
    assert len(results) == 3
    assert results[0].diverged and not results[0].success
    assert results[1].error is None and not results[1].diverged
    # no target rule for label 1
    assert results[2].error is not None and not results[2].success
    assert isinstance(results[2], CFResult)


def test_incompatible_bundle_raises_before_work(plain_bundle, toy_set):
    with pytest.raises(IncompatibilityError, match='bundle lacks loss predictor'):
        batch_generate(_queries(toy_set, 2), {0: 1}, plain_bundle, 'pixel',
                       ObjectiveSpec(consistency_mode='dep'), StagePolicy())


def test_callable_target_rule(dep_bundle, toy_set):
    results = batch_generate(_queries(toy_set, 2), lambda label: 1 - label, dep_bundle, 'pixel',
                             ObjectiveSpec(), StagePolicy(steps_per_stage=2))
    assert all(r.target.target_label == 1 for r in results)


@pytest.mark.slow
def test_generated_counterfactuals_flip_the_classifier():
    train, _ = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_joint_dep(train, TrainingConfig(mode='dep', epochs=10))
    sources = train.of_class(0)
    queries = LabeledImageSet(sources.images[:50], sources.labels[:50], sources.class_names)
    results = batch_generate(queries, {0: 1}, bundle, 'inr', ObjectiveSpec(), StagePolicy(), master_seed=0)
    assert sum(r.success for r in results) / len(results) >= 0.9


@pytest.mark.slow
def test_warm_started_inr_reaches_target_psnr():
    query = make_toy_dataset(1, 32, seed=0).images[0]
    state = build_prior('inr', query.shape, seed=0)
    state.snapshot_initialization()
    warm_start_prior(state, query, WARM_START_STEPS['inr'])
    with torch.no_grad():
        assert psnr(state.render(), query) >= 28.0


@pytest.mark.slow
def test_warm_started_dip_keeps_the_query_prediction():
    train, _ = stratified_split(make_toy_dataset(500, 32, seed=0), 0.1, seed=0)
    bundle = train_classifier(train, TrainingConfig(epochs=10))
    queries = train.images[:50]
    agree = 0
    for index, query in enumerate(queries):
        state = build_prior('dip', query.shape, seed=derive_seed(0, index))
        state.snapshot_initialization()
        warm_start_prior(state, query, WARM_START_STEPS['dip'])
        with torch.no_grad():
            rendered = state.render().unsqueeze(0)
            agree += int(predict_logits(bundle, rendered).argmax(dim=1) == predict_logits(bundle, query.unsqueeze(0)).argmax(dim=1))
    assert agree / len(queries) >= 0.9
