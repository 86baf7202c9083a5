#!/usr/bin/env python3
"""
Tests for the three training stages, BPR, negative sampling and parameter accounting.
"""
import math
import sys

import numpy as np
from scipy.stats import chisquare

from checkpoint import encode_checkpoint
from encoder import AUX_BEHAVIOR_TABLE, READOUT_NAMES, TARGET_BEHAVIOR, USER_TABLE
from gradcheck import run_gradcheck
from graphs import build_item_relation_graph, build_multi_behavior_graph, build_user_relation_graph
from ingest import SyntheticSpec, filter_min_target, generate_synthetic, leave_one_out_split, load_interactions
from logger import setup_logger
from numcore import evaluate_loss, seeded_rng
from pipeline import (BprTriples, bpr_loss, bpr_loss_node, count_trainable, infer_representations,
                      prompt_values, sample_bpr_triples, stage1_train, stage2_train, stage3_train)
from run_config import StageConfig
from utils import run_test_suite

logger = setup_logger("TestPipeline")


def _prepared(seed=3, users=30, items=30):
    spec = SyntheticSpec(num_users=users, num_items=items, density=(0.3, 0.2, 0.2, 0.2), seed=seed)
    data, labels = generate_synthetic(spec)
    split = leave_one_out_split(filter_min_target(data, 3))
    graph = build_multi_behavior_graph(split.train)
    return split, build_user_relation_graph(graph, 5), build_item_relation_graph(split.train, 5)


def _stage(stage, **overrides):
    settings = dict(stage=stage, epochs=1, batch_size=64, lr=0.01, dim=8, layers=2, seed=5)
    settings.update(overrides)
    return StageConfig(**settings)


def _run_all(seed=5, dim=8, layers=2, variant='add', **stage1):
    split, user_graph, item_graph = _prepared()
    first = stage1_train(split, user_graph, item_graph, _stage(1, dim=dim, layers=layers, seed=seed, **stage1),
                         config_hash='abc')
    second = stage2_train(first.checkpoint, first.denoised.graph, _stage(2, dim=dim, layers=layers, seed=seed))
    third = stage3_train(second.checkpoint, first.denoised.graph,
                         _stage(3, dim=dim, layers=layers, seed=seed, prompt_variant=variant))
    return split, user_graph, item_graph, first, second, third


def test_bpr_loss_examples():
    h_u = np.array([1.0, 0.0])
    assert abs(bpr_loss(h_u, np.array([0.5, 3.0]), np.array([0.5, -1.0])) - math.log(2)) < 1e-12
    assert abs(bpr_loss(h_u, np.array([3.0, 0.0]), np.array([1.0, 0.0])) - 0.1269) < 1e-4
    losses = [bpr_loss(h_u, np.array([diff, 0.0]), np.zeros(2)) for diff in np.linspace(-5, 5, 21)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_bpr_loss_node_matches_scalar_form():
    rng = seeded_rng(4)
    users, items = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    triples = BprTriples(np.array([0, 1, 4, 4]), np.array([2, 3, 0, 6]), np.array([5, 5, 1, 2]))
    loss = evaluate_loss(lambda t: bpr_loss_node(t, t.constant(users), t.constant(items), triples))
    expected = np.mean([bpr_loss(users[u], items[i], items[j]) for u, i, j in zip(*triples)])
    assert abs(loss - expected) < 1e-12


def test_negative_sampling_respects_graph():
    split, _, _ = _prepared()
    graph = build_multi_behavior_graph(split.train)
    for k in graph.active_behaviors:
        triples = sample_bpr_triples(graph, k, 500, seeded_rng(k))
        assert len(triples) == 500
        assert all(graph[k].has_edge(u, i) for u, i in zip(triples.users, triples.positives))
        assert not any(graph[k].has_edge(u, j) for u, j in zip(triples.users, triples.negatives))
    again = sample_bpr_triples(graph, 0, 500, seeded_rng(0))
    first = sample_bpr_triples(graph, 0, 500, seeded_rng(0))
    assert all(np.array_equal(a, b) for a, b in zip(first, again))


def test_negative_sampling_is_uniform():
    data = load_interactions("u0\ti0\tbuy\t1\nu1\ti1\tbuy\t2\nu1\ti2\tbuy\t3\n", ('buy',))
    graph = build_multi_behavior_graph(data)
    rng = seeded_rng(11)
    draws = []
    for _ in range(100):
        triples = sample_bpr_triples(graph, 0, 1000, rng)
        draws.append(triples.negatives[triples.users == 0])
    negatives = np.concatenate(draws)
    assert not np.any(negatives == 0)
    counts = np.bincount(negatives, minlength=3)[1:]
    assert chisquare(counts).pvalue > 1e-3


def test_saturated_user_is_skipped():
    data = load_interactions("u0\ti0\tbuy\t1\nu0\ti1\tbuy\t2\nu1\ti0\tbuy\t3\n", ('buy',))
    graph = build_multi_behavior_graph(data)
    triples = sample_bpr_triples(graph, 0, 200, seeded_rng(2))
    assert len(triples) < 200
    assert np.all(triples.users == 1)
    assert np.all(triples.negatives == 1)

    empty = load_interactions("u0\ti0\tbuy\t1\n", ('view', 'buy'))
    try:
        sample_bpr_triples(build_multi_behavior_graph(empty), 0, 10, seeded_rng(2))
    except ValueError:
        pass
    else:
        raise AssertionError("sampling an empty behavior should fail")


def test_full_objective_gradients():
    report = run_gradcheck(seed=7, tolerance=1e-4)
    for name, check in report['checks'].items():
        assert check['passed'], (name, check['errors'])
    assert report['seconds'] < 30.0


def test_count_trainable_formulas():
    from encoder import EncoderSpec
    assert count_trainable(EncoderSpec(100, 100, 4, dim=32, layers=3), 3) == 32
    assert count_trainable(EncoderSpec(100, 100, 4, dim=32, layers=3), 2) == 6144
    assert count_trainable(EncoderSpec(100, 100, 4, dim=16, layers=3), 2) == 1536
    spec = EncoderSpec(10, 12, 4, dim=8, layers=2)
    assert count_trainable(spec, 1) == 22 * 8 + 4 * 8 + 2 * (6 + 128 + 32) + 2 * 2 * 64
    assert count_trainable(EncoderSpec(100, 100, 4, dim=16, layers=3), 2) < (100 + 100) * 16


def test_freezing_ledger_matches_live_counts():
    for layers, dim in ((2, 8), (3, 16), (3, 32)):
        _, _, _, first, second, third = _run_all(dim=dim, layers=layers)
        for result in (first, second, third):
            ckpt = result.checkpoint
            live = sum(v.size for name, v in ckpt.values.items() if not ckpt.frozen[name])
            assert live == count_trainable(ckpt.encoder_spec(), ckpt.stage), (layers, dim, ckpt.stage)
        assert sorted(n for n, f in second.checkpoint.frozen.items() if not f) == sorted(READOUT_NAMES)
        assert [n for n, f in third.checkpoint.frozen.items() if not f] == [TARGET_BEHAVIOR]


def test_frozen_parameters_are_bit_identical():
    _, _, _, first, second, third = _run_all()
    for name, values in second.checkpoint.values.items():
        if name not in READOUT_NAMES:
            assert values.tobytes() == first.checkpoint.values[name].tobytes(), name
    for name, values in third.checkpoint.values.items():
        if name != TARGET_BEHAVIOR:
            assert values.tobytes() == second.checkpoint.values[name].tobytes(), name
    assert third.checkpoint.values[TARGET_BEHAVIOR].tobytes() != second.checkpoint.values[TARGET_BEHAVIOR].tobytes()


def test_stage_order_is_enforced():
    _, _, _, first, second, third = _run_all()
    graph = first.denoised.graph
    for call, ckpt in ((stage2_train, second.checkpoint), (stage2_train, third.checkpoint),
                       (stage3_train, first.checkpoint), (stage3_train, third.checkpoint)):
        stage = 2 if call is stage2_train else 3
        try:
            call(ckpt, graph, _stage(stage))
        except ValueError:
            continue
        raise AssertionError(f"{call.__name__} accepted a stage-{ckpt.stage} checkpoint")


def test_training_is_deterministic():
    split, user_graph, item_graph = _prepared()
    runs = [stage1_train(split, user_graph, item_graph, _stage(1, epochs=2), 'abc') for _ in range(2)]
    assert encode_checkpoint(runs[0].checkpoint) == encode_checkpoint(runs[1].checkpoint)
    assert runs[0].denoised.removed_edges() == runs[1].denoised.removed_edges()
    second = [stage2_train(r.checkpoint, r.denoised.graph, _stage(2)) for r in runs]
    assert encode_checkpoint(second[0].checkpoint) == encode_checkpoint(second[1].checkpoint)


def test_zero_reconstruction_weight_is_pure_bpr():
    split, user_graph, item_graph = _prepared()
    result = stage1_train(split, user_graph, item_graph, _stage(1, epochs=2, rec_weight=0.0))
    assert result.history.rec == [0.0, 0.0]
    assert result.history.total == result.history.bpr


def test_denoised_graph_contract():
    split, _, _, first, _, _ = _run_all()
    original = build_multi_behavior_graph(split.train)
    denoised = first.denoised
    target = original.target_behavior
    assert (denoised.graph[target].user_items != original[target].user_items).nnz == 0
    removed = denoised.removed_edges()
    rng = seeded_rng(8)
    for k in range(target):
        triples = sample_bpr_triples(denoised.graph, k, 2000, rng) if denoised.graph[k].edge_count else None
        if triples is None:
            continue
        assert not any((int(u), int(i), k) in removed for u, i in zip(triples.users, triples.positives))


def test_zero_prompt_matches_stage2_forward():
    split, _, _, first, second, third = _run_all()
    graph = first.denoised.graph
    baseline = infer_representations(second.checkpoint, graph)
    zeros = np.zeros(third.checkpoint.encoder_spec().dim)
    for variant in ('add', 'shallow', 'projection'):
        reps = infer_representations(third.checkpoint.with_meta(prompt_variant=variant), graph, prompt_override=zeros)
        assert np.array_equal(reps.user, baseline.user), variant
        assert np.array_equal(reps.item, baseline.item), variant


def test_prompt_can_cancel_its_own_shift():
    split, _, _, first, second, third = _run_all()
    graph = first.denoised.graph
    spec = third.checkpoint.encoder_spec()
    values = dict(third.checkpoint.values)
    aux = values[AUX_BEHAVIOR_TABLE]
    # target row = -(sum of active aux rows) puts the prompt at exactly zero
    values[TARGET_BEHAVIOR] = -sum(aux[k] for k in range(len(aux)) if graph.active[k])
    cancelled = third.checkpoint.with_meta(values=values)
    assert not np.any(prompt_values(cancelled.to_store(), spec, graph.active))
    baseline = infer_representations(second.checkpoint, graph)
    reps = infer_representations(cancelled, graph)
    assert np.array_equal(reps.user, baseline.user)
    assert np.array_equal(reps.item, baseline.item)


def test_every_prompt_variant_trains():
    for variant in ('add', 'shallow', 'projection'):
        _, _, _, _, _, third = _run_all(variant=variant)
        assert third.checkpoint.prompt_variant == variant
        assert all(math.isfinite(v) for v in third.history.total)


def test_divergence_names_stage_epoch_and_step():
    _, _, _, first, _, _ = _run_all()
    values = dict(first.checkpoint.values)
    values[USER_TABLE] = np.full_like(values[USER_TABLE], np.nan)
    broken = first.checkpoint.with_meta(values=values)
    try:
        stage2_train(broken, first.denoised.graph, _stage(2))
    except RuntimeError as e:
        assert 'stage 2' in str(e) and 'epoch 1' in str(e) and 'step 1' in str(e)
    else:
        raise AssertionError("non-finite parameters should abort training")


def test_stage1_inference_needs_relations():
    split, user_graph, item_graph, first, _, _ = _run_all()
    graph = build_multi_behavior_graph(split.train)
    reps = infer_representations(first.checkpoint, graph, user_graph, item_graph)
    assert reps.user.shape == (split.train.num_users, 8)
    try:
        infer_representations(first.checkpoint, graph)
    except ValueError:
        pass
    else:
        raise AssertionError("stage-1 inference without relation graphs should fail")


def main():
    """Run all pipeline tests."""
    tests = [
        ("BPR Examples", test_bpr_loss_examples),
        ("BPR Tape Form", test_bpr_loss_node_matches_scalar_form),
        ("Negative Sampling", test_negative_sampling_respects_graph),
        ("Negative Uniformity", test_negative_sampling_is_uniform),
        ("Saturated Users", test_saturated_user_is_skipped),
        ("Full Objective Gradients", test_full_objective_gradients),
        ("Trainable Formulas", test_count_trainable_formulas),
        ("Freezing Ledger", test_freezing_ledger_matches_live_counts),
        ("Frozen Bytes", test_frozen_parameters_are_bit_identical),
        ("Stage Order", test_stage_order_is_enforced),
        ("Determinism", test_training_is_deterministic),
        ("Zero Reconstruction Weight", test_zero_reconstruction_weight_is_pure_bpr),
        ("Denoised Graph", test_denoised_graph_contract),
        ("Zero Prompt", test_zero_prompt_matches_stage2_forward),
        ("Prompt Cancels Shift", test_prompt_can_cancel_its_own_shift),
        ("Prompt Variants", test_every_prompt_variant_trains),
        ("Divergence", test_divergence_names_stage_epoch_and_step),
        ("Stage 1 Inference", test_stage1_inference_needs_relations),
    ]
    return run_test_suite("PIPELINE", tests, logger)


if __name__ == "__main__":
    sys.exit(main())
