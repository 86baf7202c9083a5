#!/usr/bin/env python3
"""
Tests for the behavior-aware decoder, reconstruction loss and pruning.
"""
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from denoise import (ReconstructionBatch, binarize_and_prune, binary_cross_entropy, decode_score,
                     prune_scored_edges, read_denoised_graph, read_removed_report, reconstruction_loss,
                     score_edges, write_denoised_graph, write_removed_report)
from graphs import build_multi_behavior_graph
from ingest import SyntheticSpec, generate_synthetic
from logger import setup_logger
from numcore import ParameterStore, Tape, evaluate_loss, finite_difference_check, seeded_rng
from utils import run_test_suite

logger = setup_logger("TestDenoise")


def _graph(seed=3, users=30, items=30):
    data, _ = generate_synthetic(SyntheticSpec(num_users=users, num_items=items, seed=seed))
    return data, build_multi_behavior_graph(data)


def _random_scores(mbg, rng):
    scores = {}
    for k in range(mbg.num_behaviors - 1):
        users, items = mbg[k].edges()
        scores[k] = (users, items, rng.uniform(0.01, 1.0, size=len(users)))
    return scores


def test_decode_score_examples():
    e_b = np.array([1.0, 0.5, -1.0])
    assert decode_score(np.zeros(3), np.array([1.0, 2.0, 3.0]), e_b) == 0.5
    h_u = np.array([2.0, 0.0, 0.0])
    h_i = np.array([1.0, 0.0, 0.0])
    assert abs(decode_score(h_u, h_i, np.array([1.0, 0.0, 0.0])) - 0.8808) < 1e-4
    rng = seeded_rng(1)
    for _ in range(10):
        a, b, e = rng.normal(size=(3, 4))
        assert decode_score(a, b, e) == decode_score(a, b, -e)


def test_binary_cross_entropy_examples():
    assert abs(binary_cross_entropy([0.5, 0.5], [1, 0]) - math.log(2)) < 1e-12
    assert binary_cross_entropy([1.0, 0.0], [1, 0]) < 1e-11
    expected = -0.25 * (math.log(0.9) + math.log(0.8) + math.log(0.9) + math.log(0.7))
    loss = binary_cross_entropy([0.9, 0.8, 0.1, 0.3], [1, 1, 0, 0])
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.1976) < 1e-4
    assert binary_cross_entropy([0.3, 0.6], [1, 1]) >= 0.0


def _rec_fixture():
    store = ParameterStore(seed=4)
    store.add('hu', (5, 3))
    store.add('hi', (6, 3))
    store.add('e0', (3,))
    store.add('e1', (3,))
    batches = [
        ReconstructionBatch(0, np.array([0, 1, 4]), np.array([2, 5, 0]), np.array([3, 0]), np.array([1, 1])),
        ReconstructionBatch(1, np.array([2]), np.array([3]), np.array([2, 4]), np.array([4, 5])),
    ]

    def loss_fn(t):
        hu, hi = t.parameter(store['hu']), t.parameter(store['hi'])
        embeddings = {0: t.parameter(store['e0']), 1: t.parameter(store['e1'])}
        return reconstruction_loss(t, {0: hu, 1: hu}, {0: hi, 1: hi}, embeddings, batches)
    return store, batches, loss_fn


def test_reconstruction_loss_matches_bce():
    store, batches, loss_fn = _rec_fixture()
    loss = evaluate_loss(loss_fn)
    hu, hi = store['hu'].values, store['hi'].values
    per_behavior = []
    for batch, e in zip(batches, (store['e0'].values, store['e1'].values)):
        probs = [decode_score(hu[u], hi[i], e) for u, i in zip(batch.pos_users, batch.pos_items)]
        probs += [decode_score(hu[u], hi[i], e) for u, i in zip(batch.neg_users, batch.neg_items)]
        labels = [1] * len(batch.pos_users) + [0] * len(batch.neg_users)
        per_behavior.append(binary_cross_entropy(probs, labels))
    assert abs(loss - np.mean(per_behavior)) < 1e-12


def test_reconstruction_loss_gradients():
    store, _, loss_fn = _rec_fixture()
    errors = finite_difference_check(store, loss_fn)
    assert max(errors.values()) <= 1e-6, errors


def test_reconstruction_loss_rejects_empty_batch():
    store, _, _ = _rec_fixture()
    tape = Tape()
    hu, hi = tape.parameter(store['hu']), tape.parameter(store['hi'])
    empty = ReconstructionBatch(0, np.array([], int), np.array([], int), np.array([], int), np.array([], int))
    for batches in ([], [empty]):
        try:
            reconstruction_loss(tape, {0: hu}, {0: hi}, {0: tape.parameter(store['e0'])}, batches)
        except ValueError:
            continue
        raise AssertionError("empty batch should fail")


def test_threshold_rule():
    data, mbg = _graph()
    users, items = mbg[0].edges()
    probs = np.full(len(users), 0.9)
    probs[0], probs[1] = 0.29, 0.31
    denoised = prune_scored_edges(mbg, {0: (users, items, probs)}, 0.2)
    removed = denoised.removed_edges()
    assert (int(users[0]), int(items[0]), 0) in removed
    assert (int(users[1]), int(items[1]), 0) not in removed
    assert denoised.removed_count == 1
    assert denoised.graph[0].edge_count == mbg[0].edge_count - 1

    rng = seeded_rng(2)
    near_half = prune_scored_edges(mbg, _random_scores(mbg, rng), 0.4999999)
    assert near_half.removed_count == 0

    for bad in (0.0, 0.5, -0.1, 0.7):
        try:
            prune_scored_edges(mbg, {}, bad)
        except ValueError:
            continue
        raise AssertionError(f"delta={bad} should fail")

    try:
        prune_scored_edges(mbg, {mbg.target_behavior: mbg[mbg.target_behavior].edges() + (np.zeros(1),)}, 0.2)
    except ValueError:
        pass
    else:
        raise AssertionError("pruning the target should fail")


def test_pruning_laws_randomized():
    rng = seeded_rng(17)
    for case in range(100):
        _, mbg = _graph(seed=case % 5, users=20, items=20)
        scores = _random_scores(mbg, rng)
        d1, d2 = sorted(rng.uniform(0.01, 0.49, size=2))
        loose, strict = prune_scored_edges(mbg, scores, d1), prune_scored_edges(mbg, scores, d2)
        assert loose.removed_edges() >= strict.removed_edges()
        for denoised in (loose, strict):
            target = mbg.target_behavior
            assert (denoised.graph[target].user_items != mbg[target].user_items).nnz == 0
            for k in range(target):
                pruned, original = denoised.graph[k].user_items, mbg[k].user_items
                assert (pruned.multiply(original) != pruned).nnz == 0
                assert pruned.nnz + len(denoised.removed[k]) == original.nnz


def test_binarize_and_prune_scores_behavior_streams():
    data, mbg = _graph(seed=6)
    rng = seeded_rng(9)
    d = 4
    bu = {k: rng.normal(size=(data.num_users, d)) for k in range(4)}
    bi = {k: rng.normal(size=(data.num_items, d)) for k in range(4)}
    embeddings = rng.normal(size=(4, d))
    scores = score_edges(mbg, bu, bi, embeddings)
    assert sorted(scores) == [0, 1, 2]
    users, items, probs = scores[1]
    assert abs(probs[0] - decode_score(bu[1][users[0]], bi[1][items[0]], embeddings[1])) < 1e-15

    denoised = binarize_and_prune(mbg, bu, bi, embeddings, 0.2)
    expected = {(int(u), int(i), k) for k, (us, its, ps) in scores.items()
                for u, i, p in zip(us, its, ps) if p < 0.3}
    assert denoised.removed_edges() == expected
    assert denoised.delta == 0.2


def test_report_round_trips():
    data, mbg = _graph(seed=8)
    denoised = prune_scored_edges(mbg, _random_scores(mbg, seeded_rng(5)), 0.1)
    assert denoised.removed_count > 0
    with tempfile.TemporaryDirectory() as tmp:
        removed_path = Path(tmp) / 'removed.tsv'
        graph_path = Path(tmp) / 'denoised.tsv'
        write_removed_report(denoised, data, removed_path, ["config_hash=abc"])
        write_denoised_graph(denoised, data, graph_path, ["config_hash=abc"])
        removed = read_removed_report(removed_path, data)
        graph = read_denoised_graph(graph_path, data, mbg.active)
    assert removed == denoised.removed_edges()
    for k in range(mbg.num_behaviors):
        assert (graph[k].user_items != denoised.graph[k].user_items).nnz == 0


def main():
    """Run all denoise tests."""
    tests = [
        ("Decode Score", test_decode_score_examples),
        ("Binary Cross Entropy", test_binary_cross_entropy_examples),
        ("Reconstruction vs BCE", test_reconstruction_loss_matches_bce),
        ("Reconstruction Gradients", test_reconstruction_loss_gradients),
        ("Empty Batch", test_reconstruction_loss_rejects_empty_batch),
        ("Threshold Rule", test_threshold_rule),
        ("Pruning Laws", test_pruning_laws_randomized),
        ("Binarize And Prune", test_binarize_and_prune_scores_behavior_streams),
        ("Report Round Trips", test_report_round_trips),
    ]
    return run_test_suite("DENOISE", tests, logger)


if __name__ == "__main__":
    sys.exit(main())
