#!/usr/bin/env python3
"""
Tests for interaction graphs, relation graphs and propagation operators.
Relation graphs are checked against brute-force set arithmetic.
"""
import sys
import tempfile
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from graphs import (ItemRelationGraph, UserRelationGraph, build_graph_operators, build_item_relation_graph,
                    build_multi_behavior_graph, build_user_relation_graph, normalize_relation_weights,
                    read_relation_graph, write_relation_graph)
from ingest import load_interactions
from logger import setup_logger
from numcore import seeded_rng
from utils import run_test_suite

logger = setup_logger("TestGraphs")

BEHAVIORS = ('click', 'cart', 'buy')


def _load(lines):
    return load_interactions("\n".join(lines) + "\n", BEHAVIORS)


def _random_dataset(seed: int, max_users: int = 20, max_items: int = 20):
    rng = seeded_rng(seed)
    num_users = int(rng.integers(4, max_users + 1))
    num_items = int(rng.integers(4, max_items + 1))
    lines = []
    for _ in range(int(rng.integers(30, 120))):
        lines.append(f"u{rng.integers(num_users)}\ti{rng.integers(num_items)}\t"
                     f"{BEHAVIORS[rng.integers(3)]}\t{rng.integers(0, 15)}")
    return _load(lines)


def _brute_user_weights(dataset, behavior):
    items = defaultdict(set)
    for r in dataset.records:
        if r.behavior_id == behavior:
            items[r.user_id].add(r.item_id)
    weights = {}
    for u in range(dataset.num_users):
        for v in range(dataset.num_users):
            if u != v and items[u] & items[v]:
                weights[(u, v)] = len(items[u] & items[v]) / len(items[u] | items[v])
    return weights


def _brute_item_weights(dataset, behavior, all_pairs=False):
    sequences = defaultdict(list)
    for r in dataset.records:
        if r.behavior_id == behavior:
            sequences[r.user_id].append((r.timestamp, r.item_id))
    counts = Counter()
    for events in sequences.values():
        ordered = [item for _, item in sorted(events)]
        for p in range(len(ordered)):
            followers = ordered[p + 1:] if all_pairs else ordered[p + 1:p + 2]
            for q in followers:
                if ordered[p] != q:
                    counts[(ordered[p], q)] += 1
    return {(i, j): c / (c + counts.get((j, i), 0)) for (i, j), c in counts.items()}


def _as_dict(matrix: sp.csr_matrix):
    coo = matrix.tocoo()
    return {(int(r), int(c)): float(w) for r, c, w in zip(coo.row, coo.col, coo.data)}


def test_multi_behavior_graph_edges():
    data = _load(["u0\ti0\tclick\t1", "u1\ti1\tbuy\t2", "u1\ti0\tcart\t3", "u1\ti1\tclick\t4"])
    mbg = build_multi_behavior_graph(data)
    assert mbg[0].edge_count == 2
    assert mbg[0].has_edge(0, 0) and not mbg[2].has_edge(0, 0)
    assert mbg.total_edges == len(data)
    for graph in mbg.graphs:
        assert (graph.item_users != graph.user_items.T).nnz == 0


def test_dropped_behavior_is_empty_and_inactive():
    data = _load(["u0\ti0\tclick\t1", "u0\ti1\tbuy\t2"])
    mbg = build_multi_behavior_graph(data, dropped=['click'])
    assert mbg[0].edge_count == 0
    assert mbg.active_behaviors == (1, 2)
    try:
        build_multi_behavior_graph(data, dropped=['buy'])
    except ValueError:
        pass
    else:
        raise AssertionError("dropping the target should fail")


def test_jaccard_examples():
    lines = [f"a\ti{n}\tclick\t{n}" for n in (1, 2, 3)]
    lines += [f"b\ti{n}\tclick\t{n}" for n in (1, 2, 3)]
    lines += [f"c\ti{n}\tclick\t{n}" for n in (2, 3, 4, 5)]
    lines += [f"d\ti{n}\tclick\t{n}" for n in (8, 9)]
    data = _load(lines)
    graph = build_user_relation_graph(build_multi_behavior_graph(data), top_k=10)
    a, b, c, d = (data.user_index[x] for x in 'abcd')
    assert graph.weight(0, a, b) == 1.0
    assert graph.weight(0, a, c) == 2 / 5
    assert graph.weight(0, c, a) == 2 / 5
    assert graph.adjacency[0][d].nnz == 0
    assert graph.adjacency[0].diagonal().sum() == 0


def test_user_graph_matches_brute_force():
    for seed in range(5):
        data = _random_dataset(seed)
        graph = build_user_relation_graph(build_multi_behavior_graph(data), top_k=data.num_users)
        for k in range(3):
            expected = _brute_user_weights(data, k)
            actual = _as_dict(graph.adjacency[k])
            assert set(actual) == set(expected), f"seed {seed} behavior {k}"
            for key, weight in expected.items():
                assert abs(actual[key] - weight) <= 1e-12


def test_user_graph_truncation_stays_symmetric():
    for seed in range(5):
        data = _random_dataset(100 + seed)
        graph = build_user_relation_graph(build_multi_behavior_graph(data), top_k=2)
        full = build_user_relation_graph(build_multi_behavior_graph(data), top_k=data.num_users)
        for k in range(3):
            m = graph.adjacency[k]
            assert (m != m.T).nnz == 0
            truncated, reference = _as_dict(m), _as_dict(full.adjacency[k])
            assert set(truncated) <= set(reference)
            for u in range(data.num_users):
                row = sorted(((-w, v) for (r, v), w in reference.items() if r == u))[:2]
                for _, v in row:
                    assert (u, v) in truncated


def test_item_transition_examples():
    data = _load(["u\ta\tclick\t1", "u\tb\tclick\t2", "u\tc\tclick\t3"])
    graph = build_item_relation_graph(data, top_k=10)
    a, b, c = (data.item_index[x] for x in 'abc')
    assert graph.weight(0, a, b) == 1.0
    assert graph.weight(0, a, c) == 0.0
    assert graph.weight(0, b, a) == 0.0

    all_pairs = build_item_relation_graph(data, top_k=10, all_pairs=True)
    assert all_pairs.weight(0, a, c) == 1.0

    lines = []
    for n in range(3):
        lines += [f"x{n}\ti\tcart\t1", f"x{n}\tj\tcart\t2"]
    lines += ["y\tj\tcart\t1", "y\ti\tcart\t2", "z\tk\tcart\t1", "z\tm\tcart\t2", "w\tk\tcart\t1", "w\tm\tcart\t2"]
    data = _load(lines)
    graph = build_item_relation_graph(data, top_k=10)
    i, j, k, m = (data.item_index[x] for x in 'ijkm')
    assert graph.weight(1, i, j) == 0.75
    assert graph.weight(1, j, i) == 0.25
    assert graph.weight(1, k, m) == 1.0
    assert (graph.incoming[1] != graph.outgoing[1].T).nnz == 0


def test_item_graph_matches_brute_force():
    for seed in range(5):
        data = _random_dataset(50 + seed)
        for all_pairs in (False, True):
            graph = build_item_relation_graph(data, top_k=data.num_items, all_pairs=all_pairs)
            for k in range(3):
                expected = _brute_item_weights(data, k, all_pairs)
                actual = _as_dict(graph.outgoing[k])
                assert set(actual) == set(expected)
                for (i, j), weight in expected.items():
                    assert abs(actual[(i, j)] - weight) <= 1e-12
                    if (j, i) in actual:
                        assert abs(actual[(i, j)] + actual[(j, i)] - 1.0) <= 1e-12


def test_normalization_examples():
    weights = sp.csr_matrix(np.array([
        [0.0, 0.4, 0.4, 0.0],
        [0.4, 0.0, 0.0, 0.0],
        [0.4, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ]))
    graph = normalize_relation_weights(UserRelationGraph(4, (weights,)))
    dense = graph.adjacency[0].toarray()
    assert np.allclose(dense[0], [0, 0.5, 0.5, 0])
    assert dense[1, 0] == 1.0
    assert np.array_equal(dense[3], np.zeros(4))
    assert graph.normalized

    outgoing = sp.csr_matrix(np.array([[0.0, 1.0, 2.0, 1.0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]))
    items = normalize_relation_weights(ItemRelationGraph(4, (outgoing,), (outgoing.T.tocsr(),)))
    assert np.allclose(items.outgoing[0].toarray()[0], [0, 0.25, 0.5, 0.25])
    incoming = items.incoming[0].toarray()
    assert np.allclose(incoming[1:, 0], [1.0, 1.0, 1.0])
    assert np.array_equal(incoming[0], np.zeros(4))


def test_normalized_sums_are_zero_or_one():
    data = _random_dataset(7)
    mbg = build_multi_behavior_graph(data)
    users = normalize_relation_weights(build_user_relation_graph(mbg, 3))
    items = normalize_relation_weights(build_item_relation_graph(data, 3))
    for m in list(users.adjacency) + list(items.incoming) + list(items.outgoing):
        sums = np.asarray(m.sum(axis=1)).ravel()
        assert np.all((np.abs(sums) < 1e-12) | (np.abs(sums - 1.0) < 1e-12))


def test_relation_dump_round_trip():
    data = _random_dataset(3)
    mbg = build_multi_behavior_graph(data)
    users = build_user_relation_graph(mbg, 4)
    items = build_item_relation_graph(data, 4)
    with tempfile.TemporaryDirectory() as tmp:
        write_relation_graph(users, data, Path(tmp) / 'user_relation.tsv', ["config_hash=x"])
        write_relation_graph(items, data, Path(tmp) / 'item_relation.tsv')
        users_again = read_relation_graph(Path(tmp) / 'user_relation.tsv', data)
        items_again = read_relation_graph(Path(tmp) / 'item_relation.tsv', data)
    assert isinstance(users_again, UserRelationGraph) and isinstance(items_again, ItemRelationGraph)
    for a, b in zip(users.adjacency, users_again.adjacency):
        assert (a != b).nnz == 0
    for a, b in zip(items.incoming, items_again.incoming):
        assert (a != b).nnz == 0


def test_graph_operators():
    data = _load(["u0\ti0\tclick\t1", "u0\ti1\tclick\t2", "u1\ti1\tclick\t3", "u1\ti0\tbuy\t4",
                  "u0\ti1\tbuy\t5", "u1\ti1\tcart\t6"])
    mbg = build_multi_behavior_graph(data, dropped=['cart'])
    plain = build_graph_operators(mbg, normalization='none')
    assert not plain.has_relations
    assert (plain.user_from_items[0] != mbg[0].user_items).nnz == 0
    assert plain.user_from_items[1].nnz == 0

    symmetric = build_graph_operators(mbg, normalization='symmetric')
    dense = symmetric.user_from_items[0].toarray()
    # click degrees: users (2, 1), items (1, 2)
    assert np.allclose(dense, [[1 / np.sqrt(2), 1 / 2], [0.0, 1 / np.sqrt(2)]])

    full = build_graph_operators(mbg, build_user_relation_graph(mbg, 5), build_item_relation_graph(data, 5))
    assert full.has_relations
    assert full.active_behaviors == (0, 2)
    try:
        build_graph_operators(mbg, normalization='max')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown normalization should fail")


def test_default_interaction_messages_are_plain_sums():
    # u0 clicked i0 and i1
    data = _load(["u0\ti0\tclick\t1", "u0\ti1\tclick\t2", "u1\ti0\tbuy\t3", "u1\ti1\tbuy\t4"])
    mbg = build_multi_behavior_graph(data)
    default = build_graph_operators(mbg)
    for k in range(mbg.num_behaviors):
        assert (default.user_from_items[k] != mbg[k].user_items).nnz == 0
        assert (default.item_from_users[k] != mbg[k].user_items.T).nnz == 0
    items = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(default.user_from_items[0] @ items, [[4.0, 6.0], [0.0, 0.0]])


def main():
    """Run all graph tests."""
    tests = [
        ("Interaction Edges", test_multi_behavior_graph_edges),
        ("Dropped Behavior", test_dropped_behavior_is_empty_and_inactive),
        ("Jaccard Examples", test_jaccard_examples),
        ("User Graph Oracle", test_user_graph_matches_brute_force),
        ("User Graph Truncation", test_user_graph_truncation_stays_symmetric),
        ("Item Transition Examples", test_item_transition_examples),
        ("Item Graph Oracle", test_item_graph_matches_brute_force),
        ("Normalization Examples", test_normalization_examples),
        ("Normalized Sums", test_normalized_sums_are_zero_or_one),
        ("Relation Dump", test_relation_dump_round_trip),
        ("Graph Operators", test_graph_operators),
        ("Plain Sum Default", test_default_interaction_messages_are_plain_sums),
    ]
    return run_test_suite("GRAPHS", tests, logger)


if __name__ == "__main__":
    sys.exit(main())
