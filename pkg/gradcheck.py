#!/usr/bin/env python3
"""
Gradient check for the DPT training objectives.
Runs central finite differences against the tape gradients of the stage-1,
stage-2 and stage-3 losses on a small fixed fixture and prints a PASS/FAIL
summary.
"""
import sys
import time
from typing import Any, Dict

from config import Config
from encoder import EncoderSpec, READOUT_NAMES, TARGET_BEHAVIOR, init_parameters
from graphs import (build_graph_operators, build_item_relation_graph, build_multi_behavior_graph,
                    build_user_relation_graph)
from ingest import load_interactions
from logger import setup_logger
from numcore import ParameterStore, finite_difference_check, seeded_rng
from pipeline import sample_bpr_triples, stage1_loss, stage2_loss, stage3_loss
from utils import derive_seed

logger = setup_logger("GradCheck")

FIXTURE_USERS = 6
FIXTURE_ITEMS = 8
FIXTURE_BEHAVIORS = ('view', 'cart', 'buy')
FIXTURE_DIM = 4
FIXTURE_LAYERS = 2
FIXTURE_BATCH = 5


def fixture_log(seed: int) -> str:
    """Interaction log of the gradient fixture: every user touches 2 to 4 items per behavior."""
    rng = seeded_rng(derive_seed(seed, 'gradcheck', 'data'))
    lines = []
    clock = 0
    for user in range(FIXTURE_USERS):
        for label in FIXTURE_BEHAVIORS:
            size = int(rng.integers(2, 5))
            for item in rng.choice(FIXTURE_ITEMS, size=size, replace=False):
                clock += 1
                lines.append(f"u{user}\ti{item}\t{label}\t{clock}")
    return "\n".join(lines) + "\n"


def build_fixture(seed: int = Config.DEFAULT_SEED, interaction_norm: str = 'none') -> Dict[str, Any]:
    """Dataset, graphs, operators, parameters and one fixed batch per behavior."""
    dataset = load_interactions(fixture_log(seed), FIXTURE_BEHAVIORS,
                                users=[f"u{n}" for n in range(FIXTURE_USERS)],
                                items=[f"i{n}" for n in range(FIXTURE_ITEMS)])
    graph = build_multi_behavior_graph(dataset)
    user_graph = build_user_relation_graph(graph, top_k=3)
    item_graph = build_item_relation_graph(dataset, top_k=3)
    spec = EncoderSpec(dataset.num_users, dataset.num_items, dataset.num_behaviors, FIXTURE_DIM,
                       FIXTURE_LAYERS)
    store = ParameterStore(derive_seed(seed, 'init'))
    init_parameters(store, spec)
    rng = seeded_rng(derive_seed(seed, 'gradcheck', 'sampling'))
    triples = {k: sample_bpr_triples(graph, k, FIXTURE_BATCH, rng) for k in graph.active_behaviors}
    return {
        'dataset': dataset,
        'graph': graph,
        'spec': spec,
        'store': store,
        'triples': triples,
        'full_operators': build_graph_operators(graph, user_graph, item_graph, interaction_norm),
        'plain_operators': build_graph_operators(graph, normalization=interaction_norm),
    }


def check_stage1(fixture: Dict[str, Any]) -> Dict[str, float]:
    """Every stage-1 parameter, BPR plus reconstruction."""
    store, spec = fixture['store'], fixture['spec']
    store.unfreeze(store.names())
    return finite_difference_check(store, lambda t: stage1_loss(
        t, store, fixture['full_operators'], spec, fixture['triples'], rec_weight=1.0))


def check_stage2(fixture: Dict[str, Any]) -> Dict[str, float]:
    """Readout only, BPR on the graph without relations."""
    store, spec = fixture['store'], fixture['spec']
    store.freeze()
    store.unfreeze(READOUT_NAMES)
    try:
        return finite_difference_check(store, lambda t: stage2_loss(
            t, store, fixture['plain_operators'], spec, fixture['triples']))
    finally:
        store.unfreeze(store.names())


def check_stage3(fixture: Dict[str, Any]) -> Dict[str, float]:
    """Target-behavior embedding through the prompt, each variant."""
    store, spec = fixture['store'], fixture['spec']
    target = fixture['graph'].target_behavior
    store.freeze()
    store.unfreeze([TARGET_BEHAVIOR])
    errors = {}
    try:
        for variant in ('add', 'shallow', 'projection'):
            result = finite_difference_check(store, lambda t: stage3_loss(
                t, store, fixture['plain_operators'], spec, fixture['triples'][target], variant))
            errors[f"{variant}:{TARGET_BEHAVIOR}"] = result[TARGET_BEHAVIOR]
    finally:
        store.unfreeze(store.names())
    return errors


def run_gradcheck(seed: int = Config.DEFAULT_SEED, tolerance: float = 1e-4,
                  interaction_norm: str = 'none') -> Dict[str, Any]:
    """
    Run every check.

    Returns:
        Dict with 'passed', 'seconds', 'tolerance' and per-check
        {'errors': {parameter: relative error}, 'passed': bool}
    """
    started = time.perf_counter()
    fixture = build_fixture(seed, interaction_norm)
    checks = [
        ("Stage 1 (BPR + reconstruction)", check_stage1),
        ("Stage 2 (readout)", check_stage2),
        ("Stage 3 (prompt)", check_stage3),
    ]
    report: Dict[str, Any] = {'checks': {}, 'tolerance': tolerance}
    for name, check in checks:
        errors = check(fixture)
        report['checks'][name] = {
            'errors': errors,
            'passed': bool(errors) and max(errors.values()) <= tolerance,
        }
    report['passed'] = all(c['passed'] for c in report['checks'].values())
    report['seconds'] = time.perf_counter() - started
    return report


def print_report(report: Dict[str, Any]):
    print("=" * 60)
    print("  DPT GRADIENT CHECK")
    print("=" * 60)
    for name, check in report['checks'].items():
        worst_name, worst = max(check['errors'].items(), key=lambda kv: kv[1], default=('-', float('nan')))
        status = "✅ PASS" if check['passed'] else "❌ FAIL"
        print(f"  {status} - {name}: {len(check['errors'])} parameters, worst {worst_name} = {worst:.3e}")
        for param, error in sorted(check['errors'].items()):
            if error > report['tolerance']:
                print(f"      {param}: {error:.3e}")
    print("-" * 60)
    print(f"  Tolerance {report['tolerance']:.0e} | {report['seconds']:.1f}s")
    print("  ✅ All gradients match" if report['passed'] else "  ❌ Gradient mismatch")
    print("=" * 60)


def main():
    report = run_gradcheck()
    print_report(report)
    return 0 if report['passed'] else 1


if __name__ == "__main__":
    sys.exit(main())
