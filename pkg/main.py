#!/usr/bin/env python3
"""
DPT command line.
Runs the lifecycle one artifact-producing step at a time:

    synth -> prepare -> stage1 -> stage2 -> stage3 -> evaluate
                                 export, gradcheck, denoise-report

Every artifact carries the run's config hash; a later command refuses
artifacts written under a different hash.
"""
import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, Optional

from checkpoint import load_checkpoint, save_checkpoint
from config import Config
from denoise import (denoised_delta, read_denoised_graph, read_removed_report, write_denoised_graph,
                     write_removed_report)
from encoder import PROMPT_VARIANTS
from evaluation import build_report, denoise_quality, evaluate_ranking, write_metric_report, write_user_dump
from gradcheck import print_report, run_gradcheck
from graphs import (build_item_relation_graph, build_multi_behavior_graph, build_user_relation_graph,
                    read_relation_graph, write_relation_graph)
from ingest import (drop_behaviors, filter_min_target, generate_synthetic, leave_one_out_split,
                    load_interactions_file, load_split, read_noise_labels, save_interactions, save_split,
                    write_noise_labels)
from logger import log_training_event, setup_logger
from pipeline import infer_representations, stage1_train, stage2_train, stage3_train
from run_config import EVAL_MODES, RunConfig, get_run_summary, load_run_config
from utils import read_tsv_comments, require_file

logger = setup_logger("DPT")

EXIT_FAILURE = 1
EXIT_PREREQUISITE = 2


class Artifacts:
    """File names inside the output directory."""

    def __init__(self, out_dir: Path):
        self.out = Path(out_dir)
        self.train = self.out / 'train.tsv'
        self.user_relation = self.out / 'user_relation.tsv'
        self.item_relation = self.out / 'item_relation.tsv'
        self.denoised = self.out / 'denoised.tsv'
        self.removed = self.out / 'removed.tsv'

    def checkpoint(self, stage: int) -> Path:
        return self.out / f"stage{stage}.ckpt"

    def metrics(self, stage: int) -> Path:
        return self.out / f"metrics_stage{stage}.jsonl"

    def user_dump(self, stage: int) -> Path:
        return self.out / f"users_stage{stage}.csv"

    def export(self, stage: int, precision: str) -> Path:
        return self.out / f"stage{stage}.{precision}.ckpt"


class HashMismatch(Exception):
    """An artifact was produced under a different config hash."""


def _hash_comment(run: RunConfig):
    return [f"config_hash={run.config_hash}"]


def _verify_hash(path: Path, expected: str, found: Optional[str] = None):
    found = found if found is not None else read_tsv_comments(path).get('config_hash')
    if found != expected:
        raise HashMismatch(f"config hash mismatch: {path} was written under {found}, "
                           f"current config is {expected}; rerun the earlier commands with the same config")


def _load_prepared(run: RunConfig):
    paths = Artifacts(run.out_dir)
    for path in (paths.train, paths.out / 'test.tsv', paths.out / 'users.txt', paths.out / 'items.txt'):
        require_file(path, 'prepare')
        _verify_hash(path, run.config_hash)
    return load_split(paths.out, run.behaviors)


def _load_stage_checkpoint(run: RunConfig, stage: int, producer: str):
    path = require_file(Artifacts(run.out_dir).checkpoint(stage), producer)
    ckpt = load_checkpoint(path, expected_stage=stage)
    _verify_hash(path, run.config_hash, ckpt.config_hash)
    return ckpt


def _load_denoised(run: RunConfig, ckpt, split):
    path = require_file(run.out_dir / (ckpt.denoised_graph or 'denoised.tsv'), 'stage1')
    _verify_hash(path, run.config_hash)
    return read_denoised_graph(path, split.train, ckpt.active)


def cmd_synth(args, run: RunConfig) -> int:
    spec = run.synthetic_spec()
    dataset, labels = generate_synthetic(spec)
    save_interactions(dataset, run.interactions)
    if run.noise is not None:
        write_noise_labels(labels, dataset, run.noise)
    log_training_event(logger, "SYNTH", {
        'users': dataset.num_users, 'items': dataset.num_items, 'records': len(dataset),
        'noisy': len(labels), 'path': str(run.interactions),
    })
    return 0


def cmd_prepare(args, run: RunConfig) -> int:
    require_file(run.interactions, 'synth')
    dataset = load_interactions_file(run.interactions, run.behaviors)
    dataset = drop_behaviors(dataset, run.dropped)
    split = leave_one_out_split(filter_min_target(dataset, run.min_count))
    paths = Artifacts(run.out_dir)
    save_split(split, paths.out, _hash_comment(run))

    graph = build_multi_behavior_graph(split.train, dropped=run.dropped)
    user_graph = build_user_relation_graph(graph, top_k=run.top_k)
    item_graph = build_item_relation_graph(split.train, top_k=run.top_k, all_pairs=run.all_pairs,
                                           dropped=run.dropped)
    write_relation_graph(user_graph, split.train, paths.user_relation, _hash_comment(run))
    write_relation_graph(item_graph, split.train, paths.item_relation, _hash_comment(run))
    logger.info(f"Prepared {paths.out}: {split.train.num_users} users, {split.train.num_items} items, "
                f"{len(split.test_pairs)} test pairs")
    return 0


def cmd_stage1(args, run: RunConfig) -> int:
    split = _load_prepared(run)
    paths = Artifacts(run.out_dir)
    for path in (paths.user_relation, paths.item_relation):
        require_file(path, 'prepare')
        _verify_hash(path, run.config_hash)
    user_graph = read_relation_graph(paths.user_relation, split.train)
    item_graph = read_relation_graph(paths.item_relation, split.train)

    result = stage1_train(split, user_graph, item_graph, run.stage(1), run.config_hash)
    write_denoised_graph(result.denoised, split.train, paths.denoised, _hash_comment(run))
    write_removed_report(result.denoised, split.train, paths.removed, _hash_comment(run))
    save_checkpoint(result.checkpoint.with_meta(denoised_graph=paths.denoised.name), paths.checkpoint(1))
    return 0


def cmd_stage2(args, run: RunConfig) -> int:
    ckpt = _load_stage_checkpoint(run, 1, 'stage1')
    split = _load_prepared(run)
    denoised = _load_denoised(run, ckpt, split)
    result = stage2_train(ckpt, denoised, run.stage(2))
    save_checkpoint(result.checkpoint, Artifacts(run.out_dir).checkpoint(2))
    return 0


def cmd_stage3(args, run: RunConfig) -> int:
    ckpt = _load_stage_checkpoint(run, 2, 'stage2')
    split = _load_prepared(run)
    denoised = _load_denoised(run, ckpt, split)
    result = stage3_train(ckpt, denoised, run.stage(3))
    save_checkpoint(result.checkpoint, Artifacts(run.out_dir).checkpoint(3))
    return 0


def cmd_evaluate(args, run: RunConfig) -> int:
    stage = args.stage
    paths = Artifacts(run.out_dir)
    ckpt = _load_stage_checkpoint(run, stage, f"stage{stage}")
    split = _load_prepared(run)
    if stage == 1:
        graph = build_multi_behavior_graph(split.train, dropped=run.dropped)
        user_graph = read_relation_graph(require_file(paths.user_relation, 'prepare'), split.train)
        item_graph = read_relation_graph(require_file(paths.item_relation, 'prepare'), split.train)
        reps = infer_representations(ckpt, graph, user_graph, item_graph)
    else:
        reps = infer_representations(ckpt, _load_denoised(run, ckpt, split))

    results = evaluate_ranking(reps, split, run.eval_mode, run.eval_negatives, run.seed, run.threads)
    report = build_report(results, stage, run.eval_k, run.seed, run.config_hash, run.eval_mode)
    write_metric_report(report, paths.metrics(stage))
    if args.dump_users:
        write_user_dump(results, split.train.user_ids, split.train.item_ids, paths.user_dump(stage))
    print(report.to_json_line(), end='')
    return 0


def cmd_export(args, run: RunConfig) -> int:
    ckpt = _load_stage_checkpoint(run, args.stage, f"stage{args.stage}")
    precision = 'f32' if args.f32 else 'f64'
    save_checkpoint(ckpt, Artifacts(run.out_dir).export(args.stage, precision), precision)
    return 0

def cmd_gradcheck(args, run: RunConfig) -> int:
    report = run_gradcheck(seed=run.seed, interaction_norm=run.interaction_norm)
    print_report(report)
    return 0 if report['passed'] else EXIT_FAILURE


def cmd_denoise_report(args, run: RunConfig) -> int:
    paths = Artifacts(run.out_dir)
    _load_stage_checkpoint(run, 1, 'stage1')
    split = _load_prepared(run)
    if run.noise is None:
        raise ValueError("no noise sidecar configured ([data] noise = ...)")
    require_file(run.noise, 'synth')
    require_file(paths.removed, 'stage1')
    _verify_hash(paths.removed, run.config_hash)

    removed = read_removed_report(paths.removed, split.train)
    graph = build_multi_behavior_graph(split.train, dropped=run.dropped)
    labels = read_noise_labels(run.noise, split.train)
    noisy = {(u, i, k) for u, i, k in labels.noisy if graph.active[k] and graph[k].has_edge(u, i)}
    quality = denoise_quality(removed, noisy)
    delta = denoised_delta(paths.removed)
    log_training_event(logger, "DENOISE", {**quality, 'delta': delta})
    print(f"delta={delta} precision={quality['precision']:.4f} recall={quality['recall']:.4f} "
          f"f1={quality['f1']:.4f} removed={quality['removed']} noisy={quality['noisy']} caught={quality['caught']}")
    return 0


COMMANDS: Dict[str, Callable] = {
    'synth': cmd_synth,
    'prepare': cmd_prepare,
    'stage1': cmd_stage1,
    'stage2': cmd_stage2,
    'stage3': cmd_stage3,
    'evaluate': cmd_evaluate,
    'export': cmd_export,
    'gradcheck': cmd_gradcheck,
    'denoise-report': cmd_denoise_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dpt', description="Three-stage multi-behavior recommender: denoise, retune, prompt")
    parser.add_argument('command', choices=list(COMMANDS))
    parser.add_argument('--config', type=Path, default=None, help="run config file (defaults built in)")
    parser.add_argument('--out', type=Path, default=Path(Config.OUTPUT_DIR), help="output directory")
    parser.add_argument('--seed', type=int, default=None)
    parser.add_argument('--threads', type=int, default=None, help="evaluation worker threads")
    parser.add_argument('--eval-mode', choices=EVAL_MODES, default=None)
    parser.add_argument('--prompt-variant', choices=PROMPT_VARIANTS, default=None)
    parser.add_argument('--drop-behavior', action='append', default=[], metavar='LABEL',
                        help="deactivate an auxiliary behavior (repeatable)")
    parser.add_argument('--stage', type=int, choices=(1, 2, 3), default=3, help="checkpoint to evaluate or export")
    parser.add_argument('--dump-users', action='store_true', help="write the per-user ranking CSV")
    parser.add_argument('--f32', action='store_true', help="export the checkpoint with 32-bit floats")
    return parser


def main(argv=None) -> int:
    """Parse arguments, run one command, and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    validation = Config.validate()
    if not validation['valid']:
        for error in validation['errors']:
            logger.error(error)
            print(f"error: {error}", file=sys.stderr)
        return EXIT_FAILURE
    logger.debug(Config.get_config_summary())
    try:
        run = load_run_config(args.config, args.out).with_overrides(
            seed=args.seed, prompt_variant=args.prompt_variant, dropped=args.drop_behavior,
            eval_mode=args.eval_mode, threads=args.threads)
        logger.debug(get_run_summary(run))
        logger.info(f"Running '{args.command}' (config hash {run.config_hash}, out {run.out_dir})")
        return COMMANDS[args.command](args, run)
    except (FileNotFoundError, HashMismatch) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except (ValueError, RuntimeError, FloatingPointError, KeyError) as e:
        logger.error(f"'{args.command}' failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
