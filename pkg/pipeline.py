"""
Three-stage DPT training.

Stage 1 trains every encoder parameter jointly on multi-behavior BPR plus
the denoising reconstruction loss, then prunes the auxiliary graphs.
Stage 2 freezes everything, re-initializes the readout, and retunes it with
BPR on the denoised graph. Stage 3 freezes the readout as well and trains
only the target-behavior embedding through the prompt vector.
"""
import math
import time
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from checkpoint import Checkpoint
from config import Config
from denoise import DenoisedGraph, ReconstructionBatch, binarize_and_prune, reconstruction_loss
from encoder import (AUX_BEHAVIOR_TABLE, READOUT_NAMES, TARGET_BEHAVIOR, EncoderSpec, Representations,
                     behavior_embedding, encode, infer, init_parameters)
from graphs import (GraphOperators, ItemRelationGraph, MultiBehaviorGraph, UserRelationGraph,
                    build_graph_operators, build_multi_behavior_graph)
from ingest import SplitDataset
from logger import log_training_event, setup_logger
from numcore import LossFn, Node, OptimizerState, ParameterStore, Tape, adamw_step, seeded_rng, tape_forward_backward
from run_config import StageConfig
from utils import derive_seed

logger = setup_logger("Pipeline")


class BprTriples(NamedTuple):
    """Parallel arrays of (user, positive item, sampled negative item)."""
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


class TrainingHistory:
    """Per-epoch mean losses and wall time of one stage."""

    def __init__(self, stage: int):
        self.stage = stage
        # one entry per completed epoch
        self.total: List[float] = []
        self.bpr: List[float] = []
        self.rec: List[float] = []  # zero outside stage 1
        self.epoch_seconds: List[float] = []

    def record(self, total: float, bpr: float, rec: float, seconds: float):
        self.total.append(total)
        self.bpr.append(bpr)
        self.rec.append(rec)
        self.epoch_seconds.append(seconds)

    @property
    def loss_trace(self):
        return tuple(self.total)

    @property
    def mean_epoch_seconds(self) -> float:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else 0.0


class StageResult(NamedTuple):
    checkpoint: Checkpoint
    history: TrainingHistory
    denoised: Optional[DenoisedGraph] = None


def bpr_loss(h_u: np.ndarray, h_i: np.ndarray, h_j: np.ndarray) -> float:
    """-log sigmoid(<h_u, h_i> - <h_u, h_j>), sigmoid clipped to [1e-12, 1 - 1e-12]."""
    diff = float(np.dot(h_u, h_i)) - float(np.dot(h_u, h_j))
    return float(-np.log(np.clip(expit(diff), Config.PROB_CLIP, 1.0 - Config.PROB_CLIP)))


def bpr_loss_node(tape: Tape, users: Node, items: Node, triples: BprTriples) -> Node:
    """Mean BPR loss of a batch of triples on the tape."""
    u = tape.gather(users, triples.users)
    pos = tape.row_sum(tape.mul(u, tape.gather(items, triples.positives)))
    neg = tape.row_sum(tape.mul(u, tape.gather(items, triples.negatives)))
    return tape.scale(tape.mean(tape.log_sigmoid(tape.sub(pos, neg))), -1.0)


def _contains(sorted_keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_keys, queries)
    found = np.zeros(len(queries), dtype=bool)
    inside = pos < len(sorted_keys)
    found[inside] = sorted_keys[pos[inside]] == queries[inside]
    return found


def sample_bpr_triples(graph: MultiBehaviorGraph, behavior: int, batch: int,
                       rng: np.random.Generator) -> BprTriples:
    """
    Draw `batch` positives uniformly from a behavior's edges and one negative per positive.

    Negatives are uniform over the items the user has no edge to under that
    behavior: rejection sampling for up to Config.NEGATIVE_SAMPLING_TRIES
    rounds, then an explicit draw from the complement. Positives of users
    who interacted with every item are skipped with a warning.

    Raises:
        ValueError: the behavior has no edges
    """
    bipartite = graph[behavior]
    if bipartite.edge_count == 0:
        raise ValueError(f"behavior {graph.behaviors[behavior]!r} has no edges to sample from")
    num_items = graph.num_items
    users, items = bipartite.edges()
    picks = rng.integers(0, len(users), size=batch)
    pos_users, pos_items = users[picks], items[picks]

    saturated = bipartite.user_degree[pos_users] >= num_items
    if saturated.any():
        logger.warning(f"Skipping {int(saturated.sum())} positives of users who interacted with every item "
                       f"under {graph.behaviors[behavior]!r}")
        pos_users, pos_items = pos_users[~saturated], pos_items[~saturated]

    edge_keys = users * num_items + items
    negatives = rng.integers(0, num_items, size=len(pos_users))
    pending = np.arange(len(pos_users))
    for _ in range(Config.NEGATIVE_SAMPLING_TRIES):
        pending = pending[_contains(edge_keys, pos_users[pending] * num_items + negatives[pending])]
        if pending.size == 0:
            break
        negatives[pending] = rng.integers(0, num_items, size=pending.size)
    else:
        pending = pending[_contains(edge_keys, pos_users[pending] * num_items + negatives[pending])]
        for index in pending:
            complement = np.setdiff1d(np.arange(num_items), bipartite.items_of(pos_users[index]))
            negatives[index] = complement[rng.integers(0, len(complement))]
    return BprTriples(pos_users, pos_items, negatives)


def _mean_nodes(tape: Tape, nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = tape.add(total, node)
    return tape.scale(total, 1.0 / len(nodes))


def steps_per_epoch(graph: MultiBehaviorGraph, behaviors: Sequence[int], batch: int) -> int:
    """ceil(sum of edges / (batch * number of behaviors)), at least 1."""
    edges = sum(graph[k].edge_count for k in behaviors)
    return max(1, math.ceil(edges / (batch * max(1, len(behaviors)))))


def _trainable_behaviors(graph: MultiBehaviorGraph, behaviors: Sequence[int]) -> List[int]:
    kept = [k for k in behaviors if graph[k].edge_count > 0]
    for k in behaviors:
        if k not in kept:
            logger.warning(f"Behavior {graph.behaviors[k]!r} has no edges; it contributes no loss term")
    return kept


def _sample_step(graph: MultiBehaviorGraph, behaviors: Sequence[int], batch: int,
                 rng: np.random.Generator) -> Dict[int, BprTriples]:
    triples = {k: sample_bpr_triples(graph, k, batch, rng) for k in behaviors}
    return {k: t for k, t in triples.items() if len(t)}


def behavior_embedding_matrix(store: ParameterStore, spec: EncoderSpec) -> np.ndarray:
    """K x d matrix of behavior embeddings (auxiliary rows, then the target)."""
    target = store[TARGET_BEHAVIOR].values[None, :]
    if spec.num_behaviors == 1:
        return target.copy()
    return np.vstack([store[AUX_BEHAVIOR_TABLE].values, target])


def _aux_prompt_sum(store: ParameterStore, spec: EncoderSpec, active: Sequence[bool]) -> np.ndarray:
    total = np.zeros(spec.dim)
    for k in range(spec.num_behaviors - 1):
        if active[k]:
            total = total + store[AUX_BEHAVIOR_TABLE].values[k]
    return total


def prompt_node(tape: Tape, store: ParameterStore, spec: EncoderSpec, active: Sequence[bool]) -> Node:
    """
    e_p = mean of the active behavior embeddings. Auxiliary rows enter as a
    constant, so the only gradient path is the target-behavior embedding.
    """
    aux = tape.constant(_aux_prompt_sum(store, spec, active))
    target = tape.parameter(store[TARGET_BEHAVIOR])
    return tape.scale(tape.add(aux, target), 1.0 / sum(bool(a) for a in active))


def prompt_values(store: ParameterStore, spec: EncoderSpec, active: Sequence[bool]) -> np.ndarray:
    """Inference-time value of prompt_node."""
    return (_aux_prompt_sum(store, spec, active) + store[TARGET_BEHAVIOR].values) * (
        1.0 / sum(bool(a) for a in active))


def stage1_loss(tape: Tape, store: ParameterStore, operators: GraphOperators, spec: EncoderSpec,
                triples: Dict[int, BprTriples], rec_weight: float = 1.0, keep_prob: float = 1.0,
                rng: Optional[np.random.Generator] = None, parts: Optional[Dict[str, float]] = None) -> Node:
    """
    BPR averaged over behaviors plus rec_weight times the reconstruction loss.

    The reconstruction batches reuse each behavior's BPR positives and
    negatives, scored on the behavior-aware representations.

    Args:
        tape: Tape to record on
        store: Stage-1 parameters
        operators: Original-graph operators with relation graphs
        spec: Encoder shapes
        triples: behavior -> sampled triples
        rec_weight: Weight of the reconstruction term (0 disables it)
        keep_prob: Dropout keep probability
        rng: Dropout generator
        parts: Receives the 'bpr' and 'rec' component values when given

    Returns:
        Scalar loss node
    """
    if not triples:
        raise ValueError("stage-1 loss needs triples for at least one behavior")
    behaviors = sorted(triples)
    reps = encode(tape, store, operators, spec, behavior_aware=rec_weight > 0,
                  training=keep_prob < 1.0, keep_prob=keep_prob, rng=rng)
    bpr = _mean_nodes(tape, [bpr_loss_node(tape, reps.user, reps.item, triples[k]) for k in behaviors])
    total, rec_value = bpr, 0.0
    if rec_weight > 0:
        # the sampled BPR pairs double as reconstruction positives and non-edges
        embeddings = {k: behavior_embedding(tape, store, k, spec.num_behaviors) for k in behaviors}
        batches = [ReconstructionBatch(k, triples[k].users, triples[k].positives,
                                       triples[k].users, triples[k].negatives) for k in behaviors]
        rec = reconstruction_loss(tape, reps.behavior_user, reps.behavior_item, embeddings, batches)
        total = tape.add(bpr, tape.scale(rec, rec_weight))
        rec_value = float(rec.value)
    if parts is not None:
        parts['bpr'] = float(bpr.value)
        parts['rec'] = rec_value
    return total


def stage2_loss(tape: Tape, store: ParameterStore, operators: GraphOperators, spec: EncoderSpec,
                triples: Dict[int, BprTriples], keep_prob: float = 1.0,
                rng: Optional[np.random.Generator] = None) -> Node:
    """BPR averaged over the behaviors of the denoised graph."""
    reps = encode(tape, store, operators, spec, training=keep_prob < 1.0, keep_prob=keep_prob, rng=rng)
    return _mean_nodes(tape, [bpr_loss_node(tape, reps.user, reps.item, triples[k]) for k in sorted(triples)])


def stage3_loss(tape: Tape, store: ParameterStore, operators: GraphOperators, spec: EncoderSpec,
                triples: BprTriples, prompt_variant: str = 'add', keep_prob: float = 1.0,
                rng: Optional[np.random.Generator] = None,
                prompt_override: Optional[np.ndarray] = None) -> Node:
    """Target-behavior BPR with the prompt injected into the target branch."""
    if prompt_override is not None:  # fixed prompt, nothing to learn
        prompt = tape.constant(prompt_override)
    else:
        prompt = prompt_node(tape, store, spec, operators.active)
    reps = encode(tape, store, operators, spec, prompt=prompt, prompt_variant=prompt_variant,
                  training=keep_prob < 1.0, keep_prob=keep_prob, rng=rng)
    return bpr_loss_node(tape, reps.user, reps.item, triples)


def _train_loop(stage: int, store: ParameterStore, config: StageConfig, steps: int,
                make_step: Callable[[Dict[str, float]], LossFn]) -> TrainingHistory:
    """
    Run config.epochs epochs of `steps` AdamW steps.

    Raises:
        RuntimeError: a non-finite value appeared (names stage, epoch and step)
    """
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    history = TrainingHistory(stage)
    logger.info(f"Stage {stage}: {config.epochs} epochs x {steps} steps, "
                f"{store.count_trainable_entries()} trainable entries")
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        totals, bprs, recs = [], [], []
        for step in range(1, steps + 1):
            parts: Dict[str, float] = {}
            try:
                loss = tape_forward_backward(store, make_step(parts))
            except FloatingPointError as e:
                raise RuntimeError(f"stage {stage} diverged at epoch {epoch}, step {step}: {e}") from e
            if not math.isfinite(loss):
                raise RuntimeError(f"stage {stage} diverged at epoch {epoch}, step {step}: loss={loss}")
            adamw_step(store, state)  # frozen parameters are skipped
            totals.append(loss)
            bprs.append(parts.get('bpr', loss))
            recs.append(parts.get('rec', 0.0))
        elapsed = time.perf_counter() - started
        history.record(float(np.mean(totals)), float(np.mean(bprs)), float(np.mean(recs)), elapsed)
        log_training_event(logger, "EPOCH", {
            'stage': stage, 'epoch': epoch, 'loss': history.total[-1], 'bpr': history.bpr[-1],
            'rec': history.rec[-1], 'seconds': elapsed,
        })
    return history


def _check_shapes(spec: EncoderSpec, graph: MultiBehaviorGraph, config: StageConfig):
    if (graph.num_users, graph.num_items, graph.num_behaviors) != (spec.num_users, spec.num_items,
                                                                   spec.num_behaviors):
        raise ValueError("graph and checkpoint disagree on users, items or behaviors")
    if (config.dim, config.layers, config.include_layer0) != (spec.dim, spec.layers, spec.include_layer0):
        raise ValueError(f"stage config (d={config.dim}, L={config.layers}) does not match the checkpoint "
                         f"(d={spec.dim}, L={spec.layers})")


def stage1_train(split: SplitDataset, user_graph: UserRelationGraph, item_graph: ItemRelationGraph,
                 config: StageConfig, config_hash: str = '') -> StageResult:
    """
    Joint multi-behavior training followed by denoising.

    Args:
        split: Leave-one-out split (training records only are used)
        user_graph: User relation graph built on the training records
        item_graph: Item relation graph built on the training records
        config: Stage-1 settings
        config_hash: Stamped into the checkpoint

    Returns:
        StageResult carrying the checkpoint, loss history and denoised graph
    """
    if config.stage != 1:
        raise ValueError(f"stage1_train needs a stage-1 config, got stage {config.stage}")
    train = split.train
    graph = build_multi_behavior_graph(train, dropped=config.dropped)
    operators = build_graph_operators(graph, user_graph, item_graph, config.interaction_norm)
    spec = EncoderSpec(train.num_users, train.num_items, train.num_behaviors, config.dim, config.layers,
                       config.include_layer0)
    store = ParameterStore(derive_seed(config.seed, 'init'))
    init_parameters(store, spec)

    sampling_rng = seeded_rng(derive_seed(config.seed, 'sampling', 'stage1'))
    dropout_rng = seeded_rng(derive_seed(config.seed, 'dropout', 'stage1'))
    behaviors = _trainable_behaviors(graph, graph.active_behaviors)
    steps = steps_per_epoch(graph, behaviors, config.batch_size)

    def make_step(parts):
        triples = _sample_step(graph, behaviors, config.batch_size, sampling_rng)
        return lambda tape: stage1_loss(tape, store, operators, spec, triples, config.rec_weight,
                                        config.keep_prob, dropout_rng, parts)

    history = _train_loop(1, store, config, steps, make_step)

    reps = infer(store, operators, spec, behavior_aware=True)
    denoised = binarize_and_prune(graph, reps.behavior_user, reps.behavior_item,
                                  behavior_embedding_matrix(store, spec), config.delta)
    ckpt = Checkpoint.from_store(1, store, config_hash=config_hash, seed=config.seed,
                                 include_layer0=config.include_layer0,
                                 interaction_norm=config.interaction_norm, active=graph.active,
                                 loss_trace=history.loss_trace)
    log_training_event(logger, "STAGE_DONE", {
        'stage': 1, 'final_loss': history.total[-1], 'removed': denoised.removed_count,
        'epoch_seconds': history.mean_epoch_seconds,
    })
    return StageResult(ckpt, history, denoised)


def stage2_train(checkpoint: Checkpoint, denoised: MultiBehaviorGraph, config: StageConfig) -> StageResult:
    """
    Retune a re-initialized readout on the denoised graph with every other parameter frozen.

    Relation aggregation is skipped; negatives are sampled against the denoised graph.

    Raises:
        ValueError: not a stage-1 checkpoint, or shapes that do not match
    """
    if checkpoint.stage != 1:
        raise ValueError(f"stage 2 needs a stage-1 checkpoint, got a stage-{checkpoint.stage} checkpoint")
    if config.stage != 2:
        raise ValueError(f"stage2_train needs a stage-2 config, got stage {config.stage}")
    spec = checkpoint.encoder_spec()
    _check_shapes(spec, denoised, config)
    store = checkpoint.to_store()
    # encoder frozen; only a fresh readout trains
    store.freeze()
    for name in READOUT_NAMES:
        store.reinitialize(name, key=f"stage2/{name}")
    store.unfreeze(READOUT_NAMES)

    # no relation graphs after stage 1
    operators = build_graph_operators(denoised, normalization=checkpoint.interaction_norm)
    sampling_rng = seeded_rng(derive_seed(config.seed, 'sampling', 'stage2'))
    dropout_rng = seeded_rng(derive_seed(config.seed, 'dropout', 'stage2'))
    behaviors = _trainable_behaviors(denoised, denoised.active_behaviors)
    steps = steps_per_epoch(denoised, behaviors, config.batch_size)

    def make_step(parts):
        triples = _sample_step(denoised, behaviors, config.batch_size, sampling_rng)
        return lambda tape: stage2_loss(tape, store, operators, spec, triples, config.keep_prob, dropout_rng)

    history = _train_loop(2, store, config, steps, make_step)
    ckpt = Checkpoint.from_store(2, store, config_hash=checkpoint.config_hash, seed=config.seed,
                                 denoised_graph=checkpoint.denoised_graph,
                                 include_layer0=checkpoint.include_layer0,
                                 interaction_norm=checkpoint.interaction_norm, active=denoised.active,
                                 loss_trace=history.loss_trace)
    log_training_event(logger, "STAGE_DONE", {
        'stage': 2, 'final_loss': history.total[-1], 'epoch_seconds': history.mean_epoch_seconds,
    })
    return StageResult(ckpt, history)


def stage3_train(checkpoint: Checkpoint, denoised: MultiBehaviorGraph, config: StageConfig,
                 prompt_override: Optional[np.ndarray] = None) -> StageResult:
    """
    Prompt-tune the target-behavior embedding with target-only BPR.

    Args:
        checkpoint: Stage-2 checkpoint
        denoised: Denoised graph used in stage 2
        config: Stage-3 settings (prompt_variant selects add / shallow / projection)
        prompt_override: Fixed prompt vector replacing e_p (test hook)

    Raises:
        ValueError: not a stage-2 checkpoint, unknown variant, or mismatched shapes
    """
    if checkpoint.stage != 2:
        raise ValueError(f"stage 3 needs a stage-2 checkpoint, got a stage-{checkpoint.stage} checkpoint")
    if config.stage != 3:
        raise ValueError(f"stage3_train needs a stage-3 config, got stage {config.stage}")
    spec = checkpoint.encoder_spec()
    _check_shapes(spec, denoised, config)
    store = checkpoint.to_store()
    # the target-behavior row is the single trainable vector
    store.freeze()
    store.unfreeze([TARGET_BEHAVIOR])

    operators = build_graph_operators(denoised, normalization=checkpoint.interaction_norm)
    sampling_rng = seeded_rng(derive_seed(config.seed, 'sampling', 'stage3'))
    dropout_rng = seeded_rng(derive_seed(config.seed, 'dropout', 'stage3'))
    target = denoised.target_behavior
    if not _trainable_behaviors(denoised, [target]):
        raise ValueError("stage 3 needs target-behavior edges")
    steps = steps_per_epoch(denoised, [target], config.batch_size)

    def make_step(parts):
        triples = sample_bpr_triples(denoised, target, config.batch_size, sampling_rng)
        return lambda tape: stage3_loss(tape, store, operators, spec, triples, config.prompt_variant,
                                        config.keep_prob, dropout_rng, prompt_override)

    history = _train_loop(3, store, config, steps, make_step)
    ckpt = Checkpoint.from_store(3, store, config_hash=checkpoint.config_hash, seed=config.seed,
                                 denoised_graph=checkpoint.denoised_graph,
                                 prompt_variant=config.prompt_variant,
                                 include_layer0=checkpoint.include_layer0,
                                 interaction_norm=checkpoint.interaction_norm, active=denoised.active,
                                 loss_trace=history.loss_trace)
    log_training_event(logger, "STAGE_DONE", {
        'stage': 3, 'variant': config.prompt_variant, 'final_loss': history.total[-1],
        'epoch_seconds': history.mean_epoch_seconds,
    })
    return StageResult(ckpt, history)


def count_trainable(spec: EncoderSpec, stage: int) -> int:
    """
    Closed-form trainable entry count of a stage.

    stage 1: (|U| + |I|) d + K d + L (6 + 2 d^2 + 4 d) + 2 (L + z) d^2
    stage 2: 2 (L + z) d^2
    stage 3: d
    where z = 1 when layer 0 joins the readout.
    """
    d, layers = spec.dim, spec.layers
    readout = 2 * (layers + int(spec.include_layer0)) * d * d
    if stage == 1:
        tables = (spec.num_users + spec.num_items) * d + spec.num_behaviors * d
        return tables + layers * (6 + 2 * d * d + 4 * d) + readout
    if stage == 2:
        return readout
    if stage == 3:
        return d
    raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


def infer_representations(checkpoint: Checkpoint, graph: MultiBehaviorGraph,
                          user_graph: Optional[UserRelationGraph] = None,
                          item_graph: Optional[ItemRelationGraph] = None,
                          prompt_override: Optional[np.ndarray] = None) -> Representations:
    """
    Final multi-behavior representations of a checkpoint's stage.

    Stage 1 runs on the original graph with relation graphs; stages 2 and 3
    run on the denoised graph without them, stage 3 with its prompt.
    """
    spec = checkpoint.encoder_spec()
    store = checkpoint.to_store()
    if checkpoint.stage == 1:
        if user_graph is None or item_graph is None:
            raise ValueError("stage-1 representations need the relation graphs")
        operators = build_graph_operators(graph, user_graph, item_graph, checkpoint.interaction_norm)
    else:
        operators = build_graph_operators(graph, normalization=checkpoint.interaction_norm)
    prompt = None
    if checkpoint.stage == 3:
        prompt = prompt_override if prompt_override is not None else prompt_values(store, spec, graph.active)
    return infer(store, operators, spec, prompt=prompt, prompt_variant=checkpoint.prompt_variant or 'add')
