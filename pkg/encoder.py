"""
Pattern-enhanced graph encoder.
Embedding tables, per-behavior interaction / user-relation / item-relation
aggregation, gated view fusion, behavior averaging, and layer-concatenation
readout. Every operation runs on a numcore Tape so the same code serves
training and inference.
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from config import Config
from graphs import GraphOperators
from logger import setup_logger
from numcore import Node, ParameterStore, Tape

logger = setup_logger("Encoder")

PROMPT_VARIANTS = ('add', 'shallow', 'projection')

USER_TABLE = 'emb.user'
ITEM_TABLE = 'emb.item'
AUX_BEHAVIOR_TABLE = 'emb.behavior_aux'
TARGET_BEHAVIOR = 'emb.behavior_target'
READOUT_USER = 'readout.user'
READOUT_ITEM = 'readout.item'
READOUT_NAMES = (READOUT_USER, READOUT_ITEM)


def layer_param(layer: int, part: str) -> str:
    """Name of a per-layer parameter, e.g. layer_param(1, 'user_conv') -> 'enc.l1.user_conv'."""
    return f"enc.l{layer}.{part}"


LAYER_PARTS = ('user_conv', 'item_conv', 'attn_in', 'attn_out', 'gate_user', 'gate_item')


@dataclass(frozen=True)
class EncoderSpec:
    """Shapes of one encoder instance."""
    num_users: int
    num_items: int
    num_behaviors: int
    dim: int = 16
    layers: int = 2
    include_layer0: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"embedding dimension must be positive, got {self.dim}")
        if self.layers < 1:
            raise ValueError(f"encoder needs at least one layer, got {self.layers}")
        if self.num_behaviors < 1:
            raise ValueError("at least the target behavior is required")

    @property
    def readout_width(self) -> int:
        return (self.layers + int(self.include_layer0)) * self.dim

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        d = self.dim
        shapes = {
            USER_TABLE: (self.num_users, d),
            ITEM_TABLE: (self.num_items, d),
            TARGET_BEHAVIOR: (d,),
            READOUT_USER: (self.readout_width, d),
            READOUT_ITEM: (self.readout_width, d),
        }
        if self.num_behaviors > 1:
            shapes[AUX_BEHAVIOR_TABLE] = (self.num_behaviors - 1, d)
        for layer in range(1, self.layers + 1):
            shapes[layer_param(layer, 'user_conv')] = (3,)
            shapes[layer_param(layer, 'item_conv')] = (3,)
            shapes[layer_param(layer, 'attn_in')] = (d, d)
            shapes[layer_param(layer, 'attn_out')] = (d, d)
            shapes[layer_param(layer, 'gate_user')] = (2 * d,)
            shapes[layer_param(layer, 'gate_item')] = (2 * d,)
        return shapes


def init_parameters(store: ParameterStore, spec: EncoderSpec):
    """Register every encoder parameter with Xavier init keyed by name."""
    for name, shape in sorted(spec.parameter_shapes().items()):
        store.add(name, shape)
    logger.info(f"Initialized {len(store)} parameter arrays "
                f"({store.count_trainable_entries()} entries, d={spec.dim}, L={spec.layers})")


class RepresentationNodes:
    """Encoder outputs as tape nodes; behavior streams present only when requested."""

    def __init__(self, user: Node, item: Node):
        self.user = user
        self.item = item
        # behavior id -> readout of that behavior's own stream
        self.behavior_user: Dict[int, Node] = {}
        self.behavior_item: Dict[int, Node] = {}

    def to_arrays(self) -> 'Representations':
        return Representations(
            self.user.value, self.item.value,
            {k: n.value for k, n in self.behavior_user.items()},
            {k: n.value for k, n in self.behavior_item.items()},
        )


class Representations:
    """Final user/item representations (count x d arrays)."""

    def __init__(self, user: np.ndarray, item: np.ndarray,
                 behavior_user: Optional[Dict[int, np.ndarray]] = None,
                 behavior_item: Optional[Dict[int, np.ndarray]] = None):
        self.user = user
        self.item = item
        self.behavior_user = behavior_user or {}
        self.behavior_item = behavior_item or {}


def embed_lookup(tape: Tape, table: Node, ids: Sequence[int]) -> Node:
    """
    Rows of an embedding table (one-hot lookup).

    Raises:
        ValueError: an id outside the table
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding id out of range for table with {table.shape[0]} rows")
    return tape.gather(table, ids)


def behavior_embedding(tape: Tape, store: ParameterStore, behavior: int, num_behaviors: int) -> Node:
    """e_b for one behavior: a row of the auxiliary table, or the target vector."""
    if behavior == num_behaviors - 1:
        return tape.parameter(store[TARGET_BEHAVIOR])
    return tape.row(tape.parameter(store[AUX_BEHAVIOR_TABLE]), behavior)


def interaction_aggregate(tape: Tape, users: Node, items: Node,
                          user_from_items: sp.spmatrix, item_from_users: sp.spmatrix) -> Tuple[Node, Node]:
    """One behavior's message passing over the user-item graph: (user out, item out)."""
    return tape.spmm(user_from_items, items), tape.spmm(item_from_users, users)


def user_relation_aggregate(tape: Tape, users: Node, relation: sp.spmatrix, kernel: Node) -> Node:
    """Weighted neighbor sum over the user graph, convolved with the self embedding."""
    return tape.pair_conv(tape.spmm(relation, users), users, kernel)


def attention_scores(tape: Tape, items: Node, w_in: Node, w_out: Node) -> Tuple[Node, Node]:
    """
    Softmax over the incoming/outgoing directions of the bilinear score
    e^T W_n e / sqrt(d), per item. Returns (alpha_in, alpha_out).
    """
    scale = 1.0 / np.sqrt(items.shape[1])
    score_in = tape.scale(tape.row_sum(tape.mul(items, tape.matmul(items, w_in))), scale)
    score_out = tape.scale(tape.row_sum(tape.mul(items, tape.matmul(items, w_out))), scale)
    return tape.sigmoid(tape.sub(score_in, score_out)), tape.sigmoid(tape.sub(score_out, score_in))


def item_relation_aggregate(tape: Tape, items: Node, incoming: sp.spmatrix, outgoing: sp.spmatrix,
                            alpha: Tuple[Node, Node], kernel: Node) -> Node:
    """Attention-weighted incoming/outgoing neighbor sums, convolved with the self embedding."""
    alpha_in, alpha_out = alpha
    neighbors = tape.add(tape.scale_rows(tape.spmm(incoming, items), alpha_in),
                         tape.scale_rows(tape.spmm(outgoing, items), alpha_out))
    return tape.pair_conv(neighbors, items, kernel)


def gated_fuse(tape: Tape, interaction: Node, relation: Node, gate: Node,
               clamp: float = Config.GATE_CLAMP) -> Tuple[Node, Node]:
    """
    a + ((1 - beta) / beta) * b with beta = clamp(sigmoid([a || b] . w)).

    Returns:
        (fused output, beta)
    """
    beta = tape.clip(tape.sigmoid(tape.matvec(tape.concat([interaction, relation], axis=1), gate)),
                     clamp, 1.0 - clamp)
    ratio = tape.add_scalar(tape.reciprocal(beta), -1.0)
    return tape.add(interaction, tape.scale_rows(relation, ratio)), beta


def fuse_behaviors(tape: Tape, outputs: Sequence[Node]) -> Node:
    """Arithmetic mean of the per-behavior outputs."""
    if not outputs:
        raise ValueError("no behavior outputs to fuse")
    total = outputs[0]
    for out in outputs[1:]:
        total = tape.add(total, out)
    return tape.scale(total, 1.0 / len(outputs))


def readout(tape: Tape, layers: Sequence[Node], weight: Node) -> Node:
    """ReLU(concat(layers) . W)."""
    stacked = layers[0] if len(layers) == 1 else tape.concat(list(layers), axis=1)
    return tape.relu(tape.matmul(stacked, weight))


def _apply_prompt(tape: Tape, out: Node, prompt: Node, variant: str) -> Node:
    if variant == 'projection':
        return tape.mul_row(out, tape.add_scalar(prompt, 1.0))
    return tape.add_row(out, prompt)


def encode(tape: Tape, store: ParameterStore, operators: GraphOperators, spec: EncoderSpec,
           prompt: Optional[Node] = None, prompt_variant: str = 'add',
           behavior_aware: bool = False, training: bool = False, keep_prob: float = 1.0,
           rng: Optional[np.random.Generator] = None) -> RepresentationNodes:
    """
    Run the L-layer encoder and the readout.

    Layer l reads the fused layer l-1 embeddings (the base tables at l = 1)
    for interaction and relation aggregation; relation aggregation and gated
    fusion run only when the operators carry relation graphs. A prompt, when
    given, modifies the target-behavior branch before behavior averaging.

    Args:
        tape: Tape to record on
        store: Encoder parameters
        operators: Propagation matrices (original or denoised graph)
        spec: Encoder shapes
        prompt: Optional d-vector node for the target branch
        prompt_variant: 'add' (every layer), 'shallow' (first layer), 'projection' (x (1 + p), every layer)
        behavior_aware: Also build per-behavior readouts
        training: Enables dropout on fused layer outputs
        keep_prob: Dropout keep probability
        rng: Dropout mask generator

    Returns:
        RepresentationNodes
    """
    if prompt_variant not in PROMPT_VARIANTS:
        raise ValueError(f"unknown prompt variant {prompt_variant!r}; expected one of {PROMPT_VARIANTS}")
    if operators.num_behaviors != spec.num_behaviors:
        raise ValueError("graph operators and encoder disagree on the number of behaviors")
    if (operators.num_users, operators.num_items) != (spec.num_users, spec.num_items):
        raise ValueError("graph operators and encoder disagree on users/items")

    target = spec.num_behaviors - 1
    active = operators.active_behaviors
    users = tape.parameter(store[USER_TABLE])
    items = tape.parameter(store[ITEM_TABLE])

    fused_users: List[Node] = [users]
    fused_items: List[Node] = [items]
    stream_users: Dict[int, List[Node]] = {k: [users] for k in active}
    stream_items: Dict[int, List[Node]] = {k: [items] for k in active}

    for layer in range(1, spec.layers + 1):
        # relation kernels, gates and item attention are shared by every behavior of a layer
        if operators.has_relations:
            user_kernel = tape.parameter(store[layer_param(layer, 'user_conv')])
            item_kernel = tape.parameter(store[layer_param(layer, 'item_conv')])
            gate_user = tape.parameter(store[layer_param(layer, 'gate_user')])
            gate_item = tape.parameter(store[layer_param(layer, 'gate_item')])
            alpha = attention_scores(tape, items,
                                     tape.parameter(store[layer_param(layer, 'attn_in')]),
                                     tape.parameter(store[layer_param(layer, 'attn_out')]))

        user_outs, item_outs = [], []
        for k in active:
            # interaction messages of behavior k
            user_out, item_out = interaction_aggregate(tape, users, items, operators.user_from_items[k],
                                                       operators.item_from_users[k])
            if operators.has_relations:
                user_rel = user_relation_aggregate(tape, users, operators.user_relation[k], user_kernel)
                item_rel = item_relation_aggregate(tape, items, operators.item_incoming[k],
                                                   operators.item_outgoing[k], alpha, item_kernel)
                user_out, _ = gated_fuse(tape, user_out, user_rel, gate_user)
                item_out, _ = gated_fuse(tape, item_out, item_rel, gate_item)
            # prompt touches the target branch only
            if prompt is not None and k == target and (prompt_variant != 'shallow' or layer == 1):
                user_out = _apply_prompt(tape, user_out, prompt, prompt_variant)
                item_out = _apply_prompt(tape, item_out, prompt, prompt_variant)
            user_outs.append(user_out)
            item_outs.append(item_out)
            if behavior_aware:
                stream_users[k].append(user_out)
                stream_items[k].append(item_out)

        # next layer reads the behavior mean
        users = tape.dropout(fuse_behaviors(tape, user_outs), keep_prob, training, rng)
        items = tape.dropout(fuse_behaviors(tape, item_outs), keep_prob, training, rng)
        fused_users.append(users)
        fused_items.append(items)

    first = 0 if spec.include_layer0 else 1  # layer 0 = raw tables
    w_user = tape.parameter(store[READOUT_USER])
    w_item = tape.parameter(store[READOUT_ITEM])
    reps = RepresentationNodes(readout(tape, fused_users[first:], w_user),
                               readout(tape, fused_items[first:], w_item))
    if behavior_aware:
        for k in active:
            reps.behavior_user[k] = readout(tape, stream_users[k][first:], w_user)
            reps.behavior_item[k] = readout(tape, stream_items[k][first:], w_item)
    return reps


def infer(store: ParameterStore, operators: GraphOperators, spec: EncoderSpec,
          prompt: Optional[np.ndarray] = None, prompt_variant: str = 'add',
          behavior_aware: bool = False) -> Representations:
    """Inference-mode encode (no dropout, no gradient bookkeeping)."""
    tape = Tape(grad_enabled=False)
    prompt_node = tape.constant(prompt) if prompt is not None else None
    return encode(tape, store, operators, spec, prompt=prompt_node, prompt_variant=prompt_variant,
                  behavior_aware=behavior_aware).to_arrays()
