"""
Behavior-aware denoising.
Rank-1 graph decoder, reconstruction (binary cross-entropy) objective, and
threshold pruning of auxiliary edges into the denoised graph.
"""
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from config import Config
from graphs import BipartiteGraph, MultiBehaviorGraph
from ingest import Dataset
from logger import log_training_event, setup_logger
from numcore import Node, Tape
from utils import ParseError, read_tsv, read_tsv_comments, write_tsv

logger = setup_logger("Denoise")


class EdgeScore(NamedTuple):
    """Decoder probability of one existing edge."""
    user_id: int
    item_id: int
    behavior_id: int
    probability: float


@dataclass(frozen=True)
class ReconstructionBatch:
    """Positive edges and sampled non-edges of one behavior."""
    behavior: int
    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pos_users) + len(self.neg_users)


@dataclass(frozen=True, eq=False)
class DenoisedGraph:
    """Pruned multi-behavior graph plus the removed edges of each auxiliary behavior."""
    graph: MultiBehaviorGraph
    removed: Tuple[Tuple[EdgeScore, ...], ...]
    delta: float

    @property
    def removed_count(self) -> int:
        return sum(len(r) for r in self.removed)

    def removed_edges(self) -> Set[Tuple[int, int, int]]:
        return {(s.user_id, s.item_id, s.behavior_id) for edges in self.removed for s in edges}


def _clip(prob):
    return np.clip(prob, Config.PROB_CLIP, 1.0 - Config.PROB_CLIP)


def decode_score(h_u: np.ndarray, h_i: np.ndarray, e_b: np.ndarray) -> float:
    """sigmoid((h_u . e_b) * (h_i . e_b)), clipped to [1e-12, 1 - 1e-12]."""
    return float(_clip(expit(float(np.dot(h_u, e_b)) * float(np.dot(h_i, e_b)))))


def decode_logits(user_reps: np.ndarray, item_reps: np.ndarray, e_b: np.ndarray,
                  users: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorized decoder logits for (users[n], items[n]) pairs."""
    return (user_reps[users] @ e_b) * (item_reps[items] @ e_b)


def binary_cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean BCE with probabilities clipped to [1e-12, 1 - 1e-12]."""
    probabilities = _clip(np.asarray(probabilities, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    if probabilities.size == 0:
        raise ValueError("binary cross-entropy of an empty batch")
    return float(-np.mean(labels * np.log(probabilities) + (1.0 - labels) * np.log(1.0 - probabilities)))


def reconstruction_loss(tape: Tape, behavior_users: Dict[int, Node], behavior_items: Dict[int, Node],
                        behavior_embeddings: Dict[int, Node],
                        batches: Sequence[ReconstructionBatch]) -> Node:
    """
    Decoder BCE averaged within each behavior's batch, then over behaviors.

    Args:
        tape: Tape holding the behavior-aware representations
        behavior_users: behavior -> user representation node
        behavior_items: behavior -> item representation node
        behavior_embeddings: behavior -> e_b node
        batches: One batch per behavior present

    Raises:
        ValueError: no batch or an empty batch
    """
    batches = [b for b in batches]
    if not batches or any(b.size == 0 for b in batches):
        raise ValueError("reconstruction loss needs a non-empty batch for every behavior")

    per_behavior = []
    for batch in batches:
        k = batch.behavior
        e_b = behavior_embeddings[k]
        terms = []
        if len(batch.pos_users):
            logits = tape.mul(tape.matvec(tape.gather(behavior_users[k], batch.pos_users), e_b),
                              tape.matvec(tape.gather(behavior_items[k], batch.pos_items), e_b))
            terms.append(tape.sum(tape.log_sigmoid(logits)))
        if len(batch.neg_users):
            logits = tape.mul(tape.matvec(tape.gather(behavior_users[k], batch.neg_users), e_b),
                              tape.matvec(tape.gather(behavior_items[k], batch.neg_items), e_b))
            terms.append(tape.sum(tape.log_sigmoid(tape.scale(logits, -1.0))))
        total = terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])
        per_behavior.append(tape.scale(total, -1.0 / batch.size))

    loss = per_behavior[0]
    for term in per_behavior[1:]:
        loss = tape.add(loss, term)
    return tape.scale(loss, 1.0 / len(per_behavior))


def score_edges(mbg: MultiBehaviorGraph, behavior_users: Dict[int, np.ndarray],
                behavior_items: Dict[int, np.ndarray], behavior_embeddings: np.ndarray,
                behaviors: Optional[Sequence[int]] = None) -> Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Decoder probability of every existing edge.

    Args:
        mbg: Graph whose edges are scored
        behavior_users / behavior_items: Behavior-aware representations
        behavior_embeddings: K x d behavior embedding matrix
        behaviors: Behaviors to score (default: active auxiliary behaviors)

    Returns:
        behavior -> (users, items, probabilities), edges sorted by (user, item)
    """
    if behaviors is None:
        behaviors = [k for k in mbg.active_behaviors if k != mbg.target_behavior]
    scores = {}
    for k in behaviors:
        if k not in behavior_users:
            raise ValueError(f"no behavior-aware representations for behavior {k}")
        users, items = mbg[k].edges()
        logits = decode_logits(behavior_users[k], behavior_items[k], behavior_embeddings[k], users, items)
        scores[k] = (users, items, _clip(expit(logits)))
    return scores


def prune_scored_edges(mbg: MultiBehaviorGraph, scores: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]],
                       delta: float) -> DenoisedGraph:
    """
    Remove auxiliary edges whose probability is below 0.5 - delta.

    The target graph is carried over unchanged; no edge is ever added.

    Raises:
        ValueError: delta outside (0, 0.5) or an attempt to prune the target behavior
    """
    if not (0.0 < delta < 0.5):
        raise ValueError(f"delta must lie in (0, 0.5), got {delta}")
    threshold = 0.5 - delta
    graph = mbg
    removed: List[Tuple[EdgeScore, ...]] = [() for _ in range(mbg.num_behaviors)]
    for k, (users, items, probs) in sorted(scores.items()):
        if k == mbg.target_behavior:
            raise ValueError("target-behavior edges are never pruned")
        drop = probs < threshold  # strict: p == 0.5 - delta survives
        removed[k] = tuple(EdgeScore(int(u), int(i), k, float(p))
                           for u, i, p in zip(users[drop], items[drop], probs[drop]))
        if drop.any():
            # rebuild behavior k from survivors; other behaviors are shared
            keep = ~drop
            kept = sp.csr_matrix((np.ones(int(keep.sum())), (users[keep], items[keep])),
                                 shape=(mbg.num_users, mbg.num_items))
            kept.sort_indices()
            graph = graph.with_user_items(k, kept)
        log_training_event(logger, "PRUNE", {
            'behavior': mbg.behaviors[k], 'edges': len(users), 'removed': int(drop.sum()),
            'threshold': threshold,
        })
    return DenoisedGraph(graph, tuple(removed), float(delta))


def binarize_and_prune(mbg: MultiBehaviorGraph, behavior_users: Dict[int, np.ndarray],
                       behavior_items: Dict[int, np.ndarray], behavior_embeddings: np.ndarray,
                       delta: float) -> DenoisedGraph:
    """Score every active auxiliary edge once and prune it below 0.5 - delta."""
    if not (0.0 < delta < 0.5):
        raise ValueError(f"delta must lie in (0, 0.5), got {delta}")
    scores = score_edges(mbg, behavior_users, behavior_items, behavior_embeddings)
    denoised = prune_scored_edges(mbg, scores, delta)
    logger.info(f"Denoised graph: removed {denoised.removed_count} auxiliary edges "
                f"({mbg.total_edges} -> {denoised.graph.total_edges}) at delta={delta}")
    return denoised


def write_removed_report(denoised: DenoisedGraph, dataset: Dataset, path, comments: Sequence[str] = ()):
    """`user<TAB>item<TAB>behavior<TAB>score` per removed edge, raw ids."""
    rows = ((dataset.user_ids[s.user_id], dataset.item_ids[s.item_id], dataset.behaviors[s.behavior_id],
             s.probability) for edges in denoised.removed for s in edges)
    write_tsv(path, rows, list(comments) + [f"delta={denoised.delta!r}"])


def read_removed_report(path, dataset: Dataset) -> Set[Tuple[int, int, int]]:
    """Dense (user, item, behavior) triples of a removed-edge report."""
    removed = set()
    for line_number, fields in read_tsv(path):
        if len(fields) != 4:
            raise ParseError(line_number, f"expected 4 tab-separated fields, got {len(fields)}")
        user, item, label, _ = fields
        if user not in dataset.user_index or item not in dataset.item_index or label not in dataset.behavior_index:
            raise ParseError(line_number, "removed edge references an unknown id or label")
        removed.add((dataset.user_index[user], dataset.item_index[item], dataset.behavior_index[label]))
    return removed


def write_denoised_graph(denoised: DenoisedGraph, dataset: Dataset, path, comments: Sequence[str] = ()):
    """`user<TAB>item<TAB>behavior` per edge of the denoised graph, raw ids."""
    def rows():
        for k, graph in enumerate(denoised.graph.graphs):
            users, items = graph.edges()
            for u, i in zip(users, items):
                yield dataset.user_ids[u], dataset.item_ids[i], dataset.behaviors[k]
    write_tsv(path, rows(), list(comments) + [f"delta={denoised.delta!r}"])


def read_denoised_graph(path, dataset: Dataset, active: Sequence[bool]) -> MultiBehaviorGraph:
    """Reload a denoised graph dump against the split's id tables."""
    edges: Dict[int, Tuple[list, list]] = {k: ([], []) for k in range(dataset.num_behaviors)}
    for line_number, fields in read_tsv(path):
        if len(fields) != 3:
            raise ParseError(line_number, f"expected 3 tab-separated fields, got {len(fields)}")
        user, item, label = fields
        if user not in dataset.user_index or item not in dataset.item_index or label not in dataset.behavior_index:
            raise ParseError(line_number, "denoised edge references an unknown id or label")
        users, items = edges[dataset.behavior_index[label]]
        users.append(dataset.user_index[user])
        items.append(dataset.item_index[item])

    shape = (dataset.num_users, dataset.num_items)
    graphs = []
    for k in range(dataset.num_behaviors):
        users, items = edges[k]
        matrix = sp.csr_matrix((np.ones(len(users)), (np.array(users, dtype=np.int64),
                                                      np.array(items, dtype=np.int64))), shape=shape)
        matrix.sort_indices()
        graphs.append(BipartiteGraph(k, matrix))
    return MultiBehaviorGraph(dataset.num_users, dataset.num_items, dataset.behaviors, tuple(graphs),
                              tuple(active))


def denoised_delta(path) -> float:
    """Delta recorded in a denoised-graph or removed-edge dump."""
    meta = read_tsv_comments(path)
    if 'delta' not in meta:
        raise ValueError(f"{path}: missing '# delta=' header")
    return float(meta['delta'])
