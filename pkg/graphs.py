"""
Graph construction for DPT.
Per-behavior bipartite interaction graphs, Jaccard user-user relation graphs,
sequential item-item relation graphs, weight normalization, and the sparse
propagation operators consumed by the encoder.
"""
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from ingest import Dataset
from logger import setup_logger
from utils import ParseError, read_tsv, read_tsv_comments, write_tsv

logger = setup_logger("Graphs")

INTERACTION_NORMS = ('none', 'symmetric', 'mean')


def _binary_csr(rows, cols, shape) -> sp.csr_matrix:
    matrix = sp.csr_matrix((np.ones(len(rows)), (np.asarray(rows), np.asarray(cols))), shape=shape)
    matrix.sum_duplicates()
    matrix.data[:] = 1.0
    matrix.sort_indices()
    return matrix


def _row_normalize(matrix: sp.csr_matrix) -> sp.csr_matrix:
    sums = np.asarray(matrix.sum(axis=1)).ravel()
    inv = np.zeros_like(sums)
    np.divide(1.0, sums, out=inv, where=sums > 0)
    return (sp.diags(inv) @ matrix).tocsr()


def _truncate_rows(rows: np.ndarray, cols: np.ndarray, weights: np.ndarray, top_k: int):
    """Keep each row's top_k entries by weight, ties to the lower column id."""
    if len(rows) == 0:
        return rows, cols, weights
    order = np.lexsort((cols, -weights, rows))
    rows, cols, weights = rows[order], cols[order], weights[order]
    starts = np.searchsorted(rows, rows, side='left')
    keep = (np.arange(len(rows)) - starts) < top_k
    return rows[keep], cols[keep], weights[keep]


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """One behavior's user-item adjacency (binary CSR, users x items)."""
    behavior_id: int
    user_items: sp.csr_matrix

    @cached_property
    def item_users(self) -> sp.csr_matrix:
        return self.user_items.T.tocsr()

    @property
    def edge_count(self) -> int:
        return int(self.user_items.nnz)

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_items.indptr)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_users.indptr)

    def has_edge(self, user: int, item: int) -> bool:
        start, end = self.user_items.indptr[user], self.user_items.indptr[user + 1]
        row = self.user_items.indices[start:end]
        pos = np.searchsorted(row, item)
        return bool(pos < len(row) and row[pos] == item)

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """(users, items) of every edge, sorted by user then item."""
        coo = self.user_items.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)

    def items_of(self, user: int) -> np.ndarray:
        return self.user_items.indices[self.user_items.indptr[user]:self.user_items.indptr[user + 1]]


@dataclass(frozen=True, eq=False)
class MultiBehaviorGraph:
    """
    Per-behavior bipartite graphs over a shared user/item space.

    Inactive behaviors (dropped for an ablation) hold empty graphs and are
    excluded from behavior fusion and loss averaging.
    """
    num_users: int
    num_items: int
    behaviors: Tuple[str, ...]
    graphs: Tuple[BipartiteGraph, ...]
    active: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.graphs) != len(self.behaviors) or len(self.active) != len(self.behaviors):
            raise ValueError("one graph and one active flag per behavior are required")
        for graph in self.graphs:
            if graph.user_items.shape != (self.num_users, self.num_items):
                raise ValueError("all behavior graphs must share num_users x num_items")
        if not self.active[-1]:
            raise ValueError("the target behavior cannot be inactive")

    @property
    def num_behaviors(self) -> int:
        return len(self.graphs)

    @property
    def target_behavior(self) -> int:
        return self.num_behaviors - 1

    def __getitem__(self, behavior: int) -> BipartiteGraph:
        return self.graphs[behavior]

    @property
    def total_edges(self) -> int:
        return sum(g.edge_count for g in self.graphs)

    @property
    def active_behaviors(self) -> Tuple[int, ...]:
        return tuple(k for k, flag in enumerate(self.active) if flag)

    def with_user_items(self, behavior: int, user_items: sp.csr_matrix) -> 'MultiBehaviorGraph':
        """Copy with one behavior's adjacency replaced."""
        graphs = list(self.graphs)
        graphs[behavior] = BipartiteGraph(behavior, user_items.tocsr())
        return replace(self, graphs=tuple(graphs))


def build_multi_behavior_graph(dataset: Dataset,
                               dropped: Sequence[str] = ()) -> MultiBehaviorGraph:
    """
    Build one bipartite graph per behavior.

    Args:
        dataset: Deduplicated dataset
        dropped: Auxiliary behavior labels to deactivate (their graphs are emptied)

    Returns:
        MultiBehaviorGraph with edge (u, i) in graph k iff record (u, i, k) exists
    """
    dropped_ids = set()
    for label in dropped:
        if label not in dataset.behavior_index:
            raise ValueError(f"cannot drop unknown behavior {label!r}")
        if dataset.behavior_index[label] == dataset.target_behavior:
            raise ValueError(f"cannot drop the target behavior {label!r}")
        dropped_ids.add(dataset.behavior_index[label])

    shape = (dataset.num_users, dataset.num_items)
    graphs = []
    for k, label in enumerate(dataset.behaviors):
        if k in dropped_ids:
            graphs.append(BipartiteGraph(k, sp.csr_matrix(shape)))
            continue
        mask = dataset.behavior_ids == k
        graph = BipartiteGraph(k, _binary_csr(dataset.users[mask], dataset.items[mask], shape))
        if graph.edge_count == 0:
            logger.warning(f"Behavior {label!r} has no interactions")
        graphs.append(graph)

    active = tuple(k not in dropped_ids for k in range(dataset.num_behaviors))
    mbg = MultiBehaviorGraph(dataset.num_users, dataset.num_items, dataset.behaviors, tuple(graphs), active)
    logger.info("Multi-behavior graph: " + ", ".join(
        f"{label}={g.edge_count}{'' if on else ' (dropped)'}"
        for label, g, on in zip(dataset.behaviors, mbg.graphs, active)))
    return mbg


@dataclass(frozen=True, eq=False)
class UserRelationGraph:
    """Per-behavior undirected user-user Jaccard graphs (users x users CSR)."""
    num_users: int
    adjacency: Tuple[sp.csr_matrix, ...]
    normalized: bool = False

    @property
    def num_behaviors(self) -> int:
        return len(self.adjacency)

    def weight(self, behavior: int, u: int, v: int) -> float:
        return float(self.adjacency[behavior][u, v])


@dataclass(frozen=True, eq=False)
class ItemRelationGraph:
    """
    Per-behavior directed item-item transition graphs.

    outgoing[k][i, j] and incoming[k][j, i] both hold the weight of i -> j.
    Normalization rescales rows of each matrix independently.
    """
    num_items: int
    outgoing: Tuple[sp.csr_matrix, ...]
    incoming: Tuple[sp.csr_matrix, ...]
    normalized: bool = False

    @property
    def num_behaviors(self) -> int:
        return len(self.outgoing)

    def weight(self, behavior: int, source: int, target: int) -> float:
        return float(self.outgoing[behavior][source, target])


RelationGraph = Union[UserRelationGraph, ItemRelationGraph]


def jaccard_matrix(user_items: sp.csr_matrix) -> sp.csr_matrix:
    """Pairwise Jaccard similarity of the users' item sets, diagonal removed."""
    binary = user_items.astype(np.float64)
    # co-occurrence counts are the intersections
    co = (binary @ binary.T).tocoo()
    off_diagonal = co.row != co.col
    rows, cols, inter = co.row[off_diagonal], co.col[off_diagonal], co.data[off_diagonal]
    degree = np.diff(user_items.indptr).astype(np.float64)
    weights = inter / (degree[rows] + degree[cols] - inter)
    return sp.csr_matrix((weights, (rows, cols)), shape=co.shape)


def build_user_relation_graph(mbg: MultiBehaviorGraph, top_k: int = 10) -> UserRelationGraph:
    """
    Jaccard user-user graph per behavior.

    Each user keeps its top_k strongest neighbors (ties to the lower id);
    symmetry is restored by taking the union of kept edges.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    adjacency = []
    for graph in mbg.graphs:
        coo = jaccard_matrix(graph.user_items).tocoo()
        rows, cols, weights = _truncate_rows(coo.row.astype(np.int64), coo.col.astype(np.int64),
                                             coo.data, top_k)
        kept = sp.csr_matrix((weights, (rows, cols)), shape=(mbg.num_users, mbg.num_users))
        # union of both directions
        symmetric = kept.maximum(kept.T).tocsr()
        symmetric.sort_indices()
        adjacency.append(symmetric)
    logger.info("User relation graph edges: " + ", ".join(
        f"{label}={m.nnz // 2}" for label, m in zip(mbg.behaviors, adjacency)))
    return UserRelationGraph(mbg.num_users, tuple(adjacency))


def _transition_pairs(users: np.ndarray, items: np.ndarray, timestamps: np.ndarray,
                      all_pairs: bool) -> Tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((items, timestamps, users))
    users, items = users[order], items[order]
    if not all_pairs:
        same_user = users[:-1] == users[1:]
        return items[:-1][same_user], items[1:][same_user]

    sources, targets = [], []
    boundaries = np.flatnonzero(np.diff(users)) + 1
    for sequence in np.split(items, boundaries):
        first, second = np.triu_indices(len(sequence), k=1)
        sources.append(sequence[first])
        targets.append(sequence[second])
    if not sources:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(sources), np.concatenate(targets)


def build_item_relation_graph(dataset: Dataset, top_k: int = 10, all_pairs: bool = False,
                              dropped: Sequence[str] = ()) -> ItemRelationGraph:
    """
    Directed item-item graph per behavior from users' interaction sequences.

    Each user's records under a behavior are ordered by (timestamp, item id).
    count(i -> j) sums consecutive transitions (every ordered pair when
    all_pairs is set) across users; w(i -> j) = count(i -> j) / (count(i -> j) + count(j -> i)).
    Each item keeps its top_k strongest out-neighbors (ties to the lower id).
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1, got {top_k}")
    dropped_ids = {dataset.behavior_index[label] for label in dropped}
    shape = (dataset.num_items, dataset.num_items)
    outgoing, incoming = [], []
    for k in range(dataset.num_behaviors):
        mask = dataset.behavior_ids == k
        if k in dropped_ids or not mask.any():
            outgoing.append(sp.csr_matrix(shape))
            incoming.append(sp.csr_matrix(shape))
            continue
        sources, targets = _transition_pairs(dataset.users[mask], dataset.items[mask],
                                             dataset.timestamps[mask], all_pairs)
        distinct = sources != targets  # repeats of one item are not transitions
        counts = sp.csr_matrix((np.ones(int(distinct.sum())), (sources[distinct], targets[distinct])),
                               shape=shape)
        counts.sum_duplicates()
        if counts.nnz == 0:
            outgoing.append(sp.csr_matrix(shape))
            incoming.append(sp.csr_matrix(shape))
            continue
        coo = counts.tocoo()
        # count(j -> i) looked up for each stored (i, j)
        reverse = np.asarray(counts.T.tocsr()[coo.row, coo.col]).ravel()
        weights = coo.data / (coo.data + reverse)
        rows, cols, weights = _truncate_rows(coo.row.astype(np.int64), coo.col.astype(np.int64),
                                             weights, top_k)
        out = sp.csr_matrix((weights, (rows, cols)), shape=shape)
        out.sort_indices()
        outgoing.append(out)
        incoming.append(out.T.tocsr())
    logger.info("Item relation graph edges: " + ", ".join(
        f"{label}={m.nnz}" for label, m in zip(dataset.behaviors, outgoing)))
    return ItemRelationGraph(dataset.num_items, tuple(outgoing), tuple(incoming))


def normalize_relation_weights(graph: RelationGraph) -> RelationGraph:
    """
    Rescale each node's weights to sum to 1 (isolated nodes untouched).

    User graphs are normalized per row. Item graphs normalize incoming and
    outgoing weights of every node separately.
    """
    if graph.normalized:
        return graph
    if isinstance(graph, UserRelationGraph):
        return UserRelationGraph(graph.num_users, tuple(_row_normalize(m) for m in graph.adjacency), True)
    return ItemRelationGraph(graph.num_items,
                             tuple(_row_normalize(m) for m in graph.outgoing),
                             tuple(_row_normalize(m) for m in graph.incoming), True)


def write_relation_graph(graph: RelationGraph, dataset: Dataset, path,
                         comments: Sequence[str] = ()):
    """
    Dump raw relation weights as `u<TAB>v<TAB>behavior<TAB>weight` with raw ids.

    Item graphs are dumped as outgoing edges (u -> v).
    """
    if graph.normalized:
        raise ValueError("only raw (unnormalized) relation graphs are dumped")
    if isinstance(graph, UserRelationGraph):
        kind, matrices, ids = 'user', graph.adjacency, dataset.user_ids
    else:
        kind, matrices, ids = 'item', graph.outgoing, dataset.item_ids

    def rows():
        for k, matrix in enumerate(matrices):
            coo = matrix.tocoo()
            for r, c, w in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
                yield ids[r], ids[c], dataset.behaviors[k], float(w)

    write_tsv(path, rows(), list(comments) + [f"kind={kind}"])


def read_relation_graph(path, dataset: Dataset) -> RelationGraph:
    """Reload a dump written by write_relation_graph against the same id tables."""
    kind = read_tsv_comments(path).get('kind')
    if kind not in ('user', 'item'):
        raise ValueError(f"{path}: missing or unknown '# kind=' header")
    index = dataset.user_index if kind == 'user' else dataset.item_index
    size = len(index)
    entries: Dict[int, Tuple[list, list, list]] = {k: ([], [], []) for k in range(dataset.num_behaviors)}
    for line_number, fields in read_tsv(path):
        if len(fields) != 4:
            raise ParseError(line_number, f"expected 4 tab-separated fields, got {len(fields)}")
        source, target, label, weight = fields
        if source not in index or target not in index:
            raise ParseError(line_number, "relation edge references an unknown id")
        if label not in dataset.behavior_index:
            raise ParseError(line_number, f"unknown behavior label {label!r}")
        rows, cols, weights = entries[dataset.behavior_index[label]]
        rows.append(index[source])
        cols.append(index[target])
        weights.append(float(weight))

    matrices = []
    for k in range(dataset.num_behaviors):
        rows, cols, weights = entries[k]
        matrix = sp.csr_matrix((weights, (rows, cols)), shape=(size, size))
        matrix.sort_indices()
        matrices.append(matrix)
    if kind == 'user':
        return UserRelationGraph(size, tuple(matrices))
    return ItemRelationGraph(size, tuple(matrices), tuple(m.T.tocsr() for m in matrices))


@dataclass(frozen=True, eq=False)
class GraphOperators:
    """
    Sparse propagation matrices for one encoder configuration.

    user_from_items[k] (users x items) and item_from_users[k] (items x users)
    carry behavior k's interaction messages; relation operators are
    row-normalized and absent when relation aggregation is skipped.
    """
    num_users: int
    num_items: int
    active: Tuple[bool, ...]
    user_from_items: Tuple[sp.csr_matrix, ...]
    item_from_users: Tuple[sp.csr_matrix, ...]
    user_relation: Optional[Tuple[sp.csr_matrix, ...]] = None
    item_incoming: Optional[Tuple[sp.csr_matrix, ...]] = None
    item_outgoing: Optional[Tuple[sp.csr_matrix, ...]] = None

    @property
    def num_behaviors(self) -> int:
        return len(self.active)

    @property
    def active_behaviors(self) -> Tuple[int, ...]:
        return tuple(k for k, flag in enumerate(self.active) if flag)

    @property
    def has_relations(self) -> bool:
        return self.user_relation is not None


def _interaction_operator(user_items: sp.csr_matrix, normalization: str) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    if normalization == 'none':
        return user_items, user_items.T.tocsr()
    user_deg = np.diff(user_items.indptr).astype(np.float64)
    item_deg = np.asarray(user_items.sum(axis=0)).ravel()
    if normalization == 'symmetric':
        du = np.zeros_like(user_deg)
        di = np.zeros_like(item_deg)
        np.divide(1.0, np.sqrt(user_deg), out=du, where=user_deg > 0)
        np.divide(1.0, np.sqrt(item_deg), out=di, where=item_deg > 0)
        scaled = (sp.diags(du) @ user_items @ sp.diags(di)).tocsr()
        return scaled, scaled.T.tocsr()
    if normalization == 'mean':
        return _row_normalize(user_items), _row_normalize(user_items.T.tocsr())
    raise ValueError(f"unknown interaction normalization {normalization!r}; expected one of {INTERACTION_NORMS}")


def build_graph_operators(mbg: MultiBehaviorGraph,
                          user_graph: Optional[UserRelationGraph] = None,
                          item_graph: Optional[ItemRelationGraph] = None,
                          normalization: str = 'none') -> GraphOperators:
    """
    Precompute encoder propagation matrices.

    Args:
        mbg: Interaction graphs (original or denoised)
        user_graph: User relation graph (None skips relation aggregation)
        item_graph: Item relation graph (required together with user_graph)
        normalization: Interaction message scaling ('none' is the plain neighbor sum)

    Returns:
        GraphOperators
    """
    if (user_graph is None) != (item_graph is None):
        raise ValueError("user and item relation graphs must be supplied together")
    pairs = [_interaction_operator(g.user_items, normalization) for g in mbg.graphs]
    operators = dict(
        num_users=mbg.num_users,
        num_items=mbg.num_items,
        active=mbg.active,
        user_from_items=tuple(p[0] for p in pairs),
        item_from_users=tuple(p[1] for p in pairs),
    )
    if user_graph is not None:
        if user_graph.num_behaviors != mbg.num_behaviors or item_graph.num_behaviors != mbg.num_behaviors:
            raise ValueError("relation graphs must cover every behavior")
        if user_graph.num_users != mbg.num_users or item_graph.num_items != mbg.num_items:
            raise ValueError("relation graph sizes do not match the interaction graph")
        users = normalize_relation_weights(user_graph)
        items = normalize_relation_weights(item_graph)
        # dropped behaviors carry no relation messages either
        empty_u = sp.csr_matrix((mbg.num_users, mbg.num_users))
        empty_i = sp.csr_matrix((mbg.num_items, mbg.num_items))
        operators.update(
            user_relation=tuple(m if on else empty_u for m, on in zip(users.adjacency, mbg.active)),
            item_incoming=tuple(m if on else empty_i for m, on in zip(items.incoming, mbg.active)),
            item_outgoing=tuple(m if on else empty_i for m, on in zip(items.outgoing, mbg.active)),
        )
    return GraphOperators(**operators)
