"""
Interaction ingestion for multi-behavior recommendation.
Loads behavior-tagged TSV logs, filters sparse users, builds leave-one-out
splits, and generates block-structured synthetic data with planted noise.
"""
import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from logger import setup_logger
from numcore import seeded_rng
from utils import ParseError, derive_seed, iter_data_lines, read_tsv, write_tsv

logger = setup_logger("Ingest")


class InteractionRecord(NamedTuple):
    """One (user, item, behavior, timestamp) event in dense-index space."""
    user_id: int
    item_id: int
    behavior_id: int
    timestamp: int


def _frozen(values, dtype=np.int64) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Deduplicated, densely indexed interaction log.

    Records are stored column-wise in stream order (position of the first
    occurrence of each (user, item, behavior) key). The last behavior label is
    the target behavior.
    """
    behaviors: Tuple[str, ...]
    user_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    users: np.ndarray
    items: np.ndarray
    behavior_ids: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'behaviors', tuple(self.behaviors))
        object.__setattr__(self, 'user_ids', tuple(self.user_ids))
        object.__setattr__(self, 'item_ids', tuple(self.item_ids))
        for name in ['users', 'items', 'behavior_ids', 'timestamps']:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

        n = len(self.users)
        if not (len(self.items) == len(self.behavior_ids) == len(self.timestamps) == n):
            raise ValueError("record columns have different lengths")
        if len(self.behaviors) < 1:
            raise ValueError("at least one behavior (the target) is required")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user index out of bounds")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item index out of bounds")
            if self.behavior_ids.min() < 0 or self.behavior_ids.max() >= self.num_behaviors:
                raise ValueError("behavior index out of bounds")
            if self.timestamps.min() < 0:
                raise ValueError("timestamps must be non-negative")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def target_behavior(self) -> int:
        return self.num_behaviors - 1

    @property
    def records(self) -> List[InteractionRecord]:
        return [
            InteractionRecord(int(u), int(i), int(b), int(t))
            for u, i, b, t in zip(self.users, self.items, self.behavior_ids, self.timestamps)
        ]

    def __len__(self) -> int:
        return len(self.users)

    @cached_property
    def user_index(self) -> Dict[str, int]:
        return {raw: idx for idx, raw in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> Dict[str, int]:
        return {raw: idx for idx, raw in enumerate(self.item_ids)}

    @cached_property
    def behavior_index(self) -> Dict[str, int]:
        return {label: idx for idx, label in enumerate(self.behaviors)}

    def select(self, mask: np.ndarray) -> 'Dataset':
        """Subset of records; id tables are kept unchanged."""
        return Dataset(self.behaviors, self.user_ids, self.item_ids,
                       self.users[mask], self.items[mask],
                       self.behavior_ids[mask], self.timestamps[mask])

    def same_structure(self, other: 'Dataset') -> bool:
        """True when both datasets have identical ids, labels and records."""
        return (self.behaviors == other.behaviors
                and self.user_ids == other.user_ids
                and self.item_ids == other.item_ids
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.behavior_ids, other.behavior_ids)
                and np.array_equal(self.timestamps, other.timestamps))


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Leave-one-out split: train records plus one held-out target item per user."""
    train: Dataset
    test_users: np.ndarray
    test_items: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'test_users', _frozen(self.test_users))
        object.__setattr__(self, 'test_items', _frozen(self.test_items))

    @property
    def test_pairs(self) -> List[Tuple[int, int]]:
        return [(int(u), int(i)) for u, i in zip(self.test_users, self.test_items)]


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Block-structured synthetic dataset description.

    density[k] is the number of edges each user draws under behavior k,
    as a fraction of num_items; the last entry is the target behavior.
    """
    num_users: int = 200
    num_items: int = 200
    num_aux_behaviors: int = 3
    num_blocks: int = 2
    density: Tuple[float, ...] = (0.2, 0.1, 0.1, 0.05)
    noise_rate: float = 0.1
    seed: int = 7
    labels: Optional[Tuple[str, ...]] = None

    @property
    def num_behaviors(self) -> int:
        return self.num_aux_behaviors + 1

    @property
    def behavior_labels(self) -> Tuple[str, ...]:
        if self.labels is not None:
            return tuple(self.labels)
        return tuple(f"aux{k + 1}" for k in range(self.num_aux_behaviors)) + ("buy",)

    def validate(self):
        """Raise ValueError describing the first violated constraint."""
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("num_users and num_items must be positive")
        if self.num_aux_behaviors < 0:
            raise ValueError("num_aux_behaviors must be non-negative")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be at least 1")
        if self.num_blocks > min(self.num_users, self.num_items):
            raise ValueError("num_blocks cannot exceed the number of users or items")
        if not (0.0 <= self.noise_rate < 1.0):
            raise ValueError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if len(self.density) != self.num_behaviors:
            raise ValueError(f"density needs {self.num_behaviors} entries (aux behaviors + target), "
                             f"got {len(self.density)}")
        if any(not (0.0 < d <= 1.0) for d in self.density):
            raise ValueError("densities must lie in (0, 1]")
        if len(self.behavior_labels) != self.num_behaviors:
            raise ValueError("labels must name every behavior")
        if self.noise_rate > 0 and self.num_blocks == 1:
            raise ValueError("noise_rate > 0 needs at least 2 blocks (noise is drawn off-block)")


@dataclass(frozen=True)
class NoiseLabels:
    """Ground-truth noisy auxiliary edges of a synthetic dataset (dense ids)."""
    noisy: FrozenSet[Tuple[int, int, int]]
    num_aux_edges: int

    def is_noisy(self, user: int, item: int, behavior: int) -> bool:
        return (user, item, behavior) in self.noisy

    def __len__(self) -> int:
        return len(self.noisy)


def _build_dataset(behaviors: Sequence[str], raw_users: Sequence[str], raw_items: Sequence[str],
                   behavior_ids: Sequence[int], timestamps: Sequence[int],
                   users: Optional[Sequence[str]] = None,
                   items: Optional[Sequence[str]] = None) -> Tuple[Dataset, int]:
    """
    Densify raw ids by first appearance and collapse duplicate keys.

    Returns:
        (dataset, number of duplicate lines collapsed)
    """
    user_table: Dict[str, int] = {}
    item_table: Dict[str, int] = {}
    for raw in users or []:
        user_table.setdefault(raw, len(user_table))
    for raw in items or []:
        item_table.setdefault(raw, len(item_table))

    dense_users = np.fromiter((user_table.setdefault(raw, len(user_table)) for raw in raw_users),
                              dtype=np.int64, count=len(raw_users))
    dense_items = np.fromiter((item_table.setdefault(raw, len(item_table)) for raw in raw_items),
                              dtype=np.int64, count=len(raw_items))
    beh = np.asarray(behavior_ids, dtype=np.int64)
    ts = np.asarray(timestamps, dtype=np.int64)

    num_behaviors = len(behaviors)
    num_items = max(len(item_table), 1)
    if len(dense_users):
        keys = (dense_users * num_items + dense_items) * num_behaviors + beh
        _, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
        earliest = np.full(len(first_idx), np.iinfo(np.int64).max, dtype=np.int64)
        np.minimum.at(earliest, inverse.ravel(), ts)
        order = np.argsort(first_idx, kind='stable')
        keep = first_idx[order]
        dataset = Dataset(tuple(behaviors), tuple(user_table), tuple(item_table),
                          dense_users[keep], dense_items[keep], beh[keep], earliest[order])
        duplicates = len(dense_users) - len(keep)
    else:
        dataset = Dataset(tuple(behaviors), tuple(user_table), tuple(item_table), [], [], [], [])
        duplicates = 0
    return dataset, duplicates


def dataset_stats(dataset: Dataset) -> Dict[str, int]:
    """Per-behavior record counts plus user/item totals."""
    counts = np.bincount(dataset.behavior_ids, minlength=dataset.num_behaviors)
    stats = {'users': dataset.num_users, 'items': dataset.num_items, 'records': len(dataset)}
    for label, count in zip(dataset.behaviors, counts):
        stats[label] = int(count)
    return stats


def load_interactions(source: Union[io.IOBase, bytes, str], behaviors: Sequence[str],
                      users: Optional[Sequence[str]] = None,
                      items: Optional[Sequence[str]] = None) -> Dataset:
    """
    Load a `user<TAB>item<TAB>behavior<TAB>timestamp` log.

    Args:
        source: Binary/text stream or raw bytes/str content
        behaviors: Ordered behavior labels (last = target)
        users: Optional raw user ids pre-seeded in this dense order
        items: Optional raw item ids pre-seeded in this dense order

    Returns:
        Dataset with dense index maps (first-appearance order) and duplicates collapsed

    Raises:
        ParseError: malformed or blank line, or unknown behavior label
    """
    behaviors = tuple(behaviors)
    if not behaviors:
        raise ValueError("behavior label list is empty")
    if len(set(behaviors)) != len(behaviors):
        raise ValueError("behavior labels must be unique")
    label_index = {label: idx for idx, label in enumerate(behaviors)}

    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode('utf-8')
    elif isinstance(source, str):
        text = source
    else:
        payload = source.read()
        text = payload.decode('utf-8') if isinstance(payload, (bytes, bytearray)) else payload

    raw_users: List[str] = []
    raw_items: List[str] = []
    beh: List[int] = []
    ts: List[int] = []
    # only a leading `# key=value` block is header; '#7' later on is a raw id
    for line_number, line in iter_data_lines(text.splitlines()):
        fields = line.split('\t')
        if len(fields) != 4:
            raise ParseError(line_number, f"expected 4 tab-separated fields, got {len(fields)}")
        user, item, label, stamp = fields
        if not user or not item:
            raise ParseError(line_number, "empty user or item id")
        if label not in label_index:
            raise ParseError(line_number, f"unknown behavior label {label!r}")
        try:
            timestamp = int(stamp)
        except ValueError:
            raise ParseError(line_number, f"timestamp {stamp!r} is not an integer")
        if timestamp < 0:
            raise ParseError(line_number, f"timestamp {timestamp} is negative")
        raw_users.append(user)
        raw_items.append(item)
        beh.append(label_index[label])
        ts.append(timestamp)

    dataset, duplicates = _build_dataset(behaviors, raw_users, raw_items, beh, ts, users, items)
    logger.info(f"Loaded {len(raw_users)} lines -> {len(dataset)} records "
                f"({duplicates} duplicates collapsed) | {dataset_stats(dataset)}")
    return dataset


def load_interactions_file(path, behaviors: Sequence[str],
                           users: Optional[Sequence[str]] = None,
                           items: Optional[Sequence[str]] = None) -> Dataset:
    """Load an interaction TSV from disk."""
    with open(path, 'rb') as f:
        return load_interactions(f, behaviors, users, items)


def write_interactions(dataset: Dataset, stream: io.TextIOBase):
    """Serialize records in stream order with raw ids and labels."""
    for u, i, b, t in zip(dataset.users, dataset.items, dataset.behavior_ids, dataset.timestamps):
        stream.write(f"{dataset.user_ids[u]}\t{dataset.item_ids[i]}\t{dataset.behaviors[b]}\t{int(t)}\n")


def save_interactions(dataset: Dataset, path, comments: Optional[Sequence[str]] = None):
    """Write a dataset as interaction TSV (atomic)."""
    rows = ((dataset.user_ids[u], dataset.item_ids[i], dataset.behaviors[b], int(t))
            for u, i, b, t in zip(dataset.users, dataset.items, dataset.behavior_ids, dataset.timestamps))
    write_tsv(path, rows, comments)


def filter_min_target(dataset: Dataset, min_count: int = 3) -> Dataset:
    """
    Remove users with fewer than min_count target-behavior records.

    Removed users lose their records under every behavior; user and item ids
    are re-densified in first-appearance order of the surviving records.

    Raises:
        ValueError: min_count < 1 or no user survives
    """
    if min_count < 1:
        raise ValueError(f"min_count must be at least 1, got {min_count}")

    target_mask = dataset.behavior_ids == dataset.target_behavior
    target_counts = np.bincount(dataset.users[target_mask], minlength=dataset.num_users)
    keep_users = target_counts >= min_count
    if not keep_users.any():
        raise ValueError(f"no user has at least {min_count} target-behavior records")

    kept = dataset.select(keep_users[dataset.users])
    filtered, _ = _build_dataset(
        dataset.behaviors,
        [dataset.user_ids[u] for u in kept.users],
        [dataset.item_ids[i] for i in kept.items],
        kept.behavior_ids, kept.timestamps)

    logger.info(f"Min-target filter (>= {min_count}): users {dataset.num_users} -> {filtered.num_users}, "
                f"items {dataset.num_items} -> {filtered.num_items}, "
                f"records {len(dataset)} -> {len(filtered)}")
    return filtered


def leave_one_out_split(dataset: Dataset) -> SplitDataset:
    """
    Hold out each user's latest target interaction.

    The target record with the largest timestamp is held out, ties broken by
    the largest item id. Every other record stays in train; id tables are kept.

    Raises:
        ValueError: a user has fewer than 2 target-behavior records
    """
    target_mask = dataset.behavior_ids == dataset.target_behavior
    target_counts = np.bincount(dataset.users[target_mask], minlength=dataset.num_users)
    short = np.flatnonzero(target_counts < 2)
    if len(short):
        raw = dataset.user_ids[short[0]]
        raise ValueError(f"user {raw!r} has {int(target_counts[short[0]])} target records; "
                         f"leave-one-out needs at least 2 (apply filter_min_target first)")

    target_idx = np.flatnonzero(target_mask)
    users = dataset.users[target_idx]
    order = np.lexsort((dataset.items[target_idx], dataset.timestamps[target_idx], users))
    sorted_users = users[order]
    last_of_user = np.ones(len(order), dtype=bool)
    last_of_user[:-1] = sorted_users[:-1] != sorted_users[1:]
    held_out = target_idx[order[last_of_user]]

    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[held_out] = False
    split = SplitDataset(dataset.select(train_mask), dataset.users[held_out], dataset.items[held_out])
    logger.info(f"Leave-one-out split: {len(split.train)} train records, {len(held_out)} test pairs")
    return split


def drop_behaviors(dataset: Dataset, labels: Sequence[str]) -> Dataset:
    """
    Remove every record of the given auxiliary behaviors (ablation).

    Id tables and behavior indices are unchanged.

    Raises:
        ValueError: unknown label or an attempt to drop the target behavior
    """
    drop = set()
    for label in labels:
        if label not in dataset.behavior_index:
            raise ValueError(f"cannot drop unknown behavior {label!r}")
        index = dataset.behavior_index[label]
        if index == dataset.target_behavior:
            raise ValueError(f"cannot drop the target behavior {label!r}")
        drop.add(index)
    if not drop:
        return dataset
    keep = ~np.isin(dataset.behavior_ids, sorted(drop))
    return dataset.select(keep)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, NoiseLabels]:
    """
    Generate a block-structured multi-behavior dataset with planted noise.

    Users and items are split into blocks. For each auxiliary behavior a user
    draws round(density*num_items) edges: each is noisy with probability
    noise_rate and then drawn uniformly from items outside the user's block,
    otherwise drawn from the user's block. Target edges are drawn from the
    user's clean auxiliary support. Timestamps follow sampling order.

    Returns:
        (dataset, noise labels in the dataset's dense ids)

    Raises:
        ValueError: invalid spec or a density exceeding block capacity
    """
    spec.validate()
    rng = seeded_rng(derive_seed(spec.seed, 'synth'))
    num_behaviors = spec.num_behaviors
    target = num_behaviors - 1

    # balanced random block assignment for users and items
    user_block = rng.permutation(spec.num_users) % spec.num_blocks
    item_block = rng.permutation(spec.num_items) % spec.num_blocks
    in_block = [np.flatnonzero(item_block == b) for b in range(spec.num_blocks)]
    off_block = [np.flatnonzero(item_block != b) for b in range(spec.num_blocks)]
    min_in = min(len(items) for items in in_block)
    min_off = min(len(items) for items in off_block)

    sizes = [int(round(d * spec.num_items)) for d in spec.density]
    for k, size in enumerate(sizes):
        if size < 1:
            raise ValueError(f"density {spec.density[k]} yields no edges for behavior {k}")
        if k != target and size > min_in:
            raise ValueError(f"density {spec.density[k]} asks {size} edges per user but the "
                             f"smallest item block holds {min_in}")
        if k != target and spec.noise_rate > 0 and size > min_off:
            raise ValueError(f"density {spec.density[k]} asks {size} edges per user but only "
                             f"{min_off} off-block items exist for noise")

    raw_users: List[str] = []
    raw_items: List[str] = []
    beh: List[int] = []
    ts: List[int] = []
    noisy_raw = []
    clock = 0
    for u in range(spec.num_users):
        block = user_block[u]
        support = set()
        for k in range(target):
            # noisy edges land outside the user's block
            n_noise = int(rng.binomial(sizes[k], spec.noise_rate)) if spec.noise_rate > 0 else 0
            clean = rng.choice(in_block[block], size=sizes[k] - n_noise, replace=False)
            noisy = rng.choice(off_block[block], size=n_noise, replace=False) if n_noise else np.empty(0, np.int64)
            support.update(int(i) for i in clean)
            flags = np.concatenate([np.zeros(len(clean), bool), np.ones(len(noisy), bool)])
            picked = np.concatenate([clean, noisy]).astype(np.int64)
            order = rng.permutation(len(picked))
            for item, is_noisy in zip(picked[order], flags[order]):
                raw_users.append(f"u{u}")
                raw_items.append(f"i{item}")
                beh.append(k)
                ts.append(clock)
                if is_noisy:
                    noisy_raw.append((f"u{u}", f"i{item}", k))
                clock += 1

        # target edges come only from the clean auxiliary support
        pool = np.array(sorted(support), dtype=np.int64) if target > 0 else in_block[block]
        if sizes[target] > len(pool):
            raise ValueError(f"target density {spec.density[target]} asks {sizes[target]} edges but "
                             f"user u{u} has only {len(pool)} clean auxiliary items")
        for item in rng.choice(pool, size=sizes[target], replace=False):
            raw_users.append(f"u{u}")
            raw_items.append(f"i{item}")
            beh.append(target)
            ts.append(clock)
            clock += 1

    dataset, _ = _build_dataset(spec.behavior_labels, raw_users, raw_items, beh, ts)
    noisy = frozenset((dataset.user_index[u], dataset.item_index[i], k) for u, i, k in noisy_raw)
    num_aux = int(np.count_nonzero(dataset.behavior_ids != target))
    labels = NoiseLabels(noisy, num_aux)
    logger.info(f"Synthetic dataset: {dataset_stats(dataset)} | noisy aux edges {len(labels)}/{num_aux}")
    return dataset, labels


def write_noise_labels(labels: NoiseLabels, dataset: Dataset, path):
    """Write the `*.noise` sidecar: one `user<TAB>item<TAB>behavior` line per noisy edge."""
    rows = sorted(labels.noisy)
    write_tsv(path, ((dataset.user_ids[u], dataset.item_ids[i], dataset.behaviors[b]) for u, i, b in rows))


def read_noise_labels(path, dataset: Dataset) -> NoiseLabels:
    """
    Read a `*.noise` sidecar against a dataset's id tables.

    Edges whose user or item is absent from the dataset (e.g. filtered out)
    are skipped.
    """
    noisy = set()
    for line_number, fields in read_tsv(path):
        if len(fields) != 3:
            raise ParseError(line_number, f"expected 3 tab-separated fields, got {len(fields)}")
        user, item, label = fields
        if label not in dataset.behavior_index:
            raise ParseError(line_number, f"unknown behavior label {label!r}")
        if user in dataset.user_index and item in dataset.item_index:
            noisy.add((dataset.user_index[user], dataset.item_index[item], dataset.behavior_index[label]))
    num_aux = int(np.count_nonzero(dataset.behavior_ids != dataset.target_behavior))
    return NoiseLabels(frozenset(noisy), num_aux)


def write_id_table(ids: Sequence[str], path, comments: Optional[Sequence[str]] = None):
    """Write one raw id per line (dense order) after the header lines."""
    write_tsv(path, ((raw,) for raw in ids), comments)


def read_id_table(path) -> List[str]:
    return [fields[0] for _, fields in read_tsv(path)]


def save_split(split: SplitDataset, out_dir, comments: Optional[Sequence[str]] = None) -> Dict[str, Path]:
    """
    Persist a split: train TSV, test pairs TSV, and dense id tables.

    Returns:
        Mapping of artifact name to path
    """
    out_dir = Path(out_dir)
    train = split.train
    paths = {
        'train': out_dir / 'train.tsv',
        'test': out_dir / 'test.tsv',
        'users': out_dir / 'users.txt',
        'items': out_dir / 'items.txt',
    }
    save_interactions(train, paths['train'], comments)
    write_tsv(paths['test'], ((train.user_ids[u], train.item_ids[i]) for u, i in split.test_pairs), comments)
    write_id_table(train.user_ids, paths['users'], comments)
    write_id_table(train.item_ids, paths['items'], comments)
    return paths


def load_split(out_dir, behaviors: Sequence[str]) -> SplitDataset:
    """Reload a split written by save_split with identical dense ids."""
    out_dir = Path(out_dir)
    users = read_id_table(out_dir / 'users.txt')
    items = read_id_table(out_dir / 'items.txt')
    train = load_interactions_file(out_dir / 'train.tsv', behaviors, users, items)
    if train.num_users != len(users) or train.num_items != len(items):
        raise ValueError("train.tsv references ids missing from users.txt/items.txt")
    test_users, test_items = [], []
    for line_number, fields in read_tsv(out_dir / 'test.tsv'):
        if len(fields) != 2:
            raise ParseError(line_number, f"expected 2 tab-separated fields, got {len(fields)}")
        if fields[0] not in train.user_index or fields[1] not in train.item_index:
            raise ParseError(line_number, "test pair references an unknown user or item")
        test_users.append(train.user_index[fields[0]])
        test_items.append(train.item_index[fields[1]])
    return SplitDataset(train, test_users, test_items)
