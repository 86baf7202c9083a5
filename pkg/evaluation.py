"""
Leave-one-out ranking evaluation and denoiser scoring.
HR@K / NDCG@K over full or sampled candidate sets, metric report output,
and precision/recall of removed edges against planted noise labels.
"""
import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

from encoder import Representations
from ingest import SplitDataset
from logger import log_training_event, setup_logger
from numcore import seeded_rng
from utils import atomic_write_text, derive_seed

logger = setup_logger("Evaluation")


class RankingResult(NamedTuple):
    """Rank (1-based) of one user's held-out item among its candidates."""
    user_id: int
    item_id: int
    rank: int
    candidates: int

    def hit(self, k: int) -> bool:
        return self.rank <= k


def rank_among(scores: np.ndarray, candidates: np.ndarray, held_out: int) -> int:
    """
    1 + #candidates scoring higher + #candidates scoring equal with a lower item id.

    Raises:
        ValueError: held-out item not among the candidates
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if not np.any(candidates == held_out):
        raise ValueError(f"held-out item {held_out} is not among the candidates")
    target = scores[held_out]
    others = scores[candidates]
    # ties go to the lower item id
    greater = int(np.count_nonzero(others > target))
    ties = int(np.count_nonzero((others == target) & (candidates < held_out)))
    return 1 + greater + ties


def train_target_items(split: SplitDataset) -> sp.csr_matrix:
    """users x items indicator of training-time target interactions."""
    train = split.train
    mask = train.behavior_ids == train.target_behavior
    matrix = sp.csr_matrix((np.ones(int(mask.sum())), (train.users[mask], train.items[mask])),
                           shape=(train.num_users, train.num_items))
    matrix.sort_indices()
    return matrix


def candidate_items(num_items: int, seen: np.ndarray, held_out: int, mode: str = 'full',
                    negatives: int = 99, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Candidate item ids for one user.

    full: every item except the user's training-time target items.
    sampled: `negatives` items drawn without replacement from that set
    (minus the held-out item), plus the held-out item.
    """
    pool = np.setdiff1d(np.arange(num_items), seen)
    if mode == 'full':
        return pool
    if mode != 'sampled':
        raise ValueError(f"unknown candidate mode {mode!r}")
    if rng is None:
        raise ValueError("sampled candidates need a generator")
    others = pool[pool != held_out]
    chosen = rng.choice(others, size=min(negatives, len(others)), replace=False)
    return np.sort(np.append(chosen, held_out))


def rank_target(user: int, held_out: int, reps: Representations, seen: np.ndarray, mode: str = 'full',
                negatives: int = 99, seed: int = 0) -> RankingResult:
    """
    Rank one user's held-out item by inner-product score.

    Args:
        user: Dense user id
        held_out: Dense id of the held-out target item
        reps: Multi-behavior representations of the evaluated stage
        seen: The user's training-time target items (excluded from candidates)
        mode: 'full' or 'sampled'
        negatives: Sampled-mode negative count
        seed: Run seed (sampled mode draws from a per-user sub-seed)

    Returns:
        RankingResult
    """
    scores = reps.item @ reps.user[user]
    rng = seeded_rng(derive_seed(seed, 'eval', str(user))) if mode == 'sampled' else None
    candidates = candidate_items(len(scores), seen, held_out, mode, negatives, rng)
    return RankingResult(int(user), int(held_out), rank_among(scores, candidates, held_out), len(candidates))


def evaluate_ranking(reps: Representations, split: SplitDataset, mode: str = 'full', negatives: int = 99,
                     seed: int = 0, threads: int = 1) -> List[RankingResult]:
    """
    Rank every test user's held-out item.

    Users are split into contiguous chunks across `threads` workers and the
    results come back in test-pair order, so output does not depend on threads.
    """
    seen = train_target_items(split)
    pairs = split.test_pairs

    def rank_chunk(chunk: Sequence[Tuple[int, int]]) -> List[RankingResult]:
        return [rank_target(u, i, reps, seen.indices[seen.indptr[u]:seen.indptr[u + 1]], mode, negatives, seed)
                for u, i in chunk]

    # contiguous chunks keep the output in test-pair order
    if threads <= 1 or len(pairs) < 2:
        return rank_chunk(pairs)
    size = -(-len(pairs) // threads)
    chunks = [pairs[start:start + size] for start in range(0, len(pairs), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return [result for chunk in pool.map(rank_chunk, chunks) for result in chunk]


def hr_at_k(results: Sequence[RankingResult], k: int = 10) -> float:
    """Fraction of users whose held-out item ranks within the top k."""
    if not results:
        raise ValueError("hit ratio of an empty result list")
    return sum(1 for r in results if r.rank <= k) / len(results)


def ndcg_at_k(results: Sequence[RankingResult], k: int = 10) -> float:
    """Mean of 1 / log2(rank + 1) over users ranked within the top k (0 otherwise)."""
    if not results:
        raise ValueError("NDCG of an empty result list")
    return sum(1.0 / np.log2(r.rank + 1) for r in results if r.rank <= k) / len(results)


def denoise_quality(removed: Set[Tuple[int, int, int]], noisy: Set[Tuple[int, int, int]]) -> Dict[str, float]:
    """
    Precision, recall and F1 of removed edges against planted noise.

    precision is 1 when nothing was removed; recall is 1 when no noise was planted.
    """
    caught = len(set(removed) & set(noisy))
    precision = caught / len(removed) if removed else 1.0
    recall = caught / len(noisy) if noisy else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {
        'precision': precision,
        'recall': recall,
        'f1': f1,
        'removed': len(removed),
        'noisy': len(noisy),
        'caught': caught,
    }


@dataclass(frozen=True)
class MetricReport:
    """Metrics of one evaluated checkpoint."""
    stage: int
    k: int
    hr: float
    ndcg: float
    users: int
    seed: int
    config_hash: str
    mode: str
    results: Tuple[RankingResult, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.hr <= 1.0 and 0.0 <= self.ndcg <= 1.0):
            raise ValueError("metrics must lie in [0, 1]")

    def to_record(self) -> Dict:
        return {
            'stage': self.stage,
            'K': self.k,
            'HR': self.hr,
            'NDCG': self.ndcg,
            'users': self.users,
            'seed': self.seed,
            'config_hash': self.config_hash,
            'mode': self.mode,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True) + "\n"


def build_report(results: Sequence[RankingResult], stage: int, k: int, seed: int, config_hash: str,
                 mode: str) -> MetricReport:
    report = MetricReport(stage, k, hr_at_k(results, k), ndcg_at_k(results, k), len(results), seed,
                          config_hash, mode, tuple(results))
    log_training_event(logger, "EVAL", {
        'stage': stage, 'mode': mode, f'HR@{k}': report.hr, f'NDCG@{k}': report.ndcg, 'users': report.users,
    })
    return report


def write_metric_report(report: MetricReport, path):
    """Write (overwrite) a one-record JSON-lines report."""
    atomic_write_text(path, report.to_json_line())


def read_metric_reports(path) -> List[Dict]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_user_dump(results: Iterable[RankingResult], user_ids: Sequence[str], item_ids: Sequence[str], path):
    """Per-user CSV: user, held-out item, rank, candidate count."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(['user', 'item', 'rank', 'candidates'])
    for r in results:
        writer.writerow([user_ids[r.user_id], item_ids[r.item_id], r.rank, r.candidates])
    atomic_write_text(path, buffer.getvalue())
