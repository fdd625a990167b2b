"""Full-ranking top-K evaluation and sparsity-group analysis."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ckg import InteractionSet, ValidationError


@dataclass
class RankingResult:
    users: np.ndarray        # evaluated user ids, ascending
    items: np.ndarray        # (n_users, K) ranked item ids, -1 where fewer than K are rankable
    scores: np.ndarray       # (n_users, K) matching scores, -inf padding
    k: int

    def __len__(self):
        return len(self.users)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the smaller index."""
    n = scores.shape[1]
    k = min(k, n)
    if k < n:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1)
        # anything tied with the k-th value may belong in the list under the id tie-break
        cand_mask = scores >= kth[:, None]
        out = np.empty((len(scores), k), dtype=np.int64)
        for row in range(len(scores)):
            cand = np.flatnonzero(cand_mask[row])
            order = np.lexsort((cand, -scores[row, cand]))
            out[row] = cand[order[:k]]
        return out
    return np.argsort(-scores, axis=1, kind="stable")


def held_out(inter: InteractionSet, target: str) -> list[np.ndarray]:
    return {"test": inter.test_pos, "val": inter.val_pos, "train": inter.train_pos}[target]


def masked_items(inter: InteractionSet, target: str, u: int) -> np.ndarray:
    """Items hidden from user ``u``'s ranking when evaluating against ``target``."""
    if target == "test":
        return np.concatenate([inter.train_pos[u], inter.val_pos[u]])
    if target == "val":
        return inter.train_pos[u]
    return np.zeros(0, dtype=np.int64)


def _rank_chunk(user_mat, item_mat, users, inter, target, k):
    scores = user_mat @ item_mat.T
    for row, u in enumerate(users):
        m = masked_items(inter, target, u)
        scores[row, m] = -np.inf
    idx = top_k(scores, k)
    sc = np.take_along_axis(scores, idx, axis=1)
    idx = np.where(np.isneginf(sc), -1, idx)
    if idx.shape[1] < k:
        pad = k - idx.shape[1]
        idx = np.pad(idx, ((0, 0), (0, pad)), constant_values=-1)
        sc = np.pad(sc, ((0, 0), (0, pad)), constant_values=-np.inf)
    return idx, sc


def rank_users(final, inter: InteractionSet, k: int, target: str = "test",
               users=None, chunk_size: int = 1024, workers: int = 1) -> RankingResult:
    """Score every item for each evaluated user, hide consumed items, keep the top ``k``.

    ``final`` is a :class:`LayerRepresentations` (or anything with
    ``user_rows`` / ``item_rows``).  Evaluated users default to those with at
    least one ``target`` item.  For ``target="test"`` training and validation
    items are hidden; for ``"val"`` only training items; ``"train"`` hides
    nothing.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pos = held_out(inter, target)
    if users is None:
        users = np.array([u for u in range(inter.num_users) if len(pos[u])], dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    item_mat = final.item_rows(np.arange(inter.num_items))
    chunks = [users[s:s + chunk_size] for s in range(0, len(users), chunk_size)]

    def run(chunk):
        return _rank_chunk(final.user_rows(chunk), item_mat, chunk, inter, target, k)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if parts:
        items = np.concatenate([p[0] for p in parts])
        scores = np.concatenate([p[1] for p in parts])
    else:
        items = np.zeros((0, k), dtype=np.int64)
        scores = np.zeros((0, k))
    return RankingResult(users, items, scores, k)


def _hits(result: RankingResult, pos, k):
    k = min(k, result.k)
    out = np.zeros((len(result), k), dtype=bool)
    for row, u in enumerate(result.users):
        out[row] = np.isin(result.items[row, :k], pos[u])
    return out


def recall_at_k(result: RankingResult, pos, k: int | None = None) -> tuple[np.ndarray, float]:
    """Per-user ``|top-k & positives| / |positives|`` and their unweighted mean."""
    k = result.k if k is None else k
    hits = _hits(result, pos, k)
    sizes = np.array([len(pos[u]) for u in result.users], dtype=np.float64)
    per_user = hits.sum(axis=1) / sizes if len(sizes) else np.zeros(0)
    return per_user, float(per_user.mean()) if len(per_user) else 0.0


def ndcg_at_k(result: RankingResult, pos, k: int | None = None) -> tuple[np.ndarray, float]:
    """Binary-relevance ndcg with the ideal DCG truncated at ``min(k, |positives|)``."""
    k = result.k if k is None else k
    hits = _hits(result, pos, k)
    discount = 1.0 / np.log2(np.arange(2, hits.shape[1] + 2))
    dcg = hits @ discount
    ideal_cum = np.concatenate([[0.0], np.cumsum(discount)])
    n_ideal = np.array([min(k, len(pos[u])) for u in result.users], dtype=np.int64)
    per_user = dcg / ideal_cum[np.minimum(n_ideal, hits.shape[1])] if len(n_ideal) else np.zeros(0)
    return per_user, float(per_user.mean()) if len(per_user) else 0.0


def evaluate(final, inter: InteractionSet, ks=(20,), target: str = "test", workers: int = 1) -> dict:
    """Recall and ndcg at each cutoff in ``ks``; also returns per-user arrays under ``_per_user``."""
    kmax = max(ks)
    result = rank_users(final, inter, kmax, target=target, workers=workers)
    pos = held_out(inter, target)
    metrics, per_user = {}, {}
    for k in ks:
        r, rm = recall_at_k(result, pos, k)
        n, nm = ndcg_at_k(result, pos, k)
        metrics[f"recall@{k}"] = rm
        metrics[f"ndcg@{k}"] = nm
        per_user[f"recall@{k}"] = r
        per_user[f"ndcg@{k}"] = n
    metrics["users"] = int(len(result))
    return {"metrics": metrics, "_per_user": per_user, "users": result.users}


@dataclass
class SparsityGroup:
    users: np.ndarray
    total_interactions: int
    max_interactions: int


def sparsity_groups(inter: InteractionSet, num_groups: int = 4, users=None) -> list[SparsityGroup]:
    """Partition users, ordered by training-interaction count, into equal-volume groups.

    Group ``g`` ends at the first user where the running interaction count
    reaches ``g / num_groups`` of the total; every group keeps at least one user.
    """
    if num_groups < 2:
        raise ValueError("num_groups must be >= 2")
    if users is None:
        users = np.array([u for u in range(inter.num_users) if len(inter.test_pos[u])], dtype=np.int64)
    users = np.asarray(users, dtype=np.int64)
    if len(users) < num_groups:
        raise ValidationError(f"{len(users)} users cannot form {num_groups} groups")
    counts = np.array([len(inter.train_pos[u]) for u in users], dtype=np.int64)
    order = np.argsort(counts, kind="stable")
    users, counts = users[order], counts[order]
    cum = np.cumsum(counts)
    total = cum[-1]
    n = len(users)
    bounds = [0]
    for g in range(1, num_groups):
        b = int(np.searchsorted(cum * num_groups, g * total, side="left")) + 1
        b = max(b, bounds[-1] + 1)
        b = min(b, n - (num_groups - g))
        bounds.append(b)
    bounds.append(n)
    groups = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        groups.append(SparsityGroup(users[lo:hi], int(counts[lo:hi].sum()), int(counts[hi - 1])))
    return groups


def group_metrics(groups: list[SparsityGroup], evaluated_users: np.ndarray, per_user: dict) -> list[dict]:
    index = {int(u): row for row, u in enumerate(evaluated_users)}
    out = []
    for grp in groups:
        rows = [index[int(u)] for u in grp.users if int(u) in index]
        entry = {"users": int(len(grp.users)), "interactions": grp.total_interactions,
                 "max_interactions": grp.max_interactions}
        for name, vals in per_user.items():
            entry[name] = float(np.mean(vals[rows])) if rows else 0.0
        out.append(entry)
    return out
