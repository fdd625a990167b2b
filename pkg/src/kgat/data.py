"""Dataset preparation: k-core filtering, per-user splits and synthetic CKGs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ckg import (InteractionSet, KnowledgeTriples, ValidationError, load_kg, make_triples,
                  read_user_lists, write_user_lists)


def kcore_filter(user_items: dict[int, np.ndarray], k: int = 10) -> dict[int, np.ndarray]:
    """Drop users and items with fewer than ``k`` interactions, repeating until nothing changes."""
    current = {u: np.asarray(v, dtype=np.int64) for u, v in user_items.items()}
    while True:
        all_items = np.concatenate(list(current.values())) if current else np.zeros(0, np.int64)
        ids, counts = np.unique(all_items, return_counts=True)
        weak_items = ids[counts < k]
        changed = False
        nxt = {}
        for u, items in current.items():
            kept = items[~np.isin(items, weak_items)] if len(weak_items) else items
            if len(kept) != len(items):
                changed = True
            if len(kept) >= k:
                nxt[u] = kept
            else:
                changed = True
        current = nxt
        if not changed:
            return current


@dataclass
class Remap:
    users: dict[int, int]
    entities: dict[int, int]
    num_items: int


def remap_ids(user_items: dict[int, np.ndarray], triples: np.ndarray, num_raw_items: int) -> Remap:
    """Dense ids: kept users in id order; kept items first, then all other KG entities.

    Items that were filtered out stay in the graph as plain entities.
    """
    users = {u: n for n, u in enumerate(sorted(user_items))}
    kept_items = np.unique(np.concatenate(list(user_items.values()))) if user_items else np.zeros(0, np.int64)
    entities = {int(i): n for n, i in enumerate(kept_items)}
    others = np.unique(np.concatenate([triples[:, 0], triples[:, 2]])) if len(triples) else np.zeros(0, np.int64)
    for e in others:
        if int(e) not in entities:
            entities[int(e)] = len(entities)
    return Remap(users, entities, len(kept_items))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_user(items: np.ndarray, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle one user's items; the first ``round(frac * n)`` (at least one) stay, the rest are held out."""
    items = np.asarray(items)
    if not len(items):
        return items, items
    perm = rng.permutation(len(items))
    n_keep = min(len(items), max(1, _round_half_up(frac * len(items))))
    return np.sort(items[perm[:n_keep]]), np.sort(items[perm[n_keep:]])


def split_interactions(user_lists: list[np.ndarray], train_frac: float, rng) -> tuple[list, list]:
    train, held = [], []
    for items in user_lists:
        a, b = split_user(items, train_frac, rng)
        train.append(a)
        held.append(b)
    return train, held


def carve_validation(inter: InteractionSet, val_frac: float, rng) -> InteractionSet:
    """Move ``val_frac`` of each user's training items into a validation list."""
    train, val = [], []
    for items in inter.train_pos:
        keep, held = split_user(items, 1.0 - val_frac, rng)
        train.append(keep)
        val.append(held)
    return InteractionSet(inter.num_users, inter.num_items, train, list(inter.test_pos), val)


def prepare(raw_path, kg_path, out_dir, *, core: int = 10, train_frac: float = 0.8,
            val_frac: float = 0.1, seed: int = 2019) -> dict:
    """Filter, re-index and split a raw dataset into ``train/val/test/kg_final`` files."""
    raw = read_user_lists(raw_path)
    kg = load_kg(kg_path) if kg_path else KnowledgeTriples(np.zeros((0, 3), np.int64), 0, 0)
    num_raw_items = max((int(v[-1]) + 1 for v in raw.values() if len(v)), default=0)
    filtered = kcore_filter(raw, core) if core > 1 else {u: v for u, v in raw.items() if len(v)}
    if not filtered:
        raise ValidationError(f"no user survives the {core}-core filter")
    remap = remap_ids(filtered, kg.triples, num_raw_items)

    rng = np.random.default_rng(seed)
    lists = []
    for u in sorted(filtered):
        lists.append(np.sort(np.array([remap.entities[int(i)] for i in filtered[u]], dtype=np.int64)))
    train, test = split_interactions(lists, train_frac, rng)
    inter = InteractionSet(len(lists), remap.num_items, train, test)
    if val_frac > 0:
        inter = carve_validation(inter, val_frac, rng)

    triples = np.array([[remap.entities[int(h)], r, remap.entities[int(t)]] for h, r, t in kg.triples],
                       dtype=np.int64).reshape(-1, 3)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_user_lists(out / "train.txt", inter.train_pos)
    write_user_lists(out / "test.txt", inter.test_pos)
    if val_frac > 0:
        write_user_lists(out / "val.txt", inter.val_pos)
    write_triples(out / "kg_final.txt", triples)
    return {"users": inter.num_users, "items": inter.num_items, "train": inter.num_train,
            "val": inter.num_val, "test": inter.num_test, "entities": len(remap.entities),
            "triples": int(len(make_triples(triples)))}


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
            fh.write(f"{h} {r} {t}\n")


@dataclass
class SynthConfig:
    users: int = 200
    items: int = 100
    entities: int = 40       # non-item entities
    relations: int = 4
    clusters: int = 4
    interactions_per_user: float = 12.0
    triples_per_item: float = 3.0
    entity_triples: float = 1.0   # entity-entity triples per non-item entity
    affinity: float = 0.8          # chance an interaction / triple stays inside its cluster
    train_frac: float = 0.8
    seed: int = 7


def synthesize(cfg: SynthConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Clustered users/items/entities: returns per-user item lists and KG triples."""
    rng = np.random.default_rng(cfg.seed)
    C = max(1, cfg.clusters)
    n_ent = cfg.items + cfg.entities
    item_cluster = np.arange(cfg.items) % C
    ent_ids = np.arange(cfg.items, n_ent)
    ent_cluster = ent_ids % C

    def pick(pool_by_cluster, all_pool, c):
        pool = pool_by_cluster[c] if rng.random() < cfg.affinity and len(pool_by_cluster[c]) else all_pool
        return int(pool[rng.integers(len(pool))])

    items_by_c = [np.flatnonzero(item_cluster == c) for c in range(C)]
    ents_by_c = [ent_ids[ent_cluster == c] for c in range(C)]
    all_items = np.arange(cfg.items)

    lists = []
    for u in range(cfg.users):
        c = u % C
        n = min(cfg.items - 1, max(2, int(rng.poisson(cfg.interactions_per_user))))
        chosen: set[int] = set()
        while len(chosen) < n:
            chosen.add(pick(items_by_c, all_items, c))
        lists.append(np.array(sorted(chosen), dtype=np.int64))

    triples = []
    if cfg.entities and cfg.relations:
        for i in range(cfg.items):
            for _ in range(int(rng.poisson(cfg.triples_per_item))):
                triples.append((i, int(rng.integers(cfg.relations)), pick(ents_by_c, ent_ids, item_cluster[i])))
        for e in ent_ids:
            for _ in range(int(rng.poisson(cfg.entity_triples))):
                t = pick(ents_by_c, ent_ids, e % C)
                if t != e:
                    triples.append((int(e), int(rng.integers(cfg.relations)), t))
    arr = np.array(triples, dtype=np.int64).reshape(-1, 3)
    return lists, make_triples(arr).triples


def write_synthetic(cfg: SynthConfig, out_dir) -> dict:
    lists, triples = synthesize(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    train, test = split_interactions(lists, cfg.train_frac, rng)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_user_lists(out / "train.txt", train)
    write_user_lists(out / "test.txt", test)
    write_triples(out / "kg_final.txt", triples)
    return {"users": len(lists), "items": cfg.items, "interactions": int(sum(map(len, lists))),
            "triples": int(len(triples))}


def random_ckg_data(rng: np.random.Generator, users: int, items: int, extra_entities: int,
                    relations: int, interaction_p: float = 0.4, triples: int = 6,
                    test_p: float = 0.0) -> tuple[InteractionSet, KnowledgeTriples]:
    """Small random interaction set + KG for property tests (every user has >= 1 item)."""
    train, test = [], []
    for _ in range(users):
        mask = rng.random(items) < interaction_p
        if not mask.any():
            mask[rng.integers(items)] = True
        chosen = np.flatnonzero(mask)
        held = chosen[rng.random(len(chosen)) < test_p] if len(chosen) > 1 else chosen[:0]
        train.append(np.setdiff1d(chosen, held))
        test.append(held)
    n_ent = items + extra_entities
    rows = []
    if relations and n_ent > 1:
        for _ in range(triples):
            h, t = rng.choice(n_ent, size=2, replace=False)
            rows.append((int(h), int(rng.integers(relations)), int(t)))
    kg = make_triples(np.array(rows, dtype=np.int64).reshape(-1, 3), n_ent)
    kg = KnowledgeTriples(kg.triples, n_ent, relations)
    return InteractionSet(users, items, train, test), kg
