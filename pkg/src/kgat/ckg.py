"""Interaction / knowledge-graph loaders and the collaborative knowledge graph.

Node layout of the unified graph: entities occupy ids ``[0, num_entities)``
(item ``i`` *is* entity ``i``), users follow at ``[num_entities,
num_entities + num_users)``.  Relation layout: original KG relations
``[0, R)``, ``Interact = R``, inverses of the originals ``[R + 1, 2R]``,
inverse-Interact ``2R + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

USER, ITEM, ENTITY = 0, 1, 2
KIND_NAMES = {USER: "user", ITEM: "item", ENTITY: "entity"}


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass
class InteractionSet:
    num_users: int
    num_items: int
    train_pos: list[np.ndarray]
    test_pos: list[np.ndarray]
    val_pos: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        empty = np.zeros(0, dtype=np.int64)
        for lists in (self.train_pos, self.test_pos, self.val_pos):
            while len(lists) < self.num_users:
                lists.append(empty)

    @property
    def num_train(self) -> int:
        return int(sum(len(x) for x in self.train_pos))

    @property
    def num_test(self) -> int:
        return int(sum(len(x) for x in self.test_pos))

    @property
    def num_val(self) -> int:
        return int(sum(len(x) for x in self.val_pos))

    @property
    def num_interactions(self) -> int:
        return self.num_train + self.num_test + self.num_val

    def train_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.num_users), [len(x) for x in self.train_pos])
        items = np.concatenate(self.train_pos) if self.num_users else np.zeros(0, np.int64)
        return users.astype(np.int64), items.astype(np.int64)

    def validate(self) -> None:
        for u in range(self.num_users):
            tr, te, va = self.train_pos[u], self.test_pos[u], self.val_pos[u]
            if (len(te) or len(va)) and not len(tr):
                raise ValidationError(f"user {u} has held-out items but no training items")
            if np.intersect1d(tr, te).size or np.intersect1d(tr, va).size:
                raise ValidationError(f"user {u}: train and held-out item lists overlap")
            for lst in (tr, te, va):
                if len(lst) and (lst[-1] >= self.num_items or lst[0] < 0):
                    raise ValidationError(f"user {u}: item id out of range")


@dataclass
class KnowledgeTriples:
    triples: np.ndarray  # (n, 3) int64 rows of (head, relation, tail)
    num_entities: int
    num_relations: int

    def __len__(self) -> int:
        return len(self.triples)


@dataclass(frozen=True, eq=False)
class CollaborativeKG:
    num_entities: int
    num_items: int
    num_users: int
    num_relations: int  # original KG relations, before inverses and Interact
    csr_offsets: np.ndarray
    edge_tails: np.ndarray
    edge_relations: np.ndarray
    node_kind: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.num_entities + self.num_users

    @property
    def num_edges(self) -> int:
        return len(self.edge_tails)

    @property
    def num_ckg_relations(self) -> int:
        return 2 * self.num_relations + 2

    @property
    def interact(self) -> int:
        return self.num_relations

    @property
    def inverse_interact(self) -> int:
        return 2 * self.num_relations + 1

    def inverse_relation(self, r):
        """Relation id of the inverse of ``r``; works elementwise on arrays."""
        return inverse_relation(r, self.num_relations)

    def user_node(self, u):
        return u + self.num_entities

    @cached_property
    def _heads(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.csr_offsets))

    @cached_property
    def _keys(self) -> np.ndarray:
        return np.sort(edge_key(self._heads, self.edge_relations, self.edge_tails,
                                self.num_ckg_relations, self.num_nodes))

    def edge_heads(self) -> np.ndarray:
        """Head node of every edge, aligned with ``edge_tails``."""
        return self._heads

    def degree(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def edge_keys(self) -> np.ndarray:
        """Sorted int64 keys ``(h * R' + r) * N + t`` for fast membership tests."""
        return self._keys

    def has_edges(self, h, r, t) -> np.ndarray:
        keys = self._keys
        q = edge_key(np.asarray(h), np.asarray(r), np.asarray(t), self.num_ckg_relations, self.num_nodes)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == q) if len(keys) else np.zeros(np.shape(q), dtype=bool)


def edge_key(h, r, t, num_relations, num_nodes):
    return (np.asarray(h, np.int64) * num_relations + np.asarray(r, np.int64)) * num_nodes + np.asarray(t, np.int64)


def inverse_relation(r, num_relations: int):
    r = np.asarray(r)
    R = num_relations
    out = np.where(r <= R, r + R + 1, r - R - 1)
    return int(out) if out.ndim == 0 else out


def _parse_int_lines(path: Path, min_fields: int, exact: int | None = None):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < min_fields or (exact is not None and len(parts) != exact):
                raise ParseError(f"{path}:{lineno}: expected {exact or f'>= {min_fields}'} fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer field in {line.strip()!r}") from None
            if min(vals) < 0:
                raise ParseError(f"{path}:{lineno}: negative id")
            yield lineno, vals


def read_user_lists(path) -> dict[int, np.ndarray]:
    """Read ``user item item ...`` lines; items are deduplicated and sorted."""
    out: dict[int, np.ndarray] = {}
    for lineno, vals in _parse_int_lines(Path(path), 1):
        u = vals[0]
        if u in out:
            raise ParseError(f"{path}:{lineno}: user {u} listed twice")
        out[u] = np.unique(np.asarray(vals[1:], dtype=np.int64))
    return out


def write_user_lists(path, lists) -> None:
    """Inverse of :func:`read_user_lists`; users with empty lists are written bare."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, items in enumerate(lists):
            fh.write(" ".join(str(int(x)) for x in [u, *items]) + "\n")


def load_interactions(train_path, test_path, val_path=None) -> InteractionSet:
    train = read_user_lists(train_path)
    test = read_user_lists(test_path) if test_path is not None else {}
    val = read_user_lists(val_path) if val_path is not None else {}
    for name, held in (("test", test), ("validation", val)):
        for u, items in held.items():
            if len(items) and not len(train.get(u, ())):
                raise ValidationError(f"user {u} appears in {name} but has no training items")

    users = set(train) | set(test) | set(val)
    num_users = max(users) + 1 if users else 0
    max_item = -1
    for d in (train, test, val):
        for items in d.values():
            if len(items):
                max_item = max(max_item, int(items[-1]))
    empty = np.zeros(0, dtype=np.int64)
    inter = InteractionSet(
        num_users=num_users,
        num_items=max_item + 1,
        train_pos=[train.get(u, empty) for u in range(num_users)],
        test_pos=[test.get(u, empty) for u in range(num_users)],
        val_pos=[val.get(u, empty) for u in range(num_users)],
    )
    inter.validate()
    return inter


def load_kg(kg_path, num_items: int = 0) -> KnowledgeTriples:
    rows = [vals for _, vals in _parse_int_lines(Path(kg_path), 3, exact=3)]
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    return make_triples(arr, num_items)


def make_triples(arr: np.ndarray, num_items: int = 0, num_relations: int | None = None) -> KnowledgeTriples:
    arr = np.asarray(arr, dtype=np.int64).reshape(-1, 3)
    if len(arr) and arr.min() < 0:
        raise ValidationError("negative id in knowledge triples")
    # first-occurrence dedup, file order preserved
    _, first = np.unique(arr, axis=0, return_index=True)
    arr = arr[np.sort(first)]
    num_entities = max(int(max(arr[:, 0].max(), arr[:, 2].max())) + 1 if len(arr) else 0, num_items)
    observed_rel = int(arr[:, 1].max()) + 1 if len(arr) else 0
    if num_relations is None:
        num_relations = observed_rel
    elif observed_rel > num_relations:
        raise ValidationError(f"relation id {observed_rel - 1} >= declared {num_relations}")
    return KnowledgeTriples(arr, num_entities, num_relations)


def build_ckg(inter: InteractionSet, kg: KnowledgeTriples) -> CollaborativeKG:
    if inter.num_items > kg.num_entities:
        kg = KnowledgeTriples(kg.triples, inter.num_items, kg.num_relations)
    E, R = kg.num_entities, kg.num_relations
    num_nodes = E + inter.num_users
    users, items = inter.train_pairs()
    unodes = users + E

    h, r, t = kg.triples[:, 0], kg.triples[:, 1], kg.triples[:, 2]
    interact = np.full(len(users), R, dtype=np.int64)
    # insertion order: KG forward, KG inverse, Interact, inverse-Interact
    heads = np.concatenate([h, t, unodes, items])
    rels = np.concatenate([r, inverse_relation(r, R), interact, np.full(len(users), 2 * R + 1, np.int64)])
    tails = np.concatenate([t, h, items, unodes])

    order = np.argsort(heads, kind="stable")
    counts = np.bincount(heads, minlength=num_nodes) if num_nodes else np.zeros(0, np.int64)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    kind = np.full(num_nodes, ENTITY, dtype=np.int8)
    kind[: inter.num_items] = ITEM
    kind[E:] = USER
    return CollaborativeKG(
        num_entities=E,
        num_items=inter.num_items,
        num_users=inter.num_users,
        num_relations=R,
        csr_offsets=offsets,
        edge_tails=tails[order].astype(np.int64),
        edge_relations=rels[order].astype(np.int64),
        node_kind=kind,
    )


def ego_network(g: CollaborativeKG, h: int) -> tuple[np.ndarray, np.ndarray]:
    """(relations, tails) of the edges headed at ``h``; views into the CSR arrays."""
    if not 0 <= h < g.num_nodes:
        raise IndexError(f"node {h} out of range [0, {g.num_nodes})")
    lo, hi = g.csr_offsets[h], g.csr_offsets[h + 1]
    return g.edge_relations[lo:hi], g.edge_tails[lo:hi]


def save_ckg(g: CollaborativeKG, path) -> None:
    """Write the graph as an edge list with a one-line ``#`` header."""
    heads = g.edge_heads()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# entities={g.num_entities} items={g.num_items} users={g.num_users} relations={g.num_relations}\n")
        for a, b, c in zip(heads.tolist(), g.edge_relations.tolist(), g.edge_tails.tolist()):
            fh.write(f"{a} {b} {c}\n")


def load_ckg(path) -> CollaborativeKG:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ParseError(f"{path}: missing header line")
        meta = dict(kv.split("=") for kv in header[1:].split())
        body = np.loadtxt(fh, dtype=np.int64, ndmin=2).reshape(-1, 3)
    E, I, U, R = (int(meta[k]) for k in ("entities", "items", "users", "relations"))
    n = E + U
    heads = body[:, 0]
    if len(heads) and np.any(np.diff(heads) < 0):
        raise ParseError(f"{path}: edges not grouped by head")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(heads, minlength=n), out=offsets[1:])
    kind = np.full(n, ENTITY, dtype=np.int8)
    kind[:I] = ITEM
    kind[E:] = USER
    return CollaborativeKG(E, I, U, R, offsets, body[:, 2].copy(), body[:, 1].copy(), kind)


def check_ckg(g: CollaborativeKG) -> None:
    """Assert the structural invariants of a collaborative KG."""
    off = g.csr_offsets
    if np.any(np.diff(off) < 0) or off[-1] != g.num_edges:
        raise ValidationError("bad CSR offsets")
    heads = g.edge_heads()
    fwd = np.sort(edge_key(heads, g.edge_relations, g.edge_tails, g.num_ckg_relations, g.num_nodes))
    bwd = np.sort(edge_key(g.edge_tails, g.inverse_relation(g.edge_relations), heads,
                           g.num_ckg_relations, g.num_nodes))
    if not np.array_equal(fwd, bwd):
        raise ValidationError("edge set is not closed under inversion")
    user_edge = g.node_kind[heads] == USER
    if np.any(g.edge_relations[user_edge] != g.interact):
        raise ValidationError("user node carries a non-Interact edge")
    inter = g.edge_relations == g.interact
    if np.any(g.node_kind[heads[inter]] != USER) or np.any(g.node_kind[g.edge_tails[inter]] != ITEM):
        raise ValidationError("Interact edge does not join a user to an item")


def dataset_stats(inter: InteractionSet, kg: KnowledgeTriples) -> dict[str, int]:
    return {
        "users": inter.num_users,
        "items": inter.num_items,
        "interactions": inter.num_interactions,
        "entities": max(kg.num_entities, inter.num_items),
        "relations": kg.num_relations,
        "triples": len(kg),
    }
