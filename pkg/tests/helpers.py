"""Small graph builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from kgat import diffcore as dc
from kgat.ckg import InteractionSet, build_ckg, make_triples
from kgat.data import random_ckg_data
from kgat.propagation import LayerConfig, init_params


def arr(*xs):
    return np.array(xs, dtype=np.int64)


def interactions(train, test=None, num_items=None, val=None):
    train = [np.asarray(x, dtype=np.int64) for x in train]
    test = [np.asarray(x, dtype=np.int64) for x in (test or [])]
    val = [np.asarray(x, dtype=np.int64) for x in (val or [])]
    if num_items is None:
        num_items = 1 + max(int(x.max()) for x in train + test + val if len(x))
    return InteractionSet(len(train), num_items, train, test, val)


def graph(train, triples=(), num_items=None, test=None, num_relations=None):
    inter = interactions(train, test, num_items)
    kg = make_triples(np.array(triples, dtype=np.int64).reshape(-1, 3), inter.num_items, num_relations)
    return build_ckg(inter, kg), inter


def memorization_instance():
    """4 users, 6 items, 4 extra entities, 2 relations; every user has 2-3 train items."""
    train = [[0, 1], [1, 2, 3], [3, 4], [4, 5, 0]]
    triples = [[0, 0, 6], [1, 0, 6], [2, 1, 7], [3, 1, 7], [4, 0, 8], [5, 1, 9], [6, 1, 8], [7, 0, 9]]
    return graph(train, triples, num_items=6)


def random_graph(rng, users=None, items=None, extra=None, relations=None, triples=None):
    users = int(rng.integers(1, 5)) if users is None else users
    items = int(rng.integers(1, 6)) if items is None else items
    extra = int(rng.integers(0, 5)) if extra is None else extra
    relations = int(rng.integers(1, 4)) if relations is None else relations
    triples = int(rng.integers(0, 10)) if triples is None else triples
    inter, kg = random_ckg_data(rng, users, items, extra, relations, interaction_p=0.4, triples=triples)
    return build_ckg(inter, kg), inter


def random_store(g, dims, aggregator="bi", rng=None, spread=1.0):
    rng = np.random.default_rng(0) if rng is None else rng
    cfg = LayerConfig(dims=dims, aggregator=aggregator)
    store = init_params(g, cfg, rng)
    store.params["entity_embedding"] *= spread
    return cfg, store


def store_of(**params) -> dc.ParameterStore:
    store = dc.ParameterStore()
    for k, v in params.items():
        store.add(k, v)
    return store
