import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgat.ckg import (ITEM, USER, ParseError, ValidationError, build_ckg, check_ckg, dataset_stats,
                      ego_network, inverse_relation, load_ckg, load_interactions, load_kg,
                      make_triples, save_ckg)
from kgat.data import random_ckg_data

from helpers import graph


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ------------------------------------------------------------------ loaders

def test_user_line_is_deduplicated_and_sorted(tmp_path):
    train = write(tmp_path, "train.txt", "0 12 7 12\n")
    test = write(tmp_path, "test.txt", "")
    inter = load_interactions(train, test)
    assert inter.train_pos[0].tolist() == [7, 12]
    assert inter.num_items == 13


def test_empty_files_give_empty_set(tmp_path):
    inter = load_interactions(write(tmp_path, "a.txt", ""), write(tmp_path, "b.txt", ""))
    assert inter.num_users == 0 and inter.num_interactions == 0


def test_malformed_line_reports_line_number(tmp_path):
    train = write(tmp_path, "train.txt", "0 1 2\n1 x 3\n")
    with pytest.raises(ParseError, match=r"train.txt:2"):
        load_interactions(train, write(tmp_path, "t.txt", ""))


def test_negative_id_rejected(tmp_path):
    with pytest.raises(ParseError, match=":1"):
        load_kg(write(tmp_path, "kg.txt", "3 0 -5\n"))


def test_test_user_without_train_items_is_invalid(tmp_path):
    train = write(tmp_path, "train.txt", "0 1\n")
    test = write(tmp_path, "test.txt", "0 2\n1 3\n")
    with pytest.raises(ValidationError, match="user 1"):
        load_interactions(train, test)


def test_duplicate_triples_collapse(tmp_path):
    kg = load_kg(write(tmp_path, "kg.txt", "3 0 5\n3 0 5\n"))
    assert len(kg) == 1
    assert kg.num_entities == 6 and kg.num_relations == 1


def test_kg_line_with_wrong_field_count(tmp_path):
    with pytest.raises(ParseError, match=":2"):
        load_kg(write(tmp_path, "kg.txt", "1 0 2\n1 0\n"))


def test_loader_is_deterministic(tmp_path):
    train = write(tmp_path, "train.txt", "0 3 1 2\n1 0 4\n2 2\n")
    test = write(tmp_path, "test.txt", "0 4\n1 1\n")
    kgf = write(tmp_path, "kg.txt", "0 1 5\n2 0 6\n5 1 6\n")
    a = build_ckg(load_interactions(train, test), load_kg(kgf))
    b = build_ckg(load_interactions(train, test), load_kg(kgf))
    for f in ("csr_offsets", "edge_tails", "edge_relations", "node_kind"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


# ------------------------------------------------------------- construction

def test_smallest_graph():
    g, _ = graph([[0]])
    assert (g.num_nodes, g.num_edges, g.num_ckg_relations) == (2, 2, 2)
    rels, tails = ego_network(g, g.user_node(0))
    assert rels.tolist() == [g.interact] and tails.tolist() == [0]


def test_one_triple_one_interaction():
    # entities i0 = 0, e1 = 1; user u0 = node 2; R = 1 so Interact = 1, inv r0 = 2, inv Interact = 3
    g, _ = graph([[0]], [[0, 0, 1]], num_items=1)
    assert (g.num_nodes, g.num_edges, g.num_ckg_relations) == (3, 4, 4)
    rels, tails = ego_network(g, 0)
    assert list(zip(rels.tolist(), tails.tolist())) == [(0, 1), (3, 2)]
    rels, tails = ego_network(g, 1)
    assert list(zip(rels.tolist(), tails.tolist())) == [(2, 0)]


def test_toy_movie_graph_counts():
    # Hand reading of the illustrative movie graph: users u1..u5, items i1..i4,
    # entities e1 (director) and e2 (actor); relations r2 = directed-by, r3 = acted-by.
    u1, u2, u3, u4, u5 = range(5)
    i1, i2, i3, i4 = range(4)
    e1, e2 = 4, 5
    train = {u1: [i1, i2], u2: [i1, i2, i3], u3: [i3], u4: [i1], u5: [i1, i4]}
    triples = [[i1, 0, e1], [i2, 0, e1], [i3, 1, e2], [i1, 1, e2], [i2, 1, e2], [i4, 1, e2]]
    g, inter = graph([train[u] for u in range(5)], triples, num_items=4)
    # 9 interactions + 6 triples, each stored in both directions
    assert inter.num_train == 9
    assert g.num_nodes == 5 + 4 + 2
    assert g.num_edges == 30
    assert g.num_ckg_relations == 6
    assert g.degree().tolist() == [6, 4, 3, 2, 2, 4, 2, 3, 1, 1, 2]
    check_ckg(g)


def test_user_edges_are_interact_only():
    g, _ = graph([[0, 1, 2]], [[0, 0, 3]], num_items=3)
    rels, tails = ego_network(g, g.user_node(0))
    assert len(rels) == 3 and set(rels.tolist()) == {g.interact}
    assert g.node_kind[g.user_node(0)] == USER and g.node_kind[0] == ITEM


def test_isolated_node_has_empty_segment():
    g, _ = graph([[0]], [[0, 0, 1]], num_items=3)
    assert len(ego_network(g, 2)[0]) == 0


def test_ego_network_bounds():
    g, _ = graph([[0]])
    with pytest.raises(IndexError):
        ego_network(g, 2)
    with pytest.raises(IndexError):
        ego_network(g, -1)


def test_test_interactions_never_become_edges():
    g, _ = graph([[0]], test=[[1]], num_items=2)
    assert g.num_edges == 2
    assert not g.has_edges(np.array([g.user_node(0)]), np.array([g.interact]), np.array([1]))[0]


def test_stats():
    g, inter = graph([[0, 1], [1]], [[0, 0, 2], [1, 1, 3]], num_items=2, test=[[], [0]])
    kg = make_triples(np.array([[0, 0, 2], [1, 1, 3]]), 2)
    assert dataset_stats(inter, kg) == {"users": 2, "items": 2, "interactions": 4,
                                        "entities": 4, "relations": 2, "triples": 2}


# --------------------------------------------------------------- properties

graph_seeds = st.integers(0, 2**32 - 1)


def seeded_graph(seed):
    rng = np.random.default_rng(seed)
    inter, kg = random_ckg_data(rng, int(rng.integers(1, 6)), int(rng.integers(1, 7)),
                                int(rng.integers(0, 5)), int(rng.integers(1, 4)),
                                triples=int(rng.integers(0, 12)))
    return build_ckg(inter, kg), inter, kg


@settings(max_examples=60, deadline=None)
@given(graph_seeds)
def test_inverse_closure(seed):
    g, _, _ = seeded_graph(seed)
    heads = g.edge_heads()
    forward = sorted(zip(heads.tolist(), g.edge_relations.tolist(), g.edge_tails.tolist()))
    backward = sorted(zip(g.edge_tails.tolist(), g.inverse_relation(g.edge_relations).tolist(),
                          heads.tolist()))
    assert forward == backward
    assert len(set(forward)) == len(forward)
    r = np.arange(g.num_ckg_relations)
    assert np.array_equal(inverse_relation(inverse_relation(r, g.num_relations), g.num_relations), r)


@settings(max_examples=60, deadline=None)
@given(graph_seeds)
def test_degree_conservation(seed):
    g, inter, kg = seeded_graph(seed)
    assert int(g.degree().sum()) == 2 * (len(kg) + inter.num_train)


@settings(max_examples=30, deadline=None)
@given(seed=graph_seeds)
def test_edge_list_round_trip(tmp_path_factory, seed):
    g, _, _ = seeded_graph(seed)
    path = tmp_path_factory.mktemp("ckg") / "g.txt"
    save_ckg(g, path)
    h = load_ckg(path)
    for f in ("csr_offsets", "edge_tails", "edge_relations", "node_kind"):
        assert np.array_equal(getattr(g, f), getattr(h, f))
    assert (h.num_entities, h.num_items, h.num_users, h.num_relations) == \
           (g.num_entities, g.num_items, g.num_users, g.num_relations)
