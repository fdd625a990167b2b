import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgat.explain import ExplainedPath, format_path, path_record, read_labels, top_paths
from kgat.oracle import exhaustive_paths
from kgat.propagation import AttentionState, EdgeView, attention_scores

from helpers import graph, random_graph, random_store


def scored_graph(seed, **kw):
    rng = np.random.default_rng(seed)
    g, inter = random_graph(rng, **kw)
    _, store = random_store(g, [3, 3], rng=rng, spread=3.0)
    return g, inter, attention_scores(g, store)


def test_direct_edge():
    g, _, = graph([[0]], [[0, 0, 1]], num_items=1)
    att = attention_scores(g, random_store(g, [2, 2])[1])
    u = g.user_node(0)
    paths = top_paths(g, att, u, 0, max_len=1)
    assert len(paths) == 1
    assert paths[0].nodes == (u, 0) and paths[0].relations == (g.interact,)
    assert paths[0].score == att.coefficient(u, g.interact, 0)


def test_chain_with_unit_coefficients():
    # u -> i1 -> e -> i with every coefficient pinned to 1
    g, _ = graph([[0]], [[0, 0, 2], [1, 0, 2]], num_items=2)
    att = AttentionState(np.ones(g.num_edges), EdgeView.of(g))
    paths = top_paths(g, att, g.user_node(0), 1, max_len=3)
    assert [p.nodes for p in paths] == [(g.user_node(0), 0, 2, 1)]
    assert paths[0].score == 1.0


def test_no_path_within_length_is_empty():
    g, _ = graph([[0]], [[0, 0, 2], [1, 0, 2]], num_items=2)
    att = attention_scores(g, random_store(g, [2, 2])[1])
    assert top_paths(g, att, g.user_node(0), 1, max_len=2) == []


def test_out_of_range_node():
    g, _ = graph([[0]])
    att = attention_scores(g, random_store(g, [2, 2])[1])
    with pytest.raises(IndexError):
        top_paths(g, att, 5, 0, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_unbounded_beam_matches_exhaustive_enumeration(seed, max_len):
    g, inter, att = scored_graph(seed, users=3, items=4, extra=3, relations=2, triples=6)
    assert g.num_nodes == 10
    u, i = g.user_node(0), int(np.random.default_rng(seed).integers(inter.num_items))
    ours = [(p.score, p.nodes, p.relations) for p in top_paths(g, att, u, i, max_len)]
    ref = exhaustive_paths(g, u, i, max_len, att.coefficient)
    assert [(n, r) for _, n, r in ours] == [(n, r) for _, n, r in ref]
    np.testing.assert_allclose([s for s, _, _ in ours], [s for s, _, _ in ref], rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_paths_are_valid_and_scores_shrink(seed, beam):
    g, inter, att = scored_graph(seed, users=3, items=5, extra=4, relations=3, triples=9)
    u, i = g.user_node(1), 0
    edges = set(zip(g.edge_heads().tolist(), g.edge_relations.tolist(), g.edge_tails.tolist()))
    paths = top_paths(g, att, u, i, 3, beam=beam)
    full = {(p.nodes, p.relations) for p in top_paths(g, att, u, i, 3)}
    for p in paths:
        assert p.nodes[0] == u and p.nodes[-1] == i
        assert len(set(p.nodes)) == len(p.nodes)
        hops = list(zip(p.nodes[:-1], p.relations, p.nodes[1:]))
        assert all(h in edges for h in hops)
        prefix = np.cumprod(p.coefficients)
        assert np.all(np.diff(prefix) <= 0) and 0 < p.score <= 1.0
        assert p.score == pytest.approx(prefix[-1], rel=1e-15)
        assert all(c == att.coefficient(*h) for c, h in zip(p.coefficients, hops))
        assert (p.nodes, p.relations) in full
    assert [p.sort_key() for p in paths] == sorted(p.sort_key() for p in paths)


def test_beam_keeps_best_partial_paths():
    # two routes of length 2 into item 1; beam 1 keeps only the stronger first hop
    g, _ = graph([[0, 2]], [[0, 0, 1], [2, 0, 1]], num_items=3)
    pi = np.ones(g.num_edges)
    u = g.user_node(0)
    lo = g.csr_offsets[u]
    pi[lo:lo + 2] = [0.9, 0.1]  # u -> item 0, u -> item 2
    att = AttentionState(pi, EdgeView.of(g))
    both = top_paths(g, att, u, 1, 2)
    assert [p.nodes for p in both] == [(u, 0, 1), (u, 2, 1)]
    assert [p.nodes for p in top_paths(g, att, u, 1, 2, beam=1)] == [(u, 0, 1)]


def test_rendering(tmp_path):
    p = ExplainedPath((7, 0, 3), (2, 0), (0.5, 0.25), 0.125)
    assert format_path(p) == "0.125\t7 -[2]-> 0 -[0]-> 3"
    labels = tmp_path / "nodes.txt"
    labels.write_text("7 Alice\n0 Heat\n", encoding="utf-8")
    assert format_path(p, read_labels(labels), {2: "watched"}) == "0.125\tAlice -[watched]-> Heat -[0]-> 3"
    rec = json.loads(path_record(p))
    assert rec == {"score": 0.125, "nodes": [7, 0, 3], "relations": [2, 0], "coefficients": [0.5, 0.25]}
