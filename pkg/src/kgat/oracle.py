"""Slow, literal reference implementations for cross-checking the fast paths.

Nothing here imports the propagation, explanation or differentiation code.
Everything is written per node / per edge with explicit loops.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .ckg import CollaborativeKG

MAX_NAIVE_EDGES = 1000
MAX_PATH_NODES = 15


class OracleRefused(RuntimeError):
    """Input exceeds the size guard of a brute-force oracle."""


class NaiveReps(NamedTuple):
    reps: list
    final: np.ndarray


def _leaky(v, slope):
    return np.array([x if x >= 0 else slope * x for x in v])


def _ego(g: CollaborativeKG, h: int):
    lo, hi = int(g.csr_offsets[h]), int(g.csr_offsets[h + 1])
    return [(int(g.edge_relations[e]), int(g.edge_tails[e])) for e in range(lo, hi)]


def naive_attention(g: CollaborativeKG, params: dict, mode: str = "kg") -> dict:
    """``{h: [pi for each edge of h in CSR order]}`` computed one node at a time."""
    out = {}
    for h in range(g.num_nodes):
        ego = _ego(g, h)
        if not ego:
            out[h] = []
            continue
        if mode == "uniform":
            out[h] = [1.0 / len(ego)] * len(ego)
            continue
        E = params["entity_embedding"]
        raw = []
        for r, t in ego:
            W = params["relation_projection"][r]
            er = params["relation_embedding"][r]
            raw.append(float(np.dot(W @ E[t], np.tanh(W @ E[h] + er))))
        top = max(raw)
        ex = [math.exp(s - top) for s in raw]
        total = sum(ex)
        out[h] = [x / total for x in ex]
    return out


def naive_forward(g: CollaborativeKG, params: dict, dims, aggregator: str = "bi",
                  attention_mode: str = "kg", slope: float = 0.2) -> NaiveReps:
    if g.num_edges > MAX_NAIVE_EDGES:
        raise OracleRefused(f"{g.num_edges} edges exceeds the naive_forward guard of {MAX_NAIVE_EDGES}")
    pi = naive_attention(g, params, attention_mode) if len(dims) > 1 else {}
    prev = [np.array(params["entity_embedding"][h], dtype=np.float64) for h in range(g.num_nodes)]
    layers = [np.array(prev)]
    for l in range(1, len(dims)):
        W1 = params[f"W1_{l}"]
        cur = []
        for h in range(g.num_nodes):
            e_h = prev[h]
            e_n = np.zeros(dims[l - 1])
            for (r, t), w in zip(_ego(g, h), pi[h]):
                e_n = e_n + w * prev[t]
            if aggregator == "gcn":
                out = _leaky(W1 @ (e_h + e_n), slope)
            elif aggregator == "graphsage":
                out = _leaky(W1 @ np.concatenate([e_h, e_n]), slope)
            elif aggregator == "bi":
                out = _leaky(W1 @ (e_h + e_n), slope) + _leaky(params[f"W2_{l}"] @ (e_h * e_n), slope)
            else:
                raise ValueError(aggregator)
            cur.append(out)
        prev = cur
        layers.append(np.array(cur).reshape(g.num_nodes, dims[l]))
    return NaiveReps(layers, np.concatenate(layers, axis=1))


def fd_gradient(loss_fn: Callable[[], float], params: dict, n_coords: int = 200,
                eps: float = 1e-5, rng: np.random.Generator | None = None, names=None) -> dict:
    """Central differences ``(f(x + eps) - f(x - eps)) / 2 eps`` on sampled coordinates.

    ``loss_fn`` reads the arrays in ``params`` (which are perturbed in place
    and restored).  Returns ``{name: (flat_indices, fd_values)}``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = {}
    for name in names or list(params):
        p = params[name]
        flat = p.reshape(-1)
        if flat.size == 0:
            continue
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        vals = np.empty(len(idx))
        for j, c in enumerate(idx):
            orig = flat[c]
            flat[c] = orig + eps
            up = loss_fn()
            flat[c] = orig - eps
            down = loss_fn()
            flat[c] = orig
            vals[j] = (up - down) / (2 * eps)
        out[name] = (idx, vals)
    return out


def exhaustive_paths(g: CollaborativeKG, u: int, i: int, max_len: int,
                     coefficient: Callable[[int, int, int], float] | None = None) -> list:
    """All simple paths ``u -> ... -> i`` of 1..max_len hops, by depth-first search.

    Returns ``(nodes, relations)`` tuples in discovery order, or, when
    ``coefficient(h, r, t)`` is given, ``(score, nodes, relations)`` sorted by
    descending score, then node sequence, then relation sequence.
    """
    if g.num_nodes > MAX_PATH_NODES:
        raise OracleRefused(f"{g.num_nodes} nodes exceeds the exhaustive_paths guard of {MAX_PATH_NODES}")
    paths = []

    def dfs(nodes, rels):
        if len(rels) >= max_len:
            return
        for r, t in _ego(g, nodes[-1]):
            if t in nodes:
                continue
            if t == i:
                paths.append((tuple(nodes + [t]), tuple(rels + [r])))
            else:
                dfs(nodes + [t], rels + [r])

    dfs([u], [])
    if coefficient is None:
        return paths
    scored = []
    for nodes, rels in paths:
        s = 1.0
        for h, r, t in zip(nodes[:-1], rels, nodes[1:]):
            s *= coefficient(h, r, t)
        scored.append((s, nodes, rels))
    scored.sort(key=lambda x: (-x[0], x[1], x[2]))
    return scored
