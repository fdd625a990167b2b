"""Attentive embedding propagation over the collaborative KG.

Representations are row matrices (one row per node).  A layer computes,
per head node ``h``::

    e_N[h] = sum_{(h, r, t)} pi(h, r, t) * prev[t]
    out[h] = f(prev[h], e_N[h])

with ``pi`` the per-head softmax of ``(W_r e_t) . tanh(W_r e_h + e_r)`` and
``f`` one of the GCN / GraphSage / Bi-Interaction aggregators.  The final
representation concatenates the outputs of layers ``0..L``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .ckg import ITEM, USER, CollaborativeKG

AGGREGATORS = ("gcn", "graphsage", "bi")
ATTENTION_MODES = ("kg", "uniform")


@dataclass
class LayerConfig:
    dims: list[int] = field(default_factory=lambda: [64, 64, 32, 16])
    aggregator: str = "bi"
    attention_mode: str = "kg"
    message_dropout: float | list[float] = 0.0
    node_dropout: float = 0.0
    leaky_slope: float = 0.2
    attention_per_layer: bool = False

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if not self.dims or min(self.dims) < 1:
            raise dc.ContractViolation(f"layer dims must be nonempty and >= 1, got {self.dims}")
        if self.aggregator not in AGGREGATORS:
            raise dc.ContractViolation(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise dc.ContractViolation(f"unknown attention mode {self.attention_mode!r}")
        for p in self.message_dropouts() + [self.node_dropout]:
            if not 0.0 <= p < 1.0:
                raise dc.ContractViolation(f"dropout probability {p} outside [0, 1)")
        if self.attention_per_layer and len(set(self.dims)) > 1:
            raise dc.ContractViolation("per-layer attention needs equal dims on every layer")

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def message_dropouts(self) -> list[float]:
        p = self.message_dropout
        if isinstance(p, (list, tuple)):
            if len(p) != self.depth:
                raise dc.ContractViolation(f"need {self.depth} message dropout values, got {len(p)}")
            return [float(x) for x in p]
        return [float(p)] * self.depth


@dataclass
class EdgeView:
    """The edges that take part in one forward pass, grouped by head."""

    heads: np.ndarray
    tails: np.ndarray
    relations: np.ndarray
    offsets: np.ndarray

    @classmethod
    def of(cls, g: CollaborativeKG, keep_node: np.ndarray | None = None) -> "EdgeView":
        heads = g.edge_heads()
        if keep_node is None:
            return cls(heads, g.edge_tails, g.edge_relations, g.csr_offsets)
        keep = keep_node[heads]
        counts = np.where(keep_node, np.diff(g.csr_offsets), 0)
        offsets = np.zeros(g.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return cls(heads[keep], g.edge_tails[keep], g.edge_relations[keep], offsets)

    @property
    def num_nodes(self) -> int:
        return len(self.offsets) - 1


@dataclass
class AttentionState:
    coefficients: np.ndarray  # aligned with edges.heads / tails / relations
    edges: EdgeView

    def segment(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lo, hi = self.edges.offsets[h], self.edges.offsets[h + 1]
        return self.edges.relations[lo:hi], self.edges.tails[lo:hi], self.coefficients[lo:hi]

    def coefficient(self, h: int, r: int, t: int) -> float:
        rels, tails, pi = self.segment(h)
        hit = np.flatnonzero((rels == r) & (tails == t))
        if not len(hit):
            raise KeyError(f"no edge ({h}, {r}, {t})")
        return float(pi[hit[0]])


@dataclass
class LayerRepresentations:
    reps: list[np.ndarray]
    final: np.ndarray
    node_kind: np.ndarray
    num_entities: int
    final_var: dc.Var | None = None

    def user_rows(self, users) -> np.ndarray:
        return self.final[np.asarray(users) + self.num_entities]

    def item_rows(self, items) -> np.ndarray:
        return self.final[np.asarray(items)]


# ------------------------------------------------------------ parameters

def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def layer_weight_names(config: LayerConfig) -> list[str]:
    names = []
    for l in range(1, config.depth + 1):
        names.append(f"W1_{l}")
        if config.aggregator == "bi":
            names.append(f"W2_{l}")
    return names


def init_params(g: CollaborativeKG, config: LayerConfig, rng: np.random.Generator,
                relation_dim: int | None = None, dtype=np.float64) -> dc.ParameterStore:
    d = config.dims[0]
    k = d if relation_dim is None else int(relation_dim)
    R = g.num_ckg_relations
    store = dc.ParameterStore(dtype)
    store.add("entity_embedding", xavier(rng, (g.num_nodes, d), g.num_nodes, d))
    store.add("relation_embedding", xavier(rng, (R, k), R, k))
    store.add("relation_projection", np.stack([xavier(rng, (k, d), d, k) for _ in range(R)])
              if R else np.zeros((0, k, d)))
    for l in range(1, config.depth + 1):
        d_in, d_out = config.dims[l - 1], config.dims[l]
        width = 2 * d_in if config.aggregator == "graphsage" else d_in
        store.add(f"W1_{l}", xavier(rng, (d_out, width), width, d_out))
        if config.aggregator == "bi":
            store.add(f"W2_{l}", xavier(rng, (d_out, d_in), d_in, d_out))
    return store


# ------------------------------------------------------------- attention

def attention_logits(tape: dc.Tape, store, emb: dc.Var, edges: EdgeView) -> dc.Var:
    """Unnormalized ``(W_r e_t) . tanh(W_r e_h + e_r)`` for every edge."""
    W = tape.param(store, "relation_projection")
    Rel = tape.param(store, "relation_embedding")
    proj_t = dc.matvec(W, dc.gather_rows(emb, edges.tails), edges.relations)
    proj_h = dc.matvec(W, dc.gather_rows(emb, edges.heads), edges.relations)
    return dc.row_dot(proj_t, dc.tanh(dc.add(proj_h, dc.gather_rows(Rel, edges.relations))))


def attention_weights(tape: dc.Tape, store, emb: dc.Var, edges: EdgeView, mode: str) -> dc.Var:
    if mode == "uniform":
        deg = np.diff(edges.offsets)
        return tape.const(1.0 / np.repeat(deg, deg).astype(store.dtype))
    return dc.segment_softmax(attention_logits(tape, store, emb, edges), edges.offsets)


def attention_scores(g: CollaborativeKG, store, mode: str = "kg",
                     edges: EdgeView | None = None) -> AttentionState:
    edges = EdgeView.of(g) if edges is None else edges
    tape = dc.Tape(record=False)
    emb = tape.param(store, "entity_embedding")
    pi = attention_weights(tape, store, emb, edges, mode)
    return AttentionState(np.asarray(pi.value), edges)


# ------------------------------------------------------------ aggregation

def aggregate(kind: str, e_h: dc.Var, e_n: dc.Var, weights, slope: float = 0.2) -> dc.Var:
    """Combine self and neighborhood rows; ``weights`` is ``(W,)`` or ``(W1, W2)``."""
    if kind == "gcn":
        (W,) = weights
        return dc.leaky_relu(dc.matmul(dc.add(e_h, e_n), W, transpose_b=True), slope)
    if kind == "graphsage":
        (W,) = weights
        return dc.leaky_relu(dc.matmul(dc.concat([e_h, e_n], axis=1), W, transpose_b=True), slope)
    if kind == "bi":
        W1, W2 = weights
        summed = dc.leaky_relu(dc.matmul(dc.add(e_h, e_n), W1, transpose_b=True), slope)
        product = dc.leaky_relu(dc.matmul(dc.mul(e_h, e_n), W2, transpose_b=True), slope)
        return dc.add(summed, product)
    raise dc.ContractViolation(f"unknown aggregator {kind!r}")


def _layer_weights(tape, store, config, l):
    if config.aggregator == "bi":
        return tape.param(store, f"W1_{l}"), tape.param(store, f"W2_{l}")
    return (tape.param(store, f"W1_{l}"),)


def propagate_layer(tape: dc.Tape, store, edges: EdgeView, pi: dc.Var, prev: dc.Var, l: int,
                    config: LayerConfig, training: bool = False,
                    rng: np.random.Generator | None = None) -> dc.Var:
    """One propagation step producing layer ``l`` from layer ``l - 1``."""
    weights = pi
    p = config.message_dropouts()[l - 1]
    if training and p > 0.0:
        if rng is None:
            raise dc.ContractViolation("message dropout needs an rng")
        keep = rng.random(len(edges.tails)) >= p
        weights = dc.mul(pi, keep.astype(pi.value.dtype) / (1.0 - p))
    e_n = dc.segment_weighted_sum(weights, dc.gather_rows(prev, edges.tails), edges.offsets)
    return aggregate(config.aggregator, prev, e_n, _layer_weights(tape, store, config, l),
                     config.leaky_slope)


def node_keep_mask(num_nodes: int, p: float, rng: np.random.Generator) -> np.ndarray:
    return rng.random(num_nodes) >= p


def forward(tape: dc.Tape, g: CollaborativeKG, config: LayerConfig, store,
            training: bool = False, rng: np.random.Generator | None = None):
    """Tape-level forward pass; returns ``(layer Vars, final Var, attention Var, edges)``."""
    edges = EdgeView.of(g)
    if training and config.node_dropout > 0.0:
        if rng is None:
            raise dc.ContractViolation("node dropout needs an rng")
        edges = EdgeView.of(g, node_keep_mask(g.num_nodes, config.node_dropout, rng))
    emb = tape.param(store, "entity_embedding")
    pi = attention_weights(tape, store, emb, edges, config.attention_mode)
    layers = [emb]
    for l in range(1, config.depth + 1):
        if config.attention_per_layer and l > 1:
            pi = attention_weights(tape, store, layers[-1], edges, config.attention_mode)
        layers.append(propagate_layer(tape, store, edges, pi, layers[-1], l, config, training, rng))
    final = dc.concat(layers, axis=1) if len(layers) > 1 else layers[0]
    return layers, final, pi, edges


def forward_all(g: CollaborativeKG, config: LayerConfig, store, training: bool = False,
                rng: np.random.Generator | None = None, tape: dc.Tape | None = None) -> LayerRepresentations:
    tape = dc.Tape(record=False) if tape is None else tape
    layers, final, _, _ = forward(tape, g, config, store, training, rng)
    return LayerRepresentations(
        reps=[np.asarray(x.value) for x in layers],
        final=np.asarray(final.value),
        node_kind=g.node_kind,
        num_entities=g.num_entities,
        final_var=final,
    )


# ------------------------------------------------------------- prediction

def predict(final: LayerRepresentations, u: int, i: int) -> float:
    """Inner-product score between user node ``u`` and item node ``i``."""
    if final.node_kind[u] != USER:
        raise dc.ContractViolation(f"node {u} is not a user")
    if final.node_kind[i] != ITEM:
        raise dc.ContractViolation(f"node {i} is not an item")
    return float(final.final[u] @ final.final[i])


def predict_batch(final: LayerRepresentations, u: int, items) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)
    if final.node_kind[u] != USER or np.any(final.node_kind[items] != ITEM):
        raise dc.ContractViolation("predict_batch expects one user node and item nodes")
    return final.final[items] @ final.final[u]


def predict_pairs(final_var: dc.Var, user_nodes, item_nodes) -> dc.Var:
    return dc.row_dot(dc.gather_rows(final_var, user_nodes), dc.gather_rows(final_var, item_nodes))
