"""TransR energy and the pairwise KG ranking loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .ckg import CollaborativeKG

log = logging.getLogger(__name__)

MAX_CORRUPTION_RETRIES = 100


@dataclass
class TripleBatch:
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    corrupted_tails: np.ndarray

    def __len__(self):
        return len(self.heads)


def transr_energy(tape: dc.Tape, store, heads, relations, tails) -> dc.Var:
    """Per-row ``||W_r e_h + e_r - W_r e_t||^2`` as a tape vector."""
    E = tape.param(store, "entity_embedding")
    Rel = tape.param(store, "relation_embedding")
    W = tape.param(store, "relation_projection")
    ph = dc.matvec(W, dc.gather_rows(E, heads), relations)
    pt = dc.matvec(W, dc.gather_rows(E, tails), relations)
    diff = dc.sub(dc.add(ph, dc.gather_rows(Rel, relations)), pt)
    return dc.row_dot(diff, diff)


def transr_score(h: int, r: int, t: int, store) -> float:
    """Energy of a single triple; lower means more plausible."""
    tape = dc.Tape(record=False)
    g = transr_energy(tape, store, np.array([h]), np.array([r]), np.array([t]))
    return float(g.value[0])


def kg_loss(tape: dc.Tape, batch: TripleBatch, store) -> dc.Var:
    """Mean of ``-ln sigmoid(g(h,r,t') - g(h,r,t))`` over the batch."""
    if len(batch) == 0:
        raise dc.ContractViolation("kg_loss on an empty batch")
    pos = transr_energy(tape, store, batch.heads, batch.relations, batch.tails)
    neg = transr_energy(tape, store, batch.heads, batch.relations, batch.corrupted_tails)
    return dc.neg(dc.mean(dc.log_sigmoid(dc.sub(neg, pos))))


def kg_regularizer(tape: dc.Tape, batch: TripleBatch, store) -> dc.Var:
    """Batch-mean squared L2 of the rows and projection slices a KG batch touches."""
    E = tape.param(store, "entity_embedding")
    Rel = tape.param(store, "relation_embedding")
    W = tape.param(store, "relation_projection")
    n = len(batch)
    terms = [
        dc.squared_l2(dc.gather_rows(E, batch.heads)),
        dc.squared_l2(dc.gather_rows(E, batch.tails)),
        dc.squared_l2(dc.gather_rows(E, batch.corrupted_tails)),
        dc.squared_l2(dc.gather_rows(Rel, batch.relations)),
        dc.squared_l2(dc.gather_rows(W, batch.relations)),
    ]
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return dc.scale(total, 1.0 / n)


def sample_kg_batch(g: CollaborativeKG, batch_size: int, rng: np.random.Generator) -> TripleBatch:
    """Uniform CKG edges, each paired with a corrupted tail not present in the graph.

    Only tails are corrupted.  Head corruption is covered implicitly: the
    inverse edge ``(t, inv r, h)`` is itself sampled, and replacing its tail
    gives ``(t, inv r, h')``, the inverse of the head-corrupted triple
    ``(h', r, t)``.
    """
    if g.num_edges == 0:
        raise dc.ContractViolation("cannot sample from a graph with no edges")
    idx = rng.integers(0, g.num_edges, size=batch_size)
    heads = g.edge_heads()[idx]
    rels = g.edge_relations[idx]
    tails = g.edge_tails[idx]
    corrupt = rng.integers(0, g.num_nodes, size=batch_size)
    bad = g.has_edges(heads, rels, corrupt)
    tries = 0
    while bad.any() and tries < MAX_CORRUPTION_RETRIES:
        corrupt[bad] = rng.integers(0, g.num_nodes, size=int(bad.sum()))
        bad[bad] = g.has_edges(heads[bad], rels[bad], corrupt[bad])
        tries += 1
    if bad.any():
        log.warning("accepted %d corrupted triples that exist in the graph after %d retries",
                    int(bad.sum()), MAX_CORRUPTION_RETRIES)
    return TripleBatch(heads, rels, tails, corrupt)
