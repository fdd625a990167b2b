"""Attention-weighted path extraction between a user and an item.

A hop ``n_j -[r]-> n_{j+1}`` is an edge in ``n_j``'s ego-network and is
weighted by ``pi(n_j, r, n_{j+1})``: the share of ``n_j``'s incoming
information that arrives from ``n_{j+1}``.  Walking outward from the user
therefore reads each coefficient from the segment of the node nearer to the
user.  A path's score is the product of its hop coefficients, so scores lie
in ``(0, 1]`` and never increase as a path is extended.  Paths are simple
(no repeated node).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .ckg import CollaborativeKG
from .propagation import AttentionState


@dataclass(frozen=True)
class ExplainedPath:
    nodes: tuple[int, ...]
    relations: tuple[int, ...]
    coefficients: tuple[float, ...]
    score: float

    def sort_key(self):
        return (-self.score, self.nodes, self.relations)

    def extend(self, r: int, t: int, pi: float) -> "ExplainedPath":
        return ExplainedPath(self.nodes + (t,), self.relations + (r,), self.coefficients + (pi,),
                             self.score * pi)


def top_paths(g: CollaborativeKG, att: AttentionState, u: int, i: int, max_len: int,
              beam: int | None = None) -> list[ExplainedPath]:
    """Highest-scoring simple paths from node ``u`` to node ``i`` with at most ``max_len`` hops.

    ``beam=None`` keeps every partial path, which makes the search exhaustive.
    Otherwise only the best ``beam`` unfinished paths of each length are
    expanded.  Ties are ordered by node sequence, then relation sequence.
    """
    for n in (u, i):
        if not 0 <= n < g.num_nodes:
            raise IndexError(f"node {n} out of range")
    found: list[ExplainedPath] = []
    frontier = [ExplainedPath((u,), (), (), 1.0)]
    for _ in range(max_len):
        grown = []
        for path in frontier:
            rels, tails, pis = att.segment(path.nodes[-1])
            for r, t, pi in zip(rels.tolist(), tails.tolist(), pis.tolist()):
                if t in path.nodes:
                    continue
                nxt = path.extend(r, t, pi)
                (found if t == i else grown).append(nxt)
        grown.sort(key=ExplainedPath.sort_key)
        frontier = grown if beam is None else grown[:beam]
        if not frontier:
            break
    found.sort(key=ExplainedPath.sort_key)
    return found


def _label(labels, key):
    if labels and key in labels:
        return labels[key]
    return str(key)


def format_path(path: ExplainedPath, node_labels: dict | None = None,
                relation_labels: dict | None = None) -> str:
    parts = [_label(node_labels, path.nodes[0])]
    for r, n in zip(path.relations, path.nodes[1:]):
        parts.append(f"-[{_label(relation_labels, r)}]-> {_label(node_labels, n)}")
    return f"{path.score:.6g}\t" + " ".join(parts)


def path_record(path: ExplainedPath) -> str:
    return json.dumps({"score": path.score, "nodes": list(path.nodes), "relations": list(path.relations),
                       "coefficients": list(path.coefficients)}, sort_keys=True)


def read_labels(path) -> dict[int, str]:
    """``id label...`` per line; the label is the rest of the line."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split(maxsplit=1)
            if len(parts) == 2:
                out[int(parts[0])] = parts[1]
    return out
