"""Finite-difference verification of the analytic gradients of every loss."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .ckg import build_ckg
from .data import random_ckg_data
from .kge import kg_loss, sample_kg_batch
from .oracle import fd_gradient
from .propagation import AGGREGATORS, LayerConfig, forward, init_params
from .training import CFSampler, cf_loss, cf_phase_loss, kg_phase_loss

RTOL, ATOL, STEP = 1e-4, 1e-7, 1e-5


def compare(analytic: dict, numeric: dict) -> tuple[float, int]:
    """Largest ``|a - n| / (atol + rtol |n|)`` over the sampled coordinates, and their count."""
    worst, count = 0.0, 0
    for name, (idx, fd) in numeric.items():
        a = analytic[name].reshape(-1)[idx]
        worst = max(worst, float(np.max(np.abs(a - fd) / (ATOL + RTOL * np.abs(fd)))))
        count += len(idx)
    return worst, count


def check(build_loss, store, rng, n_coords=200):
    """``build_loss(tape)`` -> scalar Var.  Returns ``(worst ratio, coords)``; pass iff ratio <= 1."""
    tape = dc.Tape()
    analytic = tape.backward(build_loss(tape))

    def value():
        return float(build_loss(dc.Tape(record=False)).value)

    numeric = fd_gradient(value, store.params, n_coords=n_coords, eps=STEP, rng=rng,
                          names=list(analytic))
    return compare(analytic, numeric)


def toy_problem(rng, aggregator, depth, d=4):
    inter, kg = random_ckg_data(rng, users=6, items=8, extra_entities=5, relations=3, triples=8,
                                interaction_p=0.3)
    g = build_ckg(inter, kg)
    cfg = LayerConfig(dims=[d] + [d] * depth, aggregator=aggregator)
    store = init_params(g, cfg, rng)
    # Xavier on tiny tables gives O(1) entries already; spread them a little more
    store.params["entity_embedding"] *= 2.0
    return g, inter, cfg, store


def run_suite(seed: int = 0, n_coords: int = 200, lam: float = 0.1) -> list[dict]:
    rng = np.random.default_rng(seed)
    results = []
    for aggregator in AGGREGATORS:
        for depth in (1, 2):
            g, inter, cfg, store = toy_problem(rng, aggregator, depth)
            kg_batch = sample_kg_batch(g, 8, rng)
            cf_batch = CFSampler(inter).sample(8, rng)

            def cf_only(tape):
                _, final, _, _ = forward(tape, g, cfg, store)
                return cf_loss(cf_batch, final, g.num_entities)

            cases = {
                "kg_loss": lambda tape: kg_loss(tape, kg_batch, store),
                "cf_loss": cf_only,
                "kg_objective": lambda tape: kg_phase_loss(tape, g, store, kg_batch, lam),
                "cf_objective": lambda tape: cf_phase_loss(tape, g, store, cf_batch, cfg, lam, training=False),
            }
            for name, fn in cases.items():
                worst, count = check(fn, store, rng, n_coords)
                results.append({"case": f"{name}[{aggregator}, L={depth}]", "max_violation": worst,
                                "coords": count, "passed": worst <= 1.0})
    return results
