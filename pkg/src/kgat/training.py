"""BPR loss, negative sampling and the alternating KG / CF training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .ckg import CollaborativeKG, InteractionSet
from .evaluation import evaluate
from .kge import kg_loss, kg_regularizer, sample_kg_batch
from .propagation import (LayerConfig, LayerRepresentations, forward, forward_all, init_params,
                          layer_weight_names, predict_pairs)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2_lambda: float = 1e-5
    cf_batch_size: int = 1024
    kg_batch_size: int = 1024
    max_epochs: int = 1000
    early_stop_patience: int = 50
    eval_every: int = 1
    eval_k: int = 20
    eval_target: str = "val"   # val | test | train | none
    seed: int = 2019
    use_kge: bool = True
    attention_mode: str = "kg"
    aggregator: str = "bi"
    embed_dim: int = 64
    relation_dim: int = 0      # 0 means "same as embed_dim"
    layer_dims: list[int] = field(default_factory=lambda: [64, 32, 16])
    message_dropout: float = 0.1
    node_dropout: float = 0.0
    leaky_slope: float = 0.2
    attention_per_layer: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float64"
    timing: bool = False
    eval_workers: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise dc.ContractViolation("lr must be > 0")
        if self.l2_lambda < 0:
            raise dc.ContractViolation("l2_lambda must be >= 0")
        if self.early_stop_patience < 1:
            raise dc.ContractViolation("early_stop_patience must be >= 1")
        if self.eval_target not in ("val", "test", "train", "none"):
            raise dc.ContractViolation(f"unknown eval_target {self.eval_target!r}")
        if self.dtype not in ("float64", "float32"):
            raise dc.ContractViolation("dtype must be float64 or float32")
        self.layer_config()  # validates aggregator, attention mode and dropout rates

    def layer_config(self) -> LayerConfig:
        return LayerConfig(
            dims=[self.embed_dim, *self.layer_dims],
            aggregator=self.aggregator,
            attention_mode=self.attention_mode,
            message_dropout=self.message_dropout,
            node_dropout=self.node_dropout,
            leaky_slope=self.leaky_slope,
            attention_per_layer=self.attention_per_layer,
        )

    @property
    def variant(self) -> str:
        if self.use_kge and self.attention_mode == "kg":
            return "full"
        if not self.use_kge and self.attention_mode == "kg":
            return "w/o KGE"
        if self.use_kge:
            return "w/o Att"
        return "w/o K&A"


@dataclass
class CFBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self):
        return len(self.users)


class CFSampler:
    """Uniform (user, consumed item, unconsumed item) triples from the training split."""

    def __init__(self, inter: InteractionSet):
        self.num_items = inter.num_items
        sizes = np.array([len(x) for x in inter.train_pos], dtype=np.int64)
        full = sizes >= inter.num_items
        if full.any():
            log.warning("skipping %d users who consumed every item", int(full.sum()))
        self.users = np.flatnonzero((sizes > 0) & ~full)
        if not len(self.users):
            raise dc.ContractViolation("no user has both a positive and a negative item")
        self.sizes = sizes
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.flat = np.concatenate(inter.train_pos) if inter.num_users else np.zeros(0, np.int64)
        self.keys = np.sort(np.repeat(np.arange(len(sizes)), sizes) * self.num_items + self.flat)

    def _consumed(self, users, items):
        q = users * self.num_items + items
        pos = np.minimum(np.searchsorted(self.keys, q), len(self.keys) - 1)
        return self.keys[pos] == q

    def sample(self, batch_size: int, rng: np.random.Generator) -> CFBatch:
        users = self.users[rng.integers(0, len(self.users), size=batch_size)]
        offs = np.floor(rng.random(batch_size) * self.sizes[users]).astype(np.int64)
        pos = self.flat[self.starts[users] + offs]
        neg = rng.integers(0, self.num_items, size=batch_size)
        bad = self._consumed(users, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self._consumed(users[bad], neg[bad])
        return CFBatch(users, pos, neg)


def sample_cf_batch(inter: InteractionSet, batch_size: int, rng: np.random.Generator,
                    sampler: CFSampler | None = None) -> CFBatch:
    return (sampler or CFSampler(inter)).sample(batch_size, rng)


def cf_loss(batch: CFBatch, final: LayerRepresentations | dc.Var, num_entities: int | None = None) -> dc.Var:
    """Mean BPR loss ``-ln sigmoid(y(u, i) - y(u, j))`` over the batch."""
    if len(batch) == 0:
        raise dc.ContractViolation("cf_loss on an empty batch")
    if isinstance(final, LayerRepresentations):
        num_entities = final.num_entities
        final = final.final_var if final.final_var is not None else dc.Tape(record=False).const(final.final)
    unodes = np.asarray(batch.users) + num_entities
    gap = dc.sub(predict_pairs(final, unodes, batch.pos_items), predict_pairs(final, unodes, batch.neg_items))
    return dc.neg(dc.mean(dc.log_sigmoid(gap)))


def cf_regularizer(tape: dc.Tape, batch: CFBatch, store, num_entities: int, weight_names) -> dc.Var:
    """Batch-mean squared L2 of the batch's layer-0 rows plus squared L2 of the layer weights."""
    E = tape.param(store, "entity_embedding")
    rows = np.concatenate([np.asarray(batch.users) + num_entities, batch.pos_items, batch.neg_items])
    total = dc.scale(dc.squared_l2(dc.gather_rows(E, rows)), 1.0 / len(batch))
    for name in weight_names:
        total = dc.add(total, dc.squared_l2(tape.param(store, name)))
    return total


def total_objective(phase_loss: dc.Var, regularizer: dc.Var | None, l2_lambda: float) -> dc.Var:
    """Phase loss plus ``l2_lambda`` times the phase's regularizer."""
    if l2_lambda < 0:
        raise dc.ContractViolation("l2_lambda must be >= 0")
    if regularizer is None or l2_lambda == 0.0:
        return phase_loss
    return dc.add(phase_loss, dc.scale(regularizer, l2_lambda))


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; ``store`` holds the last good checkpoint."""

    def __init__(self, msg, store, history):
        super().__init__(msg)
        self.store = store
        self.history = history


@dataclass
class TrainResult:
    store: dc.ParameterStore
    history: list[dict]
    header: dict
    best_epoch: int = 0
    best_metric: float | None = None


def kg_phase_loss(tape, g, store, batch, l2_lambda):
    return total_objective(kg_loss(tape, batch, store), kg_regularizer(tape, batch, store), l2_lambda)


def cf_phase_loss(tape, g, store, batch, layer_cfg, l2_lambda, training=True, rng=None):
    _, final, _, _ = forward(tape, g, layer_cfg, store, training=training, rng=rng)
    loss = cf_loss(batch, final, g.num_entities)
    reg = cf_regularizer(tape, batch, store, g.num_entities, layer_weight_names(layer_cfg))
    return total_objective(loss, reg, l2_lambda)


def _finite_step(tape, loss, store, config, phase, epoch, best, history):
    if not np.isfinite(loss.value):
        raise TrainingAborted(f"non-finite {phase} loss at epoch {epoch}", best, history)
    tape.backward(loss, store)
    try:
        dc.adam_step(store, config.lr, config.beta1, config.beta2, config.adam_eps)
    except dc.NonFiniteError as exc:
        raise TrainingAborted(f"epoch {epoch}, {phase} phase: {exc}", best, history) from exc
    store.zero_grad()
    return float(loss.value)


def train(g: CollaborativeKG, inter: InteractionSet, config: TrainConfig, callback=None) -> TrainResult:
    """Alternate one KG pass and one CF pass per epoch; keep the best evaluated checkpoint.

    ``callback(record)`` is invoked after every epoch with that epoch's log record.
    """
    layer_cfg = config.layer_config()
    rng = np.random.default_rng(config.seed)
    store = init_params(g, layer_cfg, rng, relation_dim=config.relation_dim or None,
                        dtype=np.dtype(config.dtype))
    header = {"variant": config.variant, "use_kge": config.use_kge,
              "attention_mode": config.attention_mode, "aggregator": config.aggregator,
              "num_parameters": store.num_parameters(), "config": asdict(config)}
    history: list[dict] = []
    if config.max_epochs <= 0:
        return TrainResult(store, history, header)

    sampler = CFSampler(inter)
    kg_steps = math.ceil(g.num_edges / config.kg_batch_size) if config.use_kge else 0
    cf_steps = math.ceil(inter.num_train / config.cf_batch_size)
    metric_key = f"recall@{config.eval_k}"
    ndcg_key = f"ndcg@{config.eval_k}"
    can_eval = config.eval_target != "none" and (
        config.eval_target != "val" or inter.num_val > 0)
    if config.eval_target == "val" and not inter.num_val:
        log.warning("no validation interactions: keeping the last epoch's parameters")

    best = store.copy()
    best_metric, best_epoch, since_best = -np.inf, 0, 0
    t0 = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        kg_losses = []
        for _ in range(kg_steps):
            batch = sample_kg_batch(g, config.kg_batch_size, rng)
            tape = dc.Tape()
            loss = kg_phase_loss(tape, g, store, batch, config.l2_lambda)
            kg_losses.append(_finite_step(tape, loss, store, config, "KG", epoch, best, history))
        cf_losses = []
        for _ in range(cf_steps):
            batch = sampler.sample(config.cf_batch_size, rng)
            tape = dc.Tape()
            loss = cf_phase_loss(tape, g, store, batch, layer_cfg, config.l2_lambda, True, rng)
            cf_losses.append(_finite_step(tape, loss, store, config, "CF", epoch, best, history))

        record = {"epoch": epoch,
                  "kg_loss": float(np.mean(kg_losses)) if kg_losses else None,
                  "cf_loss": float(np.mean(cf_losses)),
                  metric_key: None, ndcg_key: None,
                  "elapsed_s": round(time.perf_counter() - t0, 3) if config.timing else None}
        stop = False
        if can_eval and epoch % config.eval_every == 0:
            reps = forward_all(g, layer_cfg, store)
            res = evaluate(reps, inter, ks=(config.eval_k,), target=config.eval_target,
                           workers=config.eval_workers)["metrics"]
            record[metric_key], record[ndcg_key] = res[metric_key], res[ndcg_key]
            if res[metric_key] > best_metric:
                best_metric, best_epoch, since_best = res[metric_key], epoch, 0
                best = store.copy()
            else:
                since_best += config.eval_every
                stop = since_best >= config.early_stop_patience
        history.append(record)
        if callback is not None:
            callback(record)
        if stop:
            log.info("early stop at epoch %d (best %s=%.4f at epoch %d)", epoch, metric_key,
                     best_metric, best_epoch)
            break

    if not can_eval:
        return TrainResult(store, history, header, best_epoch=len(history))
    return TrainResult(best, history, header, best_epoch, float(best_metric))
