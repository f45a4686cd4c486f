"""Training loop, evaluation and the component ablation harness."""
from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .metrics import Metrics, compute_metrics, format_table, tune_threshold
from .model import (ModelConfig, Instance, Vocab, as_tensors, bce_with_logits,
                    encode_documents, forward_batch, fresh_bn_stats, init_params)
from .optim import BatchNormStats, OptimizerState, RngStream, adam_step, clip_by_global_norm, lr_at

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 10
    lr: float = 0.001
    decay_factor: float = 0.8
    decay_period: int = 10
    patience: int = 10
    clip_norm: float = 5.0
    threshold_policy: str = "tune"  # "tune" on validation, or "fixed"
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be at least 1")
        if self.threshold_policy not in ("tune", "fixed"):
            raise ValueError("threshold_policy must be 'tune' or 'fixed'")


@dataclass
class Dataset:
    vocab: Vocab
    splits: dict[str, list[Instance]]
    entity_init: np.ndarray
    relation_init: np.ndarray


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    bn_stats: list[BatchNormStats]
    threshold: float = 0.5


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_f1_avg: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.val_f1_avg:.4f}"


@dataclass
class TrainResult:
    model: TrainedModel
    log: list[EpochLog]
    best_epoch: int
    best_val: float
    epoch_params: list = field(default_factory=list, repr=False)


class EarlyStopping:
    """Tracks the best validation score; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.stale = 0

    def step(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return False
        self.stale += 1
        return self.stale >= self.patience


# -- inference -------------------------------------------------------------------

EVAL_CHUNK = 10



def predict_probabilities(model: TrainedModel, instances: Sequence[Instance], vocab: Vocab,
                          threads: int = 1, chunk: int = EVAL_CHUNK) -> list[np.ndarray]:
    """Eval-mode probabilities per instance.

    Questions run through the batched forward pass in fixed chunks; eval-mode
    batch norm uses running statistics, so grouping does not change the model.
    """
    params = {k: ad.Tensor(v) for k, v in model.params.items()}
    docs = None
    if model.config.doc_relations:
        doc_ids = sorted({d for inst in instances if inst.n_pairs for d in inst.doc_ids})
        if doc_ids:
            docs = encode_documents(doc_ids, vocab, params)

    def run(group):
        outs = forward_batch(group, params, model.config, vocab, model.bn_stats,
                             training=False, docs=docs)
        return [out.probabilities for out in outs]

    groups = [instances[k:k + chunk] for k in range(0, len(instances), chunk)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = list(pool.map(run, groups))
    else:
        done = [run(g) for g in groups]
    return [p for group in done for p in group]


def evaluate(model: TrainedModel, instances: Sequence[Instance], vocab: Vocab,
             threshold: float | None = None, threads: int = 1) -> Metrics:
    probs = predict_probabilities(model, instances, vocab, threads)
    t = model.threshold if threshold is None else threshold
    return compute_metrics(probs, [i.labels for i in instances],
                           [i.entity_ids for i in instances], t)


def tune_model_threshold(model: TrainedModel, instances: Sequence[Instance], vocab: Vocab,
                         threads: int = 1) -> float:
    probs = predict_probabilities(model, instances, vocab, threads)
    return tune_threshold(probs, [i.labels for i in instances], [i.entity_ids for i in instances])


# -- training --------------------------------------------------------------------


def init_model(config: ModelConfig, data: Dataset, seed: int) -> TrainedModel:
    params = init_params(config, len(data.vocab.relation_names), data.entity_init,
                         data.relation_init, RngStream(seed, (1,)))
    return TrainedModel(config, params, fresh_bn_stats(config))


def batch_loss_and_grads(model: TrainedModel, batch: Sequence[Instance], vocab: Vocab,
                         rng: RngStream, training: bool = True):
    """Mean of per-question mean losses over ``batch`` and its parameter gradients."""
    params = as_tensors(model.params)
    with ad.Tape() as tape:
        docs = None
        if model.config.doc_relations:
            doc_ids = sorted({d for inst in batch if inst.n_pairs for d in inst.doc_ids})
            if doc_ids:
                docs = encode_documents(doc_ids, vocab, params)
        outs = forward_batch(batch, params, model.config, vocab, model.bn_stats, training,
                             [rng.child(k) for k in range(len(batch))], docs)
        losses = [bce_with_logits(out.logits, inst.labels) for out, inst in zip(outs, batch)]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        loss = total * (1.0 / len(losses))
    grads = ad.grad(tape, loss, params.values())
    return float(loss.value), dict(zip(params.keys(), grads))


def train(data: Dataset, config: ModelConfig, tc: TrainConfig,
          on_epoch: Callable[[EpochLog], None] | None = None,
          validate: Callable[[TrainedModel], float] | None = None) -> TrainResult:
    """Adam with step decay, per-epoch validation F1_avg and early stopping.

    ``validate`` overrides the validation score (default: F1_avg on the
    validation split at the tuned or fixed threshold).
    """
    train_set, valid_set = data.splits.get("train", []), data.splits.get("valid", [])
    if not train_set or not valid_set:
        raise ValueError("training needs non-empty train and validation splits")
    vocab = data.vocab
    model = init_model(config, data, tc.seed)
    state = OptimizerState(lr=tc.lr)
    rng = RngStream(tc.seed, (2,))
    stopper = EarlyStopping(tc.patience)
    best = copy.deepcopy(model)
    history: list[EpochLog] = []

    valid_labels = [i.labels for i in valid_set]
    valid_ids = [i.entity_ids for i in valid_set]

    def default_validate(m: TrainedModel) -> float:
        probs = predict_probabilities(m, valid_set, vocab)
        if tc.threshold_policy == "tune":
            m.threshold = tune_threshold(probs, valid_labels, valid_ids)
        else:
            m.threshold = tc.threshold
        return compute_metrics(probs, valid_labels, valid_ids, m.threshold).f1_avg

    validate = validate or default_validate
    for epoch in range(tc.max_epochs):
        lr = lr_at(epoch, tc.lr, tc.decay_factor, tc.decay_period)
        order = rng.child(epoch).permutation(len(train_set))
        losses, counts = [], []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [train_set[int(i)] for i in order[start:start + tc.batch_size]]
            try:
                loss, grads = batch_loss_and_grads(model, batch, vocab,
                                                   rng.child(epoch, b + 1))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} batch {b}: loss {loss}")
            grads, _ = clip_by_global_norm(grads, tc.clip_norm)
            model.params = adam_step(model.params, grads, state, lr)
            losses.append(loss)
            counts.append(len(batch))
        train_loss = float(np.average(losses, weights=counts))
        score = validate(model)
        entry = EpochLog(epoch, lr, train_loss, score)
        history.append(entry)
        log.info(entry.line())
        if on_epoch:
            on_epoch(entry)
        if score > stopper.best:
            best = copy.deepcopy(model)
        if stopper.step(epoch, score):
            break
    return TrainResult(best, history, stopper.best_epoch, stopper.best)


# -- ablation --------------------------------------------------------------------

ABLATIONS = [
    ("Document Relations", {"doc_relations": False}),
    ("Bi-Directional Attention", {"bidir_attention": False}),
    ("Graph Coarsening", {"coarsening": False}),
    ("No Mask", {}),
]


@dataclass
class AblationReport:
    rows: list[tuple[str, Metrics]]
    per_seed: dict[str, list[Metrics]]

    def table(self) -> str:
        return format_table(self.rows, label="Masked Component")


def _mean_metrics(ms: Sequence[Metrics]) -> Metrics:
    arr = np.array([m.as_row() for m in ms])
    return Metrics(*arr.mean(axis=0).tolist())


def ablate(data: Dataset, config: ModelConfig, tc: TrainConfig, seeds: Sequence[int],
           split: str = "test", on_run: Callable[[str, int, Metrics], None] | None = None
           ) -> AblationReport:
    rows, per_seed = [], {}
    for name, mask in ABLATIONS:
        cfg = replace(config, **mask)
        results = []
        for seed in seeds:
            result = train(data, cfg, replace(tc, seed=seed))
            m = evaluate(result.model, data.splits[split], data.vocab)
            results.append(m)
            if on_run:
                on_run(name, seed, m)
        per_seed[name] = results
        rows.append((name, _mean_metrics(results)))
    return AblationReport(rows, per_seed)
