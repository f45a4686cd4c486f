"""Small shared builders for the test-suite."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from relgraph import autodiff as ad
from relgraph.kg import KnowledgeGraph
from relgraph.model import (ModelConfig, as_tensors, bce_with_logits, forward, fresh_bn_stats,
                            init_params)
from relgraph.optim import RngStream
from relgraph.pipeline import PretrainConfig, RetrievalConfig, dataset_from_benchmark
from relgraph.synth import SynthConfig, gen_synthetic

TINY_MODEL = dict(layers=2, d_kb=4, d_w=4, d_r=4, d_v=4, clusters=2, max_doc_tokens=12)
# smallest widths that still exercise every block; keeps finite differences fast
GRAD_MODEL = dict(layers=2, d_kb=3, d_w=2, d_r=2, d_v=3, clusters=2, max_doc_tokens=8)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


def grad_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**GRAD_MODEL, **overrides})


@lru_cache(maxsize=None)
def tiny_data(seed: int, entities: int = 8, dims: str = "tiny"):
    """A benchmark small enough that every question subgraph has <= ``entities`` nodes."""
    config = grad_config() if dims == "grad" else tiny_config()
    bench = gen_synthetic(SynthConfig(entities=entities, relations=2, triples=12, documents=6,
                                      train=4, valid=2, test=2, doc_only_fraction=0.25, seed=seed))
    data = dataset_from_benchmark(bench, config, RetrievalConfig(budget=entities),
                                  PretrainConfig(transe_epochs=5, word_dim=config.d_w), seed=seed)
    return bench, data


def tiny_params(config: ModelConfig, data, seed: int) -> dict[str, np.ndarray]:
    params = init_params(config, len(data.vocab.relation_names), data.entity_init,
                         data.relation_init, RngStream(seed, (7,)))
    rng = RngStream(seed, (8,))
    # start batch-norm away from the identity so its gradients are exercised
    for k in params:
        if k.endswith("bn_scale") or k.endswith("bn_shift"):
            params[k] = params[k] + rng.normal(0, 0.3, size=params[k].shape)
    return params


def loss_fn(inst, config: ModelConfig, vocab, seed: int, training: bool = True):
    """Scalar loss of one instance; dropout masks are redrawn identically every call."""

    def f(p):
        out = forward(inst, p, config, vocab, fresh_bn_stats(config), training,
                      RngStream(seed, (9,)))
        return bce_with_logits(out.logits, inst.labels)

    return f


def random_tensors(rng: np.random.Generator, *shapes) -> list[ad.Tensor]:
    return [ad.Tensor(rng.normal(size=s)) for s in shapes]



def instances(count: int):
    """(instance, data, seed) triples drawn from several tiny benchmarks."""
    out = []
    seed = 0
    while len(out) < count:
        _, data = tiny_data(seed)
        for split in ("train", "valid", "test"):
            out += [(inst, data, seed) for inst in data.splits[split]]
        seed += 1
    return out[:count]


def edge_endpoints(inst, use_docs=True):
    if use_docs and inst.n_pairs:
        a, b = inst.mention_node[inst.pair_i], inst.mention_node[inst.pair_j]
        return np.concatenate([inst.kg_src, a, b]), np.concatenate([inst.kg_dst, b, a])
    return inst.kg_src, inst.kg_dst


def traced(inst, data, seed, config, training=False):
    params = as_tensors(tiny_params(config, data, seed))
    return forward(inst, params, config, data.vocab, fresh_bn_stats(config), training,
                   RngStream(seed, (3,)), keep_trace=True)


# -- independent oracles -------------------------------------------------------


def dense_ppr(n, triples, seeds, damping, iters=5000):
    """Reference: dense matrices, fixed iteration count, no early exit."""
    adj = np.zeros((n, n))
    for s, _, o in triples:
        adj[s, o] += 1
        adj[o, s] += 1
    deg = adj.sum(axis=1)
    restart = np.zeros(n)
    restart[sorted(set(seeds))] = 1
    restart /= restart.sum()
    p = restart.copy()
    for _ in range(iters):
        spread = np.zeros(n)
        for i in range(n):
            if deg[i] == 0:
                spread += p[i] * restart
            else:
                spread += p[i] * adj[i] / deg[i]
        p = (1 - damping) * restart + damping * spread
    return p


def random_kg(rng, n, m):
    kg = KnowledgeGraph()
    for i in range(n):
        kg.entity_id(f"e{i}")
    for _ in range(m):
        s, o = rng.integers(0, n, size=2)
        if s != o:
            kg.add(f"e{s}", f"r{rng.integers(0, 3)}", f"e{o}")
    return kg


def oracle_metrics(probs, labels, ids, threshold):
    """Brute-force reference: explicit confusion matrix and answer sets."""
    confusion = {(p, y): 0 for p in (0, 1) for y in (0, 1)}
    set_scores, hits = [], []
    for p, y, e in zip(probs, labels, ids):
        predicted, gold = set(), set()
        for score, label, ent in zip(p, y, e):
            confusion[(int(score >= threshold), int(label))] += 1
            if score >= threshold:
                predicted.add(ent)
            if label:
                gold.add(ent)
        if not predicted and not gold:
            set_scores.append(1.0)
        else:
            tp = len(predicted & gold)
            prec = tp / len(predicted) if predicted else 0.0
            rec = tp / len(gold) if gold else 0.0
            set_scores.append(0.0 if tp == 0 else 2 * prec * rec / (prec + rec))
        best = max(range(len(p)), key=lambda k: (p[k], -e[k]))
        hits.append(float(y[best] == 1))

    def f1(pos_pred, pos_true):
        tp = confusion[(pos_pred, pos_true)]
        fp = confusion[(pos_pred, 1 - pos_true)]
        fn = confusion[(1 - pos_pred, pos_true)]
        return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)

    micro = f1(1, 1)
    macro = (f1(1, 1) + f1(0, 0)) / 2
    return 100 * micro, 100 * macro, 100 * sum(set_scores) / len(set_scores), \
        100 * sum(hits) / len(hits)


def random_case(rng):
    n_q = int(rng.integers(1, 6))
    probs, labels, ids = [], [], []
    for _ in range(n_q):
        n = int(rng.integers(1, 9))
        # coarse probabilities make ties likely
        probs.append(rng.integers(0, 5, size=n) / 4.0 * 0.9 + 0.05)
        labels.append((rng.random(n) < 0.3).astype(float))
        ids.append(rng.permutation(20)[:n])
    return probs, labels, ids


def toy_kg(seed, entities=20, relations=3, triples=60):
    rng = np.random.default_rng(seed)
    kg = KnowledgeGraph()
    for i in range(entities):
        kg.entity_id(f"e{i}")
    while len(kg.triples) < triples:
        s, o = rng.integers(0, entities, size=2)
        if s != o:
            kg.add(f"e{s}", f"r{rng.integers(0, relations)}", f"e{o}")
    return kg


def translational_kg(seed, entities=20, relations=3, dim=16):
    """Toy KG that a translation model can fit: each (s, r) points at the nearest e_s + r."""
    rng = np.random.default_rng(seed)
    ent = rng.normal(size=(entities, dim))
    ent /= np.linalg.norm(ent, axis=1, keepdims=True)
    rel = rng.normal(size=(relations, dim)) * 0.5
    kg = KnowledgeGraph()
    for i in range(entities):
        kg.entity_id(f"e{i}")
    for k in range(relations):
        for s in range(entities):
            dist = np.linalg.norm(ent[s] + rel[k] - ent, axis=1)
            dist[s] = np.inf
            kg.add(f"e{s}", f"r{k}", f"e{int(np.argmin(dist))}")
    return kg
