"""Relational graph network: documents as relations, bi-directional attention,
soft-cluster coarsening and the per-node readout."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EmbeddingTable, encode_batch, init_lstm_params, relation_tokens
from .kg import Document, KnowledgeGraph, Mention, QuestionInstance, QuestionSubgraph
from .optim import BatchNormStats, RngStream, batch_norm, dropout


@dataclass
class ModelConfig:
    layers: int = 3
    d_kb: int = 16
    d_w: int = 16
    d_r: int = 16
    d_v: int = 16
    clusters: int = 8
    max_doc_tokens: int = 64
    dropout: float = 0.2
    batch_norm: bool = True
    seed_marker: bool = True
    doc_relations: bool = True
    bidir_attention: bool = True
    coarsening: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.clusters < 1:
            raise ValueError("layers and clusters must be at least 1")
        if min(self.d_kb, self.d_w, self.d_r, self.d_v, self.max_doc_tokens) < 1:
            raise ValueError("all dimensions must be at least 1")
        if self.d_w % 2:
            raise ValueError("d_w must be even (two LSTM directions of d_w / 2)")
        if self.d_r != self.d_w:
            raise ValueError("query attention compares relation and query vectors: d_r must equal d_w")

    def masked(self, **masks) -> "ModelConfig":
        return replace(self, **masks)


# -- vocabulary and instance compilation -------------------------------------------


@dataclass
class Vocab:
    """Everything needed to turn raw records into index arrays."""

    entity_names: list[str]
    relation_names: list[str]
    words: EmbeddingTable
    documents: dict[str, np.ndarray]  # doc id -> word ids
    mentions: dict[str, list[tuple[int, tuple[int, ...]]]]  # doc id -> [(entity, positions)]
    word_matrix: np.ndarray = field(init=False)
    relation_word_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        # row 0 is the OOV vector
        self.word_matrix = np.vstack([self.words.oov[None, :], self.words.vectors])
        self.relation_word_mean = np.stack([
            self.word_matrix[self.word_ids(relation_tokens(r))].mean(axis=0)
            if relation_tokens(r) else np.zeros(self.words.dim)
            for r in self.relation_names]).reshape(len(self.relation_names), self.words.dim)

    def word_ids(self, tokens: Sequence[str]) -> np.ndarray:
        idx = self.words.index
        return np.array([idx[t] + 1 if t in idx else 0 for t in tokens], dtype=np.int64)

    @classmethod
    def build(cls, kg: KnowledgeGraph, words: EmbeddingTable, documents: Sequence[Document],
              mentions: Sequence[Mention], max_doc_tokens: int) -> "Vocab":
        vocab = cls(kg.entity_names, kg.relation_names, words, {}, {})
        for d in documents:
            vocab.documents[d.id] = vocab.word_ids([t.lower() for t in d.tokens[:max_doc_tokens]])
        for m in mentions:
            if m.doc not in vocab.documents:
                continue
            pos = tuple(p for p in m.positions if p < len(vocab.documents[m.doc]))
            if pos:
                vocab.mentions.setdefault(m.doc, []).append((m.entity, pos))
        return vocab


@dataclass
class Instance:
    """Index-array form of one question subgraph (node order = ``entity_ids``)."""

    qid: str
    entity_ids: np.ndarray
    seed_mask: np.ndarray
    labels: np.ndarray
    query: np.ndarray
    kg_src: np.ndarray
    kg_rel: np.ndarray
    kg_dst: np.ndarray
    doc_ids: list[str]
    doc_tokens: list[np.ndarray]
    mention_doc: np.ndarray  # per mention: local document index
    mention_node: np.ndarray  # per mention: local node index
    token_doc: np.ndarray  # per mention position: local document index
    token_pos: np.ndarray  # per mention position: position inside that document
    token_mention: np.ndarray  # per mention position: mention index
    pair_doc: np.ndarray
    pair_i: np.ndarray  # mention index of the first entity
    pair_j: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.entity_ids)

    @property
    def n_pairs(self) -> int:
        return len(self.pair_doc)


def compile_instance(graph: QuestionSubgraph, question: QuestionInstance, vocab: Vocab,
                     node_order: Sequence[int] | None = None) -> Instance:
    nodes = list(graph.nodes) if node_order is None else list(node_order)
    local = {v: i for i, v in enumerate(nodes)}
    label_of = dict(zip(graph.nodes, graph.labels))
    edges = sorted(graph.edges)
    seeds = set(question.seeds)

    doc_ids = sorted({d for _, _, d in graph.doc_pairs if d in vocab.documents})
    doc_local = {d: k for k, d in enumerate(doc_ids)}
    mention_doc, mention_node = [], []
    token_doc, token_pos, token_mention = [], [], []
    mention_index: dict[tuple[int, int], int] = {}
    for d in doc_ids:
        for ent, positions in vocab.mentions.get(d, []):
            if ent not in local:
                continue
            mention_index[(doc_local[d], ent)] = len(mention_doc)
            for p in positions:
                token_doc.append(doc_local[d])
                token_pos.append(p)
                token_mention.append(len(mention_doc))
            mention_doc.append(doc_local[d])
            mention_node.append(local[ent])

    pair_doc, pair_i, pair_j = [], [], []
    for a, b, d in sorted(graph.doc_pairs, key=lambda x: (x[2], x[0], x[1])):
        if a == b:
            raise ValueError("self document relation")
        k = doc_local.get(d)
        if k is None or (k, a) not in mention_index or (k, b) not in mention_index:
            continue
        pair_doc.append(k)
        pair_i.append(mention_index[(k, a)])
        pair_j.append(mention_index[(k, b)])

    ints = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return Instance(
        qid=graph.question,
        entity_ids=ints(nodes),
        seed_mask=np.array([1.0 if v in seeds else 0.0 for v in nodes]),
        labels=np.array([float(label_of[v]) for v in nodes]),
        query=vocab.word_ids([t.lower() for t in question.tokens]),
        kg_src=ints([local[s] for s, _, _ in edges]),
        kg_rel=ints([r for _, r, _ in edges]),
        kg_dst=ints([local[o] for _, _, o in edges]),
        doc_ids=doc_ids,
        doc_tokens=[vocab.documents[d] for d in doc_ids],
        mention_doc=ints(mention_doc), mention_node=ints(mention_node),
        token_doc=ints(token_doc), token_pos=ints(token_pos), token_mention=ints(token_mention),
        pair_doc=ints(pair_doc), pair_i=ints(pair_i), pair_j=ints(pair_j),
    )


def without_documents(inst: Instance) -> Instance:
    empty = np.zeros(0, dtype=np.int64)
    return replace(inst, doc_ids=[], doc_tokens=[], mention_doc=empty, mention_node=empty,
                   token_doc=empty, token_pos=empty, token_mention=empty,
                   pair_doc=empty, pair_i=empty, pair_j=empty)


# -- parameters ------------------------------------------------------------------


def readout_width(config: ModelConfig) -> int:
    if not config.coarsening:
        return config.d_v
    return config.d_kb + config.layers * config.d_v


# the seed marker starts large enough to stand out against TransE-initialised states
SEED_GAIN = 4.0


def _uniform(rng: RngStream, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, n_relations: int, entity_init: np.ndarray,
                relation_init: np.ndarray, rng: RngStream) -> dict[str, np.ndarray]:
    """Fresh parameter arrays; weights are uniform in +-1/sqrt(fan_in), no biases."""
    c = config
    p: dict[str, np.ndarray] = {
        "entity": np.array(entity_init, dtype=np.float64),
        "relation": np.array(relation_init, dtype=np.float64).reshape(n_relations, c.d_kb),
        "W_r0": _uniform(rng, c.d_kb + c.d_w, (c.d_kb + c.d_w, c.d_r)),
        "W_seed": SEED_GAIN * _uniform(rng, c.d_w, (c.d_w, c.d_kb)),
    }
    p.update(init_lstm_params(c.d_w, c.d_w // 2, rng))
    for layer in range(c.layers):
        d_in = c.d_kb if layer == 0 else c.d_v
        pre = f"layer{layer}."
        p[pre + "W_dr"] = _uniform(rng, 3 * c.d_w, (3 * c.d_w, c.d_r))
        p[pre + "W_r"] = _uniform(rng, c.d_r, (c.d_r, c.d_v))
        p[pre + "W_v"] = _uniform(rng, d_in, (d_in, c.d_v))
        p[pre + "W_in"] = _uniform(rng, c.d_v, (c.d_v, c.d_v))
        p[pre + "W_out"] = _uniform(rng, c.d_v, (c.d_v, c.d_v))
        p[pre + "W_c"] = _uniform(rng, d_in, (d_in, c.clusters))
        if layer < c.layers - 1:
            p[pre + "W_doc"] = _uniform(rng, c.d_v, (c.d_v, c.d_w))
        p[pre + "bn_scale"] = np.ones(c.d_v)
        p[pre + "bn_shift"] = np.zeros(c.d_v)
    width = readout_width(c)
    p["W_final"] = _uniform(rng, width, (width, 1))
    return p


def fresh_bn_stats(config: ModelConfig) -> list[BatchNormStats]:
    return [BatchNormStats.fresh(config.d_v) for _ in range(config.layers)]


def as_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


# -- building blocks ---------------------------------------------------------------


def entity_doc_rep(token_states: Tensor, token_rows: np.ndarray, token_mention: np.ndarray,
                   n_mentions: int) -> Tensor:
    """Per mention, the sum of the token states at that entity's positions."""
    return ad.segment_sum(ad.take(token_states, token_rows), token_mention, n_mentions)


def doc_relation_embed(rep_i: Tensor, doc_vec: Tensor, rep_j: Tensor,
                       w_dr: Tensor) -> tuple[Tensor, Tensor]:
    """(i -> j, j -> i) document relation embeddings for aligned rows of pairs."""
    fwd = ad.relu(ad.concat([rep_i, doc_vec, rep_j], axis=1) @ w_dr)
    bwd = ad.relu(ad.concat([rep_j, doc_vec, rep_i], axis=1) @ w_dr)
    return fwd, bwd


def edge_embed(h_r: Tensor, h_neighbor: Tensor, direction: str, w_r: Tensor,
               w_v: Tensor) -> Tensor:
    """Row-wise edge message; inward edges see the negated relation vector."""
    rel = h_r @ w_r
    if direction == "in":
        rel = -rel
    elif direction != "out":
        raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
    return ad.relu(rel + h_neighbor @ w_v)


def doc_update(tok_states: Tensor, h: Tensor, w_doc: Tensor, position_rows: np.ndarray,
               position_node: np.ndarray, tok_of_doc: np.ndarray) -> tuple[Tensor, Tensor]:
    """Add W_doc-projected node states at mention positions; return tokens and doc means.

    ``position_rows[k]`` is a token row and ``position_node[k]`` the node mentioned there.
    """
    n_tokens = tok_states.shape[0]
    inject = ad.take(h @ w_doc, position_node)
    tokens = tok_states + ad.segment_sum(inject, position_rows, n_tokens)
    n_docs = int(tok_of_doc.max()) + 1 if n_tokens else 0
    inv_len = 1.0 / np.bincount(tok_of_doc, minlength=n_docs)[:, None].astype(np.float64)
    return tokens, ad.segment_sum(tokens, tok_of_doc, n_docs) * inv_len


def cluster_assign(h: Tensor, w_c: Tensor) -> Tensor:
    return ad.softmax_rows(h @ w_c)


def coarse_rep(h: Tensor, w_c: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Soft assignment C, centroids C^T H and the node view C (C^T H)."""
    c = cluster_assign(h, w_c)
    centroids = c.T @ h
    return c, centroids, c @ centroids


def readout(blocks: Sequence[Tensor], w_final: Tensor) -> Tensor:
    """Per-node logits from the concatenated blocks (apply sigmoid for probabilities)."""
    z = blocks[0] if len(blocks) == 1 else ad.concat(list(blocks), axis=1)
    return ad.reshape(z @ w_final, (-1,))


# -- forward pass ------------------------------------------------------------------


@dataclass
class DocEncoding:
    tokens: Tensor
    glob: Tensor
    offsets: np.ndarray
    index: dict[str, int]


def encode_documents(doc_ids: Sequence[str], vocab: Vocab, params: dict[str, Tensor]) -> DocEncoding:
    doc_ids = list(doc_ids)
    tokens, glob, offsets = encode_batch([vocab.documents[d] for d in doc_ids],
                                         vocab.word_matrix, params)
    return DocEncoding(tokens, glob, offsets, {d: k for k, d in enumerate(doc_ids)})


@dataclass
class ForwardResult:
    logits: Tensor
    trace: dict = field(default_factory=dict)

    @property
    def probabilities(self) -> np.ndarray:
        return ad._stable_sigmoid(self.logits.value)


def forward(inst: Instance, params: dict[str, Tensor], config: ModelConfig, vocab: Vocab,
            bn_stats: list[BatchNormStats] | None = None, training: bool = False,
            rng: RngStream | None = None, docs: DocEncoding | None = None,
            keep_trace: bool = False) -> ForwardResult:
    """Per-node logits of one instance; batch norm sees only this instance's nodes."""
    return forward_lockstep([inst], params, config, vocab, bn_stats, training,
                            [rng] if rng is not None else None, docs, keep_trace)[0]


def forward_lockstep(instances: Sequence[Instance], params: dict[str, Tensor], config: ModelConfig,
                  vocab: Vocab, bn_stats: list[BatchNormStats] | None = None,
                  training: bool = False, rngs: Sequence[RngStream] | None = None,
                  docs: DocEncoding | None = None, keep_trace: bool = False
                  ) -> list[ForwardResult]:
    """Run several instances layer by layer in lockstep, one graph at a time.

    Batch norm pools the nodes of all instances, so in training the
    statistics (and one running-average update per layer) cover the batch.
    This is the reference for :func:`forward_batch` and the only path that
    records traces.
    """
    if bn_stats is None:
        bn_stats = fresh_bn_stats(config)
    steps = [_forward_steps(inst, params, config, vocab, training,
                            rngs[k] if rngs is not None else None, docs, keep_trace)
             for k, inst in enumerate(instances)]
    results: list = [None] * len(steps)
    pending: dict[int, tuple[int, Tensor]] = {}

    def advance(k: int, value=None):
        try:
            pending[k] = steps[k].send(value)
        except StopIteration as done:
            results[k] = done.value

    for k in range(len(steps)):
        advance(k)
    while pending:
        order = sorted(pending)
        layer = pending[order[0]][0]
        pre = f"layer{layer}."
        blocks = [pending.pop(k)[1] for k in order]
        joined = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
        normed = batch_norm(joined, params[pre + "bn_scale"], params[pre + "bn_shift"],
                            bn_stats[layer], training)
        start = 0
        for k, block in zip(order, blocks):
            stop = start + block.shape[0]
            advance(k, normed if len(blocks) == 1 else ad.take(normed, np.arange(start, stop)))
            start = stop
    return results


@dataclass
class _Merged:
    """Disjoint union of several instances with globally offset indices."""

    n_nodes: int
    node_offsets: np.ndarray
    graph_of_node: np.ndarray
    entity_ids: np.ndarray
    seed_mask: np.ndarray
    kg_src: np.ndarray
    kg_rel: np.ndarray
    kg_dst: np.ndarray
    doc_ids: list[str]  # one entry per (instance, document) occurrence
    mention_node: np.ndarray
    token_doc: np.ndarray  # per mention position: merged document index
    token_pos: np.ndarray
    token_mention: np.ndarray
    pair_doc: np.ndarray
    pair_i: np.ndarray
    pair_j: np.ndarray


def _merge(instances: Sequence[Instance], use_docs: bool) -> _Merged:
    sizes = np.array([inst.n_nodes for inst in instances], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parts: dict[str, list] = {k: [] for k in ("kg_src", "kg_rel", "kg_dst", "mention_node",
                                              "token_doc", "token_pos", "token_mention",
                                              "pair_doc", "pair_i", "pair_j")}
    doc_ids: list[str] = []
    n_mentions = 0
    for k, inst in enumerate(instances):
        off = offsets[k]
        parts["kg_src"].append(inst.kg_src + off)
        parts["kg_rel"].append(inst.kg_rel)
        parts["kg_dst"].append(inst.kg_dst + off)
        if not (use_docs and inst.n_pairs):
            continue
        n_docs = len(doc_ids)
        doc_ids += inst.doc_ids
        parts["mention_node"].append(inst.mention_node + off)
        parts["token_doc"].append(inst.token_doc + n_docs)
        parts["token_pos"].append(inst.token_pos)
        parts["token_mention"].append(inst.token_mention + n_mentions)
        parts["pair_doc"].append(inst.pair_doc + n_docs)
        parts["pair_i"].append(inst.pair_i + n_mentions)
        parts["pair_j"].append(inst.pair_j + n_mentions)
        n_mentions += len(inst.mention_doc)
    joined = {k: np.concatenate(v) if v else np.zeros(0, dtype=np.int64)
              for k, v in parts.items()}
    return _Merged(
        n_nodes=int(offsets[-1]), node_offsets=offsets,
        graph_of_node=np.repeat(np.arange(len(instances)), sizes),
        entity_ids=np.concatenate([inst.entity_ids for inst in instances]),
        seed_mask=np.concatenate([inst.seed_mask for inst in instances]),
        doc_ids=doc_ids, **joined)


def forward_batch(instances: Sequence[Instance], params: dict[str, Tensor], config: ModelConfig,
                  vocab: Vocab, bn_stats: list[BatchNormStats] | None = None,
                  training: bool = False, rngs: Sequence[RngStream] | None = None,
                  docs: DocEncoding | None = None) -> list[ForwardResult]:
    """Forward pass over the disjoint union of ``instances`` as one graph.

    Computes what :func:`forward_lockstep` computes (batch norm pooled over
    every node of the batch, per-instance dropout streams) with one set of
    array operations per layer instead of one per instance.
    """
    c = config
    if bn_stats is None:
        bn_stats = fresh_bn_stats(c)
    m = _merge(instances, c.doc_relations)
    n, batch = m.n_nodes, len(instances)

    _, h_q, _ = encode_batch([inst.query for inst in instances], vocab.word_matrix, params)
    h = ad.take(params["entity"], m.entity_ids)
    if c.seed_marker and m.seed_mask.any():
        marker = ad.take(h_q @ params["W_seed"], m.graph_of_node)
        h = h + Tensor(m.seed_mask[:, None]) * marker

    rel_static = ad.relu(ad.concat([params["relation"], Tensor(vocab.relation_word_mean)],
                                   axis=1) @ params["W_r0"])
    kg_rel = ad.take(rel_static, m.kg_rel)

    use_docs = len(m.pair_doc) > 0
    src, dst = m.kg_src, m.kg_dst
    if use_docs:
        if docs is None:
            docs = encode_documents(sorted(set(m.doc_ids)), vocab, params)
        rows = np.array([docs.index[d] for d in m.doc_ids], dtype=np.int64)
        starts = docs.offsets[rows]
        lengths = docs.offsets[rows + 1] - starts
        tok_rows = np.concatenate([np.arange(s, s + ln) for s, ln in zip(starts, lengths)])
        tok_states = ad.take(docs.tokens, tok_rows)  # private copy per (instance, document)
        local_start = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        tok_of_doc = np.repeat(np.arange(len(rows)), lengths)
        doc_vec = ad.take(docs.glob, rows)
        mention_rows = local_start[m.token_doc] + m.token_pos
        n_mentions = len(m.mention_node)
        node_i, node_j = m.mention_node[m.pair_i], m.mention_node[m.pair_j]
        src = np.concatenate([src, node_i, node_j])
        dst = np.concatenate([dst, node_j, node_i])
    edge_graph = m.graph_of_node[dst]
    n_edges = len(src)

    alpha_q_in = alpha_q_out = None
    vc_blocks = []
    k_c = c.clusters
    for layer in range(c.layers):
        pre = f"layer{layer}."
        if c.coarsening:
            assign = cluster_assign(h, params[pre + "W_c"])
            d = h.shape[1]
            outer = ad.reshape(assign, (n, k_c, 1)) * ad.reshape(h, (n, 1, d))
            centroids = ad.segment_sum(ad.reshape(outer, (n, k_c * d)), m.graph_of_node, batch)
            mine = ad.take(ad.reshape(centroids, (batch, k_c, d)), m.graph_of_node)
            vc_blocks.append(ad.sum(ad.reshape(assign, (n, k_c, 1)) * mine, axis=1))

        if use_docs:
            rep = entity_doc_rep(tok_states, mention_rows, m.token_mention, n_mentions)
            fwd, bwd = doc_relation_embed(ad.take(rep, m.pair_i), ad.take(doc_vec, m.pair_doc),
                                          ad.take(rep, m.pair_j), params[pre + "W_dr"])
            rel = ad.concat([kg_rel, fwd, bwd], axis=0)
        else:
            rel = kg_rel

        if layer == 0 and n_edges:
            q_logits = ad.sum(rel * ad.take(h_q, edge_graph), axis=1)
            alpha_q_in = ad.segment_softmax(q_logits, dst, n)
            alpha_q_out = ad.segment_softmax(q_logits, src, n)

        hv = h @ params[pre + "W_v"]
        update = hv
        if n_edges:
            a = rel @ params[pre + "W_r"]
            nb_in = ad.take(hv, src)
            msg_in = ad.relu(nb_in - a)
            if c.bidir_attention:
                inv_in = ad.relu(nb_in + a)
                alpha_g_in = ad.segment_softmax(ad.sum(msg_in * inv_in, axis=1), dst, n)
                weight_in = alpha_q_in + alpha_g_in
                nb_out = ad.take(hv, dst)
                msg_out = ad.relu(nb_out + a)
                inv_out = ad.relu(nb_out - a)
                alpha_g_out = ad.segment_softmax(ad.sum(msg_out * inv_out, axis=1), src, n)
                weight_out = alpha_q_out + alpha_g_out
                agg_out = ad.segment_sum(ad.reshape(weight_out, (-1, 1)) * msg_out, src, n)
                update = update + agg_out @ params[pre + "W_out"]
            else:
                weight_in = alpha_q_in
            agg_in = ad.segment_sum(ad.reshape(weight_in, (-1, 1)) * msg_in, dst, n)
            update = update + agg_in @ params[pre + "W_in"]

        h = ad.relu(update)
        if c.batch_norm:
            h = batch_norm(h, params[pre + "bn_scale"], params[pre + "bn_shift"],
                           bn_stats[layer], training)
        if c.dropout > 0 and training:
            keep = np.concatenate([rngs[k].child(layer).random((inst.n_nodes, h.shape[1]))
                                   for k, inst in enumerate(instances)]) >= c.dropout
            h = h * (keep / (1.0 - c.dropout))

        if use_docs and layer < c.layers - 1:
            tok_states, doc_vec = doc_update(tok_states, h, params[pre + "W_doc"], mention_rows,
                                             m.mention_node[m.token_mention], tok_of_doc)

    blocks = vc_blocks + [h] if c.coarsening else [h]
    logits = readout(blocks, params["W_final"])
    return [ForwardResult(ad.take(logits, np.arange(m.node_offsets[k], m.node_offsets[k + 1])))
            for k in range(batch)]


def _forward_steps(inst: Instance, params: dict[str, Tensor], config: ModelConfig, vocab: Vocab,
                   training: bool, rng: RngStream | None, docs: DocEncoding | None,
                   keep_trace: bool):
    """Generator over layers: yields ``(layer, pre-norm states)`` when batch norm is on and
    expects the normalized states back; returns the ForwardResult."""
    c = config
    n = inst.n_nodes
    trace: dict = {"alpha_q": [], "alpha_gat": [], "C": [], "H_c": [], "H_vc": [], "H_v": [],
                   "doc_rel": []} if keep_trace else {}
    words = vocab.word_matrix

    q_tokens, q_glob, _ = encode_batch([inst.query], words, params)
    h_q = q_glob  # (1, d_w)

    h = ad.take(params["entity"], inst.entity_ids)
    if c.seed_marker and inst.seed_mask.any():
        h = h + Tensor(inst.seed_mask[:, None]) * (h_q @ params["W_seed"])

    rel_static = ad.relu(ad.concat([params["relation"], Tensor(vocab.relation_word_mean)],
                                   axis=1) @ params["W_r0"])
    kg_rel = ad.take(rel_static, inst.kg_rel)

    use_docs = c.doc_relations and inst.n_pairs > 0
    if use_docs:
        if docs is None:
            docs = encode_documents(inst.doc_ids, vocab, params)
        rows = np.array([docs.index[d] for d in inst.doc_ids], dtype=np.int64)
        starts = docs.offsets[rows]
        lengths = docs.offsets[rows + 1] - starts
        tok_rows = np.concatenate([np.arange(s, s + ln) for s, ln in zip(starts, lengths)])
        tok_states = ad.take(docs.tokens, tok_rows)  # this instance's documents only
        local_start = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        tok_of_doc = np.repeat(np.arange(len(rows)), lengths)
        doc_vec = ad.take(docs.glob, rows)
        mention_rows = local_start[inst.token_doc] + inst.token_pos
        n_mentions = len(inst.mention_doc)

    src = np.concatenate([inst.kg_src, inst.mention_node[inst.pair_i],
                          inst.mention_node[inst.pair_j]]) if use_docs else inst.kg_src
    dst = np.concatenate([inst.kg_dst, inst.mention_node[inst.pair_j],
                          inst.mention_node[inst.pair_i]]) if use_docs else inst.kg_dst
    n_edges = len(src)

    alpha_q_in = alpha_q_out = None
    vc_blocks = []
    for layer in range(c.layers):
        pre = f"layer{layer}."
        if c.coarsening:
            assign, centroids, h_vc = coarse_rep(h, params[pre + "W_c"])
            vc_blocks.append(h_vc)
            if keep_trace:
                trace["C"].append(assign.value)
                trace["H_c"].append(centroids.value)
                trace["H_vc"].append(h_vc.value)
        if keep_trace:
            trace["H_v"].append(h.value)

        if use_docs:
            rep = entity_doc_rep(tok_states, mention_rows, inst.token_mention, n_mentions)
            fwd, bwd = doc_relation_embed(ad.take(rep, inst.pair_i), ad.take(doc_vec, inst.pair_doc),
                                          ad.take(rep, inst.pair_j), params[pre + "W_dr"])
            rel = ad.concat([kg_rel, fwd, bwd], axis=0)
            if keep_trace:
                trace["doc_rel"].append((fwd.value, bwd.value))
        else:
            rel = kg_rel

        if layer == 0:
            # query attention only ever sees layer-0 relation vectors
            q_logits = ad.reshape(rel @ ad.transpose(h_q), (-1,))
            alpha_q_in = ad.segment_softmax(q_logits, dst, n)
            alpha_q_out = ad.segment_softmax(q_logits, src, n)

        hv = h @ params[pre + "W_v"]
        update = hv
        if n_edges:
            a = rel @ params[pre + "W_r"]
            nb_in = ad.take(hv, src)
            msg_in = ad.relu(nb_in - a)
            if c.bidir_attention:
                inv_in = ad.relu(nb_in + a)
                alpha_g_in = ad.segment_softmax(ad.sum(msg_in * inv_in, axis=1), dst, n)
                weight_in = alpha_q_in + alpha_g_in
                nb_out = ad.take(hv, dst)
                msg_out = ad.relu(nb_out + a)
                inv_out = ad.relu(nb_out - a)
                alpha_g_out = ad.segment_softmax(ad.sum(msg_out * inv_out, axis=1), src, n)
                weight_out = alpha_q_out + alpha_g_out
                agg_out = ad.segment_sum(ad.reshape(weight_out, (-1, 1)) * msg_out, src, n)
                update = update + agg_out @ params[pre + "W_out"]
                if keep_trace:
                    trace["alpha_gat"].append((alpha_g_in.value, alpha_g_out.value))
            else:
                weight_in = alpha_q_in
            agg_in = ad.segment_sum(ad.reshape(weight_in, (-1, 1)) * msg_in, dst, n)
            update = update + agg_in @ params[pre + "W_in"]
        if keep_trace:
            trace["alpha_q"].append((alpha_q_in.value if alpha_q_in is not None else None,
                                     alpha_q_out.value if alpha_q_out is not None else None))

        h = ad.relu(update)
        if c.batch_norm:
            h = yield layer, h
        if c.dropout > 0 and training:
            h = dropout(h, c.dropout, rng.child(layer), training)

        if use_docs and layer < c.layers - 1:
            tok_states, doc_vec = doc_update(tok_states, h, params[pre + "W_doc"], mention_rows,
                                             inst.mention_node[inst.token_mention], tok_of_doc)

    if keep_trace:
        trace["H_v"].append(h.value)
    blocks = vc_blocks + [h] if c.coarsening else [h]
    return ForwardResult(readout(blocks, params["W_final"]), trace)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy, evaluated stably from logits."""
    if logits.shape[0] != len(labels):
        raise ValueError("logits and labels differ in length")
    return ad.mean(ad.softplus(logits) - logits * Tensor(labels))


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(values: dict) -> ModelConfig:
    names = {f.name: f.type for f in fields(ModelConfig)}
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"unknown model keys: {sorted(unknown)}")
    return ModelConfig(**values)
