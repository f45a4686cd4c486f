"""Glue from raw records (KG, documents, questions) to compiled training data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoders import EmbeddingTable, build_word_table, relation_tokens, train_transe
from .kg import Document, KnowledgeGraph, Mention, QuestionInstance, QuestionSubgraph, link_documents
from .model import ModelConfig, Vocab, compile_instance
from .optim import RngStream
from .retrieval import doc_entity_index, extract_subgraph, transition_matrix
from .train import Dataset


@dataclass
class RetrievalConfig:
    budget: int = 50
    damping: float = 0.8
    tol: float = 1e-8
    max_iter: int = 1000
    link_noise: float = 0.0


@dataclass
class PretrainConfig:
    transe_epochs: int = 200
    transe_margin: float = 0.25
    transe_lr: float = 0.1
    word_dim: int = 16


def vocabulary(documents: Sequence[Document], questions: Sequence[QuestionInstance],
               kg: KnowledgeGraph) -> set[str]:
    """Lower-cased words of documents, questions and relation names.

    Entity names are left out so their surface tokens share the OOV vector:
    the model then has to recognise entities through mentions and the graph
    instead of memorising one random vector per name.
    """
    words = set()
    for d in documents:
        words.update(t.lower() for t in d.tokens)
    for q in questions:
        words.update(t.lower() for t in q.tokens)
    for r in kg.relation_names:
        words.update(relation_tokens(r))
    return words - {name.lower() for name in kg.entity_names}


def pretrain(kg: KnowledgeGraph, documents, questions, d_kb: int, pc: PretrainConfig,
             seed: int) -> tuple[EmbeddingTable, EmbeddingTable, EmbeddingTable]:
    rng = RngStream(seed, (10,))
    transe = train_transe(kg, d_kb, pc.transe_margin, pc.transe_epochs, pc.transe_lr,
                          rng.child(1))
    words = build_word_table(vocabulary(documents, questions, kg), pc.word_dim, rng.child(2))
    return transe.entities, transe.relations, words


def link(kg, documents, rc: RetrievalConfig, seed: int) -> list[Mention]:
    rng = RngStream(seed, (11,)) if rc.link_noise > 0 else None
    return link_documents(kg, documents, rc.link_noise, rng)


def build_subgraphs(kg: KnowledgeGraph, questions: Sequence[QuestionInstance],
                    mentions: Sequence[Mention], rc: RetrievalConfig) -> list[QuestionSubgraph]:
    index = doc_entity_index(mentions)
    walk = transition_matrix(kg)
    return [extract_subgraph(kg, q, rc.budget, index, rc.damping, rc.tol, rc.max_iter, walk)
            for q in questions]


def build_dataset(kg: KnowledgeGraph, documents: Sequence[Document], mentions: Sequence[Mention],
                  splits: Mapping[str, Sequence[QuestionInstance]],
                  subgraphs: Mapping[str, Sequence[QuestionSubgraph]],
                  entity_table: EmbeddingTable, relation_table: EmbeddingTable,
                  words: EmbeddingTable, config: ModelConfig) -> Dataset:
    vocab = Vocab.build(kg, words, documents, mentions, config.max_doc_tokens)
    compiled = {}
    for split, questions in splits.items():
        by_id = {g.question: g for g in subgraphs[split]}
        compiled[split] = [compile_instance(by_id[q.id], q, vocab) for q in questions]
    ent = entity_table.matrix(kg.entity_names)
    rel = relation_table.matrix(kg.relation_names)
    return Dataset(vocab, compiled, ent, rel)


def dataset_from_benchmark(bench, config: ModelConfig, rc: RetrievalConfig | None = None,
                           pc: PretrainConfig | None = None, seed: int = 0) -> Dataset:
    rc = rc or RetrievalConfig()
    pc = pc or PretrainConfig(word_dim=config.d_w)
    kg, docs = bench.kg, bench.documents
    mentions = link(kg, docs, rc, seed)
    questions = [q for qs in bench.splits.values() for q in qs]
    ent, rel, words = pretrain(kg, docs, questions, config.d_kb, pc, seed)
    graphs = {s: build_subgraphs(kg, qs, mentions, rc) for s, qs in bench.splits.items()}
    return build_dataset(kg, docs, mentions, bench.splits, graphs, ent, rel, words, config)


def entity_matrix(table: EmbeddingTable, names: Sequence[str]) -> np.ndarray:
    return table.matrix(names)
