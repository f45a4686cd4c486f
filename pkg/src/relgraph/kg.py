"""Knowledge graph, documents, mentions and questions, plus their TSV formats."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class KnowledgeGraph:
    entities: dict[str, int] = field(default_factory=dict)
    relations: dict[str, int] = field(default_factory=dict)
    triples: list[tuple[int, int, int]] = field(default_factory=list)
    duplicates_dropped: int = 0

    def __post_init__(self):
        self._seen = set(self.triples)

    def entity_id(self, name: str) -> int:
        if name not in self.entities:
            self.entities[name] = len(self.entities)
        return self.entities[name]

    def relation_id(self, name: str) -> int:
        if name not in self.relations:
            self.relations[name] = len(self.relations)
        return self.relations[name]

    def add(self, subject: str, relation: str, obj: str) -> bool:
        t = (self.entity_id(subject), self.relation_id(relation), self.entity_id(obj))
        if t in self._seen:
            self.duplicates_dropped += 1
            return False
        self._seen.add(t)
        self.triples.append(t)
        return True

    @property
    def entity_names(self) -> list[str]:
        return _inverse(self.entities)

    @property
    def relation_names(self) -> list[str]:
        return _inverse(self.relations)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def edge_array(self) -> np.ndarray:
        return np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)

    def named_triples(self) -> list[tuple[str, str, str]]:
        ents, rels = self.entity_names, self.relation_names
        return [(ents[s], rels[r], ents[o]) for s, r, o in self.triples]


def _inverse(table: dict[str, int]) -> list[str]:
    names = [""] * len(table)
    for name, i in table.items():
        names[i] = name
    return names


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[str, ...]
    max_len: int | None = None
    truncated: int = 0

    @classmethod
    def make(cls, doc_id: str, tokens: Sequence[str], max_len: int | None = None) -> "Document":
        tokens = tuple(tokens)
        cut = 0
        if max_len is not None and len(tokens) > max_len:
            cut = len(tokens) - max_len
            tokens = tokens[:max_len]
        return cls(doc_id, tokens, max_len, cut)


@dataclass(frozen=True)
class Mention:
    entity: int
    doc: str
    positions: tuple[int, ...]


@dataclass(frozen=True)
class QuestionInstance:
    id: str
    tokens: tuple[str, ...]
    seeds: tuple[int, ...]
    answers: tuple[int, ...]


@dataclass
class QuestionSubgraph:
    """Retrieved neighbourhood of one question.

    ``nodes`` are KG entity ids in ascending order; ``edges`` and
    ``doc_pairs`` refer to entity ids, with ``doc_pairs`` entries
    ``(entity_i, entity_j, doc_id)`` for ``entity_i < entity_j``.
    """

    question: str
    nodes: list[int]
    edges: list[tuple[int, int, int]]
    doc_pairs: list[tuple[int, int, str]]
    labels: list[int]


# -- triples -------------------------------------------------------------------


def load_kg(path) -> KnowledgeGraph:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    kg = KnowledgeGraph()
    lines = path.read_text(encoding="utf-8").splitlines()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise DataError(f"line {n}: expected 3 fields")
        kg.add(*parts)
    if not kg.triples:
        raise DataError(f"{path}: no triples")
    if kg.duplicates_dropped:
        log.info("%s: dropped %d duplicate triples", path, kg.duplicates_dropped)
    return kg


def save_kg(kg: KnowledgeGraph, path) -> None:
    _write_lines(path, ("\t".join(t) for t in kg.named_triples()))


# -- documents -----------------------------------------------------------------


def load_documents(path, max_len: int | None = None) -> list[Document]:
    docs = []
    for n, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path} line {n}: expected 2 fields")
        docs.append(Document.make(parts[0], parts[1].split(), max_len))
    return docs


def save_documents(docs: Iterable[Document], path) -> None:
    _write_lines(path, (f"{d.id}\t{' '.join(d.tokens)}" for d in docs))


# -- questions -----------------------------------------------------------------


def load_questions(path, kg: KnowledgeGraph) -> list[QuestionInstance]:
    out = []
    for n, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path} line {n}: expected 4 fields")
        qid, text, seeds, answers = parts
        try:
            seed_ids = tuple(kg.entities[s] for s in _split(seeds))
            answer_ids = tuple(kg.entities[a] for a in _split(answers))
        except KeyError as exc:
            raise DataError(f"{path} line {n}: unknown entity {exc.args[0]}") from None
        if not seed_ids:
            raise DataError(f"{path} line {n}: question has no seed entity")
        out.append(QuestionInstance(qid, tuple(text.split()), seed_ids, answer_ids))
    return out


def save_questions(questions: Iterable[QuestionInstance], kg: KnowledgeGraph, path) -> None:
    names = kg.entity_names
    _write_lines(path, (
        f"{q.id}\t{' '.join(q.tokens)}\t{','.join(names[s] for s in q.seeds)}"
        f"\t{','.join(names[a] for a in q.answers)}" for q in questions))


# -- mentions and linking --------------------------------------------------------


def link_documents(kg: KnowledgeGraph, documents: Sequence[Document], noise_rate: float = 0.0,
                   rng=None) -> list[Mention]:
    """Exact lowercase token-span matching of entity names against documents.

    Each found mention survives independently with probability ``1 - noise_rate``;
    one uniform draw is consumed per candidate mention, in document then entity
    order.
    """
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate must be in [0, 1), got {noise_rate}")
    if noise_rate > 0 and rng is None:
        raise ValueError("noise_rate > 0 needs an rng")
    names = sorted((tuple(name.lower().split()), eid) for name, eid in kg.entities.items())
    by_first: dict[str, list[tuple[tuple[str, ...], int]]] = {}
    for toks, eid in names:
        if toks:
            by_first.setdefault(toks[0], []).append((toks, eid))

    mentions = []
    for doc in documents:
        lowered = [t.lower() for t in doc.tokens]
        found: dict[int, list[int]] = {}
        for p, tok in enumerate(lowered):
            for toks, eid in by_first.get(tok, ()):
                if tuple(lowered[p:p + len(toks)]) == toks:
                    found.setdefault(eid, []).extend(range(p, p + len(toks)))
        for eid in sorted(found):
            if noise_rate > 0 and rng.random() < noise_rate:
                continue
            mentions.append(Mention(eid, doc.id, tuple(sorted(set(found[eid])))))
    return mentions


def load_mentions(path, kg: KnowledgeGraph) -> list[Mention]:
    out = []
    for n, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path} line {n}: expected 3 fields")
        if parts[1] not in kg.entities:
            raise DataError(f"{path} line {n}: unknown entity {parts[1]}")
        positions = tuple(int(p) for p in _split(parts[2]))
        if list(positions) != sorted(set(positions)):
            raise DataError(f"{path} line {n}: positions must be strictly increasing")
        out.append(Mention(kg.entities[parts[1]], parts[0], positions))
    return out


def save_mentions(mentions: Iterable[Mention], kg: KnowledgeGraph, path) -> None:
    names = kg.entity_names
    _write_lines(path, (f"{m.doc}\t{names[m.entity]}\t{','.join(map(str, m.positions))}"
                        for m in mentions))


def make_labels(nodes: Sequence[int], answers: Iterable[int]) -> list[int]:
    answers = set(answers)
    return [1 if v in answers else 0 for v in nodes]


# -- helpers -------------------------------------------------------------------


def _split(field_text: str) -> list[str]:
    return [x for x in field_text.split(",") if x]


def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _write_lines(path, lines: Iterable[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    Path(path).write_text(text, encoding="utf-8")
