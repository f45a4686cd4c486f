"""Deterministic synthetic question-answering benchmark.

The generator draws a connected multi-relational "world" graph, hides a set
of triples from the published KG and verbalizes them (plus a sample of the
remaining triples) as short template documents.  Questions ask for the
entity related to a seed by a relation, in either direction; a fixed
fraction can only be answered through a hidden, document-verbalized triple.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

from .kg import (DataError, Document, KnowledgeGraph, QuestionInstance, save_documents,
                 save_kg, save_questions)
from .optim import RngStream

RELATION_NAMES = [
    "located_in", "works_for", "born_in", "part_of", "member_of", "married_to",
    "capital_of", "founded_by", "plays_for", "studied_at", "owned_by", "friend_of",
]

DOC_TEMPLATES = [
    ("{s}", "{r}", "{o}"),
    ("records", "show", "{s}", "{r}", "{o}"),
    ("it", "is", "said", "that", "{s}", "{r}", "{o}"),
    ("{s}", "{r}", "{o}", "since", "long", "ago"),
]

SPLITS = ("train", "valid", "test")


@dataclass
class SynthConfig:
    entities: int = 50
    relations: int = 4
    triples: int = 200
    documents: int = 150
    train: int = 120
    valid: int = 20
    test: int = 40
    doc_only_fraction: float = 0.3
    unanswerable_fraction: float = 0.0
    seed: int = 0


@dataclass
class Benchmark:
    config: SynthConfig
    kg: KnowledgeGraph
    documents: list[Document]
    splits: dict[str, list[QuestionInstance]]
    hidden: list[tuple[str, str, str]]
    kinds: dict[str, str]  # qid -> "kg" | "doc" | "none"


def relation_name(i: int) -> str:
    return RELATION_NAMES[i] if i < len(RELATION_NAMES) else f"relation_{i}"


def relation_words(name: str) -> list[str]:
    return name.replace(".", "_").replace("/", "_").split("_")


def _question_tokens(direction: str, seed: str, rel: str) -> tuple[str, ...]:
    words = relation_words(rel)
    if direction == "fwd":
        return ("which", "entity", "does", seed, *words)
    return ("which", "entity", *words, seed)


def gen_synthetic(config: SynthConfig) -> Benchmark:
    c = config
    if c.entities < 5 or c.relations < 2:
        raise DataError("need at least 5 entities and 2 relations")
    if not 0.0 <= c.doc_only_fraction <= 1.0 or not 0.0 <= c.unanswerable_fraction <= 1.0:
        raise DataError("fractions must lie in [0, 1]")
    max_triples = c.entities * (c.entities - 1) * c.relations
    if not c.entities - 1 <= c.triples <= max_triples:
        raise DataError(f"triple count must lie in [{c.entities - 1}, {max_triples}]")
    rng = RngStream(c.seed)
    names = [f"ent{i:03d}" for i in range(c.entities)]
    rels = [relation_name(i) for i in range(c.relations)]

    # connected backbone first, so every entity appears in the published KG
    world: list[tuple[int, int, int]] = []
    seen = set()
    order = [int(x) for x in rng.permutation(c.entities)]
    for k in range(1, c.entities):
        a, b = order[k], order[int(rng.integers(0, k))]
        s, o = (a, b) if rng.random() < 0.5 else (b, a)
        t = (s, int(rng.integers(0, c.relations)), o)
        world.append(t)
        seen.add(t)
    backbone = set(world)
    while len(world) < c.triples:
        s, o = (int(x) for x in rng.integers(0, c.entities, size=2))
        t = (s, int(rng.integers(0, c.relations)), o)
        if s != o and t not in seen:
            world.append(t)
            seen.add(t)

    groups: dict[tuple[str, int, int], list[tuple[int, int, int]]] = {}
    for t in world:
        s, r, o = t
        groups.setdefault(("fwd", s, r), []).append(t)
        groups.setdefault(("inv", o, r), []).append(t)

    total = c.train + c.valid + c.test
    n_none = round(c.unanswerable_fraction * total)
    n_doc = round(c.doc_only_fraction * total)
    n_kg = total - n_doc - n_none
    if n_kg < 0:
        raise DataError("doc-only and unanswerable fractions exceed 1")

    def other_group(key, t):
        s, r, o = t
        return ("inv", o, r) if key[0] == "fwd" else ("fwd", s, r)

    keys = sorted(groups)
    perm = [keys[int(i)] for i in rng.permutation(len(keys))]

    def pick_doc(paired: bool):
        """Hide triples for doc-only questions.  In paired mode a triple whose
        forward and inverse groups are both singletons yields two questions,
        which spends fewer hidden triples (and tainted KG targets) per question."""
        tainted: set = set()
        hidden: list[tuple[int, int, int]] = []
        chosen: list[tuple[tuple[str, int, int], str]] = []
        for single_pass in ([True, False] if paired else [False]):
            for key in perm:
                if len(chosen) == n_doc:
                    break
                members = groups[key]
                if len(members) != 1 or members[0] in backbone or key in tainted:
                    continue
                t = members[0]
                other = other_group(key, t)
                if other in tainted:
                    continue
                both = len(groups[other]) == 1
                if single_pass and not both:
                    continue
                hidden.append(t)
                tainted.update({key, other})
                chosen.append((key, "doc"))
                if single_pass and len(chosen) < n_doc:
                    chosen.append((other, "doc"))
        kg_keys = [k for k in perm if k not in tainted]
        return hidden, chosen, kg_keys

    # one question per hidden triple; the paired layout only when that is infeasible
    hidden, chosen, kg_keys = pick_doc(paired=False)
    if len(chosen) < n_doc or len(kg_keys) < n_kg:
        hidden, chosen, kg_keys = pick_doc(paired=True)
    if len(chosen) < n_doc:
        raise DataError(f"only {len(chosen)} document-only questions possible, need {n_doc}")
    if len(kg_keys) < n_kg:
        raise DataError(f"only {len(kg_keys)} KG-answerable question targets, need {n_kg}")
    chosen.extend((k, "kg") for k in kg_keys[:n_kg])

    if n_none:
        empty = [(d, e, r) for d in ("fwd", "inv") for e in range(c.entities)
                 for r in range(c.relations) if (d, e, r) not in groups]
        if len(empty) < n_none:
            raise DataError("not enough empty (seed, relation) pairs for unanswerable questions")
        picks = rng.choice(len(empty), size=n_none, replace=False)
        chosen.extend((empty[int(i)], "none") for i in picks)

    hidden_set = set(hidden)
    kg = KnowledgeGraph()
    for s, r, o in world:
        if (s, r, o) not in hidden_set:
            kg.add(names[s], rels[r], names[o])

    # documents: every hidden triple once, then a sample of published triples
    if c.documents < len(hidden):
        raise DataError(f"{c.documents} documents cannot verbalize {len(hidden)} hidden triples")
    published = [t for t in world if t not in hidden_set]
    extra = rng.choice(len(published), size=min(len(published), c.documents - len(hidden)),
                       replace=False)
    facts = hidden + [published[int(i)] for i in extra]
    facts = [facts[int(i)] for i in rng.permutation(len(facts))]
    documents = []
    for k, (s, r, o) in enumerate(facts):
        template = DOC_TEMPLATES[int(rng.integers(0, len(DOC_TEMPLATES)))]
        tokens: list[str] = []
        for slot in template:
            if slot == "{s}":
                tokens.append(names[s])
            elif slot == "{o}":
                tokens.append(names[o])
            elif slot == "{r}":
                tokens.extend(relation_words(rels[r]))
            else:
                tokens.append(slot)
        documents.append(Document.make(f"doc{k:04d}", tokens))

    chosen = [chosen[int(i)] for i in rng.permutation(len(chosen))]
    questions, kinds = [], {}
    for n, ((direction, seed, r), kind) in enumerate(chosen):
        qid = f"q{n:04d}"
        if kind == "none":
            answers: tuple[int, ...] = ()
        else:
            pick = 2 if direction == "fwd" else 0
            answers = tuple(sorted({t[pick] for t in groups[(direction, seed, r)]}))
        seed_id = kg.entities[names[seed]]
        questions.append(QuestionInstance(
            qid, _question_tokens(direction, names[seed], rels[r]), (seed_id,),
            tuple(sorted(kg.entities[names[a]] for a in answers))))
        kinds[qid] = kind
    splits = {
        "train": questions[:c.train],
        "valid": questions[c.train:c.train + c.valid],
        "test": questions[c.train + c.valid:],
    }
    hidden_named = [(names[s], rels[r], names[o]) for s, r, o in hidden]
    return Benchmark(c, kg, documents, splits, hidden_named, kinds)


def write_benchmark(bench: Benchmark, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kg = bench.kg
    save_kg(kg, out / "kg.tsv")
    save_documents(bench.documents, out / "documents.tsv")
    for split, qs in bench.splits.items():
        save_questions(qs, kg, out / f"questions_{split}.tsv")
    lines = ["\t".join(t) for t in bench.hidden]
    (out / "hidden_triples.tsv").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    kinds = "".join(f"{q}\t{k}\n" for q, k in bench.kinds.items())
    (out / "question_kinds.tsv").write_text(kinds, encoding="utf-8")


def config_dict(config: SynthConfig) -> dict:
    return asdict(config)
