"""Question subgraph retrieval with personalized PageRank."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .kg import DataError, KnowledgeGraph, Mention, QuestionInstance, QuestionSubgraph, make_labels


class PprNotConverged(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"PPR did not converge after {iterations} iterations "
                         f"(residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass
class PprResult:
    scores: np.ndarray
    iterations: int
    residual: float


def transition_matrix(kg: KnowledgeGraph) -> tuple[sp.csr_matrix, np.ndarray]:
    """Row-normalized undirected adjacency and a dangling-node mask."""
    n = kg.num_entities
    edges = kg.edge_array()
    rows = np.concatenate([edges[:, 0], edges[:, 2]])
    cols = np.concatenate([edges[:, 2], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    dangling = degree == 0
    inv = np.where(dangling, 0.0, 1.0 / np.where(dangling, 1.0, degree))
    return sp.diags(inv) @ adj, dangling


def ppr(kg: KnowledgeGraph, seeds: Sequence[int], damping: float = 0.8, tol: float = 1e-8,
        max_iter: int = 1000, transition=None) -> PprResult:
    if not seeds:
        raise ValueError("PPR needs at least one seed")
    if not 0.0 <= damping < 1.0:
        raise ValueError(f"damping must lie in [0, 1), got {damping}")
    n = kg.num_entities
    if any(not 0 <= s < n for s in seeds):
        raise ValueError("seed entity not in graph")
    walk, dangling = transition if transition is not None else transition_matrix(kg)
    walk_t = walk.T.tocsr()
    restart = np.zeros(n)
    restart[list(set(seeds))] = 1.0
    restart /= restart.sum()
    p = restart.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        nxt = (1 - damping) * restart + damping * (walk_t @ p + p[dangling].sum() * restart)
        residual = float(np.abs(nxt - p).sum())
        p = nxt
        if residual < tol:
            return PprResult(p, it, residual)
    raise PprNotConverged(residual, max_iter)


def doc_entity_index(mentions: Iterable[Mention]) -> dict[str, list[int]]:
    index: dict[str, set[int]] = {}
    for m in mentions:
        index.setdefault(m.doc, set()).add(m.entity)
    return {d: sorted(es) for d, es in sorted(index.items())}


def extract_subgraph(kg: KnowledgeGraph, question: QuestionInstance, k: int = 50,
                     doc_entities: Mapping[str, Sequence[int]] | None = None,
                     damping: float = 0.8, tol: float = 1e-8, max_iter: int = 1000,
                     transition=None) -> QuestionSubgraph:
    seeds = sorted(set(question.seeds))
    if k < len(seeds):
        raise ValueError(f"node budget {k} is smaller than the seed count {len(seeds)}")
    scores = ppr(kg, seeds, damping, tol, max_iter, transition).scores
    seed_set = set(seeds)
    ranked = sorted((v for v in range(kg.num_entities) if v not in seed_set and scores[v] > 0),
                    key=lambda v: (-scores[v], v))
    nodes = sorted(seeds + ranked[:k - len(seeds)])
    node_set = set(nodes)
    edges = [t for t in kg.triples if t[0] in node_set and t[2] in node_set]
    pairs = []
    for doc, ents in (doc_entities or {}).items():
        inside = [e for e in ents if e in node_set]
        for a in range(len(inside)):
            for b in range(a + 1, len(inside)):
                pairs.append((inside[a], inside[b], doc))
    return QuestionSubgraph(question.id, nodes, edges, pairs, make_labels(nodes, question.answers))


def answer_recall(subgraphs: Sequence[QuestionSubgraph],
                  questions: Sequence[QuestionInstance]) -> float:
    by_id = {g.question: g for g in subgraphs}
    answerable = [q for q in questions if q.answers]
    if not answerable:
        return 1.0
    hit = sum(1 for q in answerable if set(q.answers) & set(by_id[q.id].nodes))
    return hit / len(answerable)


# -- file format -----------------------------------------------------------------
# qid <TAB> node names (comma) <TAB> edges "i:relation:j" (space) <TAB>
# doc pairs "i:j:doc_id" (space) <TAB> labels (comma); i, j index the node list.


def save_subgraphs(subgraphs: Iterable[QuestionSubgraph], kg: KnowledgeGraph, path) -> None:
    ents, rels = kg.entity_names, kg.relation_names
    lines = []
    for g in subgraphs:
        pos = {v: i for i, v in enumerate(g.nodes)}
        edges = " ".join(f"{pos[s]}:{rels[r]}:{pos[o]}" for s, r, o in g.edges)
        pairs = " ".join(f"{pos[a]}:{pos[b]}:{d}" for a, b, d in g.doc_pairs)
        lines.append("\t".join([g.question, ",".join(ents[v] for v in g.nodes), edges, pairs,
                                ",".join(map(str, g.labels))]))
    Path(path).write_text("".join(x + "\n" for x in lines), encoding="utf-8")


def load_subgraphs(path, kg: KnowledgeGraph) -> list[QuestionSubgraph]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path} line {n}: expected 5 fields")
        try:
            nodes = [kg.entities[x] for x in parts[1].split(",") if x]
            edges = []
            for item in parts[2].split():
                i, r, j = item.split(":", 2)
                edges.append((nodes[int(i)], kg.relations[r], nodes[int(j)]))
            pairs = []
            for item in parts[3].split():
                i, j, d = item.split(":", 2)
                pairs.append((nodes[int(i)], nodes[int(j)], d))
            labels = [int(x) for x in parts[4].split(",") if x]
        except (KeyError, ValueError, IndexError) as exc:
            raise DataError(f"{path} line {n}: {exc}") from None
        if len(labels) != len(nodes):
            raise DataError(f"{path} line {n}: {len(labels)} labels for {len(nodes)} nodes")
        out.append(QuestionSubgraph(parts[0], nodes, edges, pairs, labels))
    return out
