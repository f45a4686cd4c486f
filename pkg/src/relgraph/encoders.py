"""Entity/relation/word embeddings and the shared bidirectional LSTM encoder."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kg import DataError, KnowledgeGraph
from .optim import RngStream

log = logging.getLogger(__name__)

OOV = "<oov>"


@dataclass
class EmbeddingTable:
    """Name -> vector map.  Unknown names resolve to the shared OOV row."""

    names: list[str]
    vectors: np.ndarray
    oov: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.index = {n: i for i, n in enumerate(self.names)}
        if self.vectors.shape != (len(self.names), self.oov.shape[0]):
            raise ValueError("table shape does not match names and dimension")

    @property
    def dim(self) -> int:
        return self.oov.shape[0]

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def lookup(self, name: str, warn: bool = True) -> np.ndarray:
        i = self.index.get(name)
        if i is None:
            if warn:
                log.warning("no embedding for %r, using OOV vector", name)
            return self.oov.copy()
        return self.vectors[i].copy()

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        return np.stack([self.lookup(n, warn=False) for n in names]) if names else \
            np.zeros((0, self.dim))


def save_table(table: EmbeddingTable, path) -> None:
    rows = [(OOV, table.oov)] + list(zip(table.names, table.vectors))
    text = "".join(f"{n}\t{' '.join(repr(float(x)) for x in v)}\n" for n, v in rows)
    Path(path).write_text(text, encoding="utf-8")


def load_table(path) -> EmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    names, rows, oov = [], [], None
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path} line {n}: expected name<TAB>values")
        try:
            vec = np.array([float(x) for x in parts[1].split()])
        except ValueError:
            raise DataError(f"{path} line {n}: non-numeric value") from None
        if rows and vec.shape != rows[0].shape or oov is not None and vec.shape != oov.shape:
            raise DataError(f"{path} line {n}: inconsistent dimension")
        if parts[0] == OOV:
            oov = vec
        else:
            names.append(parts[0])
            rows.append(vec)
    dim = (oov if oov is not None else rows[0]).shape[0] if (rows or oov is not None) else 0
    if oov is None:
        oov = np.zeros(dim)
    return EmbeddingTable(names, np.array(rows).reshape(len(names), dim), oov)


# -- word vectors --------------------------------------------------------------


def relation_tokens(name: str) -> list[str]:
    return [t for t in re.split(r"[_./]+", name.lower()) if t]


def build_word_table(vocabulary: Iterable[str], dim: int, rng: RngStream) -> EmbeddingTable:
    """Random frozen word vectors (standard normal entries) for a sorted vocabulary.

    Unit-variance entries keep distinct words well separated after the LSTM's
    input projection; row 0 of the draw is the OOV vector.
    """
    words = sorted(set(vocabulary))
    vectors = rng.normal(0.0, 1.0, size=(len(words) + 1, dim))
    return EmbeddingTable(words, vectors[1:], vectors[0])


# -- TransE --------------------------------------------------------------------


def transe_energy(ent: np.ndarray, rel: np.ndarray, triples: np.ndarray) -> np.ndarray:
    s, r, o = triples[:, 0], triples[:, 1], triples[:, 2]
    return np.linalg.norm(ent[s] + rel[r] - ent[o], axis=1)


def all_corruptions(triples: np.ndarray, n_entities: int) -> tuple[np.ndarray, np.ndarray]:
    """Every single-endpoint corruption of every triple, as (true, corrupted) rows.

    Corruptions that coincide with a true triple are skipped.
    """
    known = {tuple(t) for t in triples.tolist()}
    true_rows, bad_rows = [], []
    for t in triples.tolist():
        s, r, o = t
        for e in range(n_entities):
            for cand in ((e, r, o), (s, r, e)):
                if cand != tuple(t) and cand not in known:
                    true_rows.append(t)
                    bad_rows.append(cand)
    return np.array(true_rows).reshape(-1, 3), np.array(bad_rows).reshape(-1, 3)


def transe_loss(ent, rel, triples: np.ndarray, margin: float, corruptions=None) -> float:
    """Mean hinge loss over all single-endpoint corruptions."""
    true_rows, bad_rows = corruptions if corruptions is not None else \
        all_corruptions(triples, ent.shape[0])
    hinge = margin + transe_energy(ent, rel, true_rows) - transe_energy(ent, rel, bad_rows)
    return float(np.maximum(hinge, 0.0).mean())


@dataclass
class TransEResult:
    entities: EmbeddingTable
    relations: EmbeddingTable
    losses: list[float]


def _transe_epoch(ent, rel, triples, margin, lr, batch_size, rng):
    """One SGD pass with a fresh corrupted endpoint per positive; returns new arrays."""
    ent, rel = ent.copy(), rel.copy()
    n = ent.shape[0]
    order = rng.permutation(len(triples))
    for start in range(0, len(order), batch_size):
        pos = triples[order[start:start + batch_size]]
        neg = pos.copy()
        replace = rng.integers(0, n, size=len(pos))
        head = rng.random(len(pos)) < 0.5
        neg[head, 0] = replace[head]
        neg[~head, 2] = replace[~head]
        d_pos = ent[pos[:, 0]] + rel[pos[:, 1]] - ent[pos[:, 2]]
        d_neg = ent[neg[:, 0]] + rel[neg[:, 1]] - ent[neg[:, 2]]
        n_pos = np.linalg.norm(d_pos, axis=1, keepdims=True)
        n_neg = np.linalg.norm(d_neg, axis=1, keepdims=True)
        active = (margin + n_pos - n_neg > 0).ravel()
        if not active.any():
            continue
        g_pos = (d_pos / np.maximum(n_pos, 1e-12))[active]
        g_neg = (d_neg / np.maximum(n_neg, 1e-12))[active]
        p, q = pos[active], neg[active]
        g_ent = np.zeros_like(ent)
        g_rel = np.zeros_like(rel)
        np.add.at(g_ent, p[:, 0], g_pos)
        np.add.at(g_ent, p[:, 2], -g_pos)
        np.add.at(g_rel, p[:, 1], g_pos - g_neg)
        np.add.at(g_ent, q[:, 0], -g_neg)
        np.add.at(g_ent, q[:, 2], g_neg)
        ent -= lr * g_ent
        rel -= lr * g_rel
    ent /= np.linalg.norm(ent, axis=1, keepdims=True)
    return ent, rel


def train_transe(kg: KnowledgeGraph, dim: int = 16, margin: float = 0.25, epochs: int = 200,
                 lr: float = 0.1, rng: RngStream | None = None, batch_size: int = 32,
                 retries: int = 4) -> TransEResult:
    """Margin-ranking TransE with one corrupted endpoint per positive.

    Plain minibatch SGD on the L2 energy; entity rows are renormalized to unit
    length after every epoch.  An epoch is kept only if the loss over every
    single-endpoint corruption does not go up; otherwise it is redrawn with
    half the step size, up to ``retries`` times, and skipped if none of the
    attempts helps.  ``losses[k]`` is that full loss after epoch k (index 0 is
    the initialization).
    """
    if dim < 2:
        raise ValueError("TransE dimension must be at least 2")
    if not kg.triples:
        raise ValueError("cannot train TransE on an empty graph")
    rng = rng or RngStream(0)
    n, m = kg.num_entities, len(kg.relations)
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, size=(n, dim))
    rel = rng.uniform(-bound, bound, size=(m, dim))
    rel /= np.linalg.norm(rel, axis=1, keepdims=True)
    triples = kg.edge_array()
    corruptions = all_corruptions(triples, n)
    loss = transe_loss(ent, rel, triples, margin, corruptions)
    losses = [loss]

    for _ in range(epochs):
        step = lr
        for _attempt in range(retries + 1):
            new_ent, new_rel = _transe_epoch(ent, rel, triples, margin, step, batch_size, rng)
            new_loss = transe_loss(new_ent, new_rel, triples, margin, corruptions)
            if new_loss <= loss:
                ent, rel, loss = new_ent, new_rel, new_loss
                break
            step /= 2
        losses.append(loss)

    oov_e = np.zeros(dim)
    return TransEResult(EmbeddingTable(kg.entity_names, ent, oov_e),
                        EmbeddingTable(kg.relation_names, rel, np.zeros(dim)), losses)


# -- sequence encoder ----------------------------------------------------------

LSTM_GATES = 4  # input, forget, output, candidate


def init_lstm_params(d_in: int, hidden: int, rng: RngStream, prefix: str = "lstm") -> dict:
    bound = 1.0 / np.sqrt(hidden)
    params = {}
    for direction in ("fwd", "bwd"):
        bias = np.zeros(LSTM_GATES * hidden)
        bias[hidden:2 * hidden] = 1.0
        params[f"{prefix}.{direction}.Wx"] = rng.uniform(-bound, bound, (d_in, LSTM_GATES * hidden))
        params[f"{prefix}.{direction}.Wh"] = rng.uniform(-bound, bound,
                                                          (hidden, LSTM_GATES * hidden))
        params[f"{prefix}.{direction}.b"] = bias
    return params


def lstm_scan(proj: Tensor, step_rows: list[np.ndarray], masks: list[np.ndarray],
              wh: Tensor, b: Tensor) -> Tensor:
    """One LSTM direction as a single differentiable primitive.

    ``proj`` holds the input projections x @ W_x for every token; step t
    reads rows ``step_rows[t]`` (one per sequence).  Where ``masks[t]`` is
    False the state is carried over unchanged.  Returns the hidden states of
    all steps stacked as rows ``t * batch + k``.
    """
    hidden = wh.shape[0]
    batch = len(step_rows[0])
    pv, whv, bv = proj.value, wh.value, b.value
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    cache = []
    out = []
    for rows, mask in zip(step_rows, masks):
        z = pv[rows] + h @ whv + bv
        # sigmoid(x) = (1 + tanh(x / 2)) / 2 for the three gates at once
        gates = 0.5 + 0.5 * np.tanh(0.5 * z[:, :3 * hidden])
        i, f, o = gates[:, :hidden], gates[:, hidden:2 * hidden], gates[:, 2 * hidden:]
        g = np.tanh(z[:, 3 * hidden:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        m = mask[:, None].astype(np.float64)
        cache.append((h, c, i, f, o, g, tc, m))
        if mask.all():
            c, h = c_new, o * tc
        else:
            c = m * c_new + (1 - m) * c
            h = m * (o * tc) + (1 - m) * h
        out.append(h)
    states = np.concatenate(out, axis=0)

    def backward(grad_states):
        d_proj = np.zeros_like(pv)
        d_wh = np.zeros_like(whv)
        d_b = np.zeros_like(bv)
        dh = np.zeros((batch, hidden))
        dc = np.zeros((batch, hidden))
        for t in range(len(step_rows) - 1, -1, -1):
            h_prev, c_prev, i, f, o, g, tc, m = cache[t]
            dh = dh + grad_states[t * batch:(t + 1) * batch]
            dh_new = m * dh
            dc_new = m * dc + dh_new * o * (1 - tc * tc)
            dz = np.concatenate([dc_new * g * i * (1 - i),
                                 dc_new * c_prev * f * (1 - f),
                                 dh_new * tc * o * (1 - o),
                                 dc_new * i * (1 - g * g)], axis=1)
            d_proj[step_rows[t]] += dz  # rows within one step are distinct
            d_wh += h_prev.T @ dz
            d_b += dz.sum(axis=0)
            dh = (1 - m) * dh + dz @ whv.T
            dc = (1 - m) * dc + dc_new * f
        return d_proj, d_wh, d_b

    return ad.record(states, (proj, wh, b), backward)


def encode_batch(sequences: Sequence[np.ndarray], words: np.ndarray, params: dict,
                 prefix: str = "lstm") -> tuple[Tensor, Tensor, np.ndarray]:
    """Run the shared BiLSTM over several token-id sequences at once.

    Returns ``(token_states, global_vectors, offsets)``: token states of all
    sequences stacked row-wise (sequence k occupies rows
    ``offsets[k]:offsets[k+1]``), each the forward state concatenated with the
    backward state; global vectors are final forward ++ final backward states.
    """
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if len(sequences) == 0 or lengths.min() == 0:
        raise ValueError("cannot encode an empty token sequence")
    batch, longest = len(sequences), int(lengths.max())
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    flat_ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    x_rows = Tensor(words[flat_ids])
    seq_of = np.repeat(np.arange(batch), lengths)
    pos_of = np.arange(len(flat_ids)) - offsets[seq_of]

    fwd_rows, bwd_rows, masks = [], [], []
    for t in range(longest):
        live = t < lengths
        masks.append(live)
        # padded steps re-read row 0 of the sequence; the mask discards them
        fwd_rows.append(offsets[:-1] + np.where(live, t, 0))
        bwd_rows.append(offsets[:-1] + np.where(live, lengths - 1 - t, 0))

    def run(direction, step_rows):
        proj = x_rows @ params[f"{prefix}.{direction}.Wx"]
        return lstm_scan(proj, step_rows, masks, params[f"{prefix}.{direction}.Wh"],
                         params[f"{prefix}.{direction}.b"])

    f_all = run("fwd", fwd_rows)  # row t * batch + k
    b_all = run("bwd", bwd_rows)
    f_idx = pos_of * batch + seq_of
    b_idx = (lengths[seq_of] - 1 - pos_of) * batch + seq_of
    last = (longest - 1) * batch + np.arange(batch)
    tokens = ad.concat([ad.take(f_all, f_idx), ad.take(b_all, b_idx)], axis=1)
    glob = ad.concat([ad.take(f_all, last), ad.take(b_all, last)], axis=1)
    return tokens, glob, offsets


def encode_sequence(token_ids: Sequence[int], words: np.ndarray, params: dict,
                    prefix: str = "lstm") -> tuple[Tensor, Tensor]:
    """Per-token states (len x 2h) and the global vector (2h) of one sequence."""
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty token sequence")
    tokens, glob, _ = encode_batch([np.asarray(token_ids)], words, params, prefix)
    return tokens, ad.reshape(glob, (-1,))


def init_entity(name: str, table: EmbeddingTable) -> np.ndarray:
    return table.lookup(name)


def init_relation(transe_vec, word_vectors, w_r0) -> Tensor:
    """ReLU([TransE(r) ++ mean word vector] @ W_r0) for one or many relations.

    ``transe_vec`` may be a (d_kb,) vector or an (m, d_kb) matrix with one
    row per relation; ``word_vectors`` is then a matching (m, d_w) matrix of
    already mean-pooled word vectors, or a (k, d_w) stack for one relation.
    """
    tv = ad.as_tensor(transe_vec)
    wv = np.asarray(word_vectors, dtype=np.float64)
    if tv.ndim == 1:
        pooled = wv.mean(axis=0) if wv.ndim == 2 else wv
        x = ad.concat([ad.reshape(tv, (1, -1)), Tensor(pooled.reshape(1, -1))], axis=1)
        return ad.reshape(ad.relu(x @ w_r0), (-1,))
    return ad.relu(ad.concat([tv, Tensor(wv)], axis=1) @ w_r0)


def init_query(token_ids: Sequence[int], words: np.ndarray, params: dict,
               prefix: str = "lstm") -> Tensor:
    return encode_sequence(token_ids, words, params, prefix)[1]
