"""Inverted-index search over sparse lexical vectors, R@K, and sparsity sweeps."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from lexalign.errors import ValidationError
from lexalign.lexcore import SparseLexical, prune_to_sparsity

SWEEP_COLUMNS = ("direction", "ratio", "activated_mean", "R1", "R5", "R10")
DIRECTIONS = ("i2t", "t2i")


@dataclass(frozen=True)
class InvertedIndex:
    """token id -> (doc ids ascending, values); read-only once built."""

    postings: dict[int, tuple[np.ndarray, np.ndarray]]
    doc_count: int
    vocab_size: int

    def reconstruct(self, doc_id: int) -> SparseLexical:
        entries = []
        for tok, (docs, vals) in self.postings.items():
            pos = np.searchsorted(docs, doc_id)
            if pos < docs.size and docs[pos] == doc_id:
                entries.append((tok, vals[pos]))
        return SparseLexical.from_entries(entries, self.vocab_size)


@dataclass(frozen=True)
class RetrievalResult:
    ids: np.ndarray
    scores: np.ndarray
    k: int

    def __len__(self):
        return int(self.ids.size)


def build_index(corpus: Sequence[SparseLexical], vocab_size: int | None = None) -> InvertedIndex:
    if vocab_size is None:
        vocab_size = corpus[0].size if corpus else 0
    if any(doc.size != vocab_size for doc in corpus):
        raise ValidationError("corpus vectors must share one vocabulary size")
    if not corpus:
        return InvertedIndex({}, 0, vocab_size)
    toks = np.concatenate([doc.ids for doc in corpus])
    vals = np.concatenate([doc.values for doc in corpus])
    docs = np.repeat(np.arange(len(corpus), dtype=np.int64), [doc.nnz for doc in corpus])
    order = np.argsort(toks, kind="stable")  # keeps doc order within each token
    toks, vals, docs = toks[order], vals[order], docs[order]
    bounds = np.flatnonzero(np.diff(toks)) + 1
    postings = {}
    for start, stop in zip(np.r_[0, bounds], np.r_[bounds, toks.size]):
        if stop > start:
            postings[int(toks[start])] = (docs[start:stop], vals[start:stop])
    return InvertedIndex(postings, len(corpus), vocab_size)


def search(index: InvertedIndex, query: SparseLexical, k: int) -> RetrievalResult:
    """Top-k documents by sparse dot product; ties go to the lower doc id.

    Documents sharing no token with the query score zero and are never
    returned.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    if index.doc_count == 0 or query.nnz == 0:
        return RetrievalResult(np.zeros(0, dtype=np.int64), np.zeros(0), k)
    if query.size != index.vocab_size:
        raise ValidationError("query and index use different vocabulary sizes")
    acc = np.zeros(index.doc_count)
    for tok, weight in zip(query.ids.tolist(), query.values.tolist()):
        hit = index.postings.get(tok)
        if hit is not None:
            acc[hit[0]] += weight * hit[1]
    cands = np.flatnonzero(acc > 0)
    order = np.lexsort((cands, -acc[cands]))[:k]
    top = cands[order]
    return RetrievalResult(top, acc[top], k)


def recall_at_k(results: Sequence[RetrievalResult], ground_truth: Sequence[int], k: int) -> float:
    """Fraction of queries whose relevant id is among their first ``k`` hits."""
    if len(results) != len(ground_truth):
        raise ValidationError("need exactly one ground-truth id per query")
    if not results:
        raise ValidationError("no queries to evaluate")
    hits = 0
    for res, gt in zip(results, ground_truth):
        if gt is None:
            raise ValidationError("missing ground truth for a query")
        if k > res.k:
            raise ValidationError(f"R@{k} needs results of depth >= {k}, got {res.k}")
        hits += int(np.any(res.ids[:k] == gt))
    return hits / len(results)


def evaluate(queries: Sequence[SparseLexical], corpus: Sequence[SparseLexical],
             ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """R@K where query i's relevant document is corpus item i."""
    index = build_index(corpus)
    depth = max(ks)
    results = [search(index, q, depth) for q in queries]
    truth = list(range(len(queries)))
    return {k: recall_at_k(results, truth, k) for k in ks}


def _prune_all(S: np.ndarray, ratio: float) -> list[SparseLexical]:
    return [prune_to_sparsity(row, ratio) for row in S]


def sparsity_sweep(S_img: np.ndarray, S_txt: np.ndarray, ratios: Sequence[float],
                   prune: str = "both") -> list[dict]:
    """Retrieval at each sparsity ratio, both directions.

    ``prune`` picks which side is pruned: ``both`` (default), ``query`` or
    ``corpus``; the other side keeps every non-zero entry.
    """
    if prune not in ("both", "query", "corpus"):
        raise ValidationError(f"prune must be both/query/corpus, got {prune!r}")
    rows = []
    full_img, full_txt = _prune_all(S_img, 0.0), _prune_all(S_txt, 0.0)
    for direction in DIRECTIONS:
        for ratio in ratios:
            pruned_img, pruned_txt = _prune_all(S_img, ratio), _prune_all(S_txt, ratio)
            if direction == "i2t":
                q_full, c_full, q_cut, c_cut = full_img, full_txt, pruned_img, pruned_txt
            else:
                q_full, c_full, q_cut, c_cut = full_txt, full_img, pruned_txt, pruned_img
            queries = q_cut if prune in ("both", "query") else q_full
            corpus = c_cut if prune in ("both", "corpus") else c_full
            recall = evaluate(queries, corpus)
            activated = np.mean([v.nnz for v in (*queries, *corpus)])
            rows.append({
                "direction": direction,
                "ratio": float(ratio),
                "activated_mean": float(activated),
                "R1": recall[1],
                "R5": recall[5],
                "R10": recall[10],
            })
    return rows


# -- persistence -------------------------------------------------------------

INDEX_MAGIC = b"LEXIDX\x00\x00"
INDEX_VERSION = 1


def save_index(index: InvertedIndex, path) -> None:
    """Little-endian: magic, u32 version, u32 V, u64 docs, u32 tokens, then per token
    u32 id, u64 count, u64 doc ids, f64 values."""
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IIQI", INDEX_VERSION, index.vocab_size, index.doc_count, len(index.postings)))
        for tok in sorted(index.postings):
            docs, vals = index.postings[tok]
            fh.write(struct.pack("<IQ", tok, docs.size))
            fh.write(np.ascontiguousarray(docs, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())


def load_index(path) -> InvertedIndex:
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise ValidationError(f"{path} is not an index file")
    version, vocab_size, doc_count, n_tokens = struct.unpack_from("<IIQI", data, 8)
    if version != INDEX_VERSION:
        raise ValidationError(f"unsupported index version {version}")
    pos = 8 + struct.calcsize("<IIQI")
    postings = {}
    for _ in range(n_tokens):
        tok, count = struct.unpack_from("<IQ", data, pos)
        pos += struct.calcsize("<IQ")
        docs = np.frombuffer(data, dtype="<u8", count=count, offset=pos).astype(np.int64)
        pos += 8 * count
        vals = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        postings[tok] = (docs, vals)
    return InvertedIndex(postings, doc_count, vocab_size)


def write_vectors(path, vectors: Sequence[SparseLexical], ids=None) -> None:
    ids = range(len(vectors)) if ids is None else ids
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, vec in zip(ids, vectors):
            fh.write(vec.to_json(doc_id) + "\n")


def read_vectors(path, vocab_size: int) -> tuple[list, list[SparseLexical]]:
    ids, vecs = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            doc_id, vec = SparseLexical.from_json(line, vocab_size)
            ids.append(doc_id)
            vecs.append(vec)
    return ids, vecs
