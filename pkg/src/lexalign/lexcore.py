"""Vocabulary, codebooks, lexical heads and sparsification.

A lexical vector is a length-V non-negative, unit-norm score vector whose
j-th entry says how strongly a sample relates to vocabulary token j. Dense
lexical vectors are plain ``float64`` numpy arrays; the pruned form used for
retrieval is :class:`SparseLexical`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lexalign.errors import ValidationError

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class Vocabulary:
    """Token strings with stable ids ``0..V-1`` (line order of the vocab file)."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValidationError(f"vocabulary needs at least 2 tokens, got {len(self.tokens)}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValidationError(f"unknown token {token!r}") from None

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        width = max(4, len(str(size - 1)))
        return cls(tuple(f"tok{i:0{width}d}" for i in range(size)))

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(line for line in text.split("\n") if line != ""))

    def to_file(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass
class Codebook:
    """V x d matrix of lexical codes. ``frozen`` marks it read-only for training."""

    matrix: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValidationError("codebook must be a 2-D matrix")

    @property
    def vocab_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def _codes(codebook) -> np.ndarray:
    return codebook.matrix if isinstance(codebook, Codebook) else np.asarray(codebook, dtype=np.float64)


@dataclass(frozen=True)
class SparseLexical:
    """Sorted (token-id, value) pairs over a vocabulary of ``size`` tokens."""

    ids: np.ndarray
    values: np.ndarray
    size: int
    _checked: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)
        if self._checked:
            return
        if ids.shape != values.shape:
            raise ValidationError("ids and values must have the same length")
        if ids.size:
            if ids[0] < 0 or ids[-1] >= self.size:
                raise ValidationError(f"token ids must lie in [0, {self.size})")
            if np.any(np.diff(ids) <= 0):
                raise ValidationError("token ids must be strictly increasing")
            if not np.all(values > 0):
                raise ValidationError("sparse values must be positive")

    @classmethod
    def from_entries(cls, entries: Iterable[Sequence[float]], size: int) -> "SparseLexical":
        entries = sorted((int(t), float(v)) for t, v in entries)
        ids = [t for t, _ in entries]
        vals = [v for _, v in entries]
        return cls(np.array(ids, dtype=np.int64), np.array(vals, dtype=np.float64), size)

    @classmethod
    def from_dense(cls, s: np.ndarray) -> "SparseLexical":
        s = np.asarray(s, dtype=np.float64)
        ids = np.flatnonzero(s > 0)
        return cls(ids, s[ids], s.shape[0], _checked=True)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(t), float(v)) for t, v in zip(self.ids, self.values)]

    @property
    def nnz(self) -> int:
        return int(self.ids.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.size)
        out[self.ids] = self.values
        return out

    def to_json(self, doc_id) -> str:
        return json.dumps({"id": doc_id, "entries": [[t, v] for t, v in self.entries]})

    @classmethod
    def from_json(cls, line: str, size: int) -> tuple[object, "SparseLexical"]:
        obj = json.loads(line)
        return obj["id"], cls.from_entries(obj["entries"], size)

    def __eq__(self, other):
        if not isinstance(other, SparseLexical):
            return NotImplemented
        return (
            self.size == other.size
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def elu1p(x):
    """``x + 1`` for ``x >= 0`` and ``exp(x)`` below zero, elementwise."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("elu1p input must be finite")
    out = np.where(arr >= 0, arr + 1.0, np.exp(np.minimum(arr, 0.0)))
    return float(out) if out.ndim == 0 else out


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = math.sqrt(float(np.dot(v.ravel(), v.ravel())))
    if not norm > NORM_FLOOR:
        raise ValidationError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(~(norms > NORM_FLOOR)):
        raise ValidationError("cannot normalize a zero row")
    return m / norms[:, None]


def lexical_scores(z, codebook) -> np.ndarray:
    """Un-normalized positive scores ``elu1p(z @ Z.T)`` (one row per input row)."""
    codes = _codes(codebook)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != codes.shape[1]:
        raise ValidationError(
            f"feature dim {z.shape[1]} does not match codebook dim {codes.shape[1]}"
        )
    return elu1p(z @ codes.T)


def text_lexical_head(z, codebook) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 2 and z.shape[0] != 1:
        raise ValidationError("text head expects a single feature row")
    return l2_normalize(lexical_scores(z, codebook)[0])


def image_lexical_head(z, codebook) -> np.ndarray:
    """Max-pool the per-patch scores over patches, then normalize."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValidationError("image head expects an n x d patch matrix with n >= 1")
    return l2_normalize(lexical_scores(z, codebook).max(axis=0))


def patch_lexical(z, codebook, patch_ids) -> np.ndarray:
    """Like :func:`image_lexical_head` but pooling only over ``patch_ids``."""
    z = np.asarray(z, dtype=np.float64)
    ids = np.asarray(sorted(set(int(i) for i in patch_ids)), dtype=np.int64)
    if ids.size == 0:
        raise ValidationError("patch_ids must be non-empty")
    if ids[0] < 0 or ids[-1] >= z.shape[0]:
        raise ValidationError(f"patch ids must lie in [0, {z.shape[0]})")
    return image_lexical_head(z[ids], codebook)


def sparsify_value(s, size: int | None = None) -> SparseLexical:
    """Keep entries strictly above ``1/sqrt(V)``; values are not renormalized."""
    s = np.asarray(s, dtype=np.float64)
    size = s.shape[0] if size is None else int(size)
    ids = np.flatnonzero(s > 1.0 / math.sqrt(size))
    return SparseLexical(ids, s[ids], size, _checked=True)


def _top_ids(s: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -s: equal values keep ascending token-id order
    order = np.argsort(-s, kind="stable")[:k]
    order = order[s[order] > 0]
    return np.sort(order)


def sparsify_topk(s, k: int) -> SparseLexical:
    s = np.asarray(s, dtype=np.float64)
    if not 1 <= k <= s.shape[0]:
        raise ValidationError(f"k must lie in [1, {s.shape[0]}], got {k}")
    ids = _top_ids(s, k)
    return SparseLexical(ids, s[ids], s.shape[0], _checked=True)


def kept_for_sparsity(ratio: float, size: int) -> int:
    """Number of entries kept so that at least ``ratio`` of the vocabulary is zero.

    Floors ``(1 - ratio) * V`` (with a small slack for float error) and never
    drops below one entry.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValidationError(f"sparsity ratio must lie in [0, 1), got {ratio}")
    return max(1, min(size, math.floor((1.0 - ratio) * size + 1e-9)))


def prune_to_sparsity(s, ratio: float) -> SparseLexical:
    s = np.asarray(s, dtype=np.float64)
    return sparsify_topk(s, kept_for_sparsity(ratio, s.shape[0]))


def sparse_dot(a: SparseLexical, b: SparseLexical) -> float:
    """Merge-join dot product over shared token ids."""
    if a.size != b.size:
        raise ValidationError("sparse vectors come from different vocabularies")
    ia, ib = a.ids, b.ids
    i = j = 0
    total = 0.0
    while i < ia.size and j < ib.size:
        ta, tb = ia[i], ib[j]
        if ta == tb:
            total += a.values[i] * b.values[j]
            i += 1
            j += 1
        elif ta < tb:
            i += 1
        else:
            j += 1
    return float(total)
