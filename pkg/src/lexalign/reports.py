"""Run manifests, CSV writers and the summary statistics behind the CLI reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lexalign.errors import ValidationError
from lexalign.lexcore import SparseLexical, sparsify_value
from lexalign.model import EncoderParams, encode_image_batch, encode_text_batch
from lexalign.retrieval import evaluate

MANIFEST_NAME = "run_manifest.json"
RETRIEVAL_COLUMNS = ("direction", "activated_mean", "R1", "R5", "R10")
COMPARE_COLUMNS = ("metric", "a", "b")
FREQUENCY_COLUMNS = ("token_id", "token", "freq_a", "freq_b", "share_a", "share_b")
TOP_TOKEN_COLUMNS = ("checkpoint", "rank", "token_id", "token", "share", "freq")
DUMP_COLUMNS = ("sample_id", "modality", "patches", "rank", "token_id", "token", "value")


@dataclass
class RunManifest:
    """Provenance record written into an output directory before any work starts."""

    subcommand: str
    config_path: str | None
    seed: int | None
    inputs: dict
    outputs: list[str]
    tool_version: str
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        payload = json.dumps([self.subcommand, self.config], sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def comment(self) -> str:
        return f"# run_manifest={MANIFEST_NAME} config_hash={self.config_hash}"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        doc = asdict(self)
        doc["config_hash"] = self.config_hash
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def fmt(x):
    """Round-trippable text for CSV cells."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return x


def write_csv(path, columns: Sequence[str], rows: Iterable, comments: Sequence[str] = ()) -> Path:
    """Rows may be dicts keyed by column or plain sequences."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in comments:
            fh.write(line.rstrip("\n") + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            cells = [row[c] for c in columns] if isinstance(row, dict) else list(row)
            if len(cells) != len(columns):
                raise ValidationError(f"row has {len(cells)} cells, expected {len(columns)}")
            writer.writerow([fmt(c) for c in cells])
    return Path(path)


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, ``#`` comment lines skipped."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# -- encoding ----------------------------------------------------------------

def encode_split(params: EncoderParams, split) -> tuple[np.ndarray, np.ndarray]:
    """Dense lexical vectors ``(S_img, S_txt)`` for every pair of a split."""
    if params.vocab_size != split.lexical[0].size:
        raise ValidationError(
            f"vocabulary mismatch: checkpoint has {params.vocab_size} tokens, data has {split.lexical[0].size}"
        )
    return encode_image_batch(params, split.img), encode_text_batch(params, split.txt)


def to_sparse(S: np.ndarray, mode: str = "value") -> list[SparseLexical]:
    if mode == "value":
        return [sparsify_value(row) for row in S]
    if mode == "none":
        return [SparseLexical.from_dense(row) for row in S]
    raise ValidationError(f"unknown sparsification {mode!r} (value|none)")


def retrieval_rows(img: Sequence[SparseLexical], txt: Sequence[SparseLexical]) -> list[dict]:
    """R@{1,5,10} both directions; pair i of the two lists is the relevant match."""
    if len(img) != len(txt):
        raise ValidationError("image and text sides must have the same number of items")
    rows = []
    for direction, queries, corpus in (("i2t", img, txt), ("t2i", txt, img)):
        recall = evaluate(queries, corpus, (1, 5, 10))
        activated = float(np.mean([v.nnz for v in (*queries, *corpus)]))
        rows.append({"direction": direction, "activated_mean": activated,
                     "R1": recall[1], "R5": recall[5], "R10": recall[10]})
    return rows


# -- concentration -------------------------------------------------------------

def column_share(S: np.ndarray) -> np.ndarray:
    """Per-token mean activation normalized to sum to one."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0:
        raise ValidationError("need a non-empty N x V matrix")
    m = S.mean(axis=0)
    total = m.sum()
    if not total > 0:
        raise ValidationError("all activations are zero")
    return m / total


def gini(x) -> float:
    """Gini coefficient of a non-negative vector (0 = uniform, ->1 = one entry)."""
    x = np.sort(np.asarray(x, dtype=np.float64).reshape(-1))
    n = x.size
    if n == 0 or x[0] < 0:
        raise ValidationError("gini needs a non-empty non-negative vector")
    total = x.sum()
    if total == 0:
        return 0.0
    rank = np.arange(1, n + 1)
    return float(np.sum((2 * rank - n - 1) * x) / (n * total))


def activation_frequency(S: np.ndarray) -> np.ndarray:
    """Fraction of vectors in which each token survives value thresholding."""
    S = np.asarray(S, dtype=np.float64)
    return np.mean(S > 1.0 / math.sqrt(S.shape[1]), axis=0)


@dataclass
class Concentration:
    share: np.ndarray
    frequency: np.ndarray

    @property
    def max_share(self) -> float:
        return float(self.share.max())

    @property
    def gini(self) -> float:
        return gini(self.share)

    def top_tokens(self, k: int = 10) -> np.ndarray:
        return np.argsort(-self.share, kind="stable")[:k]


def concentration(S_img: np.ndarray, S_txt: np.ndarray) -> Concentration:
    """Token concentration over both modalities' vectors stacked together."""
    S = np.concatenate([S_img, S_txt])
    return Concentration(column_share(S), activation_frequency(S))


@dataclass
class CheckpointSummary:
    conc: Concentration
    retrieval: list[dict]


def summarize(params: EncoderParams, split) -> CheckpointSummary:
    S_img, S_txt = encode_split(params, split)
    rows = retrieval_rows(to_sparse(S_img), to_sparse(S_txt))
    return CheckpointSummary(concentration(S_img, S_txt), rows)


def compare_rows(a: CheckpointSummary, b: CheckpointSummary) -> list[tuple]:
    rows = [
        ("max_share", a.conc.max_share, b.conc.max_share),
        ("max_share_x_vocab", a.conc.max_share * a.conc.share.size, b.conc.max_share * b.conc.share.size),
        ("gini_share", a.conc.gini, b.conc.gini),
        ("mean_active_freq", float(a.conc.frequency.mean()), float(b.conc.frequency.mean())),
    ]
    for ra, rb in zip(a.retrieval, b.retrieval):
        for key in ("R1", "R5", "R10", "activated_mean"):
            rows.append((f"{ra['direction']}_{key}", ra[key], rb[key]))
    return rows
