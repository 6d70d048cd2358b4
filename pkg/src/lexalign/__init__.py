"""Sparse lexical alignment of two modalities over a shared vocabulary."""

from lexalign.errors import HashMismatchError, NumericalError, ValidationError
from lexalign.lexcore import (
    Codebook,
    SparseLexical,
    Vocabulary,
    elu1p,
    image_lexical_head,
    l2_normalize,
    patch_lexical,
    prune_to_sparsity,
    sparse_dot,
    sparsify_topk,
    sparsify_value,
    text_lexical_head,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "HashMismatchError",
    "NumericalError",
    "SparseLexical",
    "ValidationError",
    "Vocabulary",
    "elu1p",
    "image_lexical_head",
    "l2_normalize",
    "patch_lexical",
    "prune_to_sparsity",
    "sparse_dot",
    "sparsify_topk",
    "sparsify_value",
    "text_lexical_head",
]
