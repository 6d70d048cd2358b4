"""Patch-level discrimination score: zero-shot patch classification scored by mIoU.

Class "names" are token sequences encoded by the text encoder; every patch
is encoded on its own and assigned the class with the largest dot product.
Scores are macro-averaged per scene, then averaged over scenes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lexalign.errors import ValidationError
from lexalign.lexcore import l2_normalize
from lexalign.model import EncoderParams, encode_each_patch, encode_text_batch
from lexalign.synth import PatchScene

REPORT_COLUMNS = ("class_id", "iou", "support_patches")


@dataclass
class ClassEmbeddingSet:
    class_ids: np.ndarray
    vectors: np.ndarray  # C x V, unit rows

    def __len__(self):
        return len(self.class_ids)


@dataclass
class MIoU:
    per_class: dict[int, float]  # classes present in prediction or ground truth
    support: dict[int, int]  # ground-truth patch count per class
    mean: float


def class_text_features(token_sequences: Sequence[Sequence[int]], txt_map: np.ndarray) -> np.ndarray:
    """Noise-free text features of each class "name" (its tokens, equally weighted)."""
    vocab_size = txt_map.shape[1]
    seen = set()
    feats = []
    for seq in token_sequences:
        toks = tuple(int(t) for t in seq)
        if not toks:
            raise ValidationError("empty class token sequence")
        if any(t < 0 or t >= vocab_size for t in toks):
            raise ValidationError(f"class token outside the vocabulary: {toks}")
        key = tuple(sorted(set(toks)))
        if key in seen:
            raise ValidationError(f"duplicate class name {toks}")
        seen.add(key)
        weights = np.zeros(vocab_size)
        weights[list(key)] = 1.0
        feats.append(txt_map @ l2_normalize(weights))
    return np.stack(feats)


def class_embeddings(params: EncoderParams, token_sequences: Sequence[Sequence[int]],
                     txt_map: np.ndarray) -> ClassEmbeddingSet:
    if len(token_sequences) < 2:
        raise ValidationError("need at least 2 classes")
    vectors = encode_text_batch(params, class_text_features(token_sequences, txt_map))
    return ClassEmbeddingSet(np.arange(len(token_sequences)), vectors)


def predict_from_vectors(patch_vectors: np.ndarray, classes: ClassEmbeddingSet) -> np.ndarray:
    # argmax returns the first maximum: ties go to the lowest class id
    return np.argmax(patch_vectors @ classes.vectors.T, axis=1)


def classify_patches(params: EncoderParams, scene: PatchScene, classes: ClassEmbeddingSet) -> np.ndarray:
    """Predicted class id per patch (row-major over the grid)."""
    return predict_from_vectors(encode_each_patch(params, scene.features), classes)


def miou(pred, gt) -> MIoU:
    """Per-class IoU over patch sets; the mean runs over classes present in ``gt``."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction grid {pred.shape} does not match ground truth {gt.shape}")
    per_class, support = {}, {}
    for c in np.union1d(pred, gt).tolist():
        p, g = pred == c, gt == c
        union = int(np.sum(p | g))
        per_class[c] = int(np.sum(p & g)) / union
        support[c] = int(g.sum())
    present = [c for c in per_class if support[c] > 0]
    return MIoU(per_class, support, float(np.mean([per_class[c] for c in present])))


def random_baseline(scene: PatchScene, n_trials: int = 200, seed=0) -> float:
    """Mean mIoU of uniformly random patch labels."""
    rng = np.random.default_rng(seed)
    n = scene.labels.size
    draws = rng.integers(0, scene.n_classes, size=(n_trials, n))
    return float(np.mean([miou(d, scene.labels).mean for d in draws]))


@dataclass
class PatchDisReport:
    scene_miou: list[float]
    class_iou: dict[int, float]
    class_support: dict[int, int]
    accuracy: float
    random_miou: float

    @property
    def miou(self) -> float:
        return float(np.mean(self.scene_miou))

    def rows(self) -> list[tuple]:
        rows = [(c, self.class_iou[c], self.class_support[c]) for c in sorted(self.class_iou)]
        rows.append(("mIoU", self.miou, sum(self.class_support.values())))
        return rows


def eval_patchdis(params: EncoderParams, scenes: Sequence[PatchScene], txt_map: np.ndarray,
                  n_random_trials: int = 200, seed=0) -> PatchDisReport:
    if not scenes:
        raise ValidationError("no scenes to evaluate")
    scene_scores, randoms = [], []
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    support: dict[int, int] = {}
    correct = total = 0
    for i, scene in enumerate(scenes):
        classes = class_embeddings(params, [[t] for t in scene.class_tokens], txt_map)
        pred = classify_patches(params, scene, classes)
        result = miou(pred, scene.labels)
        scene_scores.append(result.mean)
        for c, iou in sorted(result.per_class.items()):
            if result.support[c] == 0:
                continue
            sums[c] = sums.get(c, 0.0) + iou
            counts[c] = counts.get(c, 0) + 1
            support[c] = support.get(c, 0) + result.support[c]
        correct += int(np.sum(pred == scene.labels))
        total += scene.labels.size
        randoms.append(random_baseline(scene, n_random_trials, seed=[int(seed) if np.isscalar(seed) else 0, i]))
    class_iou = {c: sums[c] / counts[c] for c in sorted(sums)}
    return PatchDisReport(scene_scores, class_iou, support, correct / total, float(np.mean(randoms)))
