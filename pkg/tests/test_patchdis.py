import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lexalign.errors import ValidationError
from lexalign.model import encode_each_patch
from lexalign.patchdis import (
    ClassEmbeddingSet,
    class_embeddings,
    class_text_features,
    classify_patches,
    eval_patchdis,
    miou,
    predict_from_vectors,
    random_baseline,
)
from lexalign.synth import PatchScene, scene_labels
from lexalign.trainer import new_checkpoint

from conftest import SMALL_TRAIN


def _miou_sets(pred, gt):
    """Set-based IoU over patch index sets; mean over classes present in gt."""
    ious = []
    for c in sorted(set(gt)):
        p = {i for i, x in enumerate(pred) if x == c}
        g = {i for i, x in enumerate(gt) if x == c}
        ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious)


class TestMIoU:
    def test_perfect(self):
        assert miou([0, 1, 0, 1], [0, 1, 0, 1]).mean == 1.0

    def test_hand_counted(self):
        r = miou([0, 1, 1, 1], [0, 0, 1, 1])
        assert r.per_class == {0: 0.5, 1: 2 / 3}
        assert abs(r.mean - 0.5833333333333334) < 1e-12

    def test_class_absent_from_gt_not_averaged(self):
        # class 2 is predicted but absent from gt: it gets an IoU of 0 but is not averaged
        r = miou([0, 2, 1, 1], [0, 0, 1, 1])
        assert r.per_class[2] == 0.0
        assert r.mean == pytest.approx((0.5 + 1.0) / 2)

    def test_absent_in_both_never_counted(self):
        r = miou([0, 0, 1, 1], [0, 0, 1, 1])
        assert set(r.per_class) == {0, 1}

    def test_grid_mismatch(self):
        with pytest.raises(ValidationError):
            miou([0, 1, 1], [0, 1, 1, 0])

    @settings(max_examples=60)
    @given(arrays(np.int64, 16, elements=st.integers(0, 3)), arrays(np.int64, 16, elements=st.integers(0, 3)))
    def test_matches_set_oracle(self, pred, gt):
        assert miou(pred, gt).mean == pytest.approx(_miou_sets(pred.tolist(), gt.tolist()), abs=1e-12)

    @settings(max_examples=60)
    @given(arrays(np.int64, 12, elements=st.integers(0, 3)), arrays(np.int64, 12, elements=st.integers(0, 3)),
           st.permutations(range(4)))
    def test_relabel_invariant_and_bounded(self, pred, gt, perm):
        relabel = np.array(perm)
        a, b = miou(pred, gt).mean, miou(relabel[pred], relabel[gt]).mean
        assert 0.0 <= a <= 1.0
        assert a == pytest.approx(b, abs=1e-12)


class TestRandomBaseline:
    def test_monte_carlo_oracle(self):
        # independent simulation with python's own RNG and set arithmetic
        import random

        labels = scene_labels(5, 8)
        scene = PatchScene(8, labels, np.zeros((64, 2)), np.arange(5))
        gen = random.Random(7)
        gt = labels.tolist()
        sims = [_miou_sets([gen.randrange(5) for _ in gt], gt) for _ in range(2000)]
        expected, spread = np.mean(sims), np.std(sims)
        got = random_baseline(scene, n_trials=2000, seed=3)
        assert abs(got - expected) < 4 * spread * np.sqrt(2 / 2000)


class TestClassify:
    def test_orthogonal_one_hots(self):
        classes = ClassEmbeddingSet(np.arange(3), np.eye(3, 5))
        assert predict_from_vectors(np.eye(3, 5)[[1]], classes).tolist() == [1]

    def test_all_tie_predicts_zero(self):
        classes = ClassEmbeddingSet(np.arange(3), np.full((3, 4), 0.5))
        assert predict_from_vectors(np.full((6, 4), 0.5), classes).tolist() == [0] * 6

    def test_class_embeddings_distinct(self, small_dataset):
        params = new_checkpoint(SMALL_TRAIN, small_dataset).params
        emb = class_embeddings(params, [[0], [1]], small_dataset.maps.txt)
        assert emb.vectors[0] @ emb.vectors[1] < 1.0

    def test_class_embedding_errors(self, small_dataset):
        txt_map = small_dataset.maps.txt
        with pytest.raises(ValidationError, match="duplicate"):
            class_text_features([[3], [3]], txt_map)
        with pytest.raises(ValidationError):
            class_text_features([[0], [txt_map.shape[1]]], txt_map)
        params = new_checkpoint(SMALL_TRAIN, small_dataset).params
        with pytest.raises(ValidationError):
            class_embeddings(params, [[1]], txt_map)

    def test_patch_permutation_equivariant(self, small_dataset, small_run):
        params = small_run.checkpoint.params
        scene = small_dataset.scenes[0]
        classes = class_embeddings(params, [[t] for t in scene.class_tokens], small_dataset.maps.txt)
        perm = np.random.default_rng(0).permutation(scene.labels.size)
        shuffled = PatchScene(scene.grid, scene.labels[perm], scene.features[perm], scene.class_tokens)
        np.testing.assert_array_equal(classify_patches(params, shuffled, classes),
                                      classify_patches(params, scene, classes)[perm])

    def test_single_patch_vectors(self, small_dataset, small_run):
        from lexalign.model import encode_patches

        params = small_run.checkpoint.params
        feats = small_dataset.scenes[0].features
        each = encode_each_patch(params, feats)
        np.testing.assert_allclose(each[5], encode_patches(params, feats, [5]), atol=1e-14)


class TestEval:
    def test_empty(self, small_run, small_dataset):
        with pytest.raises(ValidationError):
            eval_patchdis(small_run.checkpoint.params, [], small_dataset.maps.txt)

    def test_report(self, small_run, small_dataset):
        rep = eval_patchdis(small_run.checkpoint.params, small_dataset.scenes, small_dataset.maps.txt,
                            n_random_trials=50)
        assert len(rep.scene_miou) == len(small_dataset.scenes)
        assert 0 <= rep.miou <= 1 and 0 <= rep.accuracy <= 1
        rows = rep.rows()
        assert rows[-1][0] == "mIoU" and rows[-1][1] == rep.miou
        assert sum(r[2] for r in rows[:-1]) == sum(s.labels.size for s in small_dataset.scenes)

    def test_perfect_single_scene(self, small_dataset):
        # a hand-built model-free check: patch vectors equal to the class embeddings
        labels = scene_labels(2, 2)
        classes = ClassEmbeddingSet(np.arange(2), np.eye(2, 6))
        pred = predict_from_vectors(np.eye(2, 6)[labels], classes)
        assert miou(pred, labels).mean == 1.0
