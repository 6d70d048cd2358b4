import json

import numpy as np
import pytest

from lexalign.cli import build_parser, main
from lexalign.lexcore import SparseLexical
from lexalign.model import encode_patches
from lexalign.reports import (
    COMPARE_COLUMNS,
    DUMP_COLUMNS,
    FREQUENCY_COLUMNS,
    MANIFEST_NAME,
    RETRIEVAL_COLUMNS,
    TOP_TOKEN_COLUMNS,
    read_csv,
)
from lexalign.retrieval import SWEEP_COLUMNS, load_index, read_vectors
from lexalign.synth import load_dataset
from lexalign.trainer import load_checkpoint

SMALL_CFG = """\
# tiny dataset for fast CLI runs
vocab_size = 32
d_img = 16
d_txt = 16
grid = 3
n_train = 96
n_val = 8
n_test = 24
max_active = 3
n_scenes = 3
scene_classes = 3
scene_grid = 4
"""
TRAIN_SET = ["--set", "epochs=2", "--set", "batch_size=16", "--set", "hidden=16",
             "--set", "warmup_iters=4", "--set", "penalty_warmup=4"]


def _header(path):
    return path.read_text().splitlines()[0]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL_CFG)
    assert main(["gen-data", "--config", str(root / "small.cfg"), "--out", str(root / "data")]) == 0
    for kind in ("overuse", "flops"):
        assert main(["train", "--data", str(root / "data"), "--out", str(root / kind), "--penalty", kind,
                     *TRAIN_SET]) == 0
    return root


class TestParser:
    def test_help_lists_every_flag(self, capsys):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        parsers = dict(sub.choices)
        targets = next(a for a in parsers.pop("eval")._actions if a.dest == "target")
        parsers.update({f"eval {k}": v for k, v in targets.choices.items()})
        for name, p in parsers.items():
            text = p.format_help()
            for action in p._actions:
                for opt in action.option_strings:
                    assert opt in text, (name, opt)

    def test_unknown_flag_exit_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", "x", "--bogus"])
        assert exc.value.code == 1

    def test_help_exit_0(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "sweep", "--help"])
        assert exc.value.code == 0
        assert "--ratios" in capsys.readouterr().out


class TestGenData:
    def test_files_and_manifest(self, ws):
        data = ws / "data"
        for name in ("vocab.txt", "maps.json", "train.jsonl", "val.jsonl", "test.jsonl", "scenes.jsonl",
                     "manifest.json", MANIFEST_NAME):
            assert (data / name).exists(), name
        assert load_dataset(data).config.vocab_size == 32

    def test_same_seed_byte_identical(self, ws, tmp_path):
        assert main(["gen-data", "--config", str(ws / "small.cfg"), "--out", str(tmp_path)]) == 0
        for f in (ws / "data").iterdir():
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name

    def test_seed_flag(self, ws, tmp_path):
        assert main(["gen-data", "--config", str(ws / "small.cfg"), "--seed", "4", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "train.jsonl").read_bytes() != (ws / "data" / "train.jsonl").read_bytes()

    def test_invalid_vocab_names_field(self, tmp_path, capsys):
        assert main(["gen-data", "--set", "vocab_size=1", "--out", str(tmp_path)]) == 1
        assert "vocab_size" in capsys.readouterr().err

    def test_unknown_key_is_error(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("vocab_size = 32\ncolour = blue\n")
        assert main(["gen-data", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "d")]) == 1
        assert "colour" in capsys.readouterr().err


class TestTrain:
    def test_two_checkpoints(self, ws):
        a = load_checkpoint(ws / "overuse" / "checkpoint.lckpt")
        b = load_checkpoint(ws / "flops" / "checkpoint.lckpt")
        assert (a.config.penalty_kind, b.config.penalty_kind) == ("overuse", "flops")
        assert _header(ws / "overuse" / "metrics.csv").startswith("# run_manifest=")
        assert (ws / "overuse" / "loss.png").exists()

    def test_summary(self, ws):
        summary = json.loads((ws / "overuse" / "train_summary.json").read_text())
        assert summary["z_txt_hash_before"] == summary["z_txt_hash_after"]
        assert float(summary["z_img_minus_z_txt_fro"]) > 0

    def test_full_profile_in_manifest(self, ws, tmp_path):
        assert main(["train", "--data", str(ws / "data"), "--out", str(tmp_path), "--profile", "full",
                     "--set", "epochs=1", "--set", "hidden=8", "--no-figures"]) == 0
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        cfg = manifest["config"]["train"]
        assert manifest["config"]["profile"] == "full"
        assert (cfg["lr"], cfg["batch_size"], cfg["warmup_iters"]) == (5e-4, 6144, 1000)
        assert (cfg["beta1"], cfg["beta2"], cfg["adam_eps"]) == (0.9, 0.999, 1e-6)
        assert (cfg["lambda_img"], cfg["lambda_txt"], cfg["penalty_warmup"]) == (5e-4, 1e-3, 2000)
        assert not (tmp_path / "loss.png").exists()

    def test_resume_equals_uninterrupted(self, ws, tmp_path):
        run = tmp_path / "run"
        args = ["--data", str(ws / "data"), "--penalty", "overuse", *TRAIN_SET]
        assert main(["train", "--out", str(run), "--stop-after", "5", *args]) == 0
        assert main(["train", "--data", str(ws / "data"), "--out", str(run),
                     "--resume", str(run / "checkpoint.lckpt")]) == 0
        full = ws / "overuse"
        assert (run / "metrics.csv").read_bytes() == (full / "metrics.csv").read_bytes()
        assert (run / "checkpoint.lckpt").read_bytes() == (full / "checkpoint.lckpt").read_bytes()

    def test_resume_rejects_config(self, ws, tmp_path):
        assert main(["train", "--data", str(ws / "data"), "--out", str(tmp_path), "--penalty", "flops",
                     "--resume", str(ws / "overuse" / "checkpoint.lckpt")]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_2(self, ws, tmp_path, capsys):
        code = main(["train", "--data", str(ws / "data"), "--out", str(tmp_path), "--set", "lr=1e200",
                     "--set", "warmup_iters=0", "--set", "epochs=1", "--set", "batch_size=16", "--no-figures"])
        assert code == 2
        assert "step" in capsys.readouterr().err

    def test_missing_data_exit_1(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 1

    def test_threads_flag(self, ws, tmp_path):
        args = ["train", "--data", str(ws / "data"), "--penalty", "overuse", "--no-figures", *TRAIN_SET]
        assert main([*args, "--out", str(tmp_path), "--threads", "1"]) == 0
        assert (tmp_path / "checkpoint.lckpt").read_bytes() == (ws / "overuse" / "checkpoint.lckpt").read_bytes()


class TestDumpLexical:
    def test_full_support(self, ws, tmp_path):
        ckpt = ws / "overuse" / "checkpoint.lckpt"
        assert main(["dump-lexical", "--checkpoint", str(ckpt), "--data", str(ws / "data"), "--ids", "104,105",
                     "--top-n", "32", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "lexical_dump.csv")
        assert tuple(rows[0]) == DUMP_COLUMNS
        for sample in ("104", "105"):
            for modality in ("image", "text"):
                vals = [float(r["value"]) for r in rows if r["sample_id"] == sample and r["modality"] == modality]
                assert len(vals) == 32
                assert vals == sorted(vals, reverse=True)
                assert sum(v * v for v in vals) == pytest.approx(1.0, abs=1e-12)

    def test_single_patch(self, ws, tmp_path):
        ckpt = ws / "overuse" / "checkpoint.lckpt"
        assert main(["dump-lexical", "--checkpoint", str(ckpt), "--data", str(ws / "data"), "--ids", "110",
                     "--patches", "4", "--top-n", "32", "--out", str(tmp_path), "--no-figures"]) == 0
        rows = read_csv(tmp_path / "lexical_dump.csv")
        got = np.zeros(32)
        for r in rows:
            got[int(r["token_id"])] = float(r["value"])
        split = load_dataset(ws / "data", ("test",))["test"]
        row = int(np.flatnonzero(split.concept_ids == 110)[0])
        expected = encode_patches(load_checkpoint(ckpt).params, split.img[row], [4])
        np.testing.assert_array_equal(got, expected)

    def test_bad_id_exit_1(self, ws, tmp_path, capsys):
        assert main(["dump-lexical", "--checkpoint", str(ws / "overuse" / "checkpoint.lckpt"),
                     "--data", str(ws / "data"), "--ids", "3", "--out", str(tmp_path)]) == 1
        assert "sample id 3" in capsys.readouterr().err


class TestComparePenalty:
    def test_identical_checkpoints(self, ws, tmp_path):
        ckpt = str(ws / "overuse" / "checkpoint.lckpt")
        assert main(["compare-penalty", "--a", ckpt, "--b", ckpt, "--data", str(ws / "data"),
                     "--out", str(tmp_path)]) == 0
        for r in read_csv(tmp_path / "compare.csv"):
            assert r["a"] == r["b"], r["metric"]

    def test_schema(self, ws, tmp_path):
        assert main(["compare-penalty", "--a", str(ws / "overuse" / "checkpoint.lckpt"),
                     "--b", str(ws / "flops" / "checkpoint.lckpt"), "--data", str(ws / "data"),
                     "--out", str(tmp_path), "--top-k", "5"]) == 0
        compare = read_csv(tmp_path / "compare.csv")
        assert tuple(compare[0]) == COMPARE_COLUMNS
        metrics = [r["metric"] for r in compare]
        for m in ("max_share", "gini_share", "i2t_R1", "t2i_R10"):
            assert m in metrics
        freq = read_csv(tmp_path / "token_frequency.csv")
        assert tuple(freq[0]) == FREQUENCY_COLUMNS and len(freq) == 32
        assert sum(float(r["share_a"]) for r in freq) == pytest.approx(1.0)
        top = read_csv(tmp_path / "top_tokens.csv")
        assert tuple(top[0]) == TOP_TOKEN_COLUMNS and len(top) == 10
        assert (tmp_path / "concentration.png").exists()


class TestEval:
    def test_gradcheck(self, tmp_path):
        assert main(["eval", "gradcheck", "--instances", "2", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "gradcheck.csv")
        assert all(r["passed"] == "1" for r in rows)

    def test_gradcheck_failure_exit_2(self, tmp_path):
        assert main(["eval", "gradcheck", "--instances", "1", "--tol", "0", "--out", str(tmp_path)]) == 2

    def test_sweep_rows(self, ws, tmp_path):
        assert main(["eval", "sweep", "--checkpoint", str(ws / "overuse" / "checkpoint.lckpt"),
                     "--data", str(ws / "data"), "--ratios", "0,0.5,0.9,0.98", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        assert tuple(rows[0]) == SWEEP_COLUMNS
        assert [r["direction"] for r in rows] == ["i2t"] * 4 + ["t2i"] * 4
        assert [float(r["ratio"]) for r in rows[:4]] == [0.0, 0.5, 0.9, 0.98]

    def test_sweep_reproducible(self, ws, tmp_path):
        args = ["eval", "sweep", "--checkpoint", str(ws / "overuse" / "checkpoint.lckpt"),
                "--data", str(ws / "data"), "--ratios", "0,0.9"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        for name in ("sweep.csv", "sweep.png", MANIFEST_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_bad_ratio(self, ws, tmp_path):
        assert main(["eval", "sweep", "--oracle", "--data", str(ws / "data"), "--ratios", "0,1.5",
                     "--out", str(tmp_path)]) == 1

    def test_retrieval_oracle(self, ws, tmp_path):
        assert main(["eval", "retrieval", "--oracle", "--data", str(ws / "data"), "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "retrieval.csv")
        assert tuple(rows[0]) == RETRIEVAL_COLUMNS
        assert all(float(r["R1"]) == 1.0 for r in rows)

    def test_retrieval_from_vector_files(self, ws, tmp_path):
        ckpt = str(ws / "overuse" / "checkpoint.lckpt")
        assert main(["eval", "retrieval", "--checkpoint", ckpt, "--data", str(ws / "data"),
                     "--out", str(tmp_path / "a")]) == 0
        ids, vecs = read_vectors(tmp_path / "a" / "txt_vectors.jsonl", 32)
        index = load_index(tmp_path / "a" / "index_txt.bin")
        assert index.doc_count == len(vecs) and index.reconstruct(0) == vecs[0]
        assert main(["eval", "retrieval", "--vectors-img", str(tmp_path / "a" / "img_vectors.jsonl"),
                     "--vectors-txt", str(tmp_path / "a" / "txt_vectors.jsonl"), "--vocab-size", "32",
                     "--out", str(tmp_path / "b")]) == 0
        a, b = read_csv(tmp_path / "a" / "retrieval.csv"), read_csv(tmp_path / "b" / "retrieval.csv")
        assert [r["R1"] for r in a] == [r["R1"] for r in b]

    def test_retrieval_needs_one_source(self, ws, tmp_path):
        assert main(["eval", "retrieval", "--data", str(ws / "data"), "--out", str(tmp_path)]) == 1

    def test_patchdis(self, ws, tmp_path):
        assert main(["eval", "patchdis", "--checkpoint", str(ws / "overuse" / "checkpoint.lckpt"),
                     "--data", str(ws / "data"), "--trials", "20", "--out", str(tmp_path)]) == 0
        text = (tmp_path / "patchdis.csv").read_text()
        assert "random_baseline=" in text and "macro" in text
        rows = read_csv(tmp_path / "patchdis.csv")
        assert rows[-1]["class_id"] == "mIoU"
        assert 0.0 <= float(rows[-1]["iou"]) <= 1.0
        assert (tmp_path / "patchdis.png").exists()
