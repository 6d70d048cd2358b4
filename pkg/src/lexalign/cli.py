"""``lexalign`` command-line tool.

Exit codes: 0 success, 1 invalid input (bad flag, config key, id, file
format), 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from lexalign import __version__
from lexalign import config as cfgfile
from lexalign import reports
from lexalign.errors import NumericalError, ValidationError
from lexalign.gradcore import DEFAULT_EPS, DEFAULT_TOL, grad_check
from lexalign.lexcore import Vocabulary
from lexalign.model import TRAINABLE, encode_image, encode_patches, encode_text, gradcheck_instance
from lexalign.patchdis import REPORT_COLUMNS, eval_patchdis
from lexalign.retrieval import SWEEP_COLUMNS, build_index, read_vectors, save_index, sparsity_sweep, write_vectors
from lexalign.synth import SynthConfig, build_dataset, load_dataset, write_dataset
from lexalign.trainer import PROFILES, load_checkpoint, resume, save_checkpoint, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DEFAULT_RATIOS = "0,0.5,0.9,0.95,0.98,0.99"
GRADCHECK_COLUMNS = ("instance", "parameter", "max_rel_err", "mean_rel_err", "checked", "skipped", "passed")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; here that is a validation error (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


# -- shared plumbing -------------------------------------------------------------

def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _start(args, out: Path, inputs: dict, outputs: list[str], config: dict, seed=None) -> reports.RunManifest:
    manifest = reports.RunManifest(
        subcommand=args.command if args.command != "eval" else f"eval {args.target}",
        config_path=getattr(args, "config", None),
        seed=seed,
        inputs={k: (str(v) if v is not None else None) for k, v in inputs.items()},
        outputs=outputs,
        tool_version=__version__,
        config=config,
    )
    manifest.write(out)
    return manifest


def _figures(args) -> bool:
    return not getattr(args, "no_figures", False)


def _raw_config(args) -> dict[str, str]:
    raw = cfgfile.read_file(args.config) if getattr(args, "config", None) else {}
    raw.update(cfgfile.parse_assignments(getattr(args, "set", None)))
    return raw


def _load_data(path, splits):
    if not Path(path).is_dir():
        raise ValidationError(f"dataset directory {path} does not exist")
    return load_dataset(path, splits=splits)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _rows_for_ids(split, ids) -> list[int]:
    rows = []
    for sample_id in ids:
        hit = np.flatnonzero(split.concept_ids == sample_id)
        if hit.size == 0:
            lo, hi = (int(split.concept_ids[0]), int(split.concept_ids[-1])) if len(split) else (0, -1)
            raise ValidationError(f"sample id {sample_id} is not in the {split.name} split (ids {lo}..{hi})")
        rows.append(int(hit[0]))
    return rows


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = _raw_config(args)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    config = cfgfile.apply(SynthConfig(), raw)
    vocab = Vocabulary.from_file(args.vocab) if args.vocab else None
    out = _out_dir(args.out)
    files = ["vocab.txt", "maps.json", "train.jsonl", "val.jsonl", "test.jsonl", "scenes.jsonl", "manifest.json"]
    _start(args, out, {"vocab": args.vocab}, files, asdict(config), seed=config.seed)
    manifest = write_dataset(build_dataset(config, vocab), out)
    print(f"wrote dataset {manifest['dataset_hash']} to {out} "
          f"({config.n_train}/{config.n_val}/{config.n_test} pairs, {config.n_scenes} scenes)")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args.out)
    ckpt_path = out / "checkpoint.lckpt"
    metrics_path = out / "metrics.csv"
    outputs = [ckpt_path.name, metrics_path.name, "train_summary.json"] + (["loss.png"] if _figures(args) else [])
    if args.resume:
        if args.config or args.set or args.penalty or args.seed is not None or args.profile:
            raise UsageError("--resume continues the checkpoint's own config; drop --config/--set/--penalty/--seed/--profile")
        ckpt = _load_ckpt(args.resume)
        config = ckpt.config
        profile = None
    else:
        profile = args.profile or "desk"
        raw = _raw_config(args)
        if args.penalty:
            raw["penalty_kind"] = args.penalty
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        config = cfgfile.apply(PROFILES[profile], raw)
        ckpt = None
    dataset = _load_data(args.data, ("train",))
    manifest = _start(args, out, {"data": args.data, "resume": args.resume}, outputs,
                      {"profile": profile, "train": asdict(config), "dataset_hash": dataset.dataset_hash},
                      seed=config.seed)
    if ckpt is None:
        result = train(config, dataset, stop_after=args.stop_after, metrics_path=metrics_path,
                       preamble=manifest.comment())
    else:
        result = resume(ckpt, dataset, stop_after=args.stop_after, metrics_path=metrics_path,
                        preamble=manifest.comment())
    final = result.checkpoint
    save_checkpoint(final, ckpt_path)
    arrays = final.params.arrays
    summary = {
        "run_manifest": reports.MANIFEST_NAME,
        "step": final.step,
        "final_loss": repr(result.final_loss) if result.metrics else None,
        "config_hash": config.hash(),
        "dataset_hash": dataset.dataset_hash,
        "z_txt_hash_before": result.z_txt_hash_before,
        "z_txt_hash_after": result.z_txt_hash_after,
        "z_img_minus_z_txt_fro": repr(float(np.linalg.norm(arrays["z_img"] - arrays["z_txt"]))),
        "tau": repr(final.params.temperature.tau),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if _figures(args):
        rows = reports.read_csv(metrics_path)
        if rows:
            from lexalign.plotting import plot_training
            plot_training(rows, out / "loss.png")
    print(f"step {final.step}: final loss {summary['final_loss']}, tau {final.params.temperature.tau:.4f}, "
          f"checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_dump_lexical(args) -> int:
    if args.patches is not None and args.modality == "text":
        raise UsageError("--patches applies to image vectors only")
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data, (args.split,))
    split = dataset[args.split]
    vocab = dataset.vocab
    params = ckpt.params
    if params.vocab_size != vocab.size:
        raise ValidationError(f"vocabulary mismatch: checkpoint {params.vocab_size}, data {vocab.size}")
    top_n = min(args.top_n, vocab.size)
    rows_idx = _rows_for_ids(split, args.ids)
    out = _out_dir(args.out)
    outputs = ["lexical_dump.csv"] + (["lexical.png"] if _figures(args) else [])
    manifest = _start(args, out, {"checkpoint": args.checkpoint, "data": args.data}, outputs,
                      {"ids": args.ids, "split": args.split, "modality": args.modality, "top_n": top_n,
                       "patches": args.patches})
    modalities = ("image", "text") if args.modality == "both" else (args.modality,)
    if args.patches is not None:
        modalities = ("image",)
    rows, panels = [], []
    patch_label = ",".join(str(p) for p in args.patches) if args.patches is not None else "all"
    for sample_id, r in zip(args.ids, rows_idx):
        for modality in modalities:
            if modality == "text":
                vec = encode_text(params, split.txt[r])
            elif args.patches is not None:
                vec = encode_patches(params, split.img[r], args.patches)
            else:
                vec = encode_image(params, split.img[r])
            order = np.argsort(-vec, kind="stable")[:top_n]
            for rank, tok in enumerate(order, 1):
                rows.append((sample_id, modality, patch_label, rank, int(tok), vocab.tokens[tok], float(vec[tok])))
            panels.append((f"{modality} #{sample_id}", [(vocab.tokens[t], float(vec[t])) for t in order[:15]]))
    reports.write_csv(out / "lexical_dump.csv", reports.DUMP_COLUMNS, rows, [manifest.comment()])
    if _figures(args):
        from lexalign.plotting import plot_lexical
        plot_lexical(panels, out / "lexical.png")
    for title, pairs in panels:
        print(f"{title}: " + " ".join(f"{t}:{v:.3f}" for t, v in pairs[:5]))
    return EXIT_OK


def cmd_compare_penalty(args) -> int:
    a, b = _load_ckpt(args.a), _load_ckpt(args.b)
    if a.params.vocab_size != b.params.vocab_size:
        raise ValidationError(f"vocabulary mismatch: {a.params.vocab_size} vs {b.params.vocab_size} tokens")
    dataset = _load_data(args.data, (args.split,))
    split = dataset[args.split]
    out = _out_dir(args.out)
    outputs = ["compare.csv", "token_frequency.csv", "top_tokens.csv"]
    outputs += ["concentration.png"] if _figures(args) else []
    manifest = _start(args, out, {"a": args.a, "b": args.b, "data": args.data}, outputs,
                      {"split": args.split, "top_k": args.top_k,
                       "a_config": asdict(a.config), "b_config": asdict(b.config)})
    sa, sb = reports.summarize(a.params, split), reports.summarize(b.params, split)
    comments = [manifest.comment(),
                f"# a={args.a} penalty={a.config.penalty_kind}; b={args.b} penalty={b.config.penalty_kind}; "
                f"statistics over stacked image+text {args.split} vectors"]
    reports.write_csv(out / "compare.csv", reports.COMPARE_COLUMNS, reports.compare_rows(sa, sb), comments)
    tokens = dataset.vocab.tokens
    freq_rows = [(j, tokens[j], sa.conc.frequency[j], sb.conc.frequency[j], sa.conc.share[j], sb.conc.share[j])
                 for j in range(len(tokens))]
    reports.write_csv(out / "token_frequency.csv", reports.FREQUENCY_COLUMNS, freq_rows, comments)
    top_rows = []
    for label, s in (("a", sa), ("b", sb)):
        for rank, j in enumerate(s.conc.top_tokens(args.top_k), 1):
            top_rows.append((label, rank, int(j), tokens[j], s.conc.share[j], s.conc.frequency[j]))
    reports.write_csv(out / "top_tokens.csv", reports.TOP_TOKEN_COLUMNS, top_rows, comments)
    if _figures(args):
        from lexalign.plotting import plot_concentration
        plot_concentration(sa.conc.share, sb.conc.share,
                           (f"a: {a.config.penalty_kind}", f"b: {b.config.penalty_kind}"), out / "concentration.png")
    for label, s in (("a", sa), ("b", sb)):
        r = {row["direction"]: row["R1"] for row in s.retrieval}
        print(f"{label}: max share x V {s.conc.max_share * s.conc.share.size:.3f}, gini {s.conc.gini:.3f}, "
              f"R@1 i2t {r['i2t']:.3f} t2i {r['t2i']:.3f}")
    return EXIT_OK


def _dense_pair(args, split) -> tuple[np.ndarray, np.ndarray, str]:
    """(S_img, S_txt, source) from a checkpoint or the ground-truth oracle."""
    if args.oracle == bool(args.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --oracle")
    if args.oracle:
        truth = split.true_dense()
        return truth, truth.copy(), "oracle"
    S_img, S_txt = reports.encode_split(_load_ckpt(args.checkpoint).params, split)
    return S_img, S_txt, "checkpoint"


def _eval_retrieval(args) -> int:
    out = _out_dir(args.out)
    from_vectors = bool(args.vectors_img or args.vectors_txt)
    if from_vectors:
        if not (args.vectors_img and args.vectors_txt):
            raise UsageError("--vectors-img and --vectors-txt go together")
        if args.checkpoint or args.oracle:
            raise UsageError("vector files replace --checkpoint/--oracle")
        if args.vocab_size is None:
            raise UsageError("--vocab-size is required with vector files")
    outputs = ["retrieval.csv"]
    if not from_vectors:
        outputs += ["img_vectors.jsonl", "txt_vectors.jsonl", "index_img.bin", "index_txt.bin"]
    manifest = _start(args, out, {"data": args.data, "checkpoint": args.checkpoint,
                                  "vectors_img": args.vectors_img, "vectors_txt": args.vectors_txt}, outputs,
                      {"split": args.split, "sparsify": args.sparsify, "oracle": args.oracle})
    if from_vectors:
        img_ids, img = read_vectors(args.vectors_img, args.vocab_size)
        txt_ids, txt = read_vectors(args.vectors_txt, args.vocab_size)
        if sorted(map(str, img_ids)) != sorted(map(str, txt_ids)) or len(set(map(str, img_ids))) != len(img_ids):
            raise ValidationError("image and text vector files must hold the same unique ids")
        pos = {str(i): n for n, i in enumerate(txt_ids)}
        txt = [txt[pos[str(i)]] for i in img_ids]
        source = "vectors"
    else:
        if not args.data:
            raise UsageError("--data is required unless vector files are given")
        split = _load_data(args.data, (args.split,))[args.split]
        S_img, S_txt, source = _dense_pair(args, split)
        mode = "none" if args.oracle else args.sparsify
        img, txt = reports.to_sparse(S_img, mode), reports.to_sparse(S_txt, mode)
        ids = split.concept_ids.tolist()
        write_vectors(out / "img_vectors.jsonl", img, ids)
        write_vectors(out / "txt_vectors.jsonl", txt, ids)
        save_index(build_index(img, S_img.shape[1]), out / "index_img.bin")
        save_index(build_index(txt, S_txt.shape[1]), out / "index_txt.bin")
    rows = reports.retrieval_rows(img, txt)
    reports.write_csv(out / "retrieval.csv", reports.RETRIEVAL_COLUMNS, rows,
                      [manifest.comment(), f"# source={source} queries={len(img)}"])
    for r in rows:
        print(f"{r['direction']}: R@1 {r['R1']:.4f} R@5 {r['R5']:.4f} R@10 {r['R10']:.4f} "
              f"(mean active {r['activated_mean']:.1f})")
    return EXIT_OK


def _eval_sweep(args) -> int:
    if any(not 0.0 <= r < 1.0 for r in args.ratios):
        raise UsageError("--ratios must lie in [0, 1)")
    out = _out_dir(args.out)
    outputs = ["sweep.csv"] + (["sweep.png"] if _figures(args) else [])
    manifest = _start(args, out, {"data": args.data, "checkpoint": args.checkpoint}, outputs,
                      {"split": args.split, "ratios": args.ratios, "prune": args.prune, "oracle": args.oracle})
    split = _load_data(args.data, (args.split,))[args.split]
    S_img, S_txt, source = _dense_pair(args, split)
    rows = sparsity_sweep(S_img, S_txt, args.ratios, prune=args.prune)
    reports.write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows,
                      [manifest.comment(), f"# source={source} prune={args.prune}"])
    if _figures(args):
        from lexalign.plotting import plot_sweep
        plot_sweep(rows, out / "sweep.png")
    for r in rows:
        print(f"{r['direction']} ratio {r['ratio']:.3f}: R@1 {r['R1']:.4f} (mean active {r['activated_mean']:.1f})")
    return EXIT_OK


def _eval_patchdis(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data, ())
    out = _out_dir(args.out)
    outputs = ["patchdis.csv", "patchdis_scenes.csv"] + (["patchdis.png"] if _figures(args) else [])
    manifest = _start(args, out, {"checkpoint": args.checkpoint, "data": args.data}, outputs,
                      {"trials": args.trials, "seed": args.seed}, seed=args.seed)
    report = eval_patchdis(ckpt.params, dataset.scenes, dataset.maps.txt, n_random_trials=args.trials, seed=args.seed)
    comments = [manifest.comment(),
                "# mIoU: per scene, macro over classes present in ground truth; then mean over scenes",
                f"# random_baseline={report.random_miou!r} accuracy={report.accuracy!r} scenes={len(dataset.scenes)}"]
    reports.write_csv(out / "patchdis.csv", REPORT_COLUMNS, report.rows(), comments)
    reports.write_csv(out / "patchdis_scenes.csv", ("scene", "miou"), list(enumerate(report.scene_miou)),
                      [manifest.comment()])
    if _figures(args):
        from lexalign.plotting import plot_patchdis
        plot_patchdis(report.class_iou, report.random_miou, report.miou, out / "patchdis.png")
    ratio = report.miou / report.random_miou if report.random_miou > 0 else float("inf")
    print(f"mIoU {report.miou:.4f} (random {report.random_miou:.4f}, x{ratio:.1f}), patch accuracy {report.accuracy:.4f}")
    return EXIT_OK


def _eval_gradcheck(args) -> int:
    out = _out_dir(args.out)
    manifest = _start(args, out, {}, ["gradcheck.csv"],
                      {"instances": args.instances, "seed": args.seed, "eps": args.eps, "tol": args.tol,
                       "penalty": args.penalty}, seed=args.seed)
    rows, failed, worst = [], 0, 0.0
    for i in range(args.instances):
        tape, params, inputs = gradcheck_instance([args.seed, i], penalty_kind=args.penalty)
        report = grad_check(tape, params, inputs, eps=args.eps, tol=args.tol, names=TRAINABLE)
        failed += not report.passed
        worst = max(worst, report.max_rel_err)
        for p in report.params:
            rows.append((i, p.name, p.max_rel_err, p.mean_rel_err, p.checked, p.skipped, int(p.passed)))
    reports.write_csv(out / "gradcheck.csv", GRADCHECK_COLUMNS, rows,
                      [manifest.comment(), f"# eps={args.eps!r} tol={args.tol!r}"])
    print(f"{args.instances - failed}/{args.instances} instances pass, max relative error {worst:.3e} (tol {args.tol:g})")
    if failed:
        print(f"gradient check failed on {failed} instance(s); see {out / 'gradcheck.csv'}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


EVAL_TARGETS = {
    "retrieval": _eval_retrieval,
    "sweep": _eval_sweep,
    "patchdis": _eval_patchdis,
    "gradcheck": _eval_gradcheck,
}


def cmd_eval(args) -> int:
    return EVAL_TARGETS[args.target](args)


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=_positive, help="cap BLAS/OpenMP worker threads")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures, write CSV/JSON only")

    parser = _Parser(prog="lexalign", description="Sparse lexical image-text alignment on synthetic data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value file of generator settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--vocab", help="vocabulary file, one token per line")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train projectors and the image codebook")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value file of training settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="base hyperparameters (default desk)")
    p.add_argument("--penalty", choices=("overuse", "flops", "none"), help="sparsity penalty")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--stop-after", type=_positive, metavar="STEP", help="stop once this many steps are done")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dump-lexical", parents=[common], help="ranked tokens of selected samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True, type=_int_list, help="comma-separated sample ids")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--modality", default="both", choices=("image", "text", "both"))
    p.add_argument("--top-n", type=_positive, default=10)
    p.add_argument("--patches", type=_int_list, help="pool the image vector over these patch indices only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_lexical)

    p = sub.add_parser("compare-penalty", parents=[common], help="token concentration of two checkpoints")
    p.add_argument("--a", required=True, metavar="CKPT")
    p.add_argument("--b", required=True, metavar="CKPT")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--top-k", type=_positive, default=10, help="overused tokens listed per checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_penalty)

    p = sub.add_parser("eval", help="evaluation reports")
    targets = p.add_subparsers(dest="target", required=True, parser_class=_Parser)

    t = targets.add_parser("retrieval", parents=[common], help="R@K through the inverted index")
    t.add_argument("--data")
    t.add_argument("--checkpoint")
    t.add_argument("--oracle", action="store_true", help="use ground-truth concept vectors")
    t.add_argument("--vectors-img", help="JSONL image vectors (pre-encoded)")
    t.add_argument("--vectors-txt", help="JSONL text vectors (pre-encoded)")
    t.add_argument("--vocab-size", type=_positive, help="vocabulary size of the vector files")
    t.add_argument("--split", default="test", choices=("train", "val", "test"))
    t.add_argument("--sparsify", default="value", choices=("value", "none"))
    t.add_argument("--out", required=True)

    t = targets.add_parser("sweep", parents=[common], help="retrieval vs sparsity ratio")
    t.add_argument("--data", required=True)
    t.add_argument("--checkpoint")
    t.add_argument("--oracle", action="store_true")
    t.add_argument("--ratios", type=_float_list, default=_float_list(DEFAULT_RATIOS))
    t.add_argument("--prune", default="both", choices=("both", "query", "corpus"))
    t.add_argument("--split", default="test", choices=("train", "val", "test"))
    t.add_argument("--out", required=True)

    t = targets.add_parser("patchdis", parents=[common], help="zero-shot patch classification mIoU")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--trials", type=_positive, default=200, help="Monte-Carlo draws for the random baseline")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    t = targets.add_parser("gradcheck", parents=[common], help="finite-difference check of the training graph")
    t.add_argument("--instances", type=_positive, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eps", type=float, default=DEFAULT_EPS)
    t.add_argument("--tol", type=float, default=DEFAULT_TOL)
    t.add_argument("--penalty", default="overuse", choices=("overuse", "flops", "none"))
    t.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limits = threadpool_limits(limits=args.threads) if getattr(args, "threads", None) else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except ValidationError as exc:
        print(f"lexalign: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"lexalign: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
