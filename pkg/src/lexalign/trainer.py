"""Incremental fine-tuning loop: projectors + image codebook, text codebook frozen."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from lexalign import losses
from lexalign.errors import HashMismatchError, NumericalError, ValidationError
from lexalign.gradcore import Tape, forward_backward
from lexalign.model import FROZEN, PARAM_NAMES, TRAINABLE, EncoderParams, init_params, objective_graph
from lexalign.synth import Dataset

PENALTY_KINDS = ("overuse", "flops", "none")
METRIC_COLUMNS = (
    "step", "l_t2i", "l_i2t", "overuse_img", "overuse_txt", "tau", "lambda_img", "lambda_txt",
    "flops_img", "flops_txt", "lr", "total",
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    batch_size: int = 64
    epochs: int = 30
    warmup_iters: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    lambda_img: float = 0.2
    lambda_txt: float = 0.4
    penalty_warmup: int = 200
    penalty_kind: str = "overuse"
    hidden: int = 128
    tau_init: float = 0.07
    max_inverse: float = 100.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "adam_eps", "tau_init", "max_inverse"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name}: must be positive")
        for name in ("batch_size", "epochs", "penalty_warmup", "hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name}: must be a positive integer")
        if self.batch_size < 2:
            raise ValidationError("batch_size: contrastive batches need at least 2 pairs")
        if self.warmup_iters < 0:
            raise ValidationError("warmup_iters: must be non-negative")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValidationError(f"{name}: must lie in [0, 1)")
        if self.lambda_img < 0 or self.lambda_txt < 0:
            raise ValidationError("lambda_img/lambda_txt: must be non-negative")
        if self.penalty_kind not in PENALTY_KINDS:
            raise ValidationError(f"penalty_kind: must be one of {PENALTY_KINDS}, got {self.penalty_kind!r}")

    @property
    def schedule(self) -> losses.PenaltySchedule:
        return losses.PenaltySchedule(self.lambda_img, self.lambda_txt, self.penalty_warmup)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


PROFILES = {
    "desk": TrainConfig(),
    # optimizer rows of the original large-scale run, kept for reference
    "full": TrainConfig(lr=5e-4, batch_size=6144, epochs=12, warmup_iters=1000, penalty_warmup=2000,
                         lambda_img=5e-4, lambda_txt=1e-3),
}


def config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


def steps_per_epoch(n_train: int, batch_size: int) -> int:
    return max(1, n_train // min(batch_size, n_train))


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to the peak, then cosine decay reaching zero at the last step."""
    if step < config.warmup_iters:
        return config.lr * (step + 1) / config.warmup_iters
    span = max(1, total_steps - 1 - config.warmup_iters)
    progress = min(1.0, (step - config.warmup_iters) / span)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def batch_indices(seed: int, epoch: int, step_in_epoch: int, n_train: int, batch_size: int) -> np.ndarray:
    """Batch composition as a pure function of (seed, epoch, step)."""
    order = np.random.default_rng([seed, 7, epoch]).permutation(n_train)
    size = min(batch_size, n_train)
    return order[step_in_epoch * size:(step_in_epoch + 1) * size]


@dataclass
class Checkpoint:
    params: EncoderParams
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    config: TrainConfig
    dataset_hash: str
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    def total_steps(self, n_train: int) -> int:
        return self.config.epochs * steps_per_epoch(n_train, self.config.batch_size)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    z_txt_hash_before: str
    z_txt_hash_after: str

    @property
    def final_loss(self) -> float:
        return self.metrics[-1]["total"] if self.metrics else float("nan")


def array_hash(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


def new_checkpoint(config: TrainConfig, dataset: Dataset) -> Checkpoint:
    cfg = dataset.config
    # the text backbone's own output map doubles as the pretrained text codebook
    params = init_params(cfg.vocab_size, cfg.d_txt, cfg.d_img, config.hidden, config.seed,
                         z_txt=dataset.maps.txt.T, tau_init=config.tau_init, max_inverse=config.max_inverse)
    zeros = {k: np.zeros_like(params.arrays[k]) for k in TRAINABLE}
    return Checkpoint(params, zeros, {k: v.copy() for k, v in zeros.items()}, 0, config, dataset.dataset_hash)


def train(config: TrainConfig, dataset: Dataset, checkpoint: Checkpoint | None = None,
          stop_after: int | None = None, metrics_path=None, preamble: str | None = None) -> TrainResult:
    """Run (or continue) training until ``config.epochs`` are done or ``stop_after`` steps.

    ``stop_after`` is an absolute step count; the returned checkpoint can be
    passed to :func:`resume` to carry on exactly where it stopped. A fresh
    metrics file starts with ``preamble`` (a ``#`` comment line) if given.
    """
    split = dataset["train"]
    n_train = len(split)
    if n_train < 2:
        raise ValidationError("training split needs at least 2 pairs")
    ckpt = checkpoint if checkpoint is not None else new_checkpoint(config, dataset)
    params = ckpt.params
    arrays = params.arrays
    per_epoch = steps_per_epoch(n_train, config.batch_size)
    total = config.epochs * per_epoch
    end = total if stop_after is None else min(total, stop_after)
    schedule = config.schedule
    z_txt_before = array_hash(arrays["z_txt"])

    writer = None
    fh = None
    if metrics_path is not None:
        fresh = ckpt.step == 0 or not Path(metrics_path).exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            if preamble:
                fh.write(preamble.rstrip("\n") + "\n")
            writer.writerow(METRIC_COLUMNS)

    metrics = []
    try:
        for step in range(ckpt.step, end):
            epoch, within = divmod(step, per_epoch)
            idx = batch_indices(config.seed, epoch, within, n_train, config.batch_size)
            lam_img, lam_txt = losses.lambda_at(schedule, step)
            tape = Tape(objective_graph(config.penalty_kind, lam_img, lam_txt, config.max_inverse))
            try:
                loss, grads = forward_backward(tape, arrays, {"txt": split.txt[idx], "img": split.img[idx]})
                tau = params.temperature.tau
            except (NumericalError, OverflowError) as exc:
                raise NumericalError(f"training diverged at step {step} (epoch {epoch}): {exc}") from exc
            s_img = tape.tags["s_img"].value
            s_txt = tape.tags["s_txt"].value
            lr = lr_at(config, step, total)
            row = {
                "step": step,
                "l_t2i": float(tape.tags["l_t2i"].value),
                "l_i2t": float(tape.tags["l_i2t"].value),
                "overuse_img": losses.overuse_penalty(s_img),
                "overuse_txt": losses.overuse_penalty(s_txt),
                "tau": tau,
                "lambda_img": lam_img,
                "lambda_txt": lam_txt,
                "flops_img": losses.flops_loss(s_img),
                "flops_txt": losses.flops_loss(s_txt),
                "lr": lr,
                "total": loss,
            }
            metrics.append(row)
            if writer:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
            _adam_update(ckpt, grads, lr, step + 1)
            bad = [k for k in TRAINABLE if not np.all(np.isfinite(arrays[k]))]
            if bad:
                raise NumericalError(f"training diverged at step {step} (epoch {epoch}): non-finite {bad[0]} after update")
            ckpt.step = step + 1
    finally:
        if fh:
            fh.close()

    z_txt_after = array_hash(arrays["z_txt"])
    if z_txt_after != z_txt_before:
        raise RuntimeError("frozen text codebook changed during training")
    return TrainResult(ckpt, metrics, z_txt_before, z_txt_after)


def _adam_update(ckpt: Checkpoint, grads: dict, lr: float, t: int) -> None:
    cfg = ckpt.config
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name in TRAINABLE:
        g = grads[name]
        m = ckpt.adam_m[name]
        v = ckpt.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
        p = ckpt.params.arrays[name]
        if p.ndim == 0:
            ckpt.params.arrays[name] = np.asarray(p - step)
        else:
            p -= step


def resume(checkpoint: Checkpoint, dataset: Dataset, stop_after: int | None = None, metrics_path=None,
           preamble: str | None = None) -> TrainResult:
    if checkpoint.dataset_hash != dataset.dataset_hash:
        raise HashMismatchError(
            f"checkpoint was trained on dataset {checkpoint.dataset_hash}, got {dataset.dataset_hash}"
        )
    return train(checkpoint.config, dataset, checkpoint=checkpoint, stop_after=stop_after, metrics_path=metrics_path,
                 preamble=preamble)


# -- checkpoint container --------------------------------------------------

MAGIC = b"LEXCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian container: magic, u32 version, u64 header length, JSON header, f64 payload."""
    tensors = [(f"param/{k}", ckpt.params.arrays[k]) for k in PARAM_NAMES]
    tensors += [(f"adam_m/{k}", ckpt.adam_m[k]) for k in TRAINABLE]
    tensors += [(f"adam_v/{k}", ckpt.adam_v[k]) for k in TRAINABLE]
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "step": ckpt.step,
        "config": asdict(ckpt.config),
        "config_hash": ckpt.config_hash,
        "dataset_hash": ckpt.dataset_hash,
        "max_inverse": ckpt.params.max_inverse,
        "frozen": sorted(ckpt.params.frozen),
        "tensors": entries,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    version, head_len = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + head_len].decode("utf-8"))
    payload = start + head_len
    arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        kind, name = entry["name"].split("/", 1)
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=payload + entry["offset"])
        arrays[kind][name] = arr.astype(np.float64).reshape(entry["shape"])
    params = EncoderParams(arrays["param"], header["max_inverse"], frozenset(header.get("frozen", FROZEN)))
    config = TrainConfig(**header["config"])
    return Checkpoint(params, arrays["adam_m"], arrays["adam_v"], header["step"], config,
                      header["dataset_hash"], header.get("extra", {}))


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    known = config_fields()
    bad = set(overrides) - set(known)
    if bad:
        raise ValidationError(f"unknown training config key(s): {sorted(bad)}")
    return replace(config, **overrides)
