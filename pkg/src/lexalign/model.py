"""Encoder parameters, the two lexical encoders, and the training graph.

Each modality runs ``projector -> codebook scores -> elu1p`` and the image
side max-pools over patches before normalization.

The text backbone's features already live in the text codebook's space, so
the text projector is a residual adapter ``y + tanh(y W1 + b1) W2 + b2`` whose
output layer starts at zero: at step 0 the text path is exactly the frozen
lexical predictor. The image projector is a plain two-layer map
``tanh(x W1 + b1) W2 + b2`` applied per patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from lexalign.errors import ValidationError
from lexalign.gradcore import Tape
from lexalign.lexcore import Codebook, l2_normalize_rows, lexical_scores
from lexalign.losses import MAX_INVERSE_TEMPERATURE, TAU_INIT, Temperature

TXT_PROJECTOR = ("txt_w1", "txt_b1", "txt_w2", "txt_b2")
IMG_PROJECTOR = ("img_w1", "img_b1", "img_w2", "img_b2")
PARAM_NAMES = TXT_PROJECTOR + IMG_PROJECTOR + ("z_img", "z_txt", "log_inverse")
FROZEN = frozenset({"z_txt"})
TRAINABLE = tuple(n for n in PARAM_NAMES if n not in FROZEN)


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]
    max_inverse: float = MAX_INVERSE_TEMPERATURE
    frozen: frozenset = field(default=FROZEN)

    def __post_init__(self):
        missing = set(PARAM_NAMES) - set(self.arrays)
        if missing:
            raise ValidationError(f"missing parameters: {sorted(missing)}")
        self.arrays = {k: np.asarray(self.arrays[k], dtype=np.float64, order="C") for k in PARAM_NAMES}

    @property
    def codebook_txt(self) -> Codebook:
        return Codebook(self.arrays["z_txt"], frozen=True)

    @property
    def codebook_img(self) -> Codebook:
        return Codebook(self.arrays["z_img"], frozen=False)

    @property
    def temperature(self) -> Temperature:
        return Temperature(float(self.arrays["log_inverse"]), self.max_inverse)

    @property
    def vocab_size(self) -> int:
        return self.arrays["z_txt"].shape[0]

    @property
    def d_txt(self) -> int:
        return self.arrays["txt_w1"].shape[0]

    @property
    def d_img(self) -> int:
        return self.arrays["img_w1"].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()}, self.max_inverse, self.frozen)


def init_params(vocab_size: int, d_txt: int, d_img: int, hidden: int, seed, z_txt=None,
                tau_init: float = TAU_INIT, max_inverse: float = MAX_INVERSE_TEMPERATURE) -> EncoderParams:
    """Fresh parameters; the image codebook starts as an exact copy of the text one.

    ``z_txt`` is the pretrained text codebook (V x d_txt); a random one is
    drawn when it is not supplied.
    """
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

    if z_txt is None:
        z_txt = rng.normal(0.0, 1.0 / math.sqrt(d_txt), size=(vocab_size, d_txt))
    # C order: checkpoints reload C-ordered arrays, and BLAS rounding depends on layout
    z_txt = np.array(z_txt, dtype=np.float64, order="C")
    if z_txt.shape != (vocab_size, d_txt):
        raise ValidationError(f"text codebook must be {vocab_size} x {d_txt}, got {z_txt.shape}")
    arrays = {
        "txt_w1": dense(d_txt, hidden),
        "txt_b1": np.zeros(hidden),
        "txt_w2": np.zeros((hidden, d_txt)),
        "txt_b2": np.zeros(d_txt),
        "img_w1": dense(d_img, hidden),
        "img_b1": np.zeros(hidden),
        "img_w2": dense(hidden, d_txt),
        "img_b2": np.zeros(d_txt),
        "z_txt": z_txt,
        "z_img": z_txt.copy(),
        "log_inverse": np.asarray(math.log(1.0 / tau_init)),
    }
    return EncoderParams(arrays, max_inverse)


def _project(a: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    w1, b1, w2, b2 = (a[f"{prefix}_{s}"] for s in ("w1", "b1", "w2", "b2"))
    if x.shape[-1] != w1.shape[0]:
        raise ValidationError(f"feature dim {x.shape[-1]} does not match projector input {w1.shape[0]}")
    return np.tanh(x @ w1 + b1) @ w2 + b2


def project_text(params: EncoderParams, txt_features) -> np.ndarray:
    y = np.atleast_2d(np.asarray(txt_features, dtype=np.float64))
    return y + _project(params.arrays, "txt", y)


def project_patches(params: EncoderParams, img_features) -> np.ndarray:
    x = np.asarray(img_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("image features must be an n x d_img matrix with n >= 1")
    return _project(params.arrays, "img", x)


def encode_text(params: EncoderParams, txt_features) -> np.ndarray:
    """Lexical vector of one text sample (``d_txt`` or ``1 x d_txt`` features)."""
    x = np.atleast_2d(np.asarray(txt_features, dtype=np.float64))
    if x.shape[0] != 1:
        raise ValidationError("encode_text takes one sample; use encode_text_batch")
    return encode_text_batch(params, x)[0]


def encode_text_batch(params: EncoderParams, txt_features) -> np.ndarray:
    z = project_text(params, txt_features)
    return l2_normalize_rows(lexical_scores(z, params.arrays["z_txt"]))


def patch_scores(params: EncoderParams, img_features) -> np.ndarray:
    """Per-patch positive scores (n x V) before pooling and normalization."""
    return lexical_scores(project_patches(params, img_features), params.arrays["z_img"])


def encode_image(params: EncoderParams, img_features) -> np.ndarray:
    return encode_image_batch(params, np.asarray(img_features, dtype=np.float64)[None])[0]


def encode_image_batch(params: EncoderParams, img_features) -> np.ndarray:
    x = np.asarray(img_features, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValidationError("batched image features must be N x n x d_img")
    n_samples, n_patches, d_img = x.shape
    scores = patch_scores(params, x.reshape(-1, d_img)).reshape(n_samples, n_patches, -1)
    return l2_normalize_rows(scores.max(axis=1))


def encode_patches(params: EncoderParams, img_features, patch_ids) -> np.ndarray:
    """Lexical vector pooled over a subset of patches."""
    x = np.asarray(img_features, dtype=np.float64)
    ids = sorted(set(int(i) for i in patch_ids))
    if not ids:
        raise ValidationError("patch_ids must be non-empty")
    if ids[0] < 0 or ids[-1] >= x.shape[0]:
        raise ValidationError(f"patch ids must lie in [0, {x.shape[0]})")
    return encode_image(params, x[ids])


def encode_each_patch(params: EncoderParams, img_features) -> np.ndarray:
    """Single-patch lexical vectors, one row per patch."""
    return l2_normalize_rows(patch_scores(params, img_features))


def _tape_projector(tape: Tape, prefix: str, x):
    h = tape.tanh(tape.add_bias(tape.matmul(x, tape.param(f"{prefix}_w1")), tape.param(f"{prefix}_b1")))
    return tape.add_bias(tape.matmul(h, tape.param(f"{prefix}_w2")), tape.param(f"{prefix}_b2"))


def objective_graph(penalty_kind: str = "overuse", lambda_img: float = 0.0, lambda_txt: float = 0.0,
                    max_inverse: float = MAX_INVERSE_TEMPERATURE):
    """Build function for the full training objective.

    Inputs: ``txt`` (N x d_txt) and ``img`` (N x n x d_img). Tags
    ``l_t2i``, ``l_i2t``, ``pen_img``, ``pen_txt``, ``s_img`` and ``s_txt``
    are recorded on the tape for logging.
    """
    if penalty_kind not in ("overuse", "flops", "none"):
        raise ValidationError(f"unknown penalty kind {penalty_kind!r}")

    def build(tape: Tape):
        txt = tape.input("txt")
        img = tape.input("img")
        n_samples, n_patches, d_img = img.value.shape

        z_txt = tape.plus(txt, _tape_projector(tape, "txt", txt))
        s_txt = tape.normalize_rows(tape.elu1p(tape.matmul_nt(z_txt, tape.param("z_txt"))))

        flat = tape.reshape(img, (n_samples * n_patches, d_img))
        z_img = _tape_projector(tape, "img", flat)
        scores = tape.elu1p(tape.matmul_nt(z_img, tape.param("z_img")))
        pooled = tape.max_pool(tape.reshape(scores, (n_samples, n_patches, -1)))
        s_img = tape.normalize_rows(pooled)
        tape.tag(s_txt, "s_txt")
        tape.tag(s_img, "s_img")

        log_inv = tape.param("log_inverse")
        terms = [
            tape.tag(tape.info_nce(s_txt, s_img, log_inv, max_inverse), "l_t2i"),
            tape.tag(tape.info_nce(s_img, s_txt, log_inv, max_inverse), "l_i2t"),
        ]
        if penalty_kind != "none":
            reduce = tape.overuse if penalty_kind == "overuse" else tape.flops
            pen_img = tape.tag(reduce(s_img), "pen_img")
            pen_txt = tape.tag(reduce(s_txt), "pen_txt")
            terms.append(tape.scale(pen_img, lambda_img))
            terms.append(tape.scale(pen_txt, lambda_txt))
        return tape.add(*terms)

    return build


def gradcheck_instance(seed, n_samples: int = 4, vocab_size: int = 16, dim: int = 8, n_patches: int = 3,
                       hidden: int = 4, penalty_kind: str = "overuse", lambdas=(0.5, 0.5)):
    """A random small instance of the training objective for gradient checks.

    Returns ``(tape, params, inputs)``. The temperature is drawn inside the
    clip range so its gradient is not trivially zero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(vocab_size, dim, dim, hidden, rng.integers(2**31))
    arrays = params.arrays
    # move off the zero-initialised residual output so every path carries signal
    arrays["txt_w2"] = rng.normal(0.0, 0.5, size=arrays["txt_w2"].shape)
    arrays["txt_b2"] = rng.normal(0.0, 0.1, size=arrays["txt_b2"].shape)
    for name in ("txt_b1", "img_b1", "img_b2"):
        arrays[name] = rng.normal(0.0, 0.1, size=arrays[name].shape)
    arrays["z_img"] = arrays["z_img"] + rng.normal(0.0, 0.1, size=arrays["z_img"].shape)
    arrays["log_inverse"] = np.asarray(math.log(rng.uniform(2.0, 20.0)))
    inputs = {
        "txt": rng.normal(size=(n_samples, dim)),
        "img": rng.normal(size=(n_samples, n_patches, dim)),
    }
    tape = Tape(objective_graph(penalty_kind, lambdas[0], lambdas[1], params.max_inverse))
    return tape, arrays, inputs
