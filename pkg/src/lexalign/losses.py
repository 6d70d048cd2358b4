"""Training objectives on batches of lexical vectors.

``S`` arguments are N x V matrices, one lexical vector per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lexalign.errors import ValidationError

TAU_INIT = 0.07
MAX_INVERSE_TEMPERATURE = 100.0


@dataclass
class Temperature:
    """Learnable temperature stored as ``log(1/tau)``; the inverse is capped."""

    log_inverse: float = math.log(1.0 / TAU_INIT)
    max_inverse: float = MAX_INVERSE_TEMPERATURE

    @classmethod
    def from_tau(cls, tau: float, max_inverse: float = MAX_INVERSE_TEMPERATURE) -> "Temperature":
        if not tau > 0:
            raise ValidationError(f"temperature must be positive, got {tau}")
        return cls(math.log(1.0 / tau), max_inverse)

    @property
    def tau(self) -> float:
        try:
            return math.exp(-self.log_inverse)
        except OverflowError:
            return math.inf

    @property
    def scale(self) -> float:
        """Effective logit multiplier ``min(1/tau, max_inverse)``."""
        if self.log_inverse >= math.log(self.max_inverse):
            return self.max_inverse
        return math.exp(self.log_inverse)


@dataclass(frozen=True)
class PenaltySchedule:
    lambda_img: float = 5e-4
    lambda_txt: float = 1e-3
    warmup_steps: int = 2000

    def __post_init__(self):
        if self.lambda_img < 0 or self.lambda_txt < 0:
            raise ValidationError("penalty weights must be non-negative")
        if self.warmup_steps < 1:
            raise ValidationError("warmup_steps must be positive")


def _as_batch(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValidationError("expected an N x V matrix")
    return S


def info_nce(S_a, S_b, temp: Temperature) -> float:
    """Mean cross-entropy of row i of ``S_a`` against all rows of ``S_b``, target i."""
    S_a, S_b = _as_batch(S_a), _as_batch(S_b)
    if S_a.shape != S_b.shape:
        raise ValidationError(f"batch shapes differ: {S_a.shape} vs {S_b.shape}")
    if S_a.shape[0] < 2:
        raise ValidationError("contrastive loss needs at least 2 pairs")
    if not temp.scale > 0:
        raise ValidationError("temperature must be positive")
    logits = temp.scale * (S_a @ S_b.T)
    return float(np.mean(_logsumexp_rows(logits) - np.diag(logits)))


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    peak = logits.max(axis=1)
    return peak + np.log(np.exp(logits - peak[:, None]).sum(axis=1))


def flops_loss(S) -> float:
    S = _as_batch(S)
    if S.shape[0] < 1:
        raise ValidationError("empty batch")
    means = S.mean(axis=0)
    return float(np.dot(means, means))


def overuse_penalty(S) -> float:
    """FLOPs loss with each column weighted by V times its share of total activation."""
    S = _as_batch(S)
    if np.any(S < 0):
        raise ValidationError("overuse penalty expects non-negative activations")
    means = S.mean(axis=0)
    total = means.sum()
    if not total > 0:
        raise ValidationError("overuse penalty undefined for an all-zero batch")
    return float(S.shape[1] * np.sum(means**3) / total)


def lambda_at(schedule: PenaltySchedule, step: int) -> tuple[float, float]:
    """Quadratic warmup of both penalty weights, flat after ``warmup_steps``."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    ramp = min(1.0, (step / schedule.warmup_steps) ** 2)
    return schedule.lambda_img * ramp, schedule.lambda_txt * ramp


PENALTIES = {
    "overuse": overuse_penalty,
    "flops": flops_loss,
    "none": None,
}


def total_objective(S_img, S_txt, temp: Temperature, schedule: PenaltySchedule, step: int,
                    penalty_kind: str = "overuse") -> tuple[float, dict]:
    """Both InfoNCE directions plus the weighted sparsity penalty.

    Returns ``(total, breakdown)``; the weighted terms in ``breakdown`` sum to
    ``total``.
    """
    if penalty_kind not in PENALTIES:
        raise ValidationError(f"unknown penalty kind {penalty_kind!r}")
    lam_img, lam_txt = lambda_at(schedule, step)
    terms = {
        "l_t2i": info_nce(S_txt, S_img, temp),
        "l_i2t": info_nce(S_img, S_txt, temp),
    }
    penalty = PENALTIES[penalty_kind]
    pen_img = penalty(S_img) if penalty else 0.0
    pen_txt = penalty(S_txt) if penalty else 0.0
    terms["penalty_img"] = lam_img * pen_img
    terms["penalty_txt"] = lam_txt * pen_txt
    total = terms["l_t2i"] + terms["l_i2t"] + terms["penalty_img"] + terms["penalty_txt"]
    breakdown = dict(
        terms,
        raw_penalty_img=pen_img,
        raw_penalty_txt=pen_txt,
        lambda_img=lam_img,
        lambda_txt=lam_txt,
        tau=temp.tau,
    )
    return total, breakdown
