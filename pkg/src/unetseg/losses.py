"""
Segmentation losses and the Dice overlap metric.

Losses take a probability tensor from the sigmoid head and a binary target
(Tensor or ndarray of the same shape) and return a scalar Tensor on the
active tape. Each loss is a single fused op with a closed-form gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidConfigError, NegativeGammaError, NonBinaryMaskError, ShapeMismatchError
from .tensor import Tensor, log, make_op, scale, sub

PROB_EPS = 1e-7
LOSS_KINDS = ("bce", "ce", "focal", "dice", "mixed")
DICE_MODES = ("standard", "paper_literal")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mixed"
    alpha: float = 1.0
    gamma: float = 0.9
    smooth: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be >= 0")
        if self.gamma < 0:
            raise NegativeGammaError(f"gamma must be >= 0, got {self.gamma}")
        if self.smooth <= 0:
            raise InvalidConfigError("smooth must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _target_array(pred: Tensor, target) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and target {t.shape} differ")
    return t.astype(pred.dtype, copy=False)


def _clamped(pred: Tensor):
    lo, hi = pred.dtype.type(PROB_EPS), pred.dtype.type(1 - PROB_EPS)
    p = np.clip(pred.data, lo, hi)
    inside = (pred.data >= lo) & (pred.data <= hi)
    return p, inside


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    t = _target_array(pred, target)
    p, inside = _clamped(pred)
    n = p.size
    value = -(t * np.log(p) + (1 - t) * np.log1p(-p)).mean()

    def backward(g):
        return (g * inside * ((1 - t) / (1 - p) - t / p) / n,)

    return make_op("bce_loss", np.asarray(value, dtype=pred.dtype), (pred,), backward)


def focal_loss(pred: Tensor, target, gamma: float = 0.9) -> Tensor:
    """Mean of -(1 - p_t)**gamma * log(p_t), with p_t = p where t = 1 and 1 - p where t = 0.

    No per-class weighting; ``gamma = 0`` gives exactly :func:`bce_loss`.
    """
    if gamma < 0:
        raise NegativeGammaError(f"gamma must be >= 0, got {gamma}")
    t = _target_array(pred, target)
    p, inside = _clamped(pred)
    n = p.size
    gm = pred.dtype.type(gamma)
    pt = t * p + (1 - t) * (1 - p)
    q = 1 - pt
    log_pt = np.log(pt)
    weight = q ** gm
    value = -(weight * log_pt).mean()

    def backward(g):
        # d/dpt [-(1-pt)^γ log pt] = γ (1-pt)^(γ-1) log pt - (1-pt)^γ / pt
        d_pt = -weight / pt
        if gamma != 0:
            d_pt = d_pt + gm * q ** (gm - 1) * log_pt
        dpt_dp = 2 * t - 1
        return (g * inside * d_pt * dpt_dp / n,)

    return make_op("focal_loss", np.asarray(value, dtype=pred.dtype), (pred,), backward)


def dice_score_soft(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """(2 * sum(p * t) + smooth) / (sum(p) + sum(t) + smooth), differentiable in ``pred``."""
    t = _target_array(pred, target)
    p = pred.data
    s = pred.dtype.type(smooth)
    num = 2 * (p * t).sum() + s
    den = p.sum() + t.sum() + s
    value = num / den

    def backward(g):
        return (g * (2 * t * den - num) / (den * den),)

    return make_op("dice_score_soft", np.asarray(value, dtype=pred.dtype), (pred,), backward)


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - soft Dice."""
    return 1.0 - dice_score_soft(pred, target, smooth)


def mixed_loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """alpha * focal - log(soft Dice)."""
    focal = focal_loss(pred, target, cfg.gamma)
    dice = dice_score_soft(pred, target, cfg.smooth)
    return sub(scale(focal, cfg.alpha), log(dice))


def ce_loss(logits: Tensor, target) -> Tensor:
    """Two-class softmax cross-entropy over logits of shape (N, 2, H, W).

    ``target`` holds class indices {0, 1} shaped (N, H, W) or (N, 1, H, W).
    Uses a max-shifted log-sum-exp.
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeMismatchError(f"ce_loss expects (N, 2, H, W) logits, got {logits.shape}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 4 and t.shape[1] == 1:
        t = t[:, 0]
    n, _, h, w = logits.shape
    if t.shape != (n, h, w):
        raise ShapeMismatchError(f"ce_loss target shape {t.shape} does not match logits {logits.shape}")
    cls = t.astype(np.int64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    onehot = np.stack([cls == 0, cls == 1], axis=1).astype(z.dtype)
    count = n * h * w
    value = -(logp * onehot).sum() / count

    def backward(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return make_op("ce_loss", np.asarray(value, dtype=z.dtype), (logits,), backward)


def compute_loss(pred: Tensor, target, cfg: LossConfig) -> Tensor:
    """Dispatch on ``cfg.kind`` for a probability output.

    ``ce`` is evaluated on the two-class logits [log(1 - p), log(p)], whose
    softmax reproduces p; it then coincides with BCE up to clamping.
    """
    if cfg.kind == "bce":
        return bce_loss(pred, target)
    if cfg.kind == "focal":
        return focal_loss(pred, target, cfg.gamma)
    if cfg.kind == "dice":
        return dice_loss(pred, target, cfg.smooth)
    if cfg.kind == "mixed":
        return mixed_loss(pred, target, cfg)
    return ce_loss(_two_class_logits(pred), target)


def _two_class_logits(pred: Tensor) -> Tensor:
    p, inside = _clamped(pred)
    z = np.concatenate([np.log1p(-p), np.log(p)], axis=1)

    def backward(g):
        return (inside * (g[:, 1:2] / p - g[:, 0:1] / (1 - p)),)

    return make_op("two_class_logits", z, (pred,), backward)


def dice_coefficient(a, b, mode: str = "standard") -> float:
    """Overlap of two binary masks.

    ``standard``: 2|A∩B| / (|A| + |B|), in [0, 1].
    ``paper_literal``: 2|A∩B| / |A∪B|, in [0, 2] (equals 2 when A == B).
    Two empty masks score 1.0 in both modes.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"masks have different shapes {a.shape} and {b.shape}")
    if mode not in DICE_MODES:
        raise ValueError(f"dice mode must be one of {DICE_MODES}, got {mode!r}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise NonBinaryMaskError("masks must contain only 0 and 1")
    a = a.astype(bool)
    b = b.astype(bool)
    inter = int(np.count_nonzero(a & b))
    if mode == "standard":
        denom = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    else:
        denom = int(np.count_nonzero(a | b))
    if denom == 0:
        return 1.0
    return 2 * inter / denom
