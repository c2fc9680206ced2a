"""Supervision losses with closed-form gradients.

Every loss returns a :class:`LossReport` whose gradient fields have the shape
of the corresponding input. Batched inputs (leading axes) are averaged by
default; ``reduction="sum"`` sums them and ``reduction="none"`` returns one
value per sample (gradients are then per-sample too).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .orientation import OrientationCodec, encode_target, log_softmax


@dataclass(frozen=True, eq=False)
class GaussPrediction:
    """Per-axis Gaussian on the BEV plane; ``log_var`` is log(sigma^2)."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.log_var, dtype=np.float64)
        if m.shape != s.shape or m.shape[-1] != 2:
            raise ValueError(f"mean/log_var must share shape (..., 2), got {m.shape} and {s.shape}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ValueError("GaussPrediction must be finite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "log_var", s)

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    def __getitem__(self, idx) -> "GaussPrediction":
        return GaussPrediction(self.mean[idx], self.log_var[idx])


@dataclass(frozen=True, eq=False)
class LossReport:
    value: float | np.ndarray   # ndarray only for reduction="none"
    grad_mean: np.ndarray | None = None
    grad_log_var: np.ndarray | None = None
    grad_logits: np.ndarray | None = None


@dataclass(frozen=True)
class LossWeights:
    lambda_bev: float = 0.05
    lambda_sit: float = 0.075
    lambda_ori: float = 3.5

    def __post_init__(self):
        for name in ("lambda_bev", "lambda_sit", "lambda_ori"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss inputs must be finite")


def _n_samples(shape, reduction: str) -> int:
    if reduction in ("sum", "none"):
        return 1
    if reduction != "mean":
        raise ValueError(f"reduction must be 'mean', 'sum' or 'none', got {reduction!r}")
    return int(np.prod(shape[:-1])) if len(shape) > 1 else 1


def _reduce(per_sample: np.ndarray, n: int, reduction: str):
    if reduction == "none":
        return per_sample
    return float(np.sum(per_sample)) / n


def gnll(pred: GaussPrediction, target, reduction: str = "mean") -> LossReport:
    """0.5 * sum_axis[(t - m)^2 exp(-s) + s], averaged (or summed) over leading axes."""
    t = np.asarray(target, dtype=np.float64)
    _finite(t)
    if t.shape != pred.mean.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {pred.mean.shape}")
    err = t - pred.mean
    inv_var = np.exp(-pred.log_var)
    scaled = err * err * inv_var
    n = _n_samples(t.shape, reduction)
    value = _reduce(0.5 * np.sum(scaled + pred.log_var, axis=-1), n, reduction)
    return LossReport(value, -err * inv_var / n, 0.5 * (1.0 - scaled) / n)


def layout_loss(pred: GaussPrediction, target, valid=None, reduction: str = "mean") -> LossReport:
    """GNLL averaged over the M valid tokens; masked tokens get zero gradient.

    Predictions are (N, 2), or (..., N, 2) for a batch of token sets sharing
    one mask; ``reduction`` then applies across the batch axes.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.ndim < 2 or t.shape[-2:] != pred.mean.shape[-2:]:
        raise ValueError("layout_loss expects (N, 2) predictions and targets")
    n_tok = t.shape[-2]
    mask = np.ones(n_tok, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if mask.shape != (n_tok,):
        raise ValueError("valid mask must have one entry per token")
    M = int(mask.sum())
    if M == 0:
        raise ValueError("layout_loss needs at least one valid token")
    t = np.broadcast_to(t, pred.mean.shape)
    # masked targets are replaced so arbitrary values there cannot leak NaN
    tok = gnll(pred, np.where(mask[:, None], t, pred.mean), "none")
    per_set = np.sum(np.where(mask, tok.value, 0.0), axis=-1) / M
    n = _n_samples(per_set.shape + (1,), reduction)
    w = mask[:, None] / (M * n)
    return LossReport(_reduce(per_set, n, reduction), tok.grad_mean * w, tok.grad_log_var * w)


def layout_loss_frame(pred: GaussPrediction, bev_frame) -> LossReport:
    """layout_loss against one frame of a BevGroundTruth."""
    return layout_loss(pred, np.nan_to_num(bev_frame.xz), bev_frame.valid)


def kl_to_logits(target, logits, reduction: str = "mean") -> LossReport:
    """KL(target || softmax(logits)), averaged over leading axes."""
    y = np.asarray(target, dtype=np.float64)
    z = np.asarray(logits, dtype=np.float64)
    _finite(z)
    if y.shape != z.shape:
        raise ValueError(f"target shape {y.shape} != logits shape {z.shape}")
    logq = log_softmax(z)
    pos = y > 0
    terms = np.where(pos, y * (np.log(np.where(pos, y, 1.0)) - logq), 0.0)
    n = _n_samples(z.shape, reduction)
    return LossReport(_reduce(terms.sum(axis=-1), n, reduction), grad_logits=(np.exp(logq) - y) / n)


def orientation_loss(logits, theta_gt, codec: OrientationCodec, reduction: str = "mean") -> LossReport:
    return kl_to_logits(encode_target(theta_gt, codec), logits, reduction)


def combine_situation(pos: LossReport, ori: LossReport, weights: LossWeights = LossWeights()) -> LossReport:
    lam = weights.lambda_ori
    g = None if ori.grad_logits is None else lam * ori.grad_logits
    return LossReport(pos.value + lam * ori.value, pos.grad_mean, pos.grad_log_var, g)


def situation_loss(pos_pred: GaussPrediction, pos_gt, ori_logits, theta_gt,
                   codec: OrientationCodec, weights: LossWeights = LossWeights(),
                   reduction: str = "mean") -> LossReport:
    return combine_situation(gnll(pos_pred, pos_gt, reduction),
                             orientation_loss(ori_logits, theta_gt, codec, reduction), weights)


def total_loss(ce_value: float, bev: LossReport, sit: LossReport, weights: LossWeights = LossWeights()) -> float:
    vals = np.array([ce_value, bev.value, sit.value], dtype=np.float64)
    _finite(vals)
    return ce_value + weights.lambda_bev * bev.value + weights.lambda_sit * sit.value
