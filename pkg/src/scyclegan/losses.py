"""Training objectives: adversarial (three flavors), cycle consistency,
cross-entropy + soft Dice segmentation terms, and the composite generator
objective.

Conventions
-----------
* Discriminators emit raw score maps. The log-family losses squash scores
  through a logistic sigmoid before taking logs; the least-squares mode uses
  the raw scores directly.
* Segmentation predictions are per-pixel class distributions (planes summing
  to 1), not logits.
* Probabilities are clamped at 1e-12 before any log, so exact zeros from
  low-precision softmax cannot produce infinities.
* Dice is the class-mean soft Dice, so the loss lies in [0, 1]; the smooth
  epsilon appears in numerator and denominator, which scores classes absent
  from both target and prediction as a perfect match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, ShapeError, UsageError

GAN_MODES = ("saturating", "non_saturating", "least_squares")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_seg: float = 0.5

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_seg < 0:
            raise UsageError("loss weights must be non-negative")


@dataclass(frozen=True)
class DiceParams:
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise UsageError(f"dice epsilon must be > 0, got {self.epsilon}")


def _check_mode(mode: str) -> str:
    if mode not in GAN_MODES:
        raise UsageError(f"gan mode must be one of {GAN_MODES}, got {mode!r}")
    return mode


def _is_batched(t: torch.Tensor) -> bool:
    # Tensors inside torch.func transforms can't be inspected element-wise.
    try:
        return torch._C._functorch.is_batchedtensor(t)
    except Exception:
        return False


def _as_tensor(x, name: str) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if not _is_batched(t) and not torch.isfinite(t.detach()).all():
        raise NumericError(f"{name} contains non-finite values")
    return t


def _log_sigmoid_pair(scores: torch.Tensor):
    p = torch.sigmoid(scores)
    return torch.log(p.clamp_min(PROB_FLOOR)), torch.log((1 - p).clamp_min(PROB_FLOOR))


def adversarial_d_loss(scores_real, scores_fake, mode: str = "non_saturating") -> torch.Tensor:
    """Discriminator objective over patch score maps.

    Log modes: mean(-log sigma(real)) + mean(-log(1 - sigma(fake))).
    Least squares: mean((real - 1)^2) + mean(fake^2) on raw scores.
    """
    _check_mode(mode)
    real = _as_tensor(scores_real, "scores_real")
    fake = _as_tensor(scores_fake, "scores_fake")
    if mode == "least_squares":
        return ((real - 1) ** 2).mean() + (fake**2).mean()
    log_p_real, _ = _log_sigmoid_pair(real)
    _, log_not_fake = _log_sigmoid_pair(fake)
    return -(log_p_real.mean() + log_not_fake.mean())


def adversarial_g_loss(scores_fake, mode: str = "non_saturating") -> torch.Tensor:
    """Generator objective against the discriminator's scores on fakes.

    saturating: mean(log(1 - sigma(fake)))   (the literal minimax form)
    non_saturating: mean(-log(sigma(fake)))  (default)
    least_squares: mean((fake - 1)^2)
    """
    _check_mode(mode)
    fake = _as_tensor(scores_fake, "scores_fake")
    if mode == "least_squares":
        return ((fake - 1) ** 2).mean()
    log_p, log_not = _log_sigmoid_pair(fake)
    if mode == "saturating":
        return log_not.mean()
    return -log_p.mean()


def cycle_loss(real_ct, rec_ct, real_us, rec_us) -> torch.Tensor:
    """Mean absolute reconstruction error, summed over the two domains."""
    real_ct = _as_tensor(real_ct, "real_ct")
    rec_ct = _as_tensor(rec_ct, "rec_ct")
    real_us = _as_tensor(real_us, "real_us")
    rec_us = _as_tensor(rec_us, "rec_us")
    if real_ct.shape != rec_ct.shape or real_us.shape != rec_us.shape:
        raise ShapeError(
            f"reconstruction shapes {tuple(rec_ct.shape)}/{tuple(rec_us.shape)} do not "
            f"match originals {tuple(real_ct.shape)}/{tuple(real_us.shape)}"
        )
    return (rec_ct - real_ct).abs().mean() + (rec_us - real_us).abs().mean()


def _check_pred_target(pred, target):
    pred = _as_tensor(pred, "pred")
    if pred.dim() == 4:
        if pred.shape[0] != 1:
            raise ShapeError(f"expected batch of 1, got {pred.shape[0]}")
        pred = pred[0]
    if pred.dim() != 3:
        raise ShapeError(f"pred must be (C, H, W), got shape {tuple(pred.shape)}")
    if isinstance(target, torch.Tensor):
        t = target.detach().cpu().long()
    else:
        t = torch.as_tensor(np.asarray(target).astype(np.int64))
    if t.dim() != 2 or t.shape != pred.shape[1:]:
        raise ShapeError(
            f"target shape {tuple(t.shape)} does not match pred planes {tuple(pred.shape[1:])}"
        )
    if int(t.min()) < 0 or int(t.max()) >= pred.shape[0]:
        raise ShapeError(f"target classes outside [0, {pred.shape[0]})")
    return pred, t


def ce_loss(pred, target) -> torch.Tensor:
    """Pixel-mean cross entropy, -log p_true, over a (C, H, W) distribution."""
    pred, t = _check_pred_target(pred, target)
    p_true = pred.gather(0, t.unsqueeze(0)).squeeze(0)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def dice_loss(pred, target, params: DiceParams = DiceParams()) -> torch.Tensor:
    """One minus the class-mean soft Dice coefficient.

    coeff_c = (2 * sum(y_c * p_c) + eps) / (sum(y_c) + sum(p_c) + eps)
    """
    pred, t = _check_pred_target(pred, target)
    C = pred.shape[0]
    y = torch.nn.functional.one_hot(t, C).permute(2, 0, 1).to(pred.dtype)
    eps = params.epsilon
    inter = (y * pred).sum(dim=(1, 2))
    sizes = y.sum(dim=(1, 2)) + pred.sum(dim=(1, 2))
    coeff = (2 * inter + eps) / (sizes + eps)
    return 1.0 - coeff.mean()


def seg_loss(pred, target, params: DiceParams = DiceParams()) -> torch.Tensor:
    """Cross entropy plus Dice, with unit weights."""
    return ce_loss(pred, target) + dice_loss(pred, target, params)


def generator_total(adv_ct2us, adv_us2ct, cycle, seg_ct, seg_us, w: LossWeights = LossWeights()) -> torch.Tensor:
    """adv + adv + lambda_cycle * cycle + lambda_seg * (seg_ct + seg_us)."""
    terms = [
        _as_tensor(v, name)
        for name, v in (
            ("adv_ct2us", adv_ct2us),
            ("adv_us2ct", adv_us2ct),
            ("cycle", cycle),
            ("seg_ct", seg_ct),
            ("seg_us", seg_us),
        )
    ]
    adv1, adv2, cyc, s_ct, s_us = terms
    return adv1 + adv2 + w.lambda_cycle * cyc + w.lambda_seg * (s_ct + s_us)


def hard_dice_counts(pred_mask: np.ndarray, true_mask: np.ndarray, num_classes: int):
    """Per-class (intersection, |pred|, |true|) pixel counts for hard Dice."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    inter = np.zeros(num_classes, dtype=np.int64)
    n_pred = np.zeros(num_classes, dtype=np.int64)
    n_true = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        p = pred_mask == c
        t = true_mask == c
        inter[c] = np.count_nonzero(p & t)
        n_pred[c] = np.count_nonzero(p)
        n_true[c] = np.count_nonzero(t)
    return inter, n_pred, n_true


def hard_dice_from_counts(inter, n_pred, n_true) -> np.ndarray:
    """2|A&B| / (|A| + |B|) per class; classes absent from both score 1."""
    inter = np.asarray(inter, dtype=np.float64)
    denom = np.asarray(n_pred, dtype=np.float64) + np.asarray(n_true, dtype=np.float64)
    out = np.ones_like(inter)
    nz = denom > 0
    out[nz] = 2.0 * inter[nz] / denom[nz]
    return out
