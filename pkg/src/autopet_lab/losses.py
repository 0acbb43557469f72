"""Soft Dice (per-sample and batch-pooled), cross-entropy and their combination.

All functions take torch tensors and are differentiable in the prediction.
Dice terms act on the foreground probability only (two-class softmax output).
"""
import enum
from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_SMOOTH = 1e-5
LOG_CLAMP = 1e-12


class DiceMode(str, enum.Enum):
    PER_SAMPLE = "PER_SAMPLE"
    BATCH = "BATCH"


@dataclass(frozen=True)
class LossConfig:
    dice_mode: DiceMode = DiceMode.PER_SAMPLE
    smooth: float = DEFAULT_SMOOTH
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dice_mode", DiceMode(self.dice_mode))
        if self.smooth < 0 or self.ce_weight < 0 or self.dice_weight < 0:
            raise ValueError("smooth and loss weights must be non-negative")
        if self.ce_weight + self.dice_weight <= 0:
            raise ValueError("ce_weight + dice_weight must be positive")

    def to_dict(self):
        return {"dice_mode": self.dice_mode.value, "smooth": self.smooth,
                "ce_weight": self.ce_weight, "dice_weight": self.dice_weight}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _check_pair(probs, targets, check_range=True):
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs targets {tuple(targets.shape)}")
    if probs.dim() < 2:
        raise ValueError("expected a batch: (B, *spatial)")
    if check_range:
        with torch.no_grad():
            if probs.numel() and (probs.min() < 0 or probs.max() > 1):
                raise ValueError("probabilities outside [0, 1]")


def _per_sample_sums(probs, targets):
    dims = tuple(range(1, probs.dim()))
    return (probs * targets).sum(dims), probs.sum(dims), targets.sum(dims)


def soft_dice_per_sample(probs, targets, smooth=DEFAULT_SMOOTH):
    """1 - mean_b (2 I_b + s) / (P_b + T_b + s).

    A sample with empty target and empty prediction scores Dice 1 even when
    ``smooth`` is 0.
    """
    _check_pair(probs, targets)
    targets = targets.to(probs.dtype)
    inter, psum, tsum = _per_sample_sums(probs, targets)
    denom = psum + tsum + smooth
    empty = denom == 0
    dice = torch.where(empty, torch.ones_like(denom), (2 * inter + smooth) / torch.where(empty, torch.ones_like(denom), denom))
    return 1 - dice.mean()


def soft_dice_batch(probs, targets, smooth=DEFAULT_SMOOTH):
    """1 - (2 sum I + s) / (sum P + sum T + s) with the whole batch pooled."""
    _check_pair(probs, targets)
    targets = targets.to(probs.dtype)
    inter, psum, tsum = _per_sample_sums(probs, targets)
    num = 2 * inter.sum() + smooth
    denom = psum.sum() + tsum.sum() + smooth
    if denom == 0:
        return 1 - torch.ones_like(denom)
    return 1 - num / denom


def soft_dice(probs, targets, mode=DiceMode.PER_SAMPLE, smooth=DEFAULT_SMOOTH):
    if DiceMode(mode) is DiceMode.BATCH:
        return soft_dice_batch(probs, targets, smooth)
    return soft_dice_per_sample(probs, targets, smooth)


def cross_entropy(inputs, targets, from_logits=False):
    """Mean voxelwise cross-entropy.

    With ``from_logits`` the input is ``(B, 2, *spatial)`` two-class logits;
    otherwise it is the foreground probability with the same shape as
    ``targets`` and logs are clamped at ``LOG_CLAMP``.
    """
    if from_logits:
        if inputs.dim() < 3 or inputs.shape[1] != 2 or inputs.shape[2:] != targets.shape[1:] \
                or inputs.shape[0] != targets.shape[0]:
            raise ValueError(f"shape mismatch: logits {tuple(inputs.shape)} vs targets {tuple(targets.shape)}")
        return F.cross_entropy(inputs, targets.long())
    _check_pair(inputs, targets, check_range=False)
    t = targets.to(inputs.dtype)
    log_p = torch.log(inputs.clamp_min(LOG_CLAMP))
    log_q = torch.log((1 - inputs).clamp_min(LOG_CLAMP))
    return -(t * log_p + (1 - t) * log_q).mean()


def combined_loss(outputs, targets, config, from_logits=False):
    """``ce_weight * CE + dice_weight * Dice(config.dice_mode)``.

    ``outputs`` are foreground probabilities, or two-class logits when
    ``from_logits`` is set (the Dice term then uses their softmax).
    """
    if from_logits:
        probs = torch.softmax(outputs, dim=1)[:, 1]
    else:
        probs = outputs
    total = 0
    if config.ce_weight:
        total = total + config.ce_weight * cross_entropy(outputs, targets, from_logits=from_logits)
    if config.dice_weight:
        total = total + config.dice_weight * soft_dice(probs, targets, config.dice_mode, config.smooth)
    return total


def deep_supervision_weights(n_outputs):
    """Halving weights per resolution level, normalized to sum to 1."""
    w = torch.tensor([0.5 ** i for i in range(n_outputs)], dtype=torch.float64)
    return (w / w.sum()).tolist()


def deep_supervision_loss(outputs, targets, config):
    """Weighted loss over (full-res, half-res, ...) logits; targets are downsampled by striding."""
    weights = deep_supervision_weights(len(outputs))
    total = 0
    for w, out in zip(weights, outputs):
        factor = targets.shape[-1] // out.shape[-1]
        t = targets[..., ::factor, ::factor, ::factor] if factor > 1 else targets
        total = total + w * combined_loss(out, t, config, from_logits=True)
    return total
