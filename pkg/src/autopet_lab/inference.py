"""Sliding-window prediction with Gaussian blending and fold ensembling.

Blending keeps, per voxel, the accumulated weight ``W`` and the running
weighted mean ``M`` of the foreground probability::

    W += w;  M += (w / W) * (p - M)

which is the same quantity as ``sum(w * p) / sum(w)`` but returns a constant
prediction bit-exactly.  Fold outputs are combined with an equal-weight
running mean for the same reason.
"""
import math
from dataclasses import dataclass

import numpy as np

from .volume import VolumeGrid

DEFAULT_OVERLAP = 0.5
DEFAULT_SIGMA_SCALE = 1.0 / 8.0
WEIGHT_FLOOR = 1e-8


class NormalizationMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TilingPlan:
    patch_size: tuple
    step: tuple
    tile_origins: tuple
    volume_shape: tuple
    padded_shape: tuple
    pad_before: tuple

    @property
    def n_tiles(self):
        return len(self.tile_origins)


def _axis_origins(length, patch, step):
    if length <= patch:
        return [0]
    n = math.ceil((length - patch) / step) + 1
    origins = [i * step for i in range(n - 1)] + [length - patch]
    return sorted(set(o for o in origins if o <= length - patch))


def plan_tiles(volume_shape, patch_size, overlap=DEFAULT_OVERLAP):
    """Tile origins per axis: multiples of the step, last tile flush with the boundary.

    Axes shorter than the patch are padded symmetrically up to the patch size.
    """
    volume_shape = tuple(int(n) for n in volume_shape)
    patch_size = tuple(int(p) for p in patch_size)
    if len(volume_shape) != 3 or len(patch_size) != 3 or min(volume_shape) < 1 or min(patch_size) < 1:
        raise ValueError(f"degenerate shapes: volume {volume_shape}, patch {patch_size}")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    padded = tuple(max(n, p) for n, p in zip(volume_shape, patch_size))
    pad_before = tuple((q - n) // 2 for q, n in zip(padded, volume_shape))
    step = tuple(max(1, math.ceil(p * (1 - overlap))) for p in patch_size)
    per_axis = [_axis_origins(n, p, s) for n, p, s in zip(padded, patch_size, step)]
    origins = tuple((a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2])
    return TilingPlan(patch_size, step, origins, volume_shape, padded, pad_before)


def gaussian_weight_map(patch_size, sigma_scale=DEFAULT_SIGMA_SCALE, floor=WEIGHT_FLOOR):
    """Separable Gaussian importance map, 1 at the centre, floored at ``floor``."""
    if not sigma_scale > 0:
        raise ValueError("sigma_scale must be positive")
    axes = []
    for p in patch_size:
        c = (p - 1) / 2.0
        sigma = sigma_scale * p
        i = np.arange(p, dtype=np.float64)
        axes.append(np.exp(-((i - c) ** 2) / (2.0 * sigma ** 2)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = w / w.max()
    return np.maximum(w, floor)


def _pad_channel(data, plan, value):
    if plan.padded_shape == plan.volume_shape:
        return data
    pads = [(b, q - n - b) for b, q, n in zip(plan.pad_before, plan.padded_shape, plan.volume_shape)]
    return np.pad(data, pads, mode="constant", constant_values=value)


def _model_normalization(model):
    return getattr(model, "normalization", None)


def _check_normalization(models, normalization):
    if normalization is None:
        return
    for m in models:
        rec = _model_normalization(m)
        if rec is not None and rec.to_json() != normalization.to_json():
            raise NormalizationMismatch("model was trained with a different normalization record")


def predict_single(model, ct, pet, plan, weight_map, tile_order=None, batch_size=1):
    """Blend one model's foreground probability over the padded volume."""
    acc_w = np.zeros(plan.padded_shape, dtype=np.float64)
    acc_m = np.zeros(plan.padded_shape, dtype=np.float64)
    order = range(plan.n_tiles) if tile_order is None else tile_order
    order = list(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = []
        for t in idx:
            sl = tuple(slice(o, o + p) for o, p in zip(plan.tile_origins[t], plan.patch_size))
            batch.append(np.stack([ct[sl], pet[sl]]))
        probs = np.asarray(model.predict_proba(np.stack(batch).astype(np.float32)), dtype=np.float64)
        for j, t in enumerate(idx):
            sl = tuple(slice(o, o + p) for o, p in zip(plan.tile_origins[t], plan.patch_size))
            acc_w[sl] += weight_map
            acc_m[sl] += (weight_map / acc_w[sl]) * (probs[j, 1] - acc_m[sl])
    return acc_m


def sliding_window_predict(models, case, plan=None, weight_map=None, normalization=None,
                           overlap=DEFAULT_OVERLAP, sigma_scale=DEFAULT_SIGMA_SCALE, tile_order=None,
                           already_normalized=False, batch_size=1):
    """Full-volume foreground probability, averaged over ``models``.

    Each model needs ``predict_proba(batch) -> (B, 2, *patch)`` and a
    ``patch_size``.  Every model normalizes the raw case with its own
    ``normalization`` attribute; an explicit ``normalization`` argument must
    match each model's record.  ``already_normalized`` skips normalization.
    """
    if not isinstance(models, (list, tuple)):
        models = [models]
    if not models:
        raise ValueError("empty model list")
    _check_normalization(models, normalization)

    patch = tuple(models[0].patch_size)
    if any(tuple(m.patch_size) != patch for m in models):
        raise ValueError("ensemble members use different patch sizes")
    if plan is None:
        plan = plan_tiles(case.shape, patch, overlap)
    if weight_map is None:
        weight_map = gaussian_weight_map(patch, sigma_scale)

    # fold models carry their own training-set statistics, so each member
    # sees the case normalized with its own record
    inputs = {}
    mean = None
    for k, model in enumerate(models, start=1):
        record = normalization if normalization is not None else _model_normalization(model)
        key = None if already_normalized or record is None else record.to_json()
        if key not in inputs:
            prepared = case if key is None else record.apply(case)
            inputs[key] = (_pad_channel(prepared.ct.data, plan, float(prepared.ct.data.min())),
                           _pad_channel(prepared.pet.data, plan, 0.0))
        probs = predict_single(model, *inputs[key], plan, weight_map, tile_order, batch_size)
        mean = probs if mean is None else mean + (probs - mean) / k

    crop = tuple(slice(b, b + n) for b, n in zip(plan.pad_before, plan.volume_shape))
    out = np.clip(mean[crop], 0.0, 1.0)
    return VolumeGrid(out, case.spacing, case.ct.origin)


def binarize(prob, threshold=0.5):
    data = prob.data if isinstance(prob, VolumeGrid) else np.asarray(prob)
    mask = (data > threshold).astype(np.uint8)
    return prob.with_data(mask) if isinstance(prob, VolumeGrid) else mask


class ConstantModel:
    """Stub that predicts the same foreground probability everywhere."""

    def __init__(self, p, patch_size=(32, 32, 32), normalization=None):
        self.p = float(p)
        self.patch_size = tuple(patch_size)
        self.normalization = normalization

    def predict_proba(self, batch):
        b = np.asarray(batch)
        out = np.empty((b.shape[0], 2) + b.shape[2:], dtype=np.float64)
        out[:, 1] = self.p
        out[:, 0] = 1.0 - self.p
        return out
