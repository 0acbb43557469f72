"""Intensity normalization: the dataset-level CT scheme and per-volume z-score."""
import enum
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .volume import CaseRecord, VolumeGrid, structuring_element

EPS = 1e-8
LOWER_PERCENTILE = 0.5
UPPER_PERCENTILE = 99.5
FALLBACK_PERCENTILE = 5.0


class NormalizationMode(str, enum.Enum):
    CT_SCHEME_BOTH = "CT_SCHEME_BOTH"
    CT_FOR_CT_ZSCORE_FOR_PET = "CT_FOR_CT_ZSCORE_FOR_PET"

    def channel_schemes(self):
        if self is NormalizationMode.CT_SCHEME_BOTH:
            return {"ct": "ct_scheme", "pet": "ct_scheme"}
        return {"ct": "ct_scheme", "pet": "zscore"}


@dataclass(frozen=True)
class CTNormStats:
    mean: float
    std: float
    clip_low: float
    clip_high: float
    source_voxel_count: int

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"CT normalization std must be > 0, got {self.std}")
        if self.clip_low > self.clip_high:
            raise ValueError("clip_low must not exceed clip_high")
        if self.source_voxel_count < 1:
            raise ValueError("source_voxel_count must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["mean"]), float(d["std"]), float(d["clip_low"]), float(d["clip_high"]),
                   int(d["source_voxel_count"]))


def stats_from_pool(values):
    """CT-scheme statistics from a 1D pool of foreground intensities."""
    pool = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if pool.size == 0:
        raise ValueError("empty foreground pool")
    if pool.size < 2:
        raise ValueError("zero variance pool: a single voxel has no spread")
    clip_low, clip_high = np.percentile(pool, [LOWER_PERCENTILE, UPPER_PERCENTILE], method="linear")
    clipped = np.clip(pool, clip_low, clip_high)
    std = float(clipped.std())
    if not std > 0:
        raise ValueError("zero variance pool")
    return CTNormStats(float(clipped.mean()), std, float(clip_low), float(clip_high), int(pool.size))


def foreground_mask(case, dilation=1):
    """Lesion label dilated by ``dilation`` voxels (26-neighbourhood)."""
    label = case.label.data.astype(bool)
    if dilation > 0 and label.any():
        label = ndimage.binary_dilation(label, structure=structuring_element(26), iterations=dilation)
    return label


def pool_foreground(cases, channel):
    """Pooled, sorted foreground intensities of ``channel`` over ``cases``.

    Uses the dilated lesion masks; when no case has a lesion, falls back to
    every voxel above each volume's 5th intensity percentile.  The pool is
    sorted, so the result does not depend on case order.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("at least one case is required for normalization statistics")
    if any(c.has_lesion for c in cases):
        parts = [getattr(c, channel).data[foreground_mask(c)] for c in cases if c.has_lesion]
    else:
        parts = []
        for c in cases:
            data = getattr(c, channel).data
            parts.append(data[data > np.percentile(data, FALLBACK_PERCENTILE)])
    pool = np.concatenate([p.astype(np.float64).ravel() for p in parts])
    return np.sort(pool)


def compute_ct_norm_stats(cases, channel="ct"):
    if channel not in ("ct", "pet"):
        raise ValueError(f"channel must be 'ct' or 'pet', got {channel!r}")
    return stats_from_pool(pool_foreground(cases, channel))


def apply_ct_norm(volume, stats):
    data = np.clip(volume.data.astype(np.float64), stats.clip_low, stats.clip_high)
    return volume.with_data(((data - stats.mean) / stats.std).astype(np.float32))


def apply_zscore(volume, eps=EPS):
    data = volume.data.astype(np.float64)
    if data.size == 0:
        raise ValueError("empty volume")
    out = (data - data.mean()) / max(float(data.std()), eps)
    return volume.with_data(out.astype(np.float32))


def normalize_case(case, mode, ct_stats=None, pet_stats=None):
    mode = NormalizationMode(mode)
    stats = {"ct": ct_stats, "pet": pet_stats}
    out = {}
    for channel, scheme in mode.channel_schemes().items():
        volume = getattr(case, channel)
        if scheme == "ct_scheme":
            if stats[channel] is None:
                raise ValueError(f"mode {mode.value} needs dataset statistics for the {channel} channel")
            out[channel] = apply_ct_norm(volume, stats[channel])
        else:
            out[channel] = apply_zscore(volume)
    return case.replace(**out)


@dataclass(frozen=True)
class NormalizationRecord:
    """Everything inference needs to reproduce training-time preprocessing."""

    mode: NormalizationMode
    ct_stats: CTNormStats
    pet_stats: CTNormStats = None

    def to_dict(self):
        return {
            "mode": NormalizationMode(self.mode).value,
            "ct": self.ct_stats.to_dict() if self.ct_stats else None,
            "pet": self.pet_stats.to_dict() if self.pet_stats else None,
        }

    @classmethod
    def from_dict(cls, d):
        if d is None or "mode" not in d:
            raise ValueError("missing normalization record")
        return cls(NormalizationMode(d["mode"]),
                   CTNormStats.from_dict(d["ct"]) if d.get("ct") else None,
                   CTNormStats.from_dict(d["pet"]) if d.get("pet") else None)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def apply(self, case):
        return normalize_case(case, self.mode, self.ct_stats, self.pet_stats)


def write_norm_stats(record, path):
    with open(path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)


def read_norm_stats(path):
    with open(path) as fh:
        return NormalizationRecord.from_dict(json.load(fh))


class CTNormalizer(BaseEstimator, TransformerMixin):
    """Dataset-level clip-and-standardize scheme as a transformer.

    ``fit`` takes training cases and pools the chosen channel's foreground;
    ``transform`` accepts a :class:`VolumeGrid` or a list of them.
    """

    def __init__(self, channel="ct"):
        self.channel = channel

    def fit(self, cases, y=None):
        self.stats_ = compute_ct_norm_stats(cases, self.channel)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, VolumeGrid):
            return apply_ct_norm(X, self.stats_)
        return [apply_ct_norm(v, self.stats_) for v in X]


class ZScoreNormalizer(BaseEstimator, TransformerMixin):
    """Per-volume z-score; stateless, ``fit`` is a no-op."""

    def __init__(self, eps=EPS):
        self.eps = eps

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if isinstance(X, VolumeGrid):
            return apply_zscore(X, self.eps)
        return [apply_zscore(v, self.eps) for v in X]


class CaseNormalizer(BaseEstimator, TransformerMixin):
    """Two-channel case normalization for a given :class:`NormalizationMode`."""

    def __init__(self, mode=NormalizationMode.CT_SCHEME_BOTH):
        self.mode = mode

    def fit(self, cases, y=None):
        cases = list(cases)
        mode = NormalizationMode(self.mode)
        ct_stats = compute_ct_norm_stats(cases, "ct")
        pet_stats = compute_ct_norm_stats(cases, "pet") if mode.channel_schemes()["pet"] == "ct_scheme" else None
        self.record_ = NormalizationRecord(mode, ct_stats, pet_stats)
        self.source_case_ids_ = tuple(c.case_id for c in cases)
        return self

    def transform(self, X):
        check_is_fitted(self, "record_")
        if isinstance(X, CaseRecord):
            return self.record_.apply(X)
        return [self.record_.apply(c) for c in X]
