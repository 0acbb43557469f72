"""Dice and component-wise false-positive / false-negative volumes, plus aggregation.

FP volume: total volume of predicted components that touch no ground-truth
voxel.  FN volume: total volume of ground-truth components that no predicted
voxel touches.  Both in millilitres, 26-connectivity unless told otherwise.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import GeometryError, VolumeGrid, connected_components

MM3_PER_ML = 1000.0


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    fp_volume_ml: float
    fn_volume_ml: float
    pred_voxels: int
    gt_voxels: int
    fp_components: int = 0
    fn_components: int = 0


@dataclass
class MetricsReport:
    per_case: list
    groups: dict = field(default_factory=dict)

    @property
    def aggregate(self):
        return aggregate_values(self.per_case)


def _masks(pred, gt, spacing=None):
    if isinstance(pred, VolumeGrid) and isinstance(gt, VolumeGrid):
        if not pred.same_geometry(gt):
            raise GeometryError("prediction and ground truth geometry differ")
        spacing = pred.spacing if spacing is None else spacing
    p = pred.data if isinstance(pred, VolumeGrid) else np.asarray(pred)
    g = gt.data if isinstance(gt, VolumeGrid) else np.asarray(gt)
    if p.shape != g.shape:
        raise GeometryError(f"shape mismatch: {p.shape} vs {g.shape}")
    for name, m in (("prediction", p), ("ground truth", g)):
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"non-binary {name} mask")
    return p.astype(bool), g.astype(bool), spacing


def dice_coefficient(pred, gt):
    """2|P & G| / (|P| + |G|); both empty counts as a perfect 1.0."""
    p, g, _ = _masks(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _unmatched(a, b, connectivity):
    """Voxel count and number of components of ``a`` that do not touch ``b``."""
    cc = connected_components(a.astype(np.uint8), connectivity)
    if cc.component_count == 0:
        return 0, 0
    hit = np.unique(cc.labels[b & a])
    missed = np.ones(cc.component_count + 1, dtype=bool)
    missed[0] = False
    missed[hit] = False
    counts = np.asarray([0] + cc.component_voxel_counts)
    return int(counts[missed].sum()), int(missed.sum())


def _voxel_ml(spacing):
    spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
    return VolumeGrid.voxel_volume_for(spacing) / MM3_PER_ML


def false_positive_volume(pred, gt, spacing=None, connectivity=26):
    p, g, spacing = _masks(pred, gt, spacing)
    voxels, _ = _unmatched(p, g, connectivity)
    return voxels * _voxel_ml(spacing)


def false_negative_volume(pred, gt, spacing=None, connectivity=26):
    p, g, spacing = _masks(pred, gt, spacing)
    voxels, _ = _unmatched(g, p, connectivity)
    return voxels * _voxel_ml(spacing)


def evaluate_case(pred, case, connectivity=26):
    pred_grid = pred if isinstance(pred, VolumeGrid) else case.label.with_data(np.asarray(pred))
    p, g, spacing = _masks(pred_grid, case.label)
    fp_vox, fp_n = _unmatched(p, g, connectivity)
    fn_vox, fn_n = _unmatched(g, p, connectivity)
    ml = _voxel_ml(spacing)
    return CaseMetrics(case.case_id, dice_coefficient(p, g), fp_vox * ml, fn_vox * ml,
                       int(p.sum()), int(g.sum()), fp_n, fn_n)


def aggregate_values(per_case):
    per_case = list(per_case)
    if not per_case:
        raise ValueError("cannot aggregate an empty case list")
    n = len(per_case)
    return {
        "dice": math.fsum(m.dice for m in per_case) / n,
        "fn_volume_ml": math.fsum(m.fn_volume_ml for m in per_case) / n,
        "fp_volume_ml": math.fsum(m.fp_volume_ml for m in per_case) / n,
        "fn_components": math.fsum(m.fn_components for m in per_case) / n,
        "fp_components": math.fsum(m.fp_components for m in per_case) / n,
        "n_cases": n,
    }


def aggregate(per_case, grouping=None):
    """Unweighted per-group means; ``grouping`` maps case_id -> group key.

    Without a grouping every case lands in the single group ``"all"``.
    """
    per_case = list(per_case)
    if not per_case:
        raise ValueError("cannot aggregate an empty case list")
    buckets = {}
    for m in per_case:
        key = "all" if grouping is None else grouping[m.case_id]
        buckets.setdefault(key, []).append(m)
    return MetricsReport(per_case, {k: aggregate_values(v) for k, v in buckets.items()})


def write_metrics_csv(per_case, path, extra_columns=None):
    """One row per case; ``extra_columns`` maps case_id -> dict of leading columns."""
    rows = []
    for m in per_case:
        row = dict(extra_columns[m.case_id]) if extra_columns else {}
        row.update(asdict(m))
        rows.append(row)
    if not rows:
        raise ValueError("no metrics to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_report_json(report, path, extra=None):
    payload = {"groups": report.groups, "per_case": [asdict(m) for m in report.per_case]}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def format_table(rows, title="Cross-Validation"):
    """Aligned text table: one row per strategy, columns Dice, FN and FP.

    ``rows`` is a list of ``(name, {"dice": .., "fn_volume_ml": .., "fp_volume_ml": ..})``.
    """
    name_w = max([len("Strategy")] + [len(name) for name, _ in rows])
    header = f"{'Strategy':<{name_w}} | {'Dice':>8} {'FN':>10} {'FP':>10}"
    lines = [title, header, "-" * len(header)]
    for name, agg in rows:
        lines.append(f"{name:<{name_w}} | {agg['dice']:>8.4f} {agg['fn_volume_ml']:>10.4f} "
                     f"{agg['fp_volume_ml']:>10.4f}")
    lines.append("FN/FP: mean component-wise volume per case in ml (26-connectivity)")
    return "\n".join(lines) + "\n"
