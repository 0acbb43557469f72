"""Input checks shared by the estimator front ends and the CLI."""
import numpy as np

from .volume import CaseRecord, GeometryError, VolumeGrid


def check_cases(cases, min_cases=1):
    if isinstance(cases, CaseRecord):
        cases = [cases]
    cases = list(cases)
    if len(cases) < min_cases:
        raise ValueError(f"expected at least {min_cases} case(s), got {len(cases)}")
    for c in cases:
        if not isinstance(c, CaseRecord):
            raise TypeError(f"expected CaseRecord, got {type(c).__name__}")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    return cases


def check_binary(volume, name="mask"):
    data = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError(f"non-binary {name}")
    return volume


def check_probability(volume, name="probability volume"):
    data = volume.data if isinstance(volume, VolumeGrid) else np.asarray(volume)
    if not (np.all(np.isfinite(data)) and np.all((data >= 0) & (data <= 1))):
        raise ValueError(f"{name} has values outside [0, 1]")
    return volume


def check_same_geometry(a, b):
    if not a.same_geometry(b):
        raise GeometryError(f"geometry mismatch: {a.shape}/{a.spacing}/{a.origin} vs {b.shape}/{b.spacing}/{b.origin}")
    return a, b
