"""Lesion-mixing augmentation (CraveMix-style carve-and-paste).

A lesion component of a donor case defines a carve region through its signed
Euclidean distance transform (voxel units, negative inside the lesion):

    R = { v : sd(v) <= lambda * D },   D = max interior depth + margin

Inside ``R`` the image channels are blended towards the donor with weight
``alpha`` and the label is replaced by the donor's label; outside ``R`` the
recipient is copied unchanged.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .io import save_case
from .volume import CaseRecord, GeometryError, connected_components

DEFAULT_MARGIN = 3.0
DEFAULT_LAMBDA_RANGE = (0.5, 1.0)
DEFAULT_ALPHA_RANGE = (0.75, 1.0)


@dataclass(frozen=True)
class MixRecipe:
    donor_id: str
    recipient_id: str
    component_id: int
    lambda_carve: float
    blend_alpha: float
    rng_seed: int
    union_label: bool = False

    def __post_init__(self):
        if not 0 < self.lambda_carve <= 1:
            raise ValueError(f"lambda_carve must lie in (0, 1], got {self.lambda_carve}")
        if not 0 < self.blend_alpha <= 1:
            raise ValueError(f"blend_alpha must lie in (0, 1], got {self.blend_alpha}")
        if self.component_id < 1:
            raise ValueError(f"component_id must be >= 1, got {self.component_id}")


def signed_distance(component):
    """Distance to the component outside it, minus the distance to background inside."""
    component = np.asarray(component, dtype=bool)
    outside = ndimage.distance_transform_edt(~component)
    inside = ndimage.distance_transform_edt(component)
    return outside - inside


def carve_threshold(component, lambda_carve, margin=DEFAULT_MARGIN):
    depth = float(ndimage.distance_transform_edt(component).max())
    return lambda_carve * (depth + margin)


def carve_region(donor_label, component_id, lambda_carve, margin=DEFAULT_MARGIN, connectivity=26):
    """Binary carve region around one donor lesion, returned with the label's geometry."""
    if not 0 < lambda_carve <= 1:
        raise ValueError(f"lambda_carve must lie in (0, 1], got {lambda_carve}")
    cc = connected_components(donor_label, connectivity)
    component = cc.component_mask(component_id)
    region = signed_distance(component) <= carve_threshold(component, lambda_carve, margin)
    return donor_label.with_data(region.astype(np.uint8))


def mix_id(recipe):
    return f"mix_{recipe.donor_id}_into_{recipe.recipient_id}_s{recipe.rng_seed}"


def mix_cases(recipient, donor, recipe, margin=DEFAULT_MARGIN, connectivity=26):
    if not (recipient.ct.same_geometry(donor.ct)):
        raise GeometryError(f"cannot mix {donor.case_id!r} into {recipient.case_id!r}: geometry differs")
    if recipe.donor_id != donor.case_id or recipe.recipient_id != recipient.case_id:
        raise ValueError("recipe does not name the given donor/recipient")
    region = carve_region(donor.label, recipe.component_id, recipe.lambda_carve, margin, connectivity).data.astype(bool)
    alpha = recipe.blend_alpha

    def blend(r, d):
        r64 = r.astype(np.float64)
        out = r64.copy()
        # r + alpha * (d - r): exact when d == r, stays within [min, max] of the parents
        out[region] = r64[region] + alpha * (d.astype(np.float64)[region] - r64[region])
        return out.astype(r.dtype)

    label = recipient.label.data.copy()
    if recipe.union_label:
        label[region] = np.maximum(label[region], donor.label.data[region])
    else:
        label[region] = donor.label.data[region]

    if donor is recipient or donor.case_id == recipient.case_id:
        parents = (recipient.case_id,)
    else:
        parents = (donor.case_id, recipient.case_id)
    return CaseRecord(
        mix_id(recipe),
        recipient.ct.with_data(blend(recipient.ct.data, donor.ct.data)),
        recipient.pet.with_data(blend(recipient.pet.data, donor.pet.data)),
        recipient.label.with_data(label),
        is_synthetic=True,
        parents=parents,
    )


def draw_recipe(cases, donors, index, rng_seed, lambda_range=DEFAULT_LAMBDA_RANGE,
                alpha_range=DEFAULT_ALPHA_RANGE, connectivity=26):
    """Recipe number ``index``; its RNG stream depends only on (rng_seed, index)."""
    rng = np.random.default_rng([int(rng_seed), int(index)])
    donor = donors[int(rng.integers(len(donors)))]
    recipient = cases[int(rng.integers(len(cases)))]
    n_components = connected_components(donor.label, connectivity).component_count
    component = int(rng.integers(1, n_components + 1))
    lam = float(rng.uniform(*lambda_range)) if lambda_range[0] < lambda_range[1] else float(lambda_range[0])
    alpha = float(rng.uniform(*alpha_range)) if alpha_range[0] < alpha_range[1] else float(alpha_range[0])
    seed = int(rng.integers(2**31 - 1))
    return donor, recipient, MixRecipe(donor.case_id, recipient.case_id, component, lam, alpha, seed)


def generate_augmented_set(fold_cases, count, rng_seed, lambda_range=DEFAULT_LAMBDA_RANGE,
                           alpha_range=DEFAULT_ALPHA_RANGE, margin=DEFAULT_MARGIN, connectivity=26,
                           return_recipes=False):
    """Draw ``count`` mixed cases from ``fold_cases``; donors always carry a lesion.

    Output ids carry the sample index, so two draws with identical donor,
    recipient and seed cannot collide.
    """
    fold_cases = list(fold_cases)
    if count < 0:
        raise ValueError("count must be non-negative")
    out, recipes = [], []
    if count == 0:
        return (out, recipes) if return_recipes else out
    donors = [c for c in fold_cases if c.has_lesion]
    if not donors:
        raise ValueError("no lesion-bearing donor available among the fold cases")
    for i in range(count):
        donor, recipient, recipe = draw_recipe(fold_cases, donors, i, rng_seed, lambda_range, alpha_range,
                                               connectivity)
        mixed = mix_cases(recipient, donor, recipe, margin, connectivity)
        out.append(mixed.replace(case_id=f"aug{i:04d}_{mixed.case_id}"))
        recipes.append(recipe)
    return (out, recipes) if return_recipes else out


def write_augmented_set(cases, recipes, directory):
    """Materialize the pool in the standard case layout plus ``mix_manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    for case in cases:
        save_case(case, directory)
    manifest = {"count": len(cases),
                "recipes": [dict(asdict(r), case_id=c.case_id) for c, r in zip(cases, recipes)]}
    path = os.path.join(directory, "mix_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
