"""Volume data model, patch extraction and 3D connected components.

Axis convention: every array is indexed ``data[i, j, k]`` with ``i`` along x,
``j`` along y and ``k`` along z.  This is the NIfTI voxel order, so arrays are
written to disk without any transposition.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """A 3D scalar field with voxel spacing and origin, both in millimetres."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume must be 3D with all dimensions >= 1, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("spacing and origin must have three components")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise GeometryError(f"spacing must be strictly positive, got {spacing}")
        if not np.isfinite(self.voxel_volume_for(spacing)):
            raise GeometryError("voxel volume is not finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @staticmethod
    def voxel_volume_for(spacing):
        return float(spacing[0]) * float(spacing[1]) * float(spacing[2])

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_volume(self):
        """Voxel volume in mm^3."""
        return self.voxel_volume_for(self.spacing)

    def same_geometry(self, other):
        return self.shape == other.shape and self.spacing == other.spacing and self.origin == other.origin

    def with_data(self, data):
        return VolumeGrid(data, self.spacing, self.origin)

    def is_binary(self):
        return bool(np.all((self.data == 0) | (self.data == 1)))

    def is_probability(self):
        return bool(np.all((self.data >= 0) & (self.data <= 1)))


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One patient case: co-registered CT, PET and binary lesion label.

    ``parents`` lists the case ids a synthetic case was mixed from, so that
    leakage audits can trace augmented data back to its sources.
    """

    case_id: str
    ct: VolumeGrid
    pet: VolumeGrid
    label: VolumeGrid
    is_synthetic: bool = False
    parents: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.ct.same_geometry(self.pet) and self.ct.same_geometry(self.label)):
            raise GeometryError(
                f"geometry mismatch in case {self.case_id!r}: "
                f"ct {self.ct.shape}/{self.ct.spacing}/{self.ct.origin}, "
                f"pet {self.pet.shape}/{self.pet.spacing}/{self.pet.origin}, "
                f"label {self.label.shape}/{self.label.spacing}/{self.label.origin}"
            )
        if not self.label.is_binary():
            raise ValueError(f"non-binary label in case {self.case_id!r}")
        object.__setattr__(self, "parents", tuple(self.parents))

    @property
    def shape(self):
        return self.ct.shape

    @property
    def spacing(self):
        return self.ct.spacing

    @property
    def has_lesion(self):
        return bool(self.label.data.any())

    def replace(self, **changes):
        kwargs = dict(case_id=self.case_id, ct=self.ct, pet=self.pet, label=self.label,
                      is_synthetic=self.is_synthetic, parents=self.parents)
        kwargs.update(changes)
        return CaseRecord(**kwargs)


@dataclass(frozen=True)
class PatchGeometry:
    """Where a patch sits in its source volume (origin may be negative)."""

    origin: tuple
    size: tuple

    def source_slices(self, volume_shape):
        """Slices into the volume and into the patch for the in-bounds overlap."""
        src, dst = [], []
        for o, s, n in zip(self.origin, self.size, volume_shape):
            lo, hi = max(o, 0), min(o + s, n)
            if hi <= lo:
                return None
            src.append(slice(lo, hi))
            dst.append(slice(lo - o, hi - o))
        return tuple(src), tuple(dst)


def _check_size(size):
    size = tuple(int(s) for s in size)
    if len(size) != 3 or any(s < 1 for s in size):
        raise ValueError(f"patch size must have three positive components, got {size}")
    return size


def patch_geometry(center, size):
    size = _check_size(size)
    origin = tuple(int(c) - s // 2 for c, s in zip(center, size))
    return PatchGeometry(origin, size)


def crop_array(array, geometry, pad_value=0):
    """Copy ``geometry``'s window out of ``array``; out-of-bounds voxels get ``pad_value``."""
    out = np.full(geometry.size, pad_value, dtype=array.dtype)
    slices = geometry.source_slices(array.shape)
    if slices is not None:
        src, dst = slices
        out[dst] = array[src]
    return out


def scatter_array(patch, geometry, target):
    """Write the in-bounds part of ``patch`` back into ``target`` in place."""
    slices = geometry.source_slices(target.shape)
    if slices is not None:
        src, dst = slices
        target[src] = patch[dst]
    return target


def extract_patch(case, center, size, ct_pad=None, pet_pad=0.0):
    """Cut a (ct, pet, label) patch of ``size`` voxels centred on ``center``.

    ``ct_pad`` defaults to the minimum CT value of the case, which after
    normalization is the normalized lower end of the CT range ("air").
    Returns the three arrays and the :class:`PatchGeometry` needed to scatter
    predictions back.
    """
    geometry = patch_geometry(center, size)
    if ct_pad is None:
        ct_pad = float(case.ct.data.min())
    ct = crop_array(case.ct.data, geometry, ct_pad)
    pet = crop_array(case.pet.data, geometry, pet_pad)
    label = crop_array(case.label.data, geometry, 0)
    return ct, pet, label, geometry


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    component_count: int
    component_voxel_counts: list

    def component_mask(self, component_id):
        if not 1 <= component_id <= self.component_count:
            raise ValueError(f"component {component_id} does not exist "
                             f"(labeling has {self.component_count} components)")
        return self.labels == component_id


def structuring_element(connectivity):
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


def connected_components(mask, connectivity=26):
    """Label the connected foreground components of a binary mask.

    Labels are assigned in raster-scan order of each component's first voxel,
    so the result is deterministic.
    """
    data = mask.data if isinstance(mask, VolumeGrid) else np.asarray(mask)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("non-binary mask passed to connected_components")
    labels, count = ndimage.label(data.astype(bool), structure=structuring_element(connectivity))
    counts = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels.astype(np.int32), int(count), [int(c) for c in counts])
