"""Synthetic whole-body PET/CT phantoms with ellipsoidal lesions."""
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import CaseRecord, VolumeGrid, structuring_element

AIR_HU = -1000.0
SOFT_TISSUE_HU = 40.0


@dataclass(frozen=True)
class PhantomConfig:
    grid_shape: tuple = (48, 48, 48)
    spacing: tuple = (2.0, 2.0, 2.0)
    lesion_count_range: tuple = (1, 3)
    lesion_radius_range_mm: tuple = (4.0, 9.0)
    pet_lesion_uptake_range: tuple = (4.0, 8.0)
    background_noise_sigma: float = 0.1
    rng_seed: int = 0
    pet_background_uptake: float = 1.0
    ct_noise_hu: float = 10.0
    lesion_ct_offset_hu: float = 25.0
    edge_sigma_vox: float = 0.75

    def __post_init__(self):
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion_count_range {self.lesion_count_range}")
        rmin, rmax = self.lesion_radius_range_mm
        if rmin <= 0 or rmax < rmin:
            raise ValueError(f"invalid lesion_radius_range_mm {self.lesion_radius_range_mm}")
        umin, umax = self.pet_lesion_uptake_range
        if umax < umin:
            raise ValueError(f"invalid pet_lesion_uptake_range {self.pet_lesion_uptake_range}")
        if umin <= self.pet_background_uptake:
            raise ValueError("minimum lesion uptake must exceed the background uptake")
        if self.background_noise_sigma < 0 or self.ct_noise_hu < 0:
            raise ValueError("noise levels must be non-negative")
        if len(self.grid_shape) != 3 or any(int(n) < 1 for n in self.grid_shape):
            raise ValueError(f"invalid grid_shape {self.grid_shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"invalid spacing {self.spacing}")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _coords(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _ellipsoid(coords, center, radii_vox):
    r2 = sum(((c - m) / r) ** 2 for c, m, r in zip(coords, center, radii_vox))
    return r2 <= 1.0


def generate_phantom(config, case_id=None):
    """Render one PET/CT case from ``config``; deterministic in ``config.rng_seed``.

    Lesions never touch each other (not even diagonally), so the number of
    26-connected label components equals the number of placed lesions.
    """
    shape = tuple(int(n) for n in config.grid_shape)
    spacing = np.asarray(config.spacing, dtype=np.float64)
    rmin_vox = config.lesion_radius_range_mm[0] / spacing
    if config.lesion_count_range[1] > 0 and np.any(2 * np.floor(rmin_vox) + 1 > np.asarray(shape)):
        raise ValueError(f"grid {shape} is too small for a lesion of radius "
                         f"{config.lesion_radius_range_mm[0]} mm at spacing {tuple(spacing)}")

    rng = np.random.default_rng(config.rng_seed)
    coords = _coords(shape)
    mid = (np.asarray(shape) - 1) / 2.0

    # body: an ellipsoid filling most of the field of view
    body_radii = np.asarray(shape) * rng.uniform(0.38, 0.46, size=3)
    body = _ellipsoid(coords, mid, body_radii)
    body_soft = ndimage.gaussian_filter(body.astype(np.float64), 1.0)

    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 3.0)
    texture /= max(texture.std(), 1e-12)
    ct = AIR_HU + (SOFT_TISSUE_HU + 15.0 * texture - AIR_HU) * body_soft
    pet = config.pet_background_uptake * body_soft * (1.0 + 0.1 * texture)

    label = np.zeros(shape, dtype=bool)
    forbidden = np.zeros(shape, dtype=bool)
    ring = structuring_element(26)
    n_lesions = int(rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1))
    rmin, rmax = config.lesion_radius_range_mm
    umin, umax = config.pet_lesion_uptake_range
    placed = 0
    for _ in range(n_lesions * 50):
        if placed == n_lesions:
            break
        radii_vox = rng.uniform(rmin, rmax, size=3) / spacing
        lo = np.ceil(radii_vox)
        hi = np.asarray(shape) - 1 - np.ceil(radii_vox)
        if np.any(hi < lo):
            radii_vox = np.minimum(radii_vox, (np.asarray(shape) - 1) / 2.0)
            lo, hi = np.ceil(radii_vox), np.asarray(shape) - 1 - np.ceil(radii_vox)
            lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        # lesion centres sit on voxel centres so every lesion owns at least one voxel
        center = np.array([rng.integers(int(a), int(b) + 1) for a, b in zip(lo, hi)], dtype=np.float64)
        blob = _ellipsoid(coords, center, radii_vox)
        if np.any(blob & forbidden):
            continue
        uptake = rng.uniform(umin, umax)
        profile = np.maximum(blob, ndimage.gaussian_filter(blob.astype(np.float64), config.edge_sigma_vox))
        pet = pet * (1.0 - profile) + uptake * profile
        ct = ct + config.lesion_ct_offset_hu * profile * body_soft
        label |= blob
        forbidden |= ndimage.binary_dilation(blob, structure=ring)
        placed += 1

    ct = ct + rng.normal(0.0, config.ct_noise_hu, size=shape) if config.ct_noise_hu > 0 else ct
    if config.background_noise_sigma > 0:
        pet = pet + rng.normal(0.0, config.background_noise_sigma, size=shape)
    pet = np.clip(pet, 0.0, None)

    if case_id is None:
        case_id = f"phantom_{config.rng_seed:06d}"
    spacing = tuple(float(s) for s in spacing)
    return CaseRecord(
        case_id,
        VolumeGrid(ct.astype(np.float32), spacing),
        VolumeGrid(pet.astype(np.float32), spacing),
        VolumeGrid(label.astype(np.uint8), spacing),
    )


def generate_cohort(config, n_positive, n_negative, seed, prefix="case"):
    """Lesion-bearing cases first, then negative controls, all seeded from ``seed``.

    Case ``i`` uses the seed ``seed * 100003 + i`` so every case can be
    regenerated independently.
    """
    cases = []
    lo, hi = config.lesion_count_range
    for i in range(n_positive + n_negative):
        positive = i < n_positive
        count_range = (max(lo, 1), max(hi, 1)) if positive else (0, 0)
        cfg = config.replace(rng_seed=int(seed) * 100003 + i, lesion_count_range=count_range)
        case = generate_phantom(cfg, case_id=f"{prefix}_{i:04d}")
        if positive and not case.has_lesion:
            raise RuntimeError(f"could not place a lesion in {case.case_id}; enlarge the grid")
        cases.append(case)
    return cases
