"""NIfTI case I/O and the ``dataset.json`` manifest.

Layout on disk::

    <root>/<case_id>/ct.nii.gz
    <root>/<case_id>/pet.nii.gz
    <root>/<case_id>/label.nii.gz
    <root>/dataset.json

NIfTI-1 headers hold spacing and origin as float32.  The exact float64 values
are also written into a JSON header extension so that geometry survives a
round trip bit-exactly; readers without the extension fall back to the affine.
"""
import json
import os

import nibabel as nib
import numpy as np

from .volume import CaseRecord, GeometryError, VolumeGrid

GEOMETRY_ECODE = 6  # NIfTI "comment" extension
MANIFEST_NAME = "dataset.json"
CHANNEL_FILES = {"ct": "ct.nii.gz", "pet": "pet.nii.gz", "label": "label.nii.gz"}


class CaseFormatError(IOError):
    pass


def _affine(spacing, origin):
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = origin
    return affine


def save_volume(volume, path, dtype=np.float32):
    data = np.ascontiguousarray(volume.data, dtype=dtype)
    img = nib.Nifti1Image(data, _affine(volume.spacing, volume.origin))
    img.header.set_xyzt_units("mm")
    payload = json.dumps({"spacing": list(volume.spacing), "origin": list(volume.origin)}).encode()
    img.header.extensions.append(nib.nifti1.Nifti1Extension(GEOMETRY_ECODE, payload))
    nib.save(img, path)
    return path


def load_volume(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        img = nib.load(path)
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types on corrupt files
        raise CaseFormatError(f"cannot read volume {path}: {exc}") from exc
    if data.ndim != 3:
        raise CaseFormatError(f"{path}: expected a 3D scalar volume, got shape {data.shape}")

    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    origin = tuple(float(o) for o in img.affine[:3, 3])
    for ext in img.header.extensions:
        if ext.get_code() == GEOMETRY_ECODE:
            try:
                geo = json.loads(ext.get_content())
            except ValueError:
                continue
            if isinstance(geo, dict) and "spacing" in geo and "origin" in geo:
                if np.allclose(geo["spacing"], spacing, rtol=1e-6):
                    spacing = tuple(geo["spacing"])
                    origin = tuple(geo["origin"])
    return VolumeGrid(np.array(data), spacing, origin)


def case_paths(directory, case_id):
    base = os.path.join(directory, case_id)
    return {k: os.path.join(base, v) for k, v in CHANNEL_FILES.items()}


def save_case(case, directory):
    """Write ``case`` under ``directory/<case_id>/``; returns the three paths."""
    paths = case_paths(directory, case.case_id)
    os.makedirs(os.path.dirname(paths["ct"]), exist_ok=True)
    save_volume(case.ct, paths["ct"], np.float32)
    save_volume(case.pet, paths["pet"], np.float32)
    save_volume(case.label, paths["label"], np.uint8)
    return paths


def load_case(ct_path, pet_path, label_path, case_id=None, is_synthetic=False, parents=()):
    ct, pet, label = (load_volume(p) for p in (ct_path, pet_path, label_path))
    for name, vol in (("pet", pet), ("label", label)):
        if not ct.same_geometry(vol):
            raise GeometryError(
                f"geometry mismatch: ct {ct.shape}/{ct.spacing}/{ct.origin} vs "
                f"{name} {vol.shape}/{vol.spacing}/{vol.origin}")
    if not label.is_binary():
        raise ValueError(f"non-binary label in {label_path}")
    label = label.with_data(label.data.astype(np.uint8))
    if case_id is None:
        case_id = os.path.basename(os.path.dirname(os.path.abspath(ct_path)))
    return CaseRecord(case_id, ct, pet, label, is_synthetic=is_synthetic, parents=parents)


def load_case_dir(directory, case_id, **kwargs):
    p = case_paths(directory, case_id)
    return load_case(p["ct"], p["pet"], p["label"], case_id=case_id, **kwargs)


def write_manifest(directory, cases, folds=None, extra=None):
    """Write ``dataset.json`` listing case ids, lesion flags and optional folds."""
    entries = []
    for case in cases:
        entry = {"case_id": case.case_id, "has_lesion": case.has_lesion}
        if case.is_synthetic:
            entry["is_synthetic"] = True
            entry["parents"] = list(case.parents)
        if folds is not None and case.case_id in folds:
            entry["fold"] = int(folds[case.case_id])
        entries.append(entry)
    manifest = {"cases": entries}
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(directory):
    """Load every case listed in ``directory/dataset.json`` (manifest order)."""
    manifest = read_manifest(directory)
    cases = []
    for entry in manifest["cases"]:
        cases.append(load_case_dir(directory, entry["case_id"],
                                   is_synthetic=entry.get("is_synthetic", False),
                                   parents=tuple(entry.get("parents", ()))))
    return cases
