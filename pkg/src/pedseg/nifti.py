"""NIfTI-1 single-file read/write for scalar and label volumes.

Scalars are written as float32, labels as uint8 (or int16 when codes exceed
255). The affine goes into the sform fields. gzip output is deterministic
(nibabel writes a zero mtime), so identical volumes give identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import nibabel as nib
import numpy as np

from .volume import LabelVolume, ScalarVolume

PathLike = Union[str, Path]

AFFINE_TOL = 1e-3


def _spacing_from_header(img: nib.Nifti1Image) -> tuple[float, float, float]:
    zooms = img.header.get_zooms()[:3]
    return tuple(float(z) for z in zooms)  # type: ignore[return-value]


def _load(path: PathLike) -> nib.Nifti1Image:
    img = nib.load(str(path))
    if img.ndim != 3:
        raise ValueError(f"{path}: expected a 3-D image, got {img.ndim}-D")
    return img


def load_scalar(path: PathLike, brain_mask: Optional[np.ndarray] = None) -> ScalarVolume:
    img = _load(path)
    data = np.asarray(img.dataobj, dtype=np.float64)
    return ScalarVolume(data, _spacing_from_header(img), brain_mask, img.affine)


def load_labels(path: PathLike, codes: Optional[dict[str, int]] = None) -> LabelVolume:
    img = _load(path)
    data = np.asarray(img.dataobj)
    if not np.issubdtype(data.dtype, np.integer):
        rounded = np.rint(data)
        if not np.array_equal(rounded, data):
            raise ValueError(f"{path}: label image holds non-integer values")
        data = rounded
    return LabelVolume(data.astype(np.int32), _spacing_from_header(img), None, img.affine, codes)


def _finish(img: nib.Nifti1Image, spacing, affine) -> nib.Nifti1Image:
    img.header.set_zooms(spacing)
    img.set_sform(affine, code=1)
    img.set_qform(affine, code=1)
    return img


def save_scalar(vol: ScalarVolume, path: PathLike) -> None:
    img = nib.Nifti1Image(vol.data.astype("<f4"), vol.affine)
    img.header.set_data_dtype(np.float32)
    nib.save(_finish(img, vol.spacing, vol.affine), str(path))


def save_labels(vol: LabelVolume, path: PathLike) -> None:
    top = int(vol.labels.max()) if vol.labels.size else 0
    dtype = np.uint8 if top <= 255 else np.int16
    if top > np.iinfo(np.int16).max:
        raise ValueError(f"label code {top} does not fit int16")
    img = nib.Nifti1Image(vol.labels.astype(dtype), vol.affine)
    img.header.set_data_dtype(dtype)
    nib.save(_finish(img, vol.spacing, vol.affine), str(path))


def save_mask(mask: np.ndarray, grid: ScalarVolume | LabelVolume, path: PathLike) -> None:
    save_labels(LabelVolume.from_mask(mask, grid), path)


def affines_match(a: np.ndarray, b: np.ndarray, tol: float = AFFINE_TOL) -> bool:
    return bool(np.allclose(a, b, atol=tol, rtol=0))


def write_code_table(codes: dict[str, int], path: PathLike) -> None:
    Path(path).write_text(json.dumps(codes, indent=2, sort_keys=False) + "\n")


def save_stack(data: np.ndarray, grid: ScalarVolume | LabelVolume, path: PathLike) -> None:
    """Write a ``(C, X, Y, Z)`` stack (e.g. class posteriors) as a 4-D float32 image."""
    arr = np.moveaxis(np.asarray(data, dtype="<f4"), 0, -1)
    img = nib.Nifti1Image(arr, grid.affine)
    img.header.set_data_dtype(np.float32)
    img.header.set_zooms(tuple(grid.spacing) + (1.0,))
    img.set_sform(grid.affine, code=1)
    img.set_qform(grid.affine, code=1)
    nib.save(img, str(path))
