"""Volumetric data types and grid-level primitives.

Every downstream stage works on :class:`ScalarVolume` (one MRI contrast) and
:class:`LabelVolume` (integer masks and label maps). Arrays are indexed
``[i, j, k]`` and spacing is in millimetres per voxel along each axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "ScalarVolume",
    "LabelVolume",
    "VoxelIndex",
    "MaskedStats",
    "threshold_mask",
    "gaussian_smooth",
    "connected_components",
    "morphology",
    "masked_stats",
    "ball_offsets",
    "same_grid",
]

_SPACING_ATOL = 1e-6


def _as_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing components must be strictly positive, got {sp}")
    return sp  # type: ignore[return-value]


def _default_affine(spacing: Sequence[float]) -> np.ndarray:
    return np.diag([*spacing, 1.0])


@dataclass(eq=False)
class ScalarVolume:
    """One 3-D intensity grid for a single MRI contrast.

    ``brain_mask`` defaults to the whole grid. Non-finite intensities are
    rejected inside the brain mask; outside it they are replaced by zero.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_mask: Optional[np.ndarray] = None
    affine: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        self.spacing = _as_spacing(self.spacing)
        if self.brain_mask is None:
            mask = np.ones(data.shape, dtype=bool)
        else:
            mask = np.asarray(self.brain_mask, dtype=bool)
            if mask.shape != data.shape:
                raise ValueError(f"brain_mask shape {mask.shape} != data shape {data.shape}")
        finite = np.isfinite(data)
        if not finite[mask].all():
            raise ValueError("non-finite intensities inside brain_mask")
        if not finite.all():
            data = np.where(finite, data, 0.0)
        self.data = data
        self.brain_mask = mask
        self.affine = (
            _default_affine(self.spacing) if self.affine is None else np.asarray(self.affine, dtype=np.float64)
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        """Same grid and mask, new intensities."""
        return ScalarVolume(data, self.spacing, self.brain_mask, self.affine)

    def brain_values(self) -> np.ndarray:
        return self.data[self.brain_mask]


@dataclass(eq=False)
class LabelVolume:
    """Integer label grid; 0 is background.

    ``codes`` optionally declares the allowed non-zero codes (name -> code).
    """

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brain_mask: Optional[np.ndarray] = None
    affine: Optional[np.ndarray] = None
    codes: Optional[dict[str, int]] = field(default=None)

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.dtype == bool:
            labels = labels.astype(np.int32)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("label volume must hold integer codes")
        labels = labels.astype(np.int32, copy=False)
        if labels.size and labels.min() < 0:
            raise ValueError("label codes must be non-negative")
        self.labels = labels
        self.spacing = _as_spacing(self.spacing)
        if self.brain_mask is not None:
            self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
            if self.brain_mask.shape != labels.shape:
                raise ValueError("brain_mask shape does not match labels")
        self.affine = (
            _default_affine(self.spacing) if self.affine is None else np.asarray(self.affine, dtype=np.float64)
        )
        if self.codes is not None:
            allowed = set(self.codes.values()) | {0}
            present = set(np.unique(labels).tolist())
            unknown = present - allowed
            if unknown:
                raise ValueError(f"label codes {sorted(unknown)} not in declared code table")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]

    @property
    def mask(self) -> np.ndarray:
        """Boolean foreground (any non-zero code)."""
        return self.labels != 0

    def is_binary(self) -> bool:
        return bool(np.all((self.labels == 0) | (self.labels == 1)))

    def count(self) -> int:
        return int(np.count_nonzero(self.labels))

    def like(self, labels: np.ndarray, codes: Optional[dict[str, int]] = None) -> "LabelVolume":
        """New label volume on the same grid."""
        return LabelVolume(labels, self.spacing, self.brain_mask, self.affine, codes)

    @classmethod
    def from_mask(cls, mask: np.ndarray, grid: "ScalarVolume | LabelVolume") -> "LabelVolume":
        return cls(np.asarray(mask, dtype=bool).astype(np.int32), grid.spacing, grid.brain_mask, grid.affine)


class VoxelIndex(NamedTuple):
    i: int
    j: int
    k: int

    def check(self, dims: Sequence[int]) -> "VoxelIndex":
        for c, d in zip(self, dims):
            if not 0 <= c < d:
                raise IndexError(f"voxel index {tuple(self)} outside grid {tuple(dims)}")
        return self


class MaskedStats(NamedTuple):
    mean: float
    std: float
    count: int
    degenerate: bool  # True when count == 1 and std was set to 0 by convention


def same_grid(a: "ScalarVolume | LabelVolume", b: "ScalarVolume | LabelVolume") -> bool:
    return a.dims == b.dims and np.allclose(a.spacing, b.spacing, atol=_SPACING_ATOL)


def _require_same_grid(a, b, what: str = "volumes") -> None:
    if not same_grid(a, b):
        raise ValueError(f"{what} are on different grids: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}")


def threshold_mask(vol: ScalarVolume, low: Optional[float] = None, high: Optional[float] = None) -> LabelVolume:
    """Label brain voxels with ``low <= value <= high`` (missing bound = unbounded)."""
    if low is None and high is None:
        raise ValueError("threshold_mask needs at least one of low/high")
    if low is not None and high is not None and low > high:
        raise ValueError(f"low ({low}) > high ({high})")
    sel = vol.brain_mask.copy()
    if low is not None:
        sel &= vol.data >= low
    if high is not None:
        sel &= vol.data <= high
    return LabelVolume.from_mask(sel, vol)


def gaussian_smooth(vol: ScalarVolume, sigma_mm: float) -> ScalarVolume:
    """Mask-normalized separable Gaussian smoothing with sigma in millimetres.

    Voxels outside the brain mask neither contribute nor receive smoothed
    values (they keep their input intensity).
    """
    if not sigma_mm > 0:
        raise ValueError(f"sigma_mm must be positive, got {sigma_mm}")
    sigma_vox = [sigma_mm / s for s in vol.spacing]
    mask = vol.brain_mask.astype(np.float64)
    num = ndimage.gaussian_filter(vol.data * mask, sigma_vox, mode="constant", cval=0.0)
    den = ndimage.gaussian_filter(mask, sigma_vox, mode="constant", cval=0.0)
    out = vol.data.copy()
    inside = vol.brain_mask & (den > 0)
    out[inside] = num[inside] / den[inside]
    return vol.with_data(out)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def _binary(mask: "LabelVolume | np.ndarray") -> np.ndarray:
    arr = mask.labels if isinstance(mask, LabelVolume) else np.asarray(mask)
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask must be binary (values 0/1)")
        arr = arr.astype(bool)
    return arr


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Array-level labelling with size-descending, first-voxel tie-broken order."""
    mask = np.asarray(mask, dtype=bool)
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    # first (smallest) linear index of each raw label
    fg = np.flatnonzero(flat)
    first = np.full(n, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg] - 1, fg)
    order = np.lexsort((first, -sizes))  # primary: size desc, secondary: first index asc
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], n


def connected_components(mask: LabelVolume, connectivity: int = 26) -> LabelVolume:
    """Label connected foreground components; label 1 is the largest."""
    arr = _binary(mask)
    labels, _ = label_components(arr, connectivity)
    return mask.like(labels)


def ball_offsets(radius_mm: float, spacing: Sequence[float]) -> np.ndarray:
    """Integer voxel offsets of a physical-radius ball rasterized on the grid."""
    reach = [int(np.floor(radius_mm / s + 1e-9)) for s in spacing]
    axes = [np.arange(-r, r + 1) for r in reach]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = ((g * np.asarray(spacing)) ** 2).sum(axis=1)
    return g[d2 <= radius_mm**2 * (1 + 1e-9)]


def _distance_to(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Euclidean distance (mm) from every voxel to the nearest voxel of ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask, sampling=spacing)


def dilate_array(mask: np.ndarray, radius_mm: float, spacing: Sequence[float]) -> np.ndarray:
    return _distance_to(mask, spacing) <= radius_mm * (1 + 1e-9)


def erode_array(mask: np.ndarray, radius_mm: float, spacing: Sequence[float]) -> np.ndarray:
    # outside the grid counts as background; one padded layer is enough for a ball
    padded = np.pad(mask, 1, constant_values=False)
    d = _distance_to(~padded, spacing)
    return (d > radius_mm * (1 + 1e-9))[1:-1, 1:-1, 1:-1]


def _pad_for(radius_mm: float, spacing: Sequence[float]) -> int:
    return int(max(np.ceil(radius_mm / s) for s in spacing)) + 1


def morphology(mask: LabelVolume, op: str, radius_mm: float) -> LabelVolume:
    """Binary morphology with a physical-radius ball, clipped to the brain mask.

    A voxel is in the ball when its centre lies within ``radius_mm`` of the
    origin, so a radius equal to the spacing of an isotropic grid gives the
    6-neighbourhood.
    """
    if not radius_mm > 0:
        raise ValueError(f"radius_mm must be positive, got {radius_mm}")
    arr = _binary(mask)
    sp = mask.spacing
    if op == "dilate":
        out = dilate_array(arr, radius_mm, sp)
    elif op == "erode":
        out = erode_array(arr, radius_mm, sp)
    elif op in ("open", "close"):
        p = _pad_for(radius_mm, sp)
        padded = np.pad(arr, p, constant_values=False)
        if op == "open":
            tmp = dilate_array(erode_array(padded, radius_mm, sp), radius_mm, sp)
        else:
            tmp = erode_array(dilate_array(padded, radius_mm, sp), radius_mm, sp)
        out = tmp[p:-p, p:-p, p:-p]
    else:
        raise ValueError(f"unknown morphology op {op!r}")
    if mask.brain_mask is not None:
        out &= mask.brain_mask
    return mask.like(out.astype(np.int32))


def masked_stats(vol: ScalarVolume, mask: "LabelVolume | np.ndarray") -> MaskedStats:
    """Sample mean and standard deviation (n - 1 denominator) over mask voxels."""
    sel = mask.mask if isinstance(mask, LabelVolume) else np.asarray(mask, dtype=bool)
    if sel.shape != vol.dims:
        raise ValueError("mask and volume grids differ")
    sel = sel & vol.brain_mask
    values = vol.data[sel]
    n = values.size
    if n == 0:
        raise ValueError("masked_stats: mask is empty within the brain")
    mean = float(values.mean())
    if n == 1:
        return MaskedStats(mean, 0.0, 1, True)
    return MaskedStats(mean, float(values.std(ddof=1)), n, False)
