"""Per-case bundle of coregistered modalities."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .nifti import affines_match
from .volume import ScalarVolume, same_grid


class InputError(ValueError):
    """Invalid or incomplete input data (CLI exit code 2)."""


class Modality(str, enum.Enum):
    T1 = "T1"
    T1POST = "T1POST"
    T2 = "T2"
    FLAIR = "FLAIR"
    ADC = "ADC"
    T1SUB = "T1SUB"


class TumorType(str, enum.Enum):
    ATRT = "ATRT"
    DIPG = "DIPG"
    LGG = "LGG"

    @classmethod
    def parse(cls, value: "str | TumorType") -> "TumorType":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InputError(f"unknown tumor type {value!r}; expected one of {[t.value for t in cls]}") from None

    @property
    def heterogeneous(self) -> bool:
        return self is not TumorType.LGG


BASE_MODALITIES = (Modality.T1, Modality.T1POST, Modality.T2, Modality.FLAIR)


def required_modalities(ttype: TumorType) -> tuple[Modality, ...]:
    if ttype is TumorType.ATRT:
        return BASE_MODALITIES + (Modality.ADC,)
    return BASE_MODALITIES


@dataclass(eq=False)
class Study:
    """Coregistered scans of one case on a shared grid and brain mask.

    Grid, brain mask and affine agreement are checked on construction;
    modality completeness for the tumor type is checked by
    :meth:`check_required` so callers can report it as an input error.
    """

    modalities: dict
    tumor_type: TumorType
    case_id: str = "case"
    _t1_sub: ScalarVolume | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.tumor_type = TumorType.parse(self.tumor_type)
        self.modalities = {Modality(k): v for k, v in self.modalities.items()}
        if not self.modalities:
            raise InputError("study has no modalities")
        vols = list(self.modalities.items())
        ref_key, ref = vols[0]
        for key, vol in vols[1:]:
            if not same_grid(ref, vol):
                raise InputError(f"{key.value} grid {vol.dims}/{vol.spacing} differs from {ref_key.value} {ref.dims}/{ref.spacing}")
            if not np.array_equal(ref.brain_mask, vol.brain_mask):
                raise InputError(f"{key.value} brain mask differs from {ref_key.value}")
            if not affines_match(ref.affine, vol.affine):
                raise InputError(f"{key.value} affine differs from {ref_key.value} by more than 1e-3")
        if Modality.T1SUB in self.modalities:
            self._t1_sub = self.modalities.pop(Modality.T1SUB)

    def check_required(self) -> None:
        need = required_modalities(self.tumor_type)
        for m in need:
            if m not in self.modalities:
                raise InputError(f"required modality {m.value} missing")
        if self.tumor_type is not TumorType.ATRT and Modality.ADC in self.modalities:
            raise InputError(f"ADC is only used for ATRT studies, got it for {self.tumor_type.value}")

    def __getitem__(self, m: "Modality | str") -> ScalarVolume:
        m = Modality(m)
        if m is Modality.T1SUB:
            return self.t1_sub
        try:
            return self.modalities[m]
        except KeyError:
            raise InputError(f"required modality {m.value} missing") from None

    def __contains__(self, m) -> bool:
        m = Modality(m)
        if m is Modality.T1SUB:
            return Modality.T1 in self.modalities and Modality.T1POST in self.modalities
        return m in self.modalities

    @property
    def reference(self) -> ScalarVolume:
        return next(iter(self.modalities.values()))

    @property
    def brain_mask(self) -> np.ndarray:
        return self.reference.brain_mask

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.reference.spacing

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.reference.dims

    @property
    def affine(self) -> np.ndarray:
        return self.reference.affine

    @property
    def t1_sub(self) -> ScalarVolume:
        if self._t1_sub is None:
            from .subregion import compute_t1_sub

            self._t1_sub = compute_t1_sub(self[Modality.T1POST], self[Modality.T1])
        return self._t1_sub

    def feature_modalities(self) -> list[Modality]:
        """Acquired scans used as tissue features, in canonical order (T1SUB excluded)."""
        return [m for m in (*BASE_MODALITIES, Modality.ADC) if m in self.modalities]

    def scaled(self, factors: Mapping["Modality | str", float]) -> "Study":
        """Copy with selected scans multiplied by positive constants."""
        mods = {}
        for m, vol in self.modalities.items():
            f = float(factors.get(m, factors.get(m.value, 1.0)))
            if not f > 0:
                raise ValueError("scale factors must be positive")
            mods[m] = vol.with_data(vol.data * f)
        return Study(mods, self.tumor_type, self.case_id)

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping["Modality | str", np.ndarray],
        tumor_type: "TumorType | str",
        brain_mask: np.ndarray,
        spacing: Iterable[float] = (1.0, 1.0, 1.0),
        case_id: str = "case",
        affine: np.ndarray | None = None,
    ) -> "Study":
        sp = tuple(spacing)
        mods = {Modality(k): ScalarVolume(v, sp, brain_mask, affine) for k, v in arrays.items()}
        return cls(mods, TumorType.parse(tumor_type), case_id)
