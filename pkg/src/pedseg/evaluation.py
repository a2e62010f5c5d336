"""Dice overlap scoring, per-case reports and batch aggregation."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .subregion import MERGED_CODES, SubregionResult, merge_necrosis
from .volume import LabelVolume, same_grid

__all__ = ["dice", "overlap_counts", "StructureDice", "DiceReport", "evaluate_case", "aggregate", "write_csv", "write_json"]

CORE_CODE = 10  # undifferentiated core label used by phantom truth
EVAL_CODES = {**MERGED_CODES, "CORE": CORE_CODE}
# tumor core as a union, so differentiated and undifferentiated labelings compare
CORE_UNION = ("ENHANCING", "NON_ENHANCING", "CORE")
CSV_FIELDS = ("case_id", "structure", "dice", "n_pred", "n_truth", "n_intersection")


def _binary(vol: LabelVolume, name: str) -> np.ndarray:
    if not vol.is_binary():
        raise ValueError(f"{name} is not a binary mask")
    return vol.labels.astype(bool)


def overlap_counts(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int]:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    return int(a.sum()), int(b.sum()), int(np.count_nonzero(a & b))


def _dice_from_counts(na: int, nb: int, nab: int) -> Optional[float]:
    if na + nb == 0:
        return None
    return 2.0 * nab / (na + nb)


def dice(a: LabelVolume, b: LabelVolume) -> Optional[float]:
    """Dice overlap ``2|A & B| / (|A| + |B|)`` of two binary masks.

    Returns
    -------
    float or None
        None when both masks are empty (undefined).
    """
    if not same_grid(a, b):
        raise ValueError(f"grid mismatch: {a.labels.shape}/{a.spacing} vs {b.labels.shape}/{b.spacing}")
    return _dice_from_counts(*overlap_counts(_binary(a, "first mask"), _binary(b, "second mask")))


@dataclass
class StructureDice:
    structure: str
    dice: Optional[float]
    n_pred: int
    n_truth: int
    n_intersection: int

    @property
    def defined(self) -> bool:
        return self.dice is not None

    def to_row(self, case_id: str) -> dict:
        return {
            "case_id": case_id,
            "structure": self.structure,
            "dice": "undefined" if self.dice is None else repr(self.dice),
            "n_pred": self.n_pred,
            "n_truth": self.n_truth,
            "n_intersection": self.n_intersection,
        }


@dataclass
class DiceReport:
    case_id: str
    mode: str
    structures: list = field(default_factory=list)

    def __getitem__(self, name: str) -> StructureDice:
        for s in self.structures:
            if s.structure == name:
                return s
        raise KeyError(name)

    def dice_of(self, name: str) -> Optional[float]:
        return self[name].dice

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "mode": self.mode,
            "structures": {
                s.structure: {
                    "dice": "undefined" if s.dice is None else s.dice,
                    "n_pred": s.n_pred,
                    "n_truth": s.n_truth,
                    "n_intersection": s.n_intersection,
                }
                for s in self.structures
            },
        }


def _check_codes(arr: np.ndarray, allowed: Iterable[int], name: str) -> None:
    bad = np.setdiff1d(np.unique(arr), np.array([0, *allowed]))
    if bad.size:
        raise ValueError(f"{name} contains unknown label codes {bad.tolist()}")


def evaluate_case(
    pred: "SubregionResult | LabelVolume",
    truth: LabelVolume,
    mode: str = "subregion",
    case_id: str = "case",
) -> DiceReport:
    """Score a prediction against truth.

    ``wt`` mode compares the nonzero regions. ``subregion`` mode merges early
    and late necrosis on both sides, then reports one Dice per structure code
    plus ``TUMOR_CORE``, the union of enhancing, non-enhancing and
    undifferentiated core labels.
    """
    pred_vol = pred.labels if isinstance(pred, SubregionResult) else pred
    if not same_grid(pred_vol, truth):
        raise ValueError(
            f"grid mismatch: prediction {pred_vol.labels.shape}/{pred_vol.spacing} "
            f"vs truth {truth.labels.shape}/{truth.spacing}"
        )
    if mode == "wt":
        counts = overlap_counts(pred_vol.labels != 0, truth.labels != 0)
        return DiceReport(case_id, mode, [StructureDice("WT", _dice_from_counts(*counts), *counts)])
    if mode != "subregion":
        raise ValueError(f"unknown evaluation mode {mode!r}")

    merged = []
    for vol, name in ((pred_vol, "prediction"), (truth, "truth")):
        arr = vol.labels
        _check_codes(arr, [*EVAL_CODES.values(), 4, 5], name)
        arr = arr.copy()
        arr[(arr == 4) | (arr == 5)] = MERGED_CODES["NECROSIS"]
        merged.append(arr)
    p, t = merged
    out = []
    for name, code in EVAL_CODES.items():
        counts = overlap_counts(p == code, t == code)
        out.append(StructureDice(name, _dice_from_counts(*counts), *counts))
    core_codes = [EVAL_CODES[n] for n in CORE_UNION]
    counts = overlap_counts(np.isin(p, core_codes), np.isin(t, core_codes))
    out.append(StructureDice("TUMOR_CORE", _dice_from_counts(*counts), *counts))
    return DiceReport(case_id, mode, out)


def aggregate(reports: Iterable[DiceReport]) -> dict:
    """Mean, median and min Dice per structure over the cases where it is defined."""
    per: dict[str, list[float]] = {}
    for rep in reports:
        for s in rep.structures:
            per.setdefault(s.structure, [])
            if s.dice is not None:
                per[s.structure].append(s.dice)
    out = {}
    for name, vals in per.items():
        if vals:
            out[name] = {"n": len(vals), "mean": statistics.fmean(vals), "median": statistics.median(vals), "min": min(vals)}
        else:
            out[name] = {"n": 0, "mean": "undefined", "median": "undefined", "min": "undefined"}
    return out


def write_csv(reports: Iterable[DiceReport], path: "str | Path") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for rep in reports:
            for s in rep.structures:
                w.writerow(s.to_row(rep.case_id))


def write_json(reports: Iterable[DiceReport], path: "str | Path") -> None:
    reports = list(reports)
    doc = {"cases": [r.to_dict() for r in reports], "aggregate": aggregate(reports)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
