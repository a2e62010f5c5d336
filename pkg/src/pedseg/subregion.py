"""Decision-rule labelling of whole-tumor voxels into subregions.

Rules are evaluated in a fixed order and the first match wins. Intensity
tests are z-scores against the WM statistics of each scan, except trapped
CSF which uses the FLAIR CSF threshold from tissue segmentation. Core
voxels are split only into enhancing and non-enhancing tumor; rules 2-6
and the fallback apply to the non-core part of the whole tumor:

1. enhancing: core voxel with T1-sub above ``enhance_k_sigma``
2. hemorrhage: dark on T2
3. trapped CSF: FLAIR below the CSF threshold
4. cyst: dark on FLAIR relative to WM (a higher cut than trapped CSF)
5. early necrosis: bright on T1
6. T2-bright: edema inside the peritumoral band, late necrosis beyond it
7. remaining core voxels: non-enhancing
8. anything left: the rule among 2-6 it misses by the smallest margin
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .study import InputError, Modality, Study
from .tissue import TissueResult
from .tumor import WholeTumorResult
from .volume import LabelVolume, ScalarVolume, dilate_array, same_grid

__all__ = [
    "SubregionLabel",
    "SUBREGION_CODES",
    "MERGED_CODES",
    "NECROSIS_CODE",
    "RULE_CODES",
    "SubregionConfig",
    "SubregionResult",
    "compute_t1_sub",
    "classify_subregions",
    "merge_necrosis",
]

log = logging.getLogger(__name__)


class SubregionLabel(enum.IntEnum):
    ENHANCING = 1
    NON_ENHANCING = 2
    EDEMA = 3
    EARLY_NECROSIS = 4
    LATE_NECROSIS = 5
    HEMORRHAGE = 6
    CYST = 7
    TRAPPED_CSF = 8


NECROSIS_CODE = 9
SUBREGION_CODES = {lab.name: int(lab) for lab in SubregionLabel}
MERGED_CODES = {
    "ENHANCING": 1,
    "NON_ENHANCING": 2,
    "EDEMA": 3,
    "HEMORRHAGE": 6,
    "CYST": 7,
    "TRAPPED_CSF": 8,
    "NECROSIS": NECROSIS_CODE,
}

# rule_trace codes
RULE_CODES = {
    "enhancing": 1,
    "hemorrhage": 2,
    "trapped_csf": 3,
    "cyst": 4,
    "early_necrosis": 5,
    "t2_bright": 6,
    "non_enhancing": 7,
    "fallback": 8,
}
DEFAULT_RULE_ORDER = ("enhancing", "hemorrhage", "trapped_csf", "cyst", "early_necrosis", "t2_bright")
_FALLBACK_RULES = ("hemorrhage", "trapped_csf", "cyst", "early_necrosis", "t2_bright")
_RULE_MODALITY = {
    "enhancing": Modality.T1SUB,
    "hemorrhage": Modality.T2,
    "trapped_csf": Modality.FLAIR,
    "cyst": Modality.FLAIR,
    "early_necrosis": Modality.T1,
    "t2_bright": Modality.T2,
}


@dataclass
class SubregionConfig:
    enhance_k_sigma: float = 3.0
    t2_dark_k_sigma: float = 2.0
    t1_bright_k_sigma: float = 2.0
    t2_bright_k_sigma: float = 2.0
    flair_csf_threshold: Optional[float] = None  # None: use the tissue-stage CSF threshold
    flair_cyst_k_sigma: float = 2.0
    peritumoral_band_mm: float = 10.0
    rule_order: tuple = DEFAULT_RULE_ORDER
    references: dict = field(default_factory=dict)  # rule -> "WM" | "GM"; missing rules use WM

    def __post_init__(self) -> None:
        self.rule_order = tuple(self.rule_order)
        if sorted(self.rule_order) != sorted(DEFAULT_RULE_ORDER):
            raise ValueError(f"rule_order must be a permutation of {DEFAULT_RULE_ORDER}")
        for name in ("enhance_k_sigma", "t2_dark_k_sigma", "t1_bright_k_sigma", "t2_bright_k_sigma",
                     "flair_cyst_k_sigma", "peritumoral_band_mm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for rule, tissue in self.references.items():
            if rule not in _RULE_MODALITY or str(tissue).upper() not in ("WM", "GM"):
                raise ValueError(f"bad reference entry {rule!r}: {tissue!r}")

    def reference_for(self, rule: str) -> str:
        return str(self.references.get(rule, "WM")).upper()


@dataclass(eq=False)
class SubregionResult:
    labels: LabelVolume
    rule_trace: LabelVolume
    warnings: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)


def compute_t1_sub(t1_post: ScalarVolume, t1: ScalarVolume) -> ScalarVolume:
    """Voxelwise T1-post minus T1 (no clamping)."""
    if not same_grid(t1_post, t1):
        raise ValueError("T1-post and T1 are on different grids")
    return t1_post.with_data(t1_post.data - t1.data)


def classify_subregions(
    study: Study,
    wt: WholeTumorResult,
    tissue: TissueResult,
    cfg: Optional[SubregionConfig] = None,
) -> SubregionResult:
    cfg = cfg or SubregionConfig()
    for m in (Modality.T1, Modality.T1POST, Modality.T2, Modality.FLAIR):
        if m not in study:
            raise InputError(f"required modality {m.value} missing")
    wt_arr = wt.wt_mask.mask
    if not wt_arr.any():
        raise ValueError("whole-tumor mask is empty")
    core_arr = wt.core_mask.mask & wt_arr
    sel = np.flatnonzero(wt_arr.ravel())
    in_core = core_arr.ravel()[sel]
    warnings: list = []

    def values(rule: str) -> tuple[np.ndarray, float, float]:
        m = _RULE_MODALITY[rule]
        st = tissue.reference(m, cfg.reference_for(rule))
        return study[m].data.ravel()[sel], st.mean, max(st.std, 1e-12)

    x_sub, mu_sub, sd_sub = values("enhancing")
    x_t2, mu_t2d, sd_t2d = values("hemorrhage")
    _, mu_t2b, sd_t2b = values("t2_bright")
    x_fl, mu_fl, sd_fl = values("cyst")
    x_t1, mu_t1, sd_t1 = values("early_necrosis")

    th_csf = cfg.flair_csf_threshold if cfg.flair_csf_threshold is not None else tissue.csf_threshold.th
    th_cyst = mu_fl - cfg.flair_cyst_k_sigma * sd_fl
    if not th_csf < th_cyst:
        msg = (f"CSF threshold {th_csf:.4g} is not below the cyst threshold {th_cyst:.4g}; "
               "thresholds swapped so trapped CSF keeps the lower cut")
        log.warning(msg)
        warnings.append(msg)
        th_csf, th_cyst = min(th_csf, th_cyst), max(th_csf, th_cyst)
    cut_hem = mu_t2d - cfg.t2_dark_k_sigma * sd_t2d
    cut_t2b = mu_t2b + cfg.t2_bright_k_sigma * sd_t2b
    cut_t1 = mu_t1 + cfg.t1_bright_k_sigma * sd_t1
    cut_enh = mu_sub + cfg.enhance_k_sigma * sd_sub

    # positive margin = how far (in reference sigmas) a voxel is from meeting the rule
    margins = {
        "hemorrhage": (x_t2 - cut_hem) / sd_t2d,
        "trapped_csf": (x_fl - th_csf) / sd_fl,
        "cyst": (x_fl - th_cyst) / sd_fl,
        "early_necrosis": (cut_t1 - x_t1) / sd_t1,
        "t2_bright": (cut_t2b - x_t2) / sd_t2b,
    }
    outside = ~in_core
    hits = {
        "enhancing": in_core & (x_sub > cut_enh),
        "hemorrhage": outside & (x_t2 < cut_hem),
        "trapped_csf": outside & (x_fl < th_csf),
        "cyst": outside & (x_fl < th_cyst),
        "early_necrosis": outside & (x_t1 > cut_t1),
        "t2_bright": outside & (x_t2 > cut_t2b),
    }

    band = (dilate_array(core_arr, cfg.peritumoral_band_mm, study.spacing) & ~core_arr).ravel()[sel]
    fixed = {
        "enhancing": SubregionLabel.ENHANCING,
        "hemorrhage": SubregionLabel.HEMORRHAGE,
        "trapped_csf": SubregionLabel.TRAPPED_CSF,
        "cyst": SubregionLabel.CYST,
        "early_necrosis": SubregionLabel.EARLY_NECROSIS,
    }

    def label_of(rule: str, where: np.ndarray) -> np.ndarray:
        if rule == "t2_bright":
            return np.where(band[where], int(SubregionLabel.EDEMA), int(SubregionLabel.LATE_NECROSIS))
        return np.full(int(where.sum()), int(fixed[rule]))

    lab = np.zeros(sel.size, dtype=np.int32)
    trace = np.zeros(sel.size, dtype=np.int32)
    for rule in cfg.rule_order:
        take = hits[rule] & (lab == 0)
        lab[take] = label_of(rule, take)
        trace[take] = RULE_CODES[rule]
    take = (lab == 0) & in_core
    lab[take] = int(SubregionLabel.NON_ENHANCING)
    trace[take] = RULE_CODES["non_enhancing"]

    rest = lab == 0
    if rest.any():
        order = [r for r in cfg.rule_order if r in _FALLBACK_RULES]
        stack = np.stack([margins[r][rest] for r in order])
        pick = np.argmin(stack, axis=0)
        idx_rest = np.flatnonzero(rest)
        for i, r in enumerate(order):
            w = np.zeros(sel.size, dtype=bool)
            w[idx_rest[pick == i]] = True
            lab[w] = label_of(r, w)
        trace[rest] = RULE_CODES["fallback"]

    labels = np.zeros(wt_arr.size, dtype=np.int32)
    labels[sel] = lab
    trace_full = np.zeros(wt_arr.size, dtype=np.int32)
    trace_full[sel] = trace
    grid = wt.wt_mask
    return SubregionResult(
        labels=grid.like(labels.reshape(wt_arr.shape), SUBREGION_CODES),
        rule_trace=grid.like(trace_full.reshape(wt_arr.shape), RULE_CODES),
        warnings=warnings,
        thresholds={
            "enhancing_t1sub": cut_enh,
            "hemorrhage_t2": cut_hem,
            "trapped_csf_flair": th_csf,
            "cyst_flair": th_cyst,
            "early_necrosis_t1": cut_t1,
            "t2_bright_t2": cut_t2b,
        },
    )


def merge_necrosis(labels: "SubregionResult | LabelVolume") -> LabelVolume:
    """Collapse early and late necrosis into one NECROSIS code."""
    vol = labels.labels if isinstance(labels, SubregionResult) else labels
    arr = vol.labels.copy()
    arr[(arr == SubregionLabel.EARLY_NECROSIS) | (arr == SubregionLabel.LATE_NECROSIS)] = NECROSIS_CODE
    return vol.like(arr, MERGED_CODES)
