"""Whole-tumor segmentation: core detection, false-positive suppression, expansion.

The core is found from tumor-type knowledge (ATRT is dark on ADC; DIPG and
LGG are bright on FLAIR) as z-score outliers against the patient's own GM
statistics. For heterogeneous tumors (ATRT, DIPG) the core is grown into
connected abnormal tissue; LGG keeps the core as the whole tumor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .study import InputError, Modality, Study, TumorType
from .tissue import TissueResult
from .volume import LabelVolume, dilate_array, erode_array, label_components

__all__ = [
    "TumorType",
    "TumorRuleConfig",
    "WholeTumorResult",
    "NoTumorCoreError",
    "PROVENANCE_CODES",
    "core_rule_mask",
    "detect_tumor_core",
    "suppress_false_positives",
    "abnormality_mask",
    "expand_whole_tumor",
]

log = logging.getLogger(__name__)

PROVENANCE_CODES = {"core": 1, "expansion": 2}


class NoTumorCoreError(RuntimeError):
    pass


@dataclass
class TumorRuleConfig:
    core_k_sigma: float = 2.0
    expansion_k_sigma: float = 2.0
    min_component_mm3: float = 200.0
    expansion_max_gap_mm: float = 2.0
    reference_tissue: str = "GM"
    connectivity: int = 26
    expansion_open_mm: float = 1.0  # opening radius that strips voxel-level noise from the abnormality field
    boundary_shell_voxels: float = 2.0
    boundary_fraction: float = 0.5
    periventricular_band_mm: float = 2.0
    vessel_enhance_k_sigma: float = 2.0

    def __post_init__(self) -> None:
        for name in (
            "core_k_sigma",
            "expansion_k_sigma",
            "min_component_mm3",
            "expansion_max_gap_mm",
            "expansion_open_mm",
            "periventricular_band_mm",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.reference_tissue.upper() not in ("WM", "GM"):
            raise ValueError("reference_tissue must be WM or GM")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


@dataclass(eq=False)
class WholeTumorResult:
    core_mask: LabelVolume
    wt_mask: LabelVolume
    provenance: LabelVolume  # PROVENANCE_CODES per voxel, 0 outside wt
    report: Optional[dict] = None


def _voxel_volume(spacing) -> float:
    return float(np.prod(spacing))


def core_rule_mask(study: Study, tissue: TissueResult, ttype: TumorType, cfg: TumorRuleConfig) -> np.ndarray:
    """Voxels meeting the tumor-type core intensity rule (no component filtering)."""
    ttype = TumorType.parse(ttype)
    ref = cfg.reference_tissue
    k = cfg.core_k_sigma
    if ttype is TumorType.ATRT:
        if Modality.ADC not in study:
            raise InputError("required modality ADC missing")
        st = tissue.reference(Modality.ADC, ref)
        rule = study[Modality.ADC].data < st.mean - k * st.std
    else:
        st = tissue.reference(Modality.FLAIR, ref)
        rule = study[Modality.FLAIR].data > st.mean + k * st.std
    return rule & study.brain_mask


def _support_mask(study: Study, tissue: TissueResult, cfg: TumorRuleConfig, ttype: Optional[TumorType]) -> np.ndarray:
    if ttype is not None:
        return core_rule_mask(study, tissue, ttype, cfg)
    support = core_rule_mask(study, tissue, TumorType.DIPG, cfg)
    if Modality.ADC in study:
        support |= core_rule_mask(study, tissue, TumorType.ATRT, cfg)
    return support


def _drop_small(mask: np.ndarray, min_mm3: float, spacing, connectivity: int) -> np.ndarray:
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel(), minlength=n + 1) * _voxel_volume(spacing)
    keep = sizes >= min_mm3
    keep[0] = False
    return keep[labels]


def _boundary_shell(brain: np.ndarray, voxels: float) -> np.ndarray:
    d = ndimage.distance_transform_edt(np.pad(brain, 1, constant_values=False))[1:-1, 1:-1, 1:-1]
    return brain & (d <= voxels)


def _largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    labels, n = label_components(mask, connectivity)
    return labels == 1 if n else np.zeros_like(mask, dtype=bool)


def suppress_false_positives(
    candidates: LabelVolume,
    study: Study,
    tissue: TissueResult,
    cfg: Optional[TumorRuleConfig] = None,
    ttype: Optional[TumorType] = None,
    record: Optional[list] = None,
) -> LabelVolume:
    """Remove candidate components matching known false-positive patterns.

    * vessel: thin (volume after one 6-neighbour erosion below
      ``min_component_mm3``), T1-sub enhancing on average, and less than half
      of its voxels meet the core rule;
    * extraction residue: more than ``boundary_fraction`` of the component
      lies within ``boundary_shell_voxels`` of the brain-mask boundary;
    * periventricular: more than half of it lies within
      ``periventricular_band_mm`` of the largest CSF component and its eroded
      interior has no core-rule support.
    """
    cfg = cfg or TumorRuleConfig()
    cand = candidates.mask
    labels, n = label_components(cand, cfg.connectivity)
    if n == 0:
        return candidates.like(np.zeros(cand.shape, dtype=np.int32))
    vox = _voxel_volume(study.spacing)
    brain = study.brain_mask
    shell = _boundary_shell(brain, cfg.boundary_shell_voxels)
    ventricles = _largest_component(tissue.csf_mask.mask)
    band = dilate_array(ventricles, cfg.periventricular_band_mm, study.spacing) if ventricles.any() else ventricles
    support = _support_mask(study, tissue, cfg, ttype)
    try:
        t1s = tissue.reference(Modality.T1SUB, "WM")
        t1sub = study.t1_sub.data
    except (ValueError, InputError, KeyError):
        t1s, t1sub = None, None
    cross = ndimage.generate_binary_structure(3, 1)

    out = np.zeros(cand.shape, dtype=bool)
    for lab in range(1, n + 1):
        comp = labels == lab
        size = int(comp.sum())
        sl = ndimage.find_objects(comp.astype(np.int8))[0]
        sub = np.pad(comp[sl], 1, constant_values=False)
        eroded_sub = ndimage.binary_erosion(sub, cross)
        eroded_vol = float(eroded_sub.sum()) * vox
        support_frac = float(support[comp].mean())
        decision = "kept"
        if t1s is not None and eroded_vol < cfg.min_component_mm3 and support_frac < 0.5:
            z = (float(t1sub[comp].mean()) - t1s.mean) / max(t1s.std, 1e-12)
            if z > cfg.vessel_enhance_k_sigma:
                decision = "removed:vessel"
        if decision == "kept" and float(shell[comp].mean()) > cfg.boundary_fraction:
            decision = "removed:brain_boundary"
        if decision == "kept" and band.any() and float(band[comp].mean()) > 0.5:
            eroded = np.zeros_like(comp)
            eroded[sl] = eroded_sub[1:-1, 1:-1, 1:-1]
            if not (eroded & support).any():
                decision = "removed:periventricular"
        if decision == "kept":
            out |= comp
        if record is not None:
            record.append({"component": lab, "volume_mm3": size * vox, "eroded_volume_mm3": eroded_vol, "decision": decision})
    return candidates.like(out.astype(np.int32))


def detect_tumor_core(
    study: Study,
    tissue: TissueResult,
    ttype: TumorType,
    cfg: Optional[TumorRuleConfig] = None,
    within: Optional[np.ndarray] = None,
    record: Optional[dict] = None,
) -> LabelVolume:
    """Core candidates from the type rule, minus small and false-positive components.

    ``within`` restricts candidates to a supplied region (e.g. a given WT mask).
    """
    cfg = cfg or TumorRuleConfig()
    ttype = TumorType.parse(ttype)
    cand = core_rule_mask(study, tissue, ttype, cfg)
    if within is not None:
        cand &= np.asarray(within, dtype=bool)
    n_cand = int(cand.sum())
    cand = _drop_small(cand, cfg.min_component_mm3, study.spacing, cfg.connectivity)
    comps: list = []
    grid = tissue.wm_mask
    kept = suppress_false_positives(LabelVolume.from_mask(cand, grid), study, tissue, cfg, ttype, comps)
    if record is not None:
        record.update({"rule_voxels": n_cand, "components": comps, "core_voxels": kept.count()})
    if kept.count() == 0:
        raise NoTumorCoreError("no tumor core found")
    return kept


def abnormality_mask(study: Study, tissue: TissueResult, cfg: Optional[TumorRuleConfig] = None) -> np.ndarray:
    """Voxels outside both the WM and GM intensity bands in at least one scan."""
    cfg = cfg or TumorRuleConfig()
    k = cfg.expansion_k_sigma
    abn = np.zeros(study.dims, dtype=bool)
    for m in study.feature_modalities():
        x = study[m].data
        wm = tissue.reference(m, "WM")
        gm = tissue.reference(m, "GM")
        abn |= (np.abs(x - wm.mean) > k * wm.std) & (np.abs(x - gm.mean) > k * gm.std)
    return abn & study.brain_mask


def _line_voxels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """26-connected voxel path between two voxel indices."""
    steps = int(np.abs(b - a).max()) + 1
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    return np.unique(np.rint(a + t * (b - a)).astype(np.int64), axis=0)


def expand_whole_tumor(
    core: LabelVolume,
    study: Study,
    tissue: TissueResult,
    ttype: TumorType,
    cfg: Optional[TumorRuleConfig] = None,
    record: Optional[dict] = None,
) -> WholeTumorResult:
    """Grow the core into connected abnormal regions (ATRT, DIPG); LGG keeps the core.

    Abnormal components within ``expansion_max_gap_mm`` of the growing region
    are admitted repeatedly until nothing new joins. A component admitted
    across a gap is linked by a one-voxel path between its closest voxel pair,
    so every whole-tumor component contains core voxels.
    """
    cfg = cfg or TumorRuleConfig()
    ttype = TumorType.parse(ttype)
    core_arr = core.mask
    if not core_arr.any():
        raise NoTumorCoreError("empty tumor core")
    prov = core_arr.astype(np.int32) * PROVENANCE_CODES["core"]
    rec: dict = {"expansion_components": []}
    if not ttype.heterogeneous:
        wt = core_arr.copy()
    else:
        sp = study.spacing
        abn = abnormality_mask(study, tissue, cfg)
        abn &= ~_largest_component(tissue.csf_mask.mask) & ~core_arr
        p = int(max(np.ceil(cfg.expansion_open_mm / s) for s in sp)) + 1
        padded = np.pad(abn, p, constant_values=False)
        abn = dilate_array(erode_array(padded, cfg.expansion_open_mm, sp), cfg.expansion_open_mm, sp)[p:-p, p:-p, p:-p]
        abn &= study.brain_mask
        labels, n = label_components(abn, cfg.connectivity)
        diag = float(np.sqrt(np.sum(np.square(sp))))
        reach = cfg.expansion_max_gap_mm + diag
        region = core_arr.copy()
        admitted = np.zeros(n + 1, dtype=bool)
        admitted[0] = True
        while n:
            dist, nearest = ndimage.distance_transform_edt(~region, sampling=sp, return_indices=True)
            mind = np.full(n + 1, np.inf)
            mind[1:] = ndimage.minimum(dist, labels, index=np.arange(1, n + 1))
            new = np.flatnonzero(~admitted & (mind <= reach * (1 + 1e-9)))
            if new.size == 0:
                break
            for lab in new:
                comp = labels == lab
                admitted[lab] = True
                bridge = 0
                if mind[lab] > diag * (1 + 1e-9):
                    masked = np.where(comp, dist, np.inf)
                    c = np.array(np.unravel_index(int(np.argmin(masked)), comp.shape))
                    a = nearest[:, c[0], c[1], c[2]]
                    path = _line_voxels(a, c)
                    path_mask = np.zeros_like(region)
                    path_mask[tuple(path.T)] = True
                    path_mask &= study.brain_mask & ~region & ~comp
                    bridge = int(path_mask.sum())
                    region |= path_mask
                region |= comp
                rec["expansion_components"].append(
                    {"component": int(lab), "voxels": int(comp.sum()), "gap_mm": float(mind[lab]), "bridge_voxels": bridge}
                )
        wt = region
        prov[wt & ~core_arr] = PROVENANCE_CODES["expansion"]
    rec["provenance_counts"] = {k: int((prov == v).sum()) for k, v in PROVENANCE_CODES.items()}
    if record is not None:
        record.update(rec)
    return WholeTumorResult(
        core_mask=core.like(core_arr.astype(np.int32)),
        wt_mask=core.like(wt.astype(np.int32)),
        provenance=core.like(prov, PROVENANCE_CODES),
        report=rec,
    )
