"""Brain tissue segmentation by iterated Bayesian classification.

Priors start from atlas WM/GM maps and a FLAIR-derived CSF threshold. Each
iteration samples voxels by class prior, rejects WM/GM contaminants with a
joint multi-modal MCD fit, estimates one KDE likelihood per (scan, class),
applies Bayes' rule per scan and averages the per-scan posteriors into the
next prior. Final masks threshold the smoothed posteriors.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from .stats import CsfThreshold, McdError, RobustConfig, detect_csf_threshold, kde_fit, mcd_filter, sample_indices
from .study import Modality, Study
from .volume import LabelVolume, MaskedStats, ScalarVolume, gaussian_smooth, masked_stats, same_grid

log = logging.getLogger(__name__)

EVIDENCE_FLOOR = 1e-12


class TissueClass(enum.IntEnum):
    WM = 0
    GM = 1
    CSF = 2
    OTHER = 3


CLASSES = tuple(TissueClass)
CONTAMINATED = (TissueClass.WM, TissueClass.GM)


@dataclass
class TissuePipelineConfig:
    iterations: int = 3
    posterior_threshold: float = 0.5
    posterior_smoothing_sigma_mm: float = 1.0
    csf_prior_value: float = 0.9
    other_prior_value: float = 0.5
    other_floor: float = 1e-3  # OTHER prior inside the CSF-dark region
    kde_samples_per_class: int = 10_000
    robust: RobustConfig = field(default_factory=RobustConfig)
    peak_height_fraction: float = 0.05
    csf_grid_points: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.robust, dict):
            self.robust = RobustConfig(**self.robust)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.posterior_threshold < 1:
            raise ValueError("posterior_threshold must be in (0, 1)")
        if not self.posterior_smoothing_sigma_mm > 0:
            raise ValueError("posterior_smoothing_sigma_mm must be positive")
        if not 0 <= self.csf_prior_value <= 1 or not 0 <= self.other_prior_value <= 1:
            raise ValueError("prior constants must lie in [0, 1]")
        if self.kde_samples_per_class < 2:
            raise ValueError("kde_samples_per_class must be >= 2")


@dataclass(eq=False)
class ProbabilityMap:
    """Per-class probability volumes stacked as ``data[class, i, j, k]``."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    brain_mask: np.ndarray
    affine: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape[0] != len(CLASSES) or self.data.shape[1:] != self.brain_mask.shape:
            raise ValueError(f"probability stack shape {self.data.shape} does not match 4 classes x grid")
        if np.any(self.data < -1e-12) or np.any(self.data > 1 + 1e-12):
            raise ValueError("probabilities must lie in [0, 1]")

    def __getitem__(self, c: TissueClass) -> np.ndarray:
        return self.data[int(c)]

    def volume(self, c: TissueClass) -> ScalarVolume:
        return ScalarVolume(self.data[int(c)], self.spacing, self.brain_mask, self.affine)

    def brain_vectors(self) -> np.ndarray:
        """``(4, n_brain)`` view of the in-brain probabilities."""
        return self.data[:, self.brain_mask]

    def class_sums(self) -> np.ndarray:
        return self.data.sum(axis=0)

    @classmethod
    def from_brain_vectors(cls, vectors: np.ndarray, grid: ScalarVolume) -> "ProbabilityMap":
        full = np.zeros((len(CLASSES), *grid.dims))
        full[:, grid.brain_mask] = vectors
        return cls(full, grid.spacing, grid.brain_mask, grid.affine)


@dataclass(eq=False)
class TissueResult:
    posterior: Optional[ProbabilityMap]
    wm_mask: LabelVolume
    gm_mask: LabelVolume
    csf_mask: LabelVolume
    reference_stats: dict  # Modality -> {"WM": MaskedStats | None, "GM": ...}
    csf_threshold: CsfThreshold
    report: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)  # per-iteration ProbabilityMap when kept

    def reference(self, modality: "Modality | str", tissue: str = "WM") -> MaskedStats:
        stats = self.reference_stats.get(Modality(modality), {}).get(tissue.upper())
        if stats is None:
            raise ValueError(f"no {tissue} reference statistics for {Modality(modality).value} (empty {tissue} mask)")
        return stats


def _atlas_array(atlas: ScalarVolume, study: Study, name: str) -> np.ndarray:
    if not same_grid(atlas, study.reference):
        raise ValueError(f"atlas {name} grid {atlas.dims}/{atlas.spacing} does not match the study grid")
    a = atlas.data
    if np.any(a[study.brain_mask] < -1e-6) or np.any(a[study.brain_mask] > 1 + 1e-6):
        raise ValueError(f"atlas {name} values must lie in [0, 1]")
    return np.clip(a, 0.0, 1.0)


def initialize_priors(
    study: Study, atlas_wm: ScalarVolume, atlas_gm: ScalarVolume, cfg: Optional[TissuePipelineConfig] = None
) -> tuple[ProbabilityMap, CsfThreshold]:
    """Initial class priors from the atlas and the FLAIR CSF threshold.

    Below the threshold: CSF gets ``csf_prior_value``, OTHER a small floor and
    the remainder is shared between WM and GM in proportion to the atlas.
    At or above it: CSF is 0, OTHER gets ``other_prior_value`` and WM/GM
    share the rest the same way. Each voxel is then renormalized.
    """
    cfg = cfg or TissuePipelineConfig()
    flair = study[Modality.FLAIR]
    wm = _atlas_array(atlas_wm, study, "WM")
    gm = _atlas_array(atlas_gm, study, "GM")
    csf = detect_csf_threshold(flair, cfg.peak_height_fraction, cfg.csf_grid_points)

    mask = study.brain_mask
    f = flair.data[mask]
    w, g = wm[mask], gm[mask]
    tot = w + g
    with np.errstate(invalid="ignore", divide="ignore"):
        w_share = np.where(tot > 0, w / tot, 0.0)
        g_share = np.where(tot > 0, g / tot, 0.0)
    dark = f < csf.th

    P = np.zeros((len(CLASSES), f.size))
    rest_dark = 1.0 - cfg.csf_prior_value
    rest_bright = 1.0 - cfg.other_prior_value
    P[TissueClass.CSF] = np.where(dark, cfg.csf_prior_value, 0.0)
    P[TissueClass.OTHER] = np.where(dark, cfg.other_floor, cfg.other_prior_value)
    P[TissueClass.WM] = np.where(dark, rest_dark, rest_bright) * w_share
    P[TissueClass.GM] = np.where(dark, rest_dark, rest_bright) * g_share
    P /= P.sum(axis=0, keepdims=True)
    return ProbabilityMap.from_brain_vectors(P, flair), csf


def posterior_from_likelihoods(likelihood: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Bayes' rule on ``(classes, voxels)`` arrays; keeps the prior where the evidence underflows."""
    joint = likelihood * prior
    evidence = joint.sum(axis=0)
    ok = evidence >= EVIDENCE_FLOOR
    out = prior.copy()
    out[:, ok] = joint[:, ok] / evidence[ok]
    return out


def bayes_update(
    likelihoods: Mapping[TissueClass, Callable[[np.ndarray], np.ndarray]],
    prior: ProbabilityMap,
    scan: ScalarVolume,
) -> ProbabilityMap:
    """Voxelwise posterior p(x|Y) Pr(Y) / sum_Y p(x|Y) Pr(Y) for one scan."""
    missing = [c.name for c in CLASSES if c not in likelihoods]
    if missing:
        raise ValueError(f"missing class densities: {missing}")
    x = scan.data[prior.brain_mask]
    lik = np.stack([np.asarray(likelihoods[c](x), dtype=np.float64) for c in CLASSES])
    post = posterior_from_likelihoods(lik, prior.brain_vectors())
    full = prior.data.copy()
    full[:, prior.brain_mask] = post
    return ProbabilityMap(full, prior.spacing, prior.brain_mask, prior.affine)


def compute_reference_stats(study: Study, wm_mask: LabelVolume, gm_mask: LabelVolume) -> dict:
    stats: dict = {}
    mods = list(study.modalities) + ([Modality.T1SUB] if Modality.T1SUB in study else [])
    for m in mods:
        vol = study[m]
        entry = {}
        for name, mask in (("WM", wm_mask), ("GM", gm_mask)):
            entry[name] = masked_stats(vol, mask) if mask.count() else None
        stats[m] = entry
    return stats


def _class_samples(
    X: np.ndarray, weights: np.ndarray, c: TissueClass, it: int, cfg: TissuePipelineConfig, rec: dict
) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, it, int(c)])
    idx = sample_indices(weights, cfg.kde_samples_per_class, rng)
    feats = X[:, idx].T
    rec["sample_counts"][c.name] = int(feats.shape[0])
    if c in CONTAMINATED:
        robust = replace(cfg.robust, seed=cfg.robust.seed + 7919 * it + int(c))
        try:
            res = mcd_filter(feats, robust)
        except McdError as exc:
            msg = f"iteration {it}: MCD failed for {c.name} ({exc}); using unfiltered samples"
            log.warning(msg)
            rec["warnings"].append(msg)
            rec["mcd_inlier_fraction"][c.name] = 1.0
            return feats
        rec["mcd_inlier_fraction"][c.name] = res.inlier_fraction
        feats = feats[res.inliers]
    return feats


def final_masks(posterior: ProbabilityMap, cfg: TissuePipelineConfig) -> dict[TissueClass, np.ndarray]:
    """Smooth each class map and keep voxels whose smoothed value is the max and >= threshold."""
    smoothed = np.stack(
        [gaussian_smooth(posterior.volume(c), cfg.posterior_smoothing_sigma_mm).data for c in CLASSES]
    )
    winner = smoothed.argmax(axis=0)
    brain = posterior.brain_mask
    return {
        c: (smoothed[int(c)] >= cfg.posterior_threshold) & (winner == int(c)) & brain
        for c in (TissueClass.WM, TissueClass.GM, TissueClass.CSF)
    }


def run_tissue_segmentation(
    study: Study,
    atlas_wm: ScalarVolume,
    atlas_gm: ScalarVolume,
    cfg: Optional[TissuePipelineConfig] = None,
    keep_history: bool = False,
) -> TissueResult:
    cfg = cfg or TissuePipelineConfig()
    study.check_required()
    mods = study.feature_modalities()
    prior, csf = initialize_priors(study, atlas_wm, atlas_gm, cfg)
    mask = study.brain_mask
    X = np.stack([study[m].data[mask] for m in mods])
    lo, hi = X.min(axis=1), X.max(axis=1)
    P = prior.brain_vectors()
    grid = study.reference

    report: dict = {
        "csf_threshold": csf.to_dict(),
        "modalities": [m.value for m in mods],
        "iterations": [],
        "warnings": [],
    }
    history = [prior] if keep_history else []
    for it in range(cfg.iterations):
        rec = {"iteration": it + 1, "sample_counts": {}, "mcd_inlier_fraction": {}, "warnings": []}
        samples = {c: _class_samples(X, P[int(c)], c, it, cfg, rec) for c in CLASSES}
        acc = np.zeros_like(P)
        for s, m in enumerate(mods):
            lik = np.stack([kde_fit(samples[c][:, s]).tabulate(lo[s], hi[s])(X[s]) for c in CLASSES])
            acc += posterior_from_likelihoods(lik, P)
        P_next = acc / len(mods)
        rec["mean_posterior_change"] = float(np.abs(P_next - P).sum(axis=0).mean())
        report["warnings"].extend(rec.pop("warnings"))
        report["iterations"].append(rec)
        P = P_next
        if keep_history:
            history.append(ProbabilityMap.from_brain_vectors(P, grid))

    posterior = ProbabilityMap.from_brain_vectors(P, grid)
    masks = final_masks(posterior, cfg)
    wm = LabelVolume.from_mask(masks[TissueClass.WM], grid)
    gm = LabelVolume.from_mask(masks[TissueClass.GM], grid)
    csf_mask = LabelVolume.from_mask(masks[TissueClass.CSF], grid)
    report["mask_voxels"] = {"WM": wm.count(), "GM": gm.count(), "CSF": csf_mask.count()}
    return TissueResult(
        posterior=posterior,
        wm_mask=wm,
        gm_mask=gm,
        csf_mask=csf_mask,
        reference_stats=compute_reference_stats(study, wm, gm),
        csf_threshold=csf,
        report=report,
        history=history,
    )
