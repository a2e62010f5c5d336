"""Synthetic multi-modal phantoms with exact ground truth.

The healthy brain is a sphere of nested shells: CSF outside, a GM ribbon,
WM inside (plus an optional central CSF ventricle). Lesions are spheres or
ellipsoids painted in list order, later ones overwriting earlier ones, each
with its own per-modality mean and noise level. Atlas priors are Gaussian-
blurred indicators of the healthy WM and GM layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .study import Modality, Study, TumorType, required_modalities
from .evaluation import CORE_CODE
from .subregion import SUBREGION_CODES, SubregionConfig
from .tumor import TumorRuleConfig
from .volume import LabelVolume, ScalarVolume

__all__ = [
    "TISSUE_CODES",
    "CORE_CODE",
    "TRUTH_SUBREGION_CODES",
    "Lesion",
    "PhantomSpec",
    "PhantomCase",
    "PhantomSpecError",
    "generate_phantom",
    "standard_spec",
]

TISSUE_CODES = {"WM": 1, "GM": 2, "CSF": 3, "OTHER": 4}
TRUTH_SUBREGION_CODES = {**SUBREGION_CODES, "CORE": CORE_CODE}
CORE_LABELS = ("CORE", "ENHANCING", "NON_ENHANCING")
ARTIFACT = "ARTIFACT"  # abnormal but not tumor: excluded from the truth WT


class PhantomSpecError(ValueError):
    pass


@dataclass
class Lesion:
    label: str
    center_mm: tuple
    radii_mm: tuple
    intensities: dict  # modality name -> [mean, std]
    shape: str = "sphere"

    def __post_init__(self) -> None:
        self.label = self.label.upper()
        if self.label not in TRUTH_SUBREGION_CODES and self.label != ARTIFACT:
            raise PhantomSpecError(f"unknown lesion label {self.label!r}")
        if self.shape not in ("sphere", "ellipsoid"):
            raise PhantomSpecError(f"unknown lesion shape {self.shape!r}")
        r = tuple(float(v) for v in np.atleast_1d(self.radii_mm))
        if self.shape == "sphere":
            if len(set(r)) != 1 or len(r) not in (1, 3):
                raise PhantomSpecError("sphere lesions take one radius")
            r = r[:1] * 3
        elif len(r) != 3:
            raise PhantomSpecError("ellipsoid lesions take three radii")
        if not all(v > 0 for v in r):
            raise PhantomSpecError("lesion radii must be positive")
        self.radii_mm = r
        self.center_mm = tuple(float(c) for c in self.center_mm)
        self.intensities = {Modality(k).value: [float(v[0]), float(v[1])] for k, v in self.intensities.items()}

    def mask(self, coords: np.ndarray) -> np.ndarray:
        q = sum(((coords[a] - self.center_mm[a]) / self.radii_mm[a]) ** 2 for a in range(3))
        return q <= 1.0 + 1e-9


@dataclass
class PhantomSpec:
    tumor_type: str = "ATRT"
    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_radius_mm: float = 44.0
    csf_thickness_mm: float = 5.0
    gm_thickness_mm: float = 6.0
    ventricle_radius_mm: float = 0.0
    tissues: dict = field(default_factory=dict)  # tissue -> modality -> [mean, std]
    lesions: list = field(default_factory=list)
    seed: int = 0
    atlas_blur_sigma_mm: float = 2.0
    case_id: str = "phantom"

    def __post_init__(self) -> None:
        self.tumor_type = TumorType.parse(self.tumor_type).value
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not self.tissues:
            self.tissues = default_tissues()
        self.tissues = {t.upper(): {Modality(m).value: [float(v[0]), float(v[1])] for m, v in d.items()}
                        for t, d in self.tissues.items()}
        self.lesions = [les if isinstance(les, Lesion) else Lesion(**les) for les in self.lesions]

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return required_modalities(TumorType(self.tumor_type))

    @property
    def center_mm(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))

    def validate(self, tumor_cfg: Optional[TumorRuleConfig] = None, sub_cfg: Optional[SubregionConfig] = None) -> None:
        _validate(self, tumor_cfg or TumorRuleConfig(), sub_cfg or SubregionConfig())


@dataclass(eq=False)
class PhantomCase:
    study: Study
    truth_tissue: LabelVolume
    truth_wt: LabelVolume
    truth_subregions: LabelVolume
    truth_core: LabelVolume
    atlas_wm: ScalarVolume
    atlas_gm: ScalarVolume
    spec: PhantomSpec

    def save(self, out_dir: "str | Path") -> None:
        from .nifti import save_labels, save_scalar, write_code_table

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m, vol in self.study.modalities.items():
            save_scalar(vol, out / f"{m.value.lower()}.nii.gz")
        save_scalar(self.atlas_wm, out / "atlas_wm.nii.gz")
        save_scalar(self.atlas_gm, out / "atlas_gm.nii.gz")
        save_labels(LabelVolume.from_mask(self.study.brain_mask, self.truth_wt), out / "brain_mask.nii.gz")
        save_labels(self.truth_tissue, out / "truth_tissue.nii.gz")
        save_labels(self.truth_wt, out / "truth_wt.nii.gz")
        save_labels(self.truth_core, out / "truth_core.nii.gz")
        save_labels(self.truth_subregions, out / "truth_subregions.nii.gz")
        write_code_table({"tissue": TISSUE_CODES, "subregions": TRUTH_SUBREGION_CODES}, out / "codes.json")
        (out / "spec.json").write_text(self.spec.to_json() + "\n")


def default_tissues() -> dict:
    """Healthy tissue table: WM and GM 10 sigma apart in every scan."""
    return {
        "WM": {"T1": [600, 10], "T1POST": [600, 10], "T2": [300, 10], "FLAIR": [400, 10], "ADC": [1100, 10]},
        "GM": {"T1": [500, 10], "T1POST": [500, 10], "T2": [400, 10], "FLAIR": [500, 10], "ADC": [1000, 10]},
        "CSF": {"T1": [200, 10], "T1POST": [200, 10], "T2": [800, 10], "FLAIR": [150, 10], "ADC": [2000, 10]},
    }


# lesion intensity presets (mean, std) per modality
_PRESETS = {
    "NON_ENHANCING": {"T1": [550, 5], "T1POST": [550, 5], "T2": [300, 5], "FLAIR": [450, 5], "ADC": [700, 5]},
    "ENHANCING": {"T1": [550, 5], "T1POST": [700, 5], "T2": [300, 5], "FLAIR": [450, 5], "ADC": [700, 5]},
    "EDEMA": {"T1": [550, 5], "T1POST": [550, 5], "T2": [600, 5], "FLAIR": [450, 5], "ADC": [1300, 5]},
    "HEMORRHAGE": {"T1": [550, 5], "T1POST": [550, 5], "T2": [150, 5], "FLAIR": [450, 5], "ADC": [1100, 5]},
    "CYST": {"T1": [300, 5], "T1POST": [300, 5], "T2": [700, 5], "FLAIR": [330, 5], "ADC": [2000, 5]},
    "TRAPPED_CSF": {"T1": [200, 5], "T1POST": [200, 5], "T2": [800, 5], "FLAIR": [150, 5], "ADC": [2000, 5]},
    "EARLY_NECROSIS": {"T1": [750, 5], "T1POST": [750, 5], "T2": [350, 5], "FLAIR": [450, 5], "ADC": [1300, 5]},
    "LATE_NECROSIS": {"T1": [550, 5], "T1POST": [550, 5], "T2": [650, 5], "FLAIR": [450, 5], "ADC": [1500, 5]},
    # FLAIR-bright cores for DIPG / LGG
    "FLAIR_CORE": {"T1": [550, 5], "T1POST": [550, 5], "T2": [600, 5], "FLAIR": [650, 5], "ADC": [1300, 5]},
    "ARTIFACT": {"T1": [550, 5], "T1POST": [550, 5], "T2": [600, 5], "FLAIR": [450, 5], "ADC": [1300, 5]},
}


def preset(name: str, modalities=None) -> dict:
    vals = _PRESETS[name]
    mods = [Modality(m).value for m in modalities] if modalities is not None else list(vals)
    return {m: list(vals[m]) for m in mods}


def standard_spec(kind: str = "atrt", dims=(96, 96, 96), seed: int = 0) -> PhantomSpec:
    """Built-in phantoms: ``healthy``, ``atrt`` (all subregions), ``dipg``, ``lgg``.

    Geometry is laid out for a 96^3 grid at 1 mm; tumors sit in the WM well
    away from the CSF shell.
    """
    kind = kind.lower()
    ttype = {"healthy": "DIPG", "atrt": "ATRT", "dipg": "DIPG", "lgg": "LGG"}.get(kind)
    if ttype is None:
        raise ValueError(f"unknown standard phantom {kind!r}")
    mods = required_modalities(TumorType(ttype))
    spec = PhantomSpec(tumor_type=ttype, dims=dims, seed=seed, case_id=f"phantom-{kind}")
    c = spec.center_mm + np.array([7.0, 0.0, 0.0])
    c = np.rint(c)

    def les(label, offset, r, intensities=None):
        return Lesion(label, tuple(c + np.asarray(offset, float)), (r,), intensities or preset(label, mods))

    if kind == "atrt":
        spec.lesions = [
            les("EDEMA", (0, 0, 0), 12.0),
            les("NON_ENHANCING", (0, 0, 0), 8.0),
            les("ENHANCING", (0, 3.5, 0), 4.0),
            les("HEMORRHAGE", (0, -10, 0), 3.5),
            les("CYST", (0, 0, 10), 3.5),
            les("TRAPPED_CSF", (0, 0, -10), 3.0),
            les("EARLY_NECROSIS", (-15, 0, 0), 3.5),
            les("LATE_NECROSIS", (-23.5, 0, 0), 4.5),
        ]
    elif kind == "dipg":
        spec.lesions = [
            les("EDEMA", (0, 0, 0), 12.0),
            les("CORE", (0, 0, 0), 8.0, preset("FLAIR_CORE", mods)),
            les("CYST", (0, 0, 10), 3.5),
        ]
    elif kind == "lgg":
        spec.lesions = [les("CORE", (0, 0, 0), 9.0, preset("FLAIR_CORE", mods))]
    return spec


def _estimated_csf_threshold(spec: PhantomSpec) -> float:
    csf = spec.tissues["CSF"]["FLAIR"][0]
    parenchyma = min(spec.tissues["WM"]["FLAIR"][0], spec.tissues["GM"]["FLAIR"][0])
    return 0.5 * (csf + parenchyma)


def _validate(spec: PhantomSpec, tcfg: TumorRuleConfig, scfg: SubregionConfig) -> None:
    if len(spec.dims) != 3 or min(spec.dims) < 1:
        raise PhantomSpecError("dims must be three positive integers")
    if len(spec.spacing) != 3 or min(spec.spacing) <= 0:
        raise PhantomSpecError("spacing must be three positive numbers")
    if spec.brain_radius_mm <= spec.csf_thickness_mm + spec.gm_thickness_mm:
        raise PhantomSpecError("brain radius must exceed the CSF and GM shell thicknesses")
    mods = [m.value for m in spec.modalities]
    for t in ("WM", "GM", "CSF"):
        if t not in spec.tissues:
            raise PhantomSpecError(f"tissue table lacks {t}")
        for m in mods:
            if m not in spec.tissues[t]:
                raise PhantomSpecError(f"tissue {t} lacks modality {m}")
            if spec.tissues[t][m][1] < 0:
                raise PhantomSpecError("noise std must be non-negative")
    ttype = TumorType(spec.tumor_type)
    wm = {m: spec.tissues["WM"][m] for m in mods}
    gm = {m: spec.tissues["GM"][m] for m in mods}
    th = _estimated_csf_threshold(spec)

    for i, les in enumerate(spec.lesions):
        missing = [m for m in mods if m not in les.intensities]
        if missing:
            raise PhantomSpecError(f"lesion {i} ({les.label}) lacks intensities for {missing}")
        if les.label == ARTIFACT:
            continue
        mean = {m: les.intensities[m][0] for m in mods}
        where = f"lesion {i} ({les.label})"

        def need(cond: bool, what: str) -> None:
            if not cond:
                raise PhantomSpecError(f"{where}: {what}")

        # core rule, margin (k + 1) sigma against the reference tissue
        ref = gm if tcfg.reference_tissue.upper() == "GM" else wm
        k = tcfg.core_k_sigma
        if ttype is TumorType.ATRT:
            mu, sd = ref["ADC"]
            z = (mu - mean["ADC"]) / sd
        else:
            mu, sd = ref["FLAIR"]
            z = (mean["FLAIR"] - mu) / sd
        is_core = les.label in CORE_LABELS
        if is_core:
            need(z >= k + 1, f"core intensity must beat the core rule by {k + 1} sigma (got {z:.2f})")
        else:
            need(z <= k - 1, f"non-core lesion would pass the core rule (z={z:.2f})")

        sd_sub = float(np.hypot(wm["T1"][1], wm["T1POST"][1]))
        z_sub = ((mean["T1POST"] - mean["T1"]) - (wm["T1POST"][0] - wm["T1"][0])) / sd_sub
        if les.label == "ENHANCING":
            need(z_sub >= scfg.enhance_k_sigma + 1, f"T1-sub must exceed WM by {scfg.enhance_k_sigma + 1} sigma")
        elif les.label in ("NON_ENHANCING", "CORE"):
            need(z_sub <= scfg.enhance_k_sigma - 1, "non-enhancing core shows T1-sub enhancement")

        if not is_core and ttype.heterogeneous:
            abnormal = any(
                abs(mean[m] - wm[m][0]) >= (tcfg.expansion_k_sigma + 1) * wm[m][1]
                and abs(mean[m] - gm[m][0]) >= (tcfg.expansion_k_sigma + 1) * gm[m][1]
                for m in mods
            )
            need(abnormal, "lesion is not abnormal in any scan, so expansion cannot reach it")

        if is_core:
            continue  # core voxels only take the enhancing / non-enhancing split
        # first rule (in configured order) that the lesion mean meets, with 1 sigma slack
        z_t2 = (mean["T2"] - wm["T2"][0]) / wm["T2"][1]
        z_t1 = (mean["T1"] - wm["T1"][0]) / wm["T1"][1]
        z_fl = (mean["FLAIR"] - wm["FLAIR"][0]) / wm["FLAIR"][1]
        csf_sd = spec.tissues["CSF"]["FLAIR"][1] or 1.0
        scores = {
            "enhancing": -np.inf,
            "hemorrhage": -z_t2 - scfg.t2_dark_k_sigma,
            "trapped_csf": (th - mean["FLAIR"]) / csf_sd,
            "cyst": -z_fl - scfg.flair_cyst_k_sigma,
            "early_necrosis": z_t1 - scfg.t1_bright_k_sigma,
            "t2_bright": z_t2 - scfg.t2_bright_k_sigma,
        }
        expected = {
            "HEMORRHAGE": "hemorrhage",
            "TRAPPED_CSF": "trapped_csf",
            "CYST": "cyst",
            "EARLY_NECROSIS": "early_necrosis",
            "EDEMA": "t2_bright",
            "LATE_NECROSIS": "t2_bright",
        }.get(les.label)
        for rule in scfg.rule_order:
            if rule == expected:
                need(scores[rule] >= 1.0, f"intensity misses its {rule} rule by less than 1 sigma")
                break
            need(scores[rule] <= -1.0, f"intensity would be captured first by the {rule} rule")


def generate_phantom(spec: PhantomSpec, validate: bool = True) -> PhantomCase:
    if validate:
        spec.validate()
    dims, sp = spec.dims, spec.spacing
    coords = np.stack(np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, sp)], indexing="ij"))
    c = spec.center_mm
    r = np.sqrt(sum((coords[a] - c[a]) ** 2 for a in range(3)))
    brain = r <= spec.brain_radius_mm
    csf = brain & (r > spec.brain_radius_mm - spec.csf_thickness_mm)
    if spec.ventricle_radius_mm > 0:
        csf |= r <= spec.ventricle_radius_mm
    gm = brain & ~csf & (r > spec.brain_radius_mm - spec.csf_thickness_mm - spec.gm_thickness_mm)
    wm = brain & ~csf & ~gm

    tissue = np.zeros(dims, dtype=np.int32)
    tissue[wm] = TISSUE_CODES["WM"]
    tissue[gm] = TISSUE_CODES["GM"]
    tissue[csf] = TISSUE_CODES["CSF"]
    owner = np.full(dims, -1, dtype=np.int32)  # index of the lesion painted last
    for i, les in enumerate(spec.lesions):
        owner[les.mask(coords) & brain] = i

    rng = np.random.default_rng(spec.seed)
    arrays = {}
    for m in spec.modalities:
        noise = rng.standard_normal(dims)
        img = np.zeros(dims)
        for t in ("WM", "GM", "CSF"):
            mu, sd = spec.tissues[t][m.value]
            sel = tissue == TISSUE_CODES[t]
            img[sel] = mu + sd * noise[sel]
        for i, les in enumerate(spec.lesions):
            mu, sd = les.intensities[m.value]
            sel = owner == i
            img[sel] = mu + sd * noise[sel]
        img[~brain] = 0.0
        arrays[m] = img

    truth_tissue = tissue.copy()
    subregions = np.zeros(dims, dtype=np.int32)
    core = np.zeros(dims, dtype=bool)
    wt = np.zeros(dims, dtype=bool)
    for i, les in enumerate(spec.lesions):
        sel = owner == i
        truth_tissue[sel] = TISSUE_CODES["CSF"] if les.label == "TRAPPED_CSF" else TISSUE_CODES["OTHER"]
        if les.label == ARTIFACT:
            continue
        subregions[sel] = TRUTH_SUBREGION_CODES[les.label]
        wt |= sel
        if les.label in CORE_LABELS:
            core |= sel

    sigma_vox = [spec.atlas_blur_sigma_mm / s for s in sp]
    atlas = {}
    for name, region in (("WM", wm), ("GM", gm)):
        blurred = ndimage.gaussian_filter(region.astype(np.float64), sigma_vox, mode="constant")
        atlas[name] = ScalarVolume(np.clip(blurred, 0.0, 1.0), sp, brain)

    study = Study.from_arrays(arrays, spec.tumor_type, brain, sp, spec.case_id)
    grid = study.reference
    return PhantomCase(
        study=study,
        truth_tissue=LabelVolume(truth_tissue, sp, brain, grid.affine, TISSUE_CODES),
        truth_wt=LabelVolume.from_mask(wt, grid),
        truth_subregions=LabelVolume(subregions, sp, brain, grid.affine, TRUTH_SUBREGION_CODES),
        truth_core=LabelVolume.from_mask(core, grid),
        atlas_wm=atlas["WM"],
        atlas_gm=atlas["GM"],
        spec=spec,
    )
