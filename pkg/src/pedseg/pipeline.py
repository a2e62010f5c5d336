"""Stage orchestration: tissue -> whole tumor -> subregions, plus output writing.

Every stage failure is re-raised as :class:`StageError` carrying the stage
name, so callers (and the CLI) can report where a run stopped. Output
directories are filled in a sibling temporary directory and renamed into
place, so a reader never sees a half-written result.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .evaluation import DiceReport, evaluate_case
from .nifti import load_labels, save_labels, save_stack, write_code_table
from .stats import CsfThreshold
from .study import InputError, Study
from .subregion import RULE_CODES, SUBREGION_CODES, SubregionConfig, SubregionResult, classify_subregions
from .tissue import TissuePipelineConfig, TissueResult, compute_reference_stats, run_tissue_segmentation
from .tumor import (
    PROVENANCE_CODES,
    NoTumorCoreError,
    TumorRuleConfig,
    WholeTumorResult,
    detect_tumor_core,
    expand_whole_tumor,
)
from .volume import LabelVolume, ScalarVolume, same_grid

__all__ = [
    "RunConfig",
    "RunResult",
    "StageError",
    "run_full",
    "run_subregions_given_wt",
    "write_outputs",
    "load_tissue_intermediate",
    "load_wt_intermediate",
    "OUTPUT_CODES",
]

log = logging.getLogger(__name__)

OUTPUT_CODES = {
    "tissue_mask": {"background": 0, "tissue": 1},
    "core": {"background": 0, "core": 1},
    "wt": {"background": 0, "whole_tumor": 1},
    "subregions": SUBREGION_CODES,
    "rule_trace": RULE_CODES,
    "provenance": PROVENANCE_CODES,
}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
        self.detail = message


@dataclass
class RunConfig:
    """All pipeline settings as one JSON-serializable document.

    ``seed`` overrides the tissue-stage sampling seed and the robust
    estimator seed, so one number fixes a run.
    """

    tissue: TissuePipelineConfig = field(default_factory=TissuePipelineConfig)
    tumor: TumorRuleConfig = field(default_factory=TumorRuleConfig)
    subregion: SubregionConfig = field(default_factory=SubregionConfig)
    debug: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.tissue, dict):
            self.tissue = TissuePipelineConfig(**self.tissue)
        if isinstance(self.tumor, dict):
            self.tumor = TumorRuleConfig(**self.tumor)
        if isinstance(self.subregion, dict):
            self.subregion = SubregionConfig(**self.subregion)
        self.seed = int(self.seed)

    def effective_tissue(self) -> TissuePipelineConfig:
        return replace(self.tissue, seed=self.seed, robust=replace(self.tissue.robust, seed=self.seed))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["subregion"]["rule_order"] = list(self.subregion.rule_order)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: "str | Path") -> "RunConfig":
        try:
            return cls.from_json(Path(path).read_text())
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"bad config {path}: {exc}") from exc


class RunResult(NamedTuple):
    tissue: TissueResult
    wt: WholeTumorResult
    subregions: Optional[SubregionResult]
    dice: Optional[DiceReport]
    report: dict


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(getattr(k, "value", k)): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        if hasattr(obj, "_asdict"):
            return _jsonable(obj._asdict())
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (InputError, StageError):
        raise
    except Exception as exc:  # noqa: BLE001 - every stage failure is reported by name
        raise StageError(name, str(exc) or type(exc).__name__) from exc


def _check_atlases(study: Study, atlas_wm: ScalarVolume, atlas_gm: ScalarVolume) -> None:
    for name, a in (("WM", atlas_wm), ("GM", atlas_gm)):
        if not same_grid(a, study.reference):
            raise InputError(f"atlas {name} grid {a.dims}/{a.spacing} does not match the study grid")


def _base_report(study: Study, cfg: RunConfig) -> dict:
    return {
        "case_id": study.case_id,
        "tumor_type": study.tumor_type.value,
        "config": cfg.to_dict(),
        "status": "running",
        "stages": {},
    }


def _tissue_summary(tissue: TissueResult) -> dict:
    stats = {
        m.value: {t: (None if s is None else s._asdict()) for t, s in entry.items()}
        for m, entry in tissue.reference_stats.items()
    }
    return {**tissue.report, "reference_stats": stats}


def _subregion_summary(sub: SubregionResult) -> dict:
    counts = np.bincount(sub.labels.labels.ravel(), minlength=max(SUBREGION_CODES.values()) + 1)
    trace = np.bincount(sub.rule_trace.labels.ravel(), minlength=max(RULE_CODES.values()) + 1)
    return {
        "warnings": list(sub.warnings),
        "thresholds": dict(sub.thresholds),
        "label_voxels": {k: int(counts[v]) for k, v in SUBREGION_CODES.items()},
        "rule_voxels": {k: int(trace[v]) for k, v in RULE_CODES.items()},
    }


def run_full(
    study: Study,
    atlas_wm: ScalarVolume,
    atlas_gm: ScalarVolume,
    cfg: Optional[RunConfig] = None,
    truth: Optional[LabelVolume] = None,
    out_dir: "str | Path | None" = None,
) -> RunResult:
    """Run every stage for one case.

    Parameters
    ----------
    truth : LabelVolume, optional
        Whole-tumor truth; when given the WT Dice is scored and reported.
    out_dir : path, optional
        Destination for volumes and ``report.json``. On a stage failure the
        directory still receives a report naming the failed stage.
    """
    cfg = cfg or RunConfig()
    study.check_required()
    _check_atlases(study, atlas_wm, atlas_gm)
    report = _base_report(study, cfg)
    ttype = study.tumor_type
    try:
        tissue = _stage("tissue", run_tissue_segmentation, study, atlas_wm, atlas_gm, cfg.effective_tissue(),
                        keep_history=cfg.debug)
        report["stages"]["tissue"] = _tissue_summary(tissue)
        core_rec: dict = {}
        core = _stage("tumor_core", detect_tumor_core, study, tissue, ttype, cfg.tumor, record=core_rec)
        report["stages"]["tumor_core"] = core_rec
        wt = _stage("expansion", expand_whole_tumor, core, study, tissue, ttype, cfg.tumor)
        report["stages"]["expansion"] = {**wt.report, "wt_voxels": wt.wt_mask.count()}
        sub = None
        if ttype.heterogeneous:
            sub = _stage("subregion", classify_subregions, study, wt, tissue, cfg.subregion)
            report["stages"]["subregion"] = _subregion_summary(sub)
        else:
            report["stages"]["subregion"] = {"skipped": f"no subregion stage for {ttype.value}"}
        dice_rep = None
        if truth is not None:
            dice_rep = _stage("evaluation", evaluate_case, wt.wt_mask, truth, "wt", study.case_id)
            report["evaluation"] = dice_rep.to_dict()
    except StageError as exc:
        report["status"] = "failed"
        report["failed_stage"] = exc.stage
        report["error"] = exc.detail
        if out_dir is not None:
            _atomic_write(out_dir, lambda tmp: _write_report(report, tmp))
        raise
    report["status"] = "ok"
    result = RunResult(tissue, wt, sub, dice_rep, report)
    if out_dir is not None:
        _stage("output", write_outputs, result, out_dir, cfg.debug)
    return result


def run_subregions_given_wt(
    study: Study,
    wt_mask: LabelVolume,
    atlas_wm: ScalarVolume,
    atlas_gm: ScalarVolume,
    cfg: Optional[RunConfig] = None,
    tissue: Optional[TissueResult] = None,
) -> tuple[SubregionResult, WholeTumorResult, TissueResult]:
    """Label a supplied whole-tumor mask; the core is re-detected inside it.

    A precomputed ``tissue`` result (e.g. reloaded from disk) skips the
    tissue stage.
    """
    cfg = cfg or RunConfig()
    study.check_required()
    _check_atlases(study, atlas_wm, atlas_gm)
    if not same_grid(wt_mask, study.reference):
        raise InputError("WT mask grid does not match the study grid")
    if not wt_mask.is_binary():
        raise InputError("WT mask must be binary")
    if wt_mask.count() == 0:
        raise InputError("supplied WT mask is empty")
    if tissue is None:
        tissue = _stage("tissue", run_tissue_segmentation, study, atlas_wm, atlas_gm, cfg.effective_tissue())
    wt_arr = wt_mask.mask & study.brain_mask
    try:
        core = detect_tumor_core(study, tissue, study.tumor_type, cfg.tumor, within=wt_arr)
    except NoTumorCoreError as exc:
        raise StageError("tumor_core", "no tumor core within supplied WT") from exc
    except Exception as exc:  # noqa: BLE001
        raise StageError("tumor_core", str(exc)) from exc
    grid = tissue.wm_mask
    core_arr = core.mask
    prov = np.where(core_arr, PROVENANCE_CODES["core"], np.where(wt_arr, PROVENANCE_CODES["expansion"], 0))
    wt = WholeTumorResult(
        core_mask=grid.like(core_arr.astype(np.int32)),
        wt_mask=grid.like(wt_arr.astype(np.int32)),
        provenance=grid.like(prov.astype(np.int32), PROVENANCE_CODES),
        report={"supplied_wt": True},
    )
    sub = _stage("subregion", classify_subregions, study, wt, tissue, cfg.subregion)
    return sub, wt, tissue


def _write_report(report: dict, out: Path) -> None:
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")


def _atomic_write(out_dir: "str | Path", writer) -> None:
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        writer(tmp)
        os.chmod(tmp, 0o755)
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
            os.replace(out, old / out.name)
            os.replace(tmp, out)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_outputs(result: RunResult, out_dir: "str | Path", debug: bool = False) -> None:
    """Write volumes, code table and report for a finished run."""

    def writer(tmp: Path) -> None:
        t = result.tissue
        save_labels(t.wm_mask, tmp / "tissue_wm.nii.gz")
        save_labels(t.gm_mask, tmp / "tissue_gm.nii.gz")
        save_labels(t.csf_mask, tmp / "tissue_csf.nii.gz")
        save_labels(result.wt.core_mask, tmp / "core.nii.gz")
        save_labels(result.wt.wt_mask, tmp / "wt.nii.gz")
        codes = {k: OUTPUT_CODES[k] for k in ("tissue_mask", "core", "wt")}
        if result.subregions is not None:
            save_labels(result.subregions.labels, tmp / "subregions.nii.gz")
            codes["subregions"] = OUTPUT_CODES["subregions"]
        if debug:
            for i, pm in enumerate(t.history):
                save_stack(pm.data, t.wm_mask, tmp / f"posterior_iter{i}.nii.gz")
            save_labels(result.wt.provenance, tmp / "provenance.nii.gz")
            codes["provenance"] = OUTPUT_CODES["provenance"]
            if result.subregions is not None:
                save_labels(result.subregions.rule_trace, tmp / "rule_trace.nii.gz")
                codes["rule_trace"] = OUTPUT_CODES["rule_trace"]
        write_code_table(codes, tmp / "codes.json")
        _write_report(result.report, tmp)

    _atomic_write(out_dir, writer)


def write_subregion_outputs(
    sub: SubregionResult, wt: WholeTumorResult, report: dict, out_dir: "str | Path", debug: bool = False
) -> None:
    def writer(tmp: Path) -> None:
        save_labels(sub.labels, tmp / "subregions.nii.gz")
        save_labels(wt.core_mask, tmp / "core.nii.gz")
        codes = {"core": OUTPUT_CODES["core"], "subregions": OUTPUT_CODES["subregions"]}
        if debug:
            save_labels(sub.rule_trace, tmp / "rule_trace.nii.gz")
            codes["rule_trace"] = OUTPUT_CODES["rule_trace"]
        write_code_table(codes, tmp / "codes.json")
        _write_report(report, tmp)

    _atomic_write(out_dir, writer)


def load_tissue_intermediate(out_dir: "str | Path", study: Study) -> TissueResult:
    """Rebuild the tissue result needed by later stages from a run directory.

    Reference statistics are recomputed from the persisted masks; the
    posterior itself is not persisted and is left as None.
    """
    out = Path(out_dir)
    doc = json.loads((out / "report.json").read_text())
    masks = {}
    for name in ("wm", "gm", "csf"):
        vol = load_labels(out / f"tissue_{name}.nii.gz")
        if vol.labels.shape != study.dims:
            raise InputError(f"persisted tissue_{name} does not match the study grid")
        masks[name] = LabelVolume.from_mask(vol.mask, study.reference)
    th = doc["stages"]["tissue"]["csf_threshold"]
    return TissueResult(
        posterior=None,
        wm_mask=masks["wm"],
        gm_mask=masks["gm"],
        csf_mask=masks["csf"],
        reference_stats=compute_reference_stats(study, masks["wm"], masks["gm"]),
        csf_threshold=CsfThreshold(**th),
        report=doc["stages"]["tissue"],
    )


def load_wt_intermediate(out_dir: "str | Path", study: Study) -> WholeTumorResult:
    out = Path(out_dir)
    grid = study.reference
    core = LabelVolume.from_mask(load_labels(out / "core.nii.gz").mask, grid)
    wt = LabelVolume.from_mask(load_labels(out / "wt.nii.gz").mask, grid)
    prov = np.where(core.mask, PROVENANCE_CODES["core"], np.where(wt.mask, PROVENANCE_CODES["expansion"], 0))
    return WholeTumorResult(core, wt, core.like(prov.astype(np.int32), PROVENANCE_CODES), {"reloaded": True})
