"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 a pipeline stage failed (the stage
is named on stderr and in ``report.json``), 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from nibabel.filebasedimages import ImageFileError

from .evaluation import DiceReport, StructureDice, evaluate_case, write_csv, write_json
from .nifti import load_labels, load_scalar
from .phantom import PhantomSpec, PhantomSpecError, generate_phantom, standard_spec
from .pipeline import (
    RunConfig,
    StageError,
    _atomic_write,
    _write_report,
    run_full,
    run_subregions_given_wt,
    write_subregion_outputs,
)
from .study import InputError, Modality, Study, TumorType, required_modalities
from .volume import LabelVolume

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_STAGE = 0, 1, 2, 3
_SCAN_ARGS = {Modality.T1: "t1", Modality.T1POST: "t1post", Modality.T2: "t2", Modality.FLAIR: "flair", Modality.ADC: "adc"}

log = logging.getLogger("pedseg")


def _add_study_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--type", required=True, help="tumor type: atrt, dipg or lgg")
    for m, dest in _SCAN_ARGS.items():
        p.add_argument(f"--{dest}", metavar="F", help=f"{m.value} NIfTI volume")
    p.add_argument("--mask", metavar="F", help="brain mask (default: voxels nonzero in any scan)")
    p.add_argument("--atlas-wm", required=True, metavar="F")
    p.add_argument("--atlas-gm", required=True, metavar="F")
    p.add_argument("--config", metavar="F", help="RunConfig JSON (default settings if omitted)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--debug", action="store_true", help="also write posteriors, provenance and rule traces")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--case-id", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedseg", description="Pediatric brain tumor segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="tissue, whole-tumor and subregion segmentation")
    _add_study_args(seg)
    seg.add_argument("--truth-wt", metavar="F", help="score the WT against this mask")

    sr = sub.add_parser("subregions", help="subregion labels for a supplied whole-tumor mask")
    _add_study_args(sr)
    sr.add_argument("--wt", required=True, metavar="F")

    ph = sub.add_parser("phantom", help="generate a synthetic case with truth labels")
    ph.add_argument("--spec", required=True, help="PhantomSpec JSON file or a built-in name (healthy, atrt, dipg, lgg)")
    ph.add_argument("--out", required=True, metavar="DIR")
    ph.add_argument("--seed", type=int)

    ev = sub.add_parser("evaluate", help="Dice scores of a prediction against truth")
    ev.add_argument("--pred", required=True, metavar="F")
    ev.add_argument("--truth", required=True, metavar="F")
    ev.add_argument("--mode", required=True, choices=("wt", "subregion"))
    ev.add_argument("--out", required=True, metavar="F", help=".csv for per-structure rows, otherwise JSON")
    ev.add_argument("--case-id", default="case")

    bt = sub.add_parser("batch", help="run 'segment' over a JSON manifest of cases")
    bt.add_argument("--manifest", required=True, metavar="F")
    bt.add_argument("--out", required=True, metavar="DIR")
    bt.add_argument("--config", metavar="F")
    bt.add_argument("--jobs", type=int, default=1)
    return parser


def _read_config(path: Optional[str], seed: Optional[int], debug: bool) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if debug:
        cfg.debug = True
    return cfg


def load_study(
    ttype: str,
    scans: dict,
    mask: Optional[str] = None,
    case_id: Optional[str] = None,
) -> tuple[Study, np.ndarray]:
    """Load scans into a Study; the brain mask defaults to voxels nonzero in any scan."""
    tt = TumorType.parse(ttype)
    for m in required_modalities(tt):
        if not scans.get(m):
            raise InputError(f"required modality {m.value} missing")
    if tt is not TumorType.ATRT and scans.get(Modality.ADC):
        raise InputError(f"ADC is only used for ATRT studies, got it for {tt.value}")
    given = {m: p for m, p in scans.items() if p}
    if mask:
        brain = load_labels(mask).labels != 0
    else:
        brain = None
        for p in given.values():
            nz = np.asarray(load_scalar(p).data != 0)
            if brain is not None and brain.shape != nz.shape:
                raise InputError(f"{p}: grid {nz.shape} differs from {brain.shape}")
            brain = nz if brain is None else brain | nz
    vols = {m: load_scalar(p, brain) for m, p in given.items()}
    cid = case_id or Path(next(iter(given.values()))).resolve().parent.name or "case"
    return Study(vols, tt, cid), brain


def _study_from_args(args) -> tuple[Study, object, object]:
    scans = {m: getattr(args, dest) for m, dest in _SCAN_ARGS.items()}
    study, brain = load_study(args.type, scans, args.mask, args.case_id)
    atlas_wm = load_scalar(args.atlas_wm, study.brain_mask)
    atlas_gm = load_scalar(args.atlas_gm, study.brain_mask)
    return study, atlas_wm, atlas_gm


def cmd_segment(args) -> int:
    cfg = _read_config(args.config, args.seed, args.debug)
    study, awm, agm = _study_from_args(args)
    truth = None
    if args.truth_wt:
        t = load_labels(args.truth_wt)
        if t.labels.shape != study.dims:
            raise InputError("truth WT grid does not match the study grid")
        truth = LabelVolume.from_mask(t.mask, study.reference)
    res = run_full(study, awm, agm, cfg, truth=truth, out_dir=args.out)
    msg = f"{study.case_id}: wt {res.wt.wt_mask.count()} voxels"
    if res.dice is not None:
        d = res.dice.dice_of("WT")
        msg += f", WT Dice {'undefined' if d is None else f'{d:.4f}'}"
    print(msg)
    return EXIT_OK


def cmd_subregions(args) -> int:
    cfg = _read_config(args.config, args.seed, args.debug)
    study, awm, agm = _study_from_args(args)
    wt_vol = load_labels(args.wt)
    if wt_vol.labels.shape != study.dims:
        raise InputError("WT mask grid does not match the study grid")
    wt_mask = LabelVolume.from_mask(wt_vol.mask, study.reference)
    report = {"case_id": study.case_id, "tumor_type": study.tumor_type.value, "config": cfg.to_dict()}
    try:
        sub, wt, _ = run_subregions_given_wt(study, wt_mask, awm, agm, cfg)
    except StageError as exc:
        report.update(status="failed", failed_stage=exc.stage, error=exc.detail)
        _atomic_write(args.out, lambda tmp: _write_report(report, tmp))
        raise
    report.update(status="ok", warnings=sub.warnings, thresholds=sub.thresholds)
    write_subregion_outputs(sub, wt, report, args.out, cfg.debug)
    print(f"{study.case_id}: labelled {wt.wt_mask.count()} voxels")
    return EXIT_OK


def cmd_phantom(args) -> int:
    path = Path(args.spec)
    try:
        if path.is_file():
            spec = PhantomSpec.from_json(path.read_text())
        else:
            spec = standard_spec(args.spec)
        if args.seed is not None:
            spec.seed = args.seed
        case = generate_phantom(spec)
    except (PhantomSpecError, ValueError, TypeError) as exc:
        raise InputError(f"bad phantom spec: {exc}") from exc
    case.save(args.out)
    print(f"phantom {spec.case_id} written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred = load_labels(args.pred)
    truth = load_labels(args.truth)
    try:
        rep = evaluate_case(pred, truth, args.mode, args.case_id)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _write_reports([rep], args.out)
    for s in rep.structures:
        if s.dice is not None:
            print(f"{s.structure}: {s.dice:.4f}")
    return EXIT_OK


def _write_reports(reports: list, out: str) -> None:
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    if out.endswith(".csv"):
        write_csv(reports, out)
    else:
        write_json(reports, out)


def _batch_case(case: dict, out_root: str, cfg_doc: dict) -> tuple[str, int, Optional[dict], str]:
    cid = str(case.get("case_id", "case"))
    try:
        scans = {m: case.get(dest) for m, dest in _SCAN_ARGS.items()}
        study, _ = load_study(case["type"], scans, case.get("mask"), cid)
        awm = load_scalar(case["atlas_wm"], study.brain_mask)
        agm = load_scalar(case["atlas_gm"], study.brain_mask)
        truth = None
        if case.get("truth_wt"):
            truth = LabelVolume.from_mask(load_labels(case["truth_wt"]).mask, study.reference)
        res = run_full(study, awm, agm, RunConfig.from_dict(cfg_doc), truth=truth, out_dir=Path(out_root) / cid)
        return cid, EXIT_OK, (res.dice.to_dict() if res.dice else None), ""
    except StageError as exc:
        return cid, EXIT_STAGE, None, str(exc)
    except (InputError, KeyError, OSError, ImageFileError, ValueError) as exc:
        return cid, EXIT_INPUT, None, str(exc)


def cmd_batch(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"bad manifest {args.manifest}: {exc}") from exc
    cases = manifest["cases"] if isinstance(manifest, dict) else manifest
    cfg_doc = _read_config(args.config, None, False).to_dict()
    ids = [str(c.get("case_id", "case")) for c in cases]
    if len(set(ids)) != len(ids):
        raise InputError("batch case ids must be unique")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_batch_case, cases, [args.out] * len(cases), [cfg_doc] * len(cases)))
    else:
        results = [_batch_case(c, args.out, cfg_doc) for c in cases]
    reports = []
    worst = EXIT_OK
    for cid, code, dice_doc, err in results:
        if code:
            print(f"{cid}: failed ({err})", file=sys.stderr)
            worst = max(worst, code)
        elif dice_doc is not None:
            d = dice_doc["structures"]["WT"]
            reports.append(_report_from_doc(dice_doc, d))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    summary = {"cases": [{"case_id": c, "exit_code": k, "error": e} for c, k, _, e in results]}
    (Path(args.out) / "batch_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if reports:
        write_csv(reports, Path(args.out) / "dice.csv")
        write_json(reports, Path(args.out) / "dice.json")
    return worst


def _report_from_doc(doc: dict, d: dict) -> DiceReport:
    val = None if d["dice"] == "undefined" else float(d["dice"])
    return DiceReport(doc["case_id"], doc["mode"], [StructureDice("WT", val, d["n_pred"], d["n_truth"], d["n_intersection"])])


COMMANDS = {
    "segment": cmd_segment,
    "subregions": cmd_subregions,
    "phantom": cmd_phantom,
    "evaluate": cmd_evaluate,
    "batch": cmd_batch,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (InputError, FileNotFoundError, ImageFileError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        # volume and grid validation failures while loading inputs
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
