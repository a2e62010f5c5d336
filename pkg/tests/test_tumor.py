import numpy as np
import pytest
from scipy import ndimage

from conftest import dice_np
from pedseg.phantom import Lesion, PhantomSpec, default_tissues, generate_phantom, preset
from pedseg.study import InputError, Study
from pedseg.tissue import run_tissue_segmentation
from pedseg.tumor import (
    NoTumorCoreError,
    TumorRuleConfig,
    detect_tumor_core,
    expand_whole_tumor,
    suppress_false_positives,
)
from pedseg.volume import LabelVolume

ATRT_MODS = ["T1", "T1POST", "T2", "FLAIR", "ADC"]
CENTER = (54, 48, 48)


def _segment(spec):
    case = generate_phantom(spec)
    return case, run_tissue_segmentation(case.study, case.atlas_wm, case.atlas_gm)


@pytest.fixture(scope="module")
def healthy_tissue(healthy_case):
    return run_tissue_segmentation(healthy_case.study, healthy_case.atlas_wm, healthy_case.atlas_gm)


@pytest.fixture(scope="module")
def plain_atrt():
    """Non-enhancing core inside an edema ring, plus a detached artifact."""
    lesions = [
        Lesion("EDEMA", CENTER, (12,), preset("EDEMA", ATRT_MODS)),
        Lesion("NON_ENHANCING", CENTER, (8,), preset("NON_ENHANCING", ATRT_MODS)),
        Lesion("ARTIFACT", (54, 23, 48), (4,), preset("ARTIFACT", ATRT_MODS)),
    ]
    return _segment(PhantomSpec(tumor_type="ATRT", lesions=lesions))


def test_config_validation():
    with pytest.raises(ValueError):
        TumorRuleConfig(core_k_sigma=0)
    with pytest.raises(ValueError):
        TumorRuleConfig(min_component_mm3=-1)
    with pytest.raises(ValueError):
        TumorRuleConfig(reference_tissue="CSF")


def test_atrt_core_against_wide_gm_distribution():
    tissues = default_tissues()
    tissues["WM"]["ADC"] = [1100.0, 50.0]
    tissues["GM"]["ADC"] = [1000.0, 50.0]
    core = {**preset("NON_ENHANCING", ATRT_MODS), "ADC": [600.0, 5.0]}
    case, tissue = _segment(PhantomSpec(tumor_type="ATRT", tissues=tissues, lesions=[Lesion("NON_ENHANCING", CENTER, (8,), core)]))
    found = detect_tumor_core(case.study, tissue, "ATRT")
    assert dice_np(found.mask, case.truth_core.mask) >= 0.95


def test_lgg_core_recovered():
    tissues = default_tissues()
    tissues["GM"]["FLAIR"] = [300.0, 20.0]
    tissues["WM"]["FLAIR"] = [250.0, 20.0]
    tissues["CSF"]["FLAIR"] = [80.0, 10.0]
    lesion = Lesion("CORE", CENTER, (9,), {"T1": [550, 5], "T1POST": [550, 5], "T2": [600, 5], "FLAIR": [450, 5]})
    case, tissue = _segment(PhantomSpec(tumor_type="LGG", tissues=tissues, lesions=[lesion]))
    found = detect_tumor_core(case.study, tissue, "LGG")
    assert dice_np(found.mask, case.truth_core.mask) >= 0.95


def test_healthy_has_no_core(healthy_case, healthy_tissue):
    with pytest.raises(NoTumorCoreError, match="no tumor core found"):
        detect_tumor_core(healthy_case.study, healthy_tissue, "DIPG")


def test_atrt_without_adc_raises(atrt_case, atrt_tissue):
    mods = {m: v for m, v in atrt_case.study.modalities.items() if m.value != "ADC"}
    with pytest.raises(InputError, match="ADC"):
        detect_tumor_core(Study(mods, "ATRT"), atrt_tissue, "ATRT")


def test_boundary_blob_removed(atrt_case, atrt_tissue):
    brain = atrt_case.study.brain_mask
    depth = ndimage.distance_transform_edt(np.pad(brain, 1))[1:-1, 1:-1, 1:-1]
    blob = brain & (depth <= 2)
    idx = np.indices(brain.shape)
    blob &= (idx[0] > 80) & (np.abs(idx[1] - 48) < 6) & (np.abs(idx[2] - 48) < 6)
    assert blob.sum() > 50
    record = []
    out = suppress_false_positives(LabelVolume.from_mask(blob, atrt_tissue.wm_mask), atrt_case.study, atrt_tissue, ttype="ATRT", record=record)
    assert out.count() == 0
    assert record[0]["decision"] == "removed:brain_boundary"


def test_vessel_removed(atrt_case, atrt_tissue):
    vessel = np.zeros(atrt_case.study.dims, bool)
    vessel[35:51, 30, 30] = True
    vessel[50, 30:41, 30] = True
    mods = dict(atrt_case.study.modalities)
    t1post = next(m for m in mods if m.value == "T1POST")
    mods[t1post] = mods[t1post].with_data(np.where(vessel, mods[t1post].data + 300, mods[t1post].data))
    study = Study(mods, "ATRT")
    record = []
    out = suppress_false_positives(LabelVolume.from_mask(vessel, atrt_tissue.wm_mask), study, atrt_tissue, ttype="ATRT", record=record)
    assert out.count() == 0
    assert record[0]["decision"] == "removed:vessel"


def test_genuine_core_retained(atrt_case, atrt_tissue):
    idx = np.indices(atrt_case.study.dims)
    ball = sum((idx[a] - CENTER[a]) ** 2 for a in range(3)) <= 13.4**2
    assert 9500 <= ball.sum() <= 10500  # about 10 cm^3 at 1 mm
    cand = LabelVolume.from_mask(ball, atrt_tissue.wm_mask)
    out = suppress_false_positives(cand, atrt_case.study, atrt_tissue, ttype="ATRT")
    assert np.array_equal(out.mask, ball)


def test_lgg_wt_is_core(lgg_run):
    assert np.array_equal(lgg_run.wt.wt_mask.mask, lgg_run.wt.core_mask.mask)


@pytest.mark.parametrize("run", ["atrt_run", "dipg_run", "lgg_run"])
def test_wt_invariants(run, request):
    res = request.getfixturevalue(run)
    core, wt = res.wt.core_mask.mask, res.wt.wt_mask.mask
    brain = res.tissue.wm_mask.brain_mask
    assert core.any()
    assert not (core & ~wt).any() and not (wt & ~brain).any()
    labels, n = ndimage.label(wt, np.ones((3, 3, 3)))
    assert all(core[labels == i].any() for i in range(1, n + 1))
    prov = res.wt.provenance.labels
    assert np.array_equal(prov > 0, wt) and np.array_equal(prov == 1, core)


def test_detached_artifact_excluded(plain_atrt):
    case, tissue = plain_atrt
    core = detect_tumor_core(case.study, tissue, "ATRT")
    wt = expand_whole_tumor(core, case.study, tissue, "ATRT").wt_mask.mask
    artifact = case.spec.lesions[2].mask(np.indices(case.study.dims).astype(float))
    assert artifact.sum() > 100
    assert not (wt & artifact).any()
    assert not (case.truth_wt.mask & artifact).any()
    assert dice_np(wt, case.truth_wt.mask) >= 0.95


def test_expansion_monotone_in_k(plain_atrt):
    case, tissue = plain_atrt
    core = detect_tumor_core(case.study, tissue, "ATRT")
    sizes = []
    prev = None
    for k in (1.5, 2.0, 3.0, 4.0):
        wt = expand_whole_tumor(core, case.study, tissue, "ATRT", TumorRuleConfig(expansion_k_sigma=k)).wt_mask.mask
        if prev is not None:
            assert not (wt & ~prev).any()
        prev = wt
        sizes.append(int(wt.sum()))
    assert sizes == sorted(sizes, reverse=True)


def test_core_without_abnormal_surroundings(plain_atrt):
    case, tissue = plain_atrt
    core = detect_tumor_core(case.study, tissue, "ATRT")
    # replace everything outside the core by noise-free healthy tissue
    truth = case.truth_tissue.labels
    mods = {}
    for m, vol in case.study.modalities.items():
        data = vol.data.copy()
        for code, name in ((1, "WM"), (2, "GM"), (3, "CSF")):
            data[(truth == code) | ((truth == 4) & ~core.mask & (code == 1))] = case.spec.tissues[name][m.value][0]
        mods[m] = vol.with_data(data)
    study = Study(mods, "ATRT")
    res = expand_whole_tumor(core, study, tissue, "ATRT")
    assert np.array_equal(res.wt_mask.mask, core.mask)


def test_empty_core_rejected(atrt_case, atrt_tissue):
    empty = LabelVolume.from_mask(np.zeros(atrt_case.study.dims, bool), atrt_tissue.wm_mask)
    with pytest.raises(NoTumorCoreError):
        expand_whole_tumor(empty, atrt_case.study, atrt_tissue, "ATRT")


def test_expansion_deterministic(atrt_case, atrt_tissue, atrt_run):
    again = expand_whole_tumor(atrt_run.wt.core_mask, atrt_case.study, atrt_tissue, "ATRT")
    assert np.array_equal(again.wt_mask.labels, atrt_run.wt.wt_mask.labels)
