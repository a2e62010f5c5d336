import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import dice_np
from oracles import posterior_loop
from pedseg.phantom import PhantomSpec, generate_phantom
from pedseg.stats import RobustConfig
from pedseg.study import InputError, Study
from pedseg.tissue import (
    CLASSES,
    ProbabilityMap,
    TissueClass,
    TissuePipelineConfig,
    bayes_update,
    initialize_priors,
    posterior_from_likelihoods,
    run_tissue_segmentation,
)
from pedseg.volume import ScalarVolume

WM, GM, CSF, OTHER = (int(c) for c in (TissueClass.WM, TissueClass.GM, TissueClass.CSF, TissueClass.OTHER))


def _prior_study():
    """1-D strip: a dark FLAIR block then a bright block, enough voxels for a clear valley."""
    rng = np.random.default_rng(0)
    n = 4000
    flair = np.r_[rng.normal(100, 5, n // 2), rng.normal(400, 5, n // 2)].reshape(n, 1, 1)
    arrays_ = {m: flair for m in ("T1", "T1POST", "T2", "FLAIR")}
    study = Study.from_arrays(arrays_, "DIPG", np.ones(flair.shape, bool))
    wm = np.full(flair.shape, 0.5)
    gm = np.full(flair.shape, 0.5)
    wm[-2], gm[-2] = 0.8, 0.2
    wm[-1], gm[-1] = 0.0, 0.0
    return study, ScalarVolume(wm), ScalarVolume(gm)


def test_tissue_classes():
    assert [c.name for c in CLASSES] == ["WM", "GM", "CSF", "OTHER"]


def test_initial_priors_examples():
    study, awm, agm = _prior_study()
    prior, th = initialize_priors(study, awm, agm)
    assert 100 < th.th < 400
    dark = prior.data[:, 0, 0, 0]
    np.testing.assert_allclose(dark, np.array([0.05, 0.05, 0.9, 1e-3]) / 1.001, atol=1e-12)
    np.testing.assert_allclose(prior.data[:, -2, 0, 0], [0.4, 0.1, 0.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(prior.data[:, -1, 0, 0], [0.0, 0.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(prior.class_sums()[study.brain_mask], 1.0, atol=1e-12)


def test_initial_priors_atlas_checks():
    study, awm, agm = _prior_study()
    with pytest.raises(ValueError, match="grid"):
        initialize_priors(study, ScalarVolume(np.zeros((2, 2, 2))), agm)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        initialize_priors(study, awm.with_data(awm.data * 3), agm)


def _pm(vectors):
    v = np.asarray(vectors, float)
    grid = ScalarVolume(np.zeros((v.shape[1], 1, 1)))
    return ProbabilityMap.from_brain_vectors(v, grid), grid


def test_bayes_uniform_likelihood_keeps_prior():
    pm, grid = _pm([[0.1, 0.4], [0.2, 0.3], [0.3, 0.2], [0.4, 0.1]])
    flat = {c: (lambda x: np.full(x.shape, 0.7)) for c in CLASSES}
    out = bayes_update(flat, pm, grid.with_data(np.array([3.0, 9.0]).reshape(2, 1, 1)))
    np.testing.assert_allclose(out.data, pm.data, atol=1e-15)


def test_bayes_hand_example_and_degenerate_prior():
    pm, grid = _pm([[0.5, 1.0], [0.5, 0.0], [0.0, 0.0], [0.0, 0.0]])
    dens = {TissueClass.WM: 0.2, TissueClass.GM: 0.1, TissueClass.CSF: 0.05, TissueClass.OTHER: 0.3}
    lik = {c: (lambda x, v=v: np.full(x.shape, v)) for c, v in dens.items()}
    out = bayes_update(lik, pm, grid)
    np.testing.assert_allclose(out.data[:, 0, 0, 0], [2 / 3, 1 / 3, 0, 0], atol=1e-15)
    np.testing.assert_allclose(out.data[:, 1, 0, 0], [1, 0, 0, 0], atol=1e-15)


def test_bayes_missing_class_and_underflow():
    pm, grid = _pm([[0.25], [0.25], [0.25], [0.25]])
    with pytest.raises(ValueError, match="missing class"):
        bayes_update({TissueClass.WM: lambda x: x}, pm, grid)
    tiny = {c: (lambda x: np.full(x.shape, 1e-300)) for c in CLASSES}
    out = bayes_update(tiny, pm, grid)
    np.testing.assert_array_equal(out.data, pm.data)


@given(
    arrays(float, (4, 25), elements=st.floats(0, 5)),
    arrays(float, (4, 25), elements=st.floats(0.001, 1)),
)
def test_posterior_matches_loop_oracle(lik, raw_prior):
    prior = raw_prior / raw_prior.sum(axis=0)
    out = posterior_from_likelihoods(lik, prior)
    np.testing.assert_allclose(out, posterior_loop(lik, prior), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


@given(arrays(float, (3, 4, 10), elements=st.floats(0.01, 1)))
def test_average_then_normalise_equals_normalise_then_average(raw):
    per_scan = raw / raw.sum(axis=1, keepdims=True)
    a = per_scan.mean(axis=0)
    a = a / a.sum(axis=0)
    b = (per_scan / per_scan.sum(axis=1, keepdims=True)).mean(axis=0)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_missing_modality_raises(healthy_case):
    mods = dict(healthy_case.study.modalities)
    mods.pop(next(m for m in mods if m.value == "T2"))
    study = Study(mods, "DIPG")
    with pytest.raises(InputError, match="required modality T2 missing"):
        run_tissue_segmentation(study, healthy_case.atlas_wm, healthy_case.atlas_gm)


def test_zero_iterations_returns_prior(healthy_case):
    cfg = TissuePipelineConfig(iterations=0)
    res = run_tissue_segmentation(healthy_case.study, healthy_case.atlas_wm, healthy_case.atlas_gm, cfg)
    prior, _ = initialize_priors(healthy_case.study, healthy_case.atlas_wm, healthy_case.atlas_gm, cfg)
    np.testing.assert_array_equal(res.posterior.data, prior.data)
    assert res.report["iterations"] == []


def test_masks_disjoint_and_in_brain(atrt_tissue, atrt_case):
    wm, gm, csf = atrt_tissue.wm_mask.mask, atrt_tissue.gm_mask.mask, atrt_tissue.csf_mask.mask
    brain = atrt_case.study.brain_mask
    assert not (wm & gm).any() and not (wm & csf).any() and not (gm & csf).any()
    assert not (wm & ~brain).any() and not (gm & ~brain).any()


def test_contaminated_phantom_report(atrt_tissue, atrt_case):
    rep = atrt_tissue.report
    assert len(rep["iterations"]) == 3
    for it in rep["iterations"]:
        assert set(it["mcd_inlier_fraction"]) == {"WM", "GM"}
        assert it["sample_counts"] == {"WM": 10000, "GM": 10000, "CSF": 10000, "OTHER": 10000}
    truth = atrt_case.truth_tissue.labels
    assert dice_np(atrt_tissue.wm_mask.mask, truth == 1) >= 0.95
    # the reference statistics reflect healthy WM, not the planted tumor
    st = atrt_tissue.reference("ADC", "WM")
    assert abs(st.mean - 1100) < 5 and st.std < 15


def test_two_tissue_phantom():
    mods = ["T1", "T1POST", "T2", "FLAIR"]
    tissues = {
        "WM": {m: [400, 10] for m in mods},
        "GM": {m: [300, 10] for m in mods},
        "CSF": {m: [100, 10] for m in mods},
    }
    case = generate_phantom(PhantomSpec(tumor_type="DIPG", tissues=tissues, atlas_blur_sigma_mm=0.0))
    res = run_tissue_segmentation(case.study, case.atlas_wm, case.atlas_gm)
    truth = case.truth_tissue.labels
    assert dice_np(res.wm_mask.mask, truth == 1) >= 0.98
    assert dice_np(res.gm_mask.mask, truth == 2) >= 0.98


def test_tissue_deterministic(healthy_case):
    cfg = TissuePipelineConfig(iterations=1, robust=RobustConfig(num_starts=50))
    a = run_tissue_segmentation(healthy_case.study, healthy_case.atlas_wm, healthy_case.atlas_gm, cfg)
    b = run_tissue_segmentation(healthy_case.study, healthy_case.atlas_wm, healthy_case.atlas_gm, cfg)
    np.testing.assert_array_equal(a.posterior.data, b.posterior.data)


def test_config_validation():
    with pytest.raises(ValueError):
        TissuePipelineConfig(posterior_threshold=1.5)
    with pytest.raises(ValueError):
        TissuePipelineConfig(iterations=-1)
    cfg = TissuePipelineConfig(robust={"seed": 4})
    assert cfg.robust.seed == 4
