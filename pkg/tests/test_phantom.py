import json

import nibabel as nib
import numpy as np
import pytest
from scipy import ndimage

from pedseg.phantom import (
    TISSUE_CODES,
    TRUTH_SUBREGION_CODES,
    Lesion,
    PhantomSpec,
    PhantomSpecError,
    generate_phantom,
    preset,
    standard_spec,
)

DIPG_MODS = ["T1", "T1POST", "T2", "FLAIR"]
SMALL = dict(dims=(48, 48, 48), brain_radius_mm=22.0, csf_thickness_mm=3.0, gm_thickness_mm=4.0)


def _core_edema_spec(seed=3):
    c = (23.5, 23.5, 23.5)
    lesions = [
        Lesion("EDEMA", c, (8,), preset("EDEMA", DIPG_MODS)),
        Lesion("CORE", c, (5,), preset("FLAIR_CORE", DIPG_MODS)),
    ]
    return PhantomSpec(tumor_type="DIPG", lesions=lesions, seed=seed, **SMALL)


def test_healthy_phantom(healthy_case):
    assert healthy_case.truth_wt.count() == 0
    assert healthy_case.truth_subregions.count() == 0
    brain = healthy_case.study.brain_mask
    labels = healthy_case.truth_tissue.labels
    assert np.array_equal(labels > 0, brain)
    assert set(np.unique(labels[brain]).tolist()) == {1, 2, 3}


def test_core_sphere_with_edema_shell():
    case = generate_phantom(_core_edema_spec())
    sub = case.truth_subregions.labels
    core = sub == TRUTH_SUBREGION_CODES["CORE"]
    edema = sub == TRUTH_SUBREGION_CODES["EDEMA"]
    idx = np.indices(sub.shape)
    r = np.sqrt(sum((idx[a] - 23.5) ** 2 for a in range(3)))
    assert np.array_equal(core, r <= 5)
    assert np.array_equal(edema, (r > 5) & (r <= 8))
    # the shell wraps the sphere with no gap
    assert np.array_equal(ndimage.binary_dilation(core) & ~core, ndimage.binary_dilation(core) & edema)
    assert np.array_equal(case.truth_core.mask, core)
    assert np.array_equal(case.truth_wt.mask, core | edema)


def test_phantom_deterministic():
    a = generate_phantom(_core_edema_spec(seed=9))
    b = generate_phantom(_core_edema_spec(seed=9))
    c = generate_phantom(_core_edema_spec(seed=10))
    for m in a.study.modalities:
        assert np.array_equal(a.study[m].data, b.study[m].data)
        assert not np.array_equal(a.study[m].data, c.study[m].data)
    assert np.array_equal(a.truth_subregions.labels, b.truth_subregions.labels)


def test_class_means_reproduce_noise_draws(atrt_case):
    spec = atrt_case.spec
    rng = np.random.default_rng(spec.seed)
    tissue = atrt_case.truth_tissue.labels
    lesion = atrt_case.truth_subregions.labels > 0
    for m in spec.modalities:
        noise = rng.standard_normal(spec.dims)
        vol = atrt_case.study[m].data
        for name in ("WM", "GM", "CSF"):
            sel = (tissue == TISSUE_CODES[name]) & ~lesion
            mu, sd = spec.tissues[name][m.value]
            assert vol[sel].mean() == pytest.approx(mu + sd * noise[sel].mean(), rel=1e-12)


def test_class_means_within_three_standard_errors():
    # each check fails with probability 0.0027 for an unbiased generator
    checks = violations = 0
    for seed in range(5):
        case = generate_phantom(standard_spec("atrt", seed=seed))
        tissue = case.truth_tissue.labels
        sub = case.truth_subregions.labels
        groups = [((tissue == TISSUE_CODES[n]) & (sub == 0), case.spec.tissues[n]) for n in ("WM", "GM", "CSF")]
        groups += [(sub == TRUTH_SUBREGION_CODES[les.label], les.intensities) for les in case.spec.lesions]
        for m, vol in case.study.modalities.items():
            for sel, table in groups:
                if not sel.any():
                    continue
                mu, sd = table[m.value]
                checks += 1
                violations += abs(vol.data[sel].mean() - mu) > 3 * sd / np.sqrt(sel.sum())
    assert checks >= 150
    assert violations <= 2


def test_subregions_exactly_on_wt(atrt_case, dipg_case):
    for case in (atrt_case, dipg_case):
        assert np.array_equal(case.truth_subregions.labels > 0, case.truth_wt.mask)
        assert not (case.truth_core.mask & ~case.truth_wt.mask).any()


def test_contradictory_lesion_rejected():
    # "enhancing" lesion with no T1-post enhancement
    bad = preset("ENHANCING", DIPG_MODS + ["ADC"])
    bad["T1POST"] = bad["T1"]
    spec = PhantomSpec(tumor_type="ATRT", lesions=[Lesion("ENHANCING", (47.5, 47.5, 47.5), (5,), bad)])
    with pytest.raises(PhantomSpecError):
        generate_phantom(spec)
    # an edema lesion bright enough on FLAIR to pass as core
    edema = preset("EDEMA", DIPG_MODS)
    edema["FLAIR"] = [700.0, 5.0]
    spec = PhantomSpec(tumor_type="DIPG", lesions=[Lesion("EDEMA", (47.5, 47.5, 47.5), (5,), edema)])
    with pytest.raises(PhantomSpecError):
        spec.validate()


def test_spec_field_errors():
    with pytest.raises(PhantomSpecError):
        Lesion("GLIOMA", (0, 0, 0), (1,), {})
    with pytest.raises(PhantomSpecError):
        Lesion("CYST", (0, 0, 0), (1, 2), {})
    with pytest.raises(PhantomSpecError):
        Lesion("CYST", (0, 0, 0), (1, 2, 3), {}, shape="cube")
    with pytest.raises(PhantomSpecError):
        PhantomSpec(brain_radius_mm=5.0).validate()
    with pytest.raises(PhantomSpecError, match="lacks intensities"):
        PhantomSpec(tumor_type="DIPG", lesions=[Lesion("CYST", (40, 40, 40), (3,), {"T1": [1, 1]})]).validate()
    with pytest.raises(ValueError):
        standard_spec("glioblastoma")


def test_ellipsoid_lesion():
    les = Lesion("CYST", (10.0, 10.0, 10.0), (2.0, 4.0, 1.0), {}, shape="ellipsoid")
    coords = np.indices((21, 21, 21)).astype(float)
    m = les.mask(coords)
    assert m[10, 14, 10] and not m[14, 10, 10] and not m[10, 10, 12]


def test_spec_json_round_trip():
    spec = standard_spec("atrt", seed=4)
    again = PhantomSpec.from_json(spec.to_json())
    assert again == spec
    assert json.loads(again.to_json()) == json.loads(spec.to_json())


def test_phantom_save(tmp_path):
    case = generate_phantom(_core_edema_spec())
    case.save(tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    for n in ("t1", "t1post", "t2", "flair", "atlas_wm", "atlas_gm", "brain_mask", "truth_tissue", "truth_wt", "truth_subregions"):
        assert f"{n}.nii.gz" in names
    assert "adc.nii.gz" not in names
    codes = json.loads((tmp_path / "codes.json").read_text())
    assert codes["subregions"]["CORE"] == TRUTH_SUBREGION_CODES["CORE"]
    assert PhantomSpec.from_json((tmp_path / "spec.json").read_text()) == case.spec
    img = nib.load(tmp_path / "truth_subregions.nii.gz")
    assert np.array_equal(np.asarray(img.dataobj), case.truth_subregions.labels)


def test_atlas_is_probability(atrt_case):
    for atlas in (atrt_case.atlas_wm, atrt_case.atlas_gm):
        assert atlas.data.min() >= 0 and atlas.data.max() <= 1
    total = atrt_case.atlas_wm.data + atrt_case.atlas_gm.data
    assert total.max() <= 1 + 1e-9
