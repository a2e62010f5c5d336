import json

import nibabel as nib
import numpy as np
import pytest

from pedseg.nifti import (
    affines_match,
    load_labels,
    load_scalar,
    save_labels,
    save_mask,
    save_scalar,
    save_stack,
    write_code_table,
)
from pedseg.volume import LabelVolume, ScalarVolume

AFFINE = np.array([[1.2, 0, 0, -10], [0, 0.9, 0, 5], [0, 0, 2.0, 3], [0, 0, 0, 1]])


def _scalar():
    data = np.random.default_rng(0).normal(100, 20, (6, 5, 4))
    return ScalarVolume(data, (1.2, 0.9, 2.0), affine=AFFINE)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_scalar_round_trip(tmp_path, suffix):
    vol = _scalar()
    path = tmp_path / f"s{suffix}"
    save_scalar(vol, path)
    img = nib.load(path)
    assert img.get_data_dtype() == np.dtype("<f4")
    assert int(img.header["sform_code"]) == 1
    back = load_scalar(path)
    np.testing.assert_array_equal(back.data, vol.data.astype(np.float32))
    assert back.spacing == pytest.approx(vol.spacing)
    np.testing.assert_allclose(back.affine, AFFINE, atol=1e-6)


def test_label_dtypes(tmp_path):
    small = LabelVolume(np.arange(60).reshape(5, 4, 3) % 9)
    save_labels(small, tmp_path / "a.nii.gz")
    assert nib.load(tmp_path / "a.nii.gz").get_data_dtype() == np.uint8
    big = LabelVolume(np.full((2, 2, 2), 300))
    save_labels(big, tmp_path / "b.nii.gz")
    assert nib.load(tmp_path / "b.nii.gz").get_data_dtype() == np.dtype("<i2")
    assert np.array_equal(load_labels(tmp_path / "b.nii.gz").labels, big.labels)
    with pytest.raises(ValueError):
        save_labels(LabelVolume(np.full((2, 2, 2), 40000)), tmp_path / "c.nii.gz")


def test_load_labels_rejects_fractions(tmp_path):
    nib.save(nib.Nifti1Image(np.full((2, 2, 2), 1.5, np.float32), np.eye(4)), str(tmp_path / "f.nii.gz"))
    with pytest.raises(ValueError, match="non-integer"):
        load_labels(tmp_path / "f.nii.gz")
    nib.save(nib.Nifti1Image(np.full((2, 2, 2), 3.0, np.float32), np.eye(4)), str(tmp_path / "g.nii.gz"))
    assert np.all(load_labels(tmp_path / "g.nii.gz").labels == 3)


def test_rejects_4d_input(tmp_path):
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 2), np.float32), np.eye(4)), str(tmp_path / "x.nii.gz"))
    with pytest.raises(ValueError, match="3-D"):
        load_scalar(tmp_path / "x.nii.gz")


def test_gzip_output_is_byte_deterministic(tmp_path):
    vol = _scalar()
    save_scalar(vol, tmp_path / "a.nii.gz")
    save_scalar(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_mask_and_stack(tmp_path):
    vol = _scalar()
    mask = vol.data > 100
    save_mask(mask, vol, tmp_path / "m.nii.gz")
    assert np.array_equal(load_labels(tmp_path / "m.nii.gz").mask, mask)
    stack = np.random.default_rng(1).random((4, *vol.dims))
    save_stack(stack, vol, tmp_path / "p.nii.gz")
    img = nib.load(tmp_path / "p.nii.gz")
    assert img.shape == (*vol.dims, 4)
    np.testing.assert_array_equal(np.moveaxis(np.asarray(img.dataobj), -1, 0), stack.astype(np.float32))


def test_affine_tolerance_and_code_table(tmp_path):
    assert affines_match(AFFINE, AFFINE + 5e-4)
    assert not affines_match(AFFINE, AFFINE + 5e-3)
    write_code_table({"WM": 1, "GM": 2}, tmp_path / "codes.json")
    assert json.loads((tmp_path / "codes.json").read_text()) == {"WM": 1, "GM": 2}
