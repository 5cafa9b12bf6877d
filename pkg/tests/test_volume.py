import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tractosurv.errors import (DatatypeError, DegenerateInputError, DimensionalityError,
                               FormatError, ModeError, TransformError, WriteError)
from tractosurv.volume import (Grid, Volume, load_nifti, resample, save_nifti,
                               save_nifti_channels, zscore_brain)


def _affine(spacing=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0)):
    a = np.diag(list(spacing) + [1.0])
    a[:3, 3] = offset
    return a


def test_load_zero_float32(tmp_path):
    v = Volume(np.zeros((10, 10, 10)), np.eye(4))
    p = tmp_path / "z.nii"
    save_nifti(v, p)
    back = load_nifti(p)
    assert back.dims == (10, 10, 10)
    assert not back.data.any()


@pytest.mark.parametrize("kind,dtype", [("scalar", np.float32), ("label", np.int32), ("mask", np.uint8)])
def test_roundtrip_bit_identical(tmp_path, rng, kind, dtype):
    if kind == "scalar":
        data = rng.normal(size=(7, 5, 6)).astype(np.float32)
    elif kind == "label":
        data = rng.integers(0, 117, size=(7, 5, 6))
    else:
        data = rng.random((7, 5, 6)) < 0.3
    aff = _affine((1.5, 2.0, 0.5), (-10.25, 3.5, 7.0))
    aff[0, 1] = 0.25  # a shear survives sform storage
    v = Volume(data, aff, kind)
    p = tmp_path / "v.nii"
    save_nifti(v, p)
    back = load_nifti(p, kind=kind)
    assert back.dims == v.dims
    assert np.array_equal(back.data, v.data)
    assert np.array_equal(back.affine, v.affine)
    with open(p, "rb") as f:
        raw = f.read(352)
    assert raw[344:348] == b"n+1\x00"
    import nibabel as nib
    hdr = nib.load(str(p)).header
    assert hdr.get_data_dtype() == np.dtype(dtype)
    assert int(hdr["sform_code"]) == 1
    assert struct.unpack("<f", raw[108:112])[0] == 352.0


def test_wrong_magic(tmp_path):
    p = tmp_path / "bad.nii"
    save_nifti(Volume(np.zeros((3, 3, 3)), np.eye(4)), p)
    raw = bytearray(p.read_bytes())
    raw[344:348] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_nifti(p)


def test_truncated_file(tmp_path):
    p = tmp_path / "short.nii"
    p.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError):
        load_nifti(p)


def test_4d_rejected(tmp_path):
    p = tmp_path / "four.nii"
    save_nifti_channels(np.zeros((3, 3, 3, 2)), np.eye(4), p)
    with pytest.raises(DimensionalityError):
        load_nifti(p)


def test_unsupported_datatype(tmp_path):
    import nibabel as nib
    p = tmp_path / "i64.nii"
    img = nib.Nifti1Image(np.zeros((3, 3, 3), dtype=np.int64), np.eye(4), dtype=np.int64)
    img.to_filename(str(p))
    with pytest.raises(DatatypeError):
        load_nifti(p)


def test_unwritable_directory(tmp_path):
    with pytest.raises(WriteError):
        save_nifti(Volume(np.zeros((2, 2, 2)), np.eye(4)), tmp_path / "missing" / "x.nii")


def test_qform_fallback(tmp_path):
    import nibabel as nib
    p = tmp_path / "q.nii"
    aff = _affine((2.0, 2.0, 2.0), (1.0, 2.0, 3.0))
    img = nib.Nifti1Image(np.zeros((4, 4, 4), dtype=np.float32), None)
    img.header.set_qform(aff, code=1)
    img.header.set_sform(np.eye(4), code=0)
    img.to_filename(str(p))
    assert np.allclose(load_nifti(p).affine, aff)


def test_volume_invariants():
    with pytest.raises(DatatypeError):
        Volume(np.full((2, 2, 2), 2), np.eye(4), "mask")
    with pytest.raises(DatatypeError):
        Volume(np.full((2, 2, 2), -1), np.eye(4), "label")
    bad = np.eye(4)
    bad[3, 0] = 1.0
    with pytest.raises(TransformError):
        Volume(np.zeros((2, 2, 2)), bad)
    with pytest.raises(TransformError):
        Volume(np.zeros((2, 2, 2)), np.diag([1.0, 0.0, 1.0, 1.0]))
    with pytest.raises(DimensionalityError):
        Volume(np.zeros((2, 2)), np.eye(4))


def test_resample_identity_bit_exact(rng):
    v = Volume(rng.normal(size=(6, 7, 8)), _affine((1.0, 2.0, 1.0), (3.0, -1.0, 0.0)))
    out = resample(v, v.grid, np.eye(4), "nearest")
    assert np.array_equal(out.data, v.data)
    lab = Volume(rng.integers(0, 5, (6, 7, 8)), v.affine, "label")
    assert np.array_equal(resample(lab, lab.grid).data, lab.data)


def test_resample_one_voxel_translation():
    m = np.zeros((5, 5, 5), dtype=bool)
    m[2, 2, 2] = True
    v = Volume(m, np.eye(4), "mask")
    t = np.eye(4)
    t[0, 3] = 1.0
    out = resample(v, v.grid, t)
    expected = np.zeros_like(m)
    expected[3, 2, 2] = True
    assert np.array_equal(out.data.astype(bool), expected)


def _pullback_oracle(src, dims, target_affine, transform):
    out = np.zeros(dims, dtype=src.data.dtype)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                world = target_affine @ np.array([i, j, k, 1.0])
                src_world = np.linalg.solve(transform, world)
                idx = np.linalg.solve(src.affine, src_world)[:3]
                n = [int(np.floor(c + 0.5)) for c in idx]
                if all(0 <= n[a] < src.dims[a] for a in range(3)):
                    out[i, j, k] = src.data[n[0], n[1], n[2]]
    return out


@pytest.mark.parametrize("seed", range(5))
def test_resample_random_affine_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    src = Volume(rng.random((9, 8, 7)) < 0.4, _affine((1.0, 1.2, 0.9), (-4, -4, -3)), "mask")
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    transform = np.eye(4)
    transform[:3, :3] = q * rng.uniform(0.8, 1.2)
    transform[:3, 3] = rng.normal(scale=2.0, size=3)
    dims = (10, 9, 8)
    grid = Grid.from_affine(dims, _affine((1.1, 0.9, 1.0), (-5, -4, -4)))
    out = resample(src, grid, transform, "nearest")
    assert np.array_equal(out.data, _pullback_oracle(src, dims, grid.affine, transform))
    assert set(np.unique(out.data)) <= {0, 1}


def test_resample_mode_errors(rng):
    lab = Volume(rng.integers(0, 3, (4, 4, 4)), np.eye(4), "label")
    with pytest.raises(ModeError):
        resample(lab, lab.grid, mode="trilinear")
    with pytest.raises(TransformError):
        resample(lab, lab.grid, np.diag([1.0, 1.0, 0.0, 1.0]))


def test_resample_trilinear_half_voxel():
    data = np.zeros((4, 1, 1))
    data[:, 0, 0] = [0.0, 1.0, 2.0, 3.0]
    v = Volume(data, np.eye(4))
    t = np.eye(4)
    t[0, 3] = -0.5  # target voxel i samples source position i + 0.5
    out = resample(v, v.grid, t, "trilinear")
    assert np.allclose(out.data[:3, 0, 0], [0.5, 1.5, 2.5])
    assert out.data[3, 0, 0] == pytest.approx(1.5)  # half-way towards the zero background


def test_zscore_simple():
    data = np.zeros((3, 1, 1))
    data[:, 0, 0] = [1.0, 2.0, 3.0]
    v = Volume(data, np.eye(4))
    brain = Volume(np.ones((3, 1, 1)), np.eye(4), "mask")
    assert np.allclose(zscore_brain(v, brain).data[:, 0, 0], [-1.0, 0.0, 1.0])


def _two_pass(values):
    n = len(values)
    mean = sum(values) / n
    var = sum((x - mean) ** 2 for x in values) / (n - 1)
    return mean, var ** 0.5


def test_zscore_random_two_pass(rng):
    v = Volume(rng.normal(5.0, 3.0, (8, 8, 8)), np.eye(4))
    brain = Volume(rng.random((8, 8, 8)) < 0.5, np.eye(4), "mask")
    z = zscore_brain(v, brain)
    inside = brain.data.astype(bool)
    mean, std = _two_pass(list(z.data[inside]))
    assert abs(mean) < 1e-6 and abs(std - 1.0) < 1e-6
    assert not z.data[~inside].any()
    z2 = zscore_brain(z, brain)
    assert np.allclose(z2.data, z.data, atol=1e-6)


def test_zscore_degenerate():
    v = Volume(np.ones((3, 3, 3)), np.eye(4))
    brain = Volume(np.ones((3, 3, 3)), np.eye(4), "mask")
    with pytest.raises(DegenerateInputError):
        zscore_brain(v, brain)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.01, 100.0), b=st.floats(-100.0, 100.0), seed=st.integers(0, 1000))
def test_zscore_affine_invariance(a, b, seed):
    rng = np.random.default_rng(seed)
    v = Volume(rng.normal(size=(5, 5, 5)), np.eye(4))
    brain = Volume(rng.random((5, 5, 5)) < 0.6, np.eye(4), "mask")
    brain = brain.with_data(brain.data | (np.arange(125).reshape(5, 5, 5) < 2))
    z1 = zscore_brain(v, brain).data
    z2 = zscore_brain(v.with_data(a * v.data + b), brain).data
    assert np.allclose(z1, z2, atol=1e-6)
