"""Volumetric data model, NIfTI-1 I/O, resampling and brain z-scoring.

A :class:`Volume` is a 3-D grid plus a voxel-to-world affine. Voxel ``(i, j, k)``
sits at world position ``affine @ (i, j, k, 1)``; its cube spans ``±0.5`` voxel
around that centre. NIfTI files are read and written through nibabel, with the
header checks we care about done up front so errors are specific.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
import nibabel as nib
from scipy import ndimage

from .errors import (DatatypeError, DegenerateInputError, DimensionalityError,
                     FormatError, GridError, ModeError, TransformError,
                     WriteError)

KINDS = ("scalar", "label", "mask")

# NIfTI-1 datatype codes accepted on load
_NIFTI_DTYPES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64"}
_SAVE_DTYPE = {"mask": np.uint8, "label": np.int32, "scalar": np.float32}


def check_affine(affine):
    a = np.asarray(affine, dtype=np.float64)
    if a.shape != (4, 4):
        raise TransformError(f"affine must be 4x4, got shape {a.shape}")
    if not np.array_equal(a[3], [0.0, 0.0, 0.0, 1.0]):
        raise TransformError(f"affine last row must be (0,0,0,1), got {a[3]}")
    if not np.all(np.isfinite(a)) or abs(np.linalg.det(a[:3, :3])) < 1e-12:
        raise TransformError("affine is singular or non-finite")
    return a


def spacing_from_affine(affine):
    return tuple(float(s) for s in np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0)))


@dataclass(frozen=True)
class Grid:
    """Voxel grid geometry: shape, voxel size (mm) and voxel-to-world affine."""

    dims: tuple
    spacing: tuple
    affine: np.ndarray = field(repr=False)

    @classmethod
    def from_affine(cls, dims, affine):
        affine = check_affine(affine)
        return cls(tuple(int(d) for d in dims), spacing_from_affine(affine), affine)

    def world_to_voxel(self):
        return np.linalg.inv(self.affine)

    def same_as(self, other, atol=1e-6):
        return (tuple(self.dims) == tuple(other.dims)
                and np.allclose(self.affine, other.affine, atol=atol))

    def voxel_centers(self, index=None):
        """World coordinates of voxel centres, for all voxels or an (n, 3) index array."""
        if index is None:
            index = np.indices(self.dims).reshape(3, -1).T
        index = np.asarray(index, dtype=np.float64)
        return index @ self.affine[:3, :3].T + self.affine[:3, 3]


@dataclass(frozen=True)
class Volume:
    """A 3-D scalar, label or mask image on a :class:`Grid`.

    ``data`` is stored as float64 for scalar volumes, int64 for labels and
    uint8 for masks. The array is made read-only on construction.
    """

    data: np.ndarray = field(repr=False)
    affine: np.ndarray = field(repr=False)
    kind: str = "scalar"
    spacing: tuple = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise DimensionalityError(f"volume data must be 3-D, got {data.ndim}-D")
        if min(data.shape) < 1:
            raise DimensionalityError(f"dims must be positive, got {data.shape}")
        affine = check_affine(self.affine)
        if self.kind == "mask":
            if not np.all((data == 0) | (data == 1)):
                raise DatatypeError("mask volumes may only contain 0 and 1")
            data = data.astype(np.uint8)
        elif self.kind == "label":
            if data.dtype.kind == "f":
                if not np.all(np.isfinite(data)) or not np.all(data == np.round(data)):
                    raise DatatypeError("label volumes must hold integers")
            if data.size and data.min() < 0:
                raise DatatypeError("label volumes must be non-negative")
            data = data.astype(np.int64)
        else:
            data = data.astype(np.float64)
        spacing = self.spacing
        if spacing is None:
            spacing = spacing_from_affine(affine)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {spacing}")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @property
    def grid(self):
        return Grid(tuple(self.dims), self.spacing, self.affine)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def with_data(self, data, kind=None):
        return Volume(data, self.affine, kind or self.kind, self.spacing)


def require_same_grid(*volumes):
    first = volumes[0]
    for v in volumes[1:]:
        if not first.grid.same_as(v.grid):
            raise GridError(f"grid mismatch: {first.dims} vs {v.dims} or differing affines")


def _check_header(path):
    try:
        with open(path, "rb") as f:
            raw = f.read(352)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 348:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    if raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {raw[344:348]!r}, expected single-file NIfTI-1")
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise DatatypeError(f"{path}: unsupported NIfTI datatype code {datatype}")


def _load_image(path):
    _check_header(path)
    try:
        return nib.Nifti1Image.from_filename(str(path), mmap=False)
    except Exception as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _image_affine(img):
    hdr = img.header
    if int(hdr["sform_code"]) > 0:
        return hdr.get_sform()
    return hdr.get_qform()


def load_nifti(path, kind="scalar"):
    """Read a 3-D single-file NIfTI-1 image into a :class:`Volume`.

    The affine comes from the sform when ``sform_code > 0``, else the qform.
    Trailing singleton dimensions are squeezed; anything else beyond 3-D is
    rejected.
    """
    img = _load_image(path)
    shape = img.shape
    if len(shape) > 3 and all(s == 1 for s in shape[3:]):
        shape = shape[:3]
    if len(shape) != 3:
        raise DimensionalityError(f"{path}: expected a 3-D image, got shape {img.shape}")
    data = np.asanyarray(img.dataobj).reshape(shape)
    if kind == "mask":
        data = data != 0
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(data, _image_affine(img), kind, spacing)


def load_nifti_channels(path):
    """Read a 4-D NIfTI-1 image as ``(data[x, y, z, c], affine)``.

    Used for multi-channel inputs such as probability maps and packed peak
    fields; :func:`load_nifti` deliberately refuses these.
    """
    img = _load_image(path)
    if len(img.shape) == 3:
        data = np.asanyarray(img.dataobj)[..., None]
    elif len(img.shape) == 4:
        data = np.asanyarray(img.dataobj)
    else:
        raise DimensionalityError(f"{path}: expected 3-D or 4-D image, got {img.shape}")
    return np.asarray(data, dtype=np.float64), check_affine(_image_affine(img))


def _write_image(img, path):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(suffix=".nii", dir=directory)
        os.close(fd)
    except OSError as exc:
        raise WriteError(f"cannot write to {directory}: {exc}") from exc
    try:
        img.to_filename(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _make_image(data, affine, spacing, dtype):
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), None)
    hdr = img.header
    hdr.set_data_dtype(dtype)
    hdr.set_sform(affine, code=1)
    hdr.set_qform(None, code=0)
    hdr.set_zooms(tuple(spacing) + tuple(1.0 for _ in range(np.ndim(data) - 3)))
    hdr.set_xyzt_units("mm")
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    return img


def save_nifti(v, path):
    """Write ``v`` as a single-file NIfTI-1 image (sform_code 1).

    Masks are stored as uint8, labels as int32 and scalars as float32.
    """
    dtype = _SAVE_DTYPE[v.kind]
    if v.kind == "label" and v.data.size and v.data.max() > np.iinfo(np.int32).max:
        raise DatatypeError("label values exceed int32 range")
    _write_image(_make_image(v.data, v.affine, v.spacing, dtype), path)


def save_nifti_channels(data, affine, path, dtype=np.float32):
    data = np.asarray(data)
    if data.ndim != 4:
        raise DimensionalityError(f"channel image must be 4-D, got {data.ndim}-D")
    affine = check_affine(affine)
    _write_image(_make_image(data, affine, spacing_from_affine(affine), dtype), path)


def resample(src, target_grid, transform=None, mode="nearest"):
    """Sample ``src`` onto ``target_grid``.

    ``transform`` maps source world coordinates to target world coordinates
    (identity when None). Each target voxel centre is pulled back through the
    inverse transform into source voxel space. Samples falling outside the
    source grid are 0.
    """
    if mode not in ("nearest", "trilinear"):
        raise ModeError(f"unknown interpolation mode {mode!r}")
    if mode == "trilinear" and src.kind != "scalar":
        raise ModeError(f"trilinear interpolation is not allowed for {src.kind} volumes")
    if isinstance(target_grid, Volume):
        target_grid = target_grid.grid
    transform = np.eye(4) if transform is None else check_affine(transform)

    # target voxel -> target world -> source world -> source voxel
    pull = np.linalg.inv(src.affine) @ np.linalg.inv(transform) @ target_grid.affine
    idx = np.indices(target_grid.dims, dtype=np.float64).reshape(3, -1)
    coords = pull[:3, :3] @ idx + pull[:3, 3:4]

    if mode == "nearest":
        nearest = np.floor(coords + 0.5).astype(np.int64)
        dims = np.array(src.dims)[:, None]
        inside = np.all((nearest >= 0) & (nearest < dims), axis=0)
        out = np.zeros(idx.shape[1], dtype=src.data.dtype)
        n = nearest[:, inside]
        out[inside] = src.data[n[0], n[1], n[2]]
    else:
        out = ndimage.map_coordinates(src.data, coords, order=1,
                                      mode="grid-constant", cval=0.0)
    return Volume(out.reshape(target_grid.dims), target_grid.affine, src.kind,
                  target_grid.spacing)


def zscore_brain(v, brain):
    """Standardise intensities inside ``brain`` (sample std); 0 outside."""
    require_same_grid(v, brain)
    inside = brain.data.astype(bool)
    values = v.data[inside]
    if values.size < 2:
        raise DegenerateInputError("brain mask needs at least 2 voxels")
    mean = values.mean()
    std = values.std(ddof=1)
    if not np.isfinite(std) or std == 0:
        raise DegenerateInputError("zero intensity variance inside brain mask")
    out = np.zeros(v.dims, dtype=np.float64)
    out[inside] = (values - mean) / std
    return v.with_data(out, kind="scalar")
