"""Comparison feature families computed from lesion masks.

Four fixed schemas: volumetric (19), spatial (9), volumetric-spatial
(``3 * (N + 5)``, i.e. 78 for the 21-region Harvard-Oxford subcortical atlas)
and morphological (19). Names are stable and ordered so rows from different
subjects line up column for column.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import DegenerateInputError, GridError, SchemaError
from .volume import Volume, require_same_grid

LESION_TYPES = ("necrosis_net", "edema", "et")
REGIONS = ("necrosis_net", "edema", "et", "wt", "tc")
MIDLINE_MM = 5.0
BRATS_CODES = {"necrosis_net": 1, "edema": 2, "et": 4}


@dataclass(frozen=True)
class LesionSet:
    """Disjoint necrosis/non-enhancing, edema and enhancing masks on one grid."""

    necrosis_net: Volume
    edema: Volume
    enhancing: Volume

    def __post_init__(self):
        require_same_grid(self.necrosis_net, self.edema, self.enhancing)
        a, b, c = (m.data.astype(bool) for m in (self.necrosis_net, self.edema, self.enhancing))
        if np.any(a & b) or np.any(a & c) or np.any(b & c):
            raise GridError("lesion masks must be pairwise disjoint")

    @classmethod
    def from_labels(cls, seg, codes=None):
        """Split a BraTS-style segmentation (1 necrosis/NET, 2 edema, 4 ET)."""
        codes = codes or BRATS_CODES
        masks = [seg.with_data(seg.data == codes[k], kind="mask") for k in LESION_TYPES]
        return cls(*masks)

    @property
    def et(self):
        return self.enhancing

    @property
    def tc(self):
        return self.necrosis_net.with_data(self.necrosis_net.data | self.enhancing.data)

    @property
    def wt(self):
        return self.necrosis_net.with_data(
            self.necrosis_net.data | self.edema.data | self.enhancing.data)

    def region(self, name):
        return getattr(self, name)

    @property
    def grid(self):
        return self.necrosis_net.grid


@dataclass(frozen=True)
class FeatureRow:
    subject_id: str
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if len(values) != len(self.names):
            raise SchemaError(f"{len(self.names)} names but {len(values)} values")
        if not np.all(np.isfinite(values)):
            bad = [n for n, v in zip(self.names, values) if not np.isfinite(v)]
            raise DegenerateInputError(f"non-finite feature values: {bad}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", values)


@dataclass
class FeatureTable:
    """Rows of named per-subject features (``values`` is subjects x features)."""

    subject_ids: list
    names: list
    values: np.ndarray

    def __post_init__(self):
        self.subject_ids = [str(s) for s in self.subject_ids]
        self.names = list(self.names)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.subject_ids), len(self.names))

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        if not rows:
            raise SchemaError("no feature rows")
        names = rows[0].names
        for r in rows:
            if r.names != names:
                raise SchemaError(f"subject {r.subject_id}: feature schema differs")
        return cls([r.subject_id for r in rows], names, np.array([r.values for r in rows]))

    def subset(self, ids):
        pos = {s: i for i, s in enumerate(self.subject_ids)}
        missing = [s for s in ids if s not in pos]
        if missing:
            raise SchemaError(f"subjects missing from feature table: {missing}")
        rows = [pos[s] for s in ids]
        return FeatureTable(list(ids), self.names, self.values[rows])

    def columns(self, names):
        pos = {n: i for i, n in enumerate(self.names)}
        for n in names:
            if n not in pos:
                raise SchemaError(f"missing feature column {n!r}")
        return self.values[:, [pos[n] for n in names]]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id"] + self.names)
        for sid, row in zip(self.subject_ids, self.values):
            w.writerow([sid] + [repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, skip=("kind", "variant")):
        """Parse CSV text; descriptive text columns named in ``skip`` are dropped."""
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if not header or header[0] != "subject_id":
            raise SchemaError("feature CSV must start with a subject_id column")
        keep = [i for i, h in enumerate(header) if i > 0 and h not in skip]
        ids, vals = [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            vals.append([float(row[i]) for i in keep])
        return cls(ids, [header[i] for i in keep], np.array(vals).reshape(len(ids), len(keep)))


def _ratio(a, b):
    return a / b if b != 0 else 0.0


def _count(mask):
    return int(np.count_nonzero(mask.data))


def volumetric_feature_names():
    vols = [f"vol_{r}" for r in REGIONS] + ["vol_brain"]
    brain = [f"ratio_{r}_brain" for r in REGIONS]
    comp = ["ratio_et_wt", "ratio_et_tc", "ratio_tc_wt", "ratio_necrosis_net_wt",
            "ratio_necrosis_net_tc", "ratio_edema_wt", "ratio_necrosis_net_et", "ratio_edema_tc"]
    return tuple(vols + brain + comp)


def volumetric_features(lesions, brain, subject_id=""):
    require_same_grid(brain, lesions.necrosis_net)
    if _count(brain) == 0:
        raise DegenerateInputError("brain mask is empty")
    vv = brain.voxel_volume
    v = {r: _count(lesions.region(r)) * vv for r in REGIONS}
    vb = _count(brain) * vv
    values = [v[r] for r in REGIONS] + [vb]
    values += [_ratio(v[r], vb) for r in REGIONS]
    values += [_ratio(v["et"], v["wt"]), _ratio(v["et"], v["tc"]), _ratio(v["tc"], v["wt"]),
               _ratio(v["necrosis_net"], v["wt"]), _ratio(v["necrosis_net"], v["tc"]),
               _ratio(v["edema"], v["wt"]), _ratio(v["necrosis_net"], v["et"]),
               _ratio(v["edema"], v["tc"])]
    return FeatureRow(subject_id, volumetric_feature_names(), values)


def _world_coords(mask, to_mni=None):
    idx = np.argwhere(mask.data.astype(bool))
    xyz = mask.grid.voxel_centers(idx)
    if to_mni is not None:
        t = np.asarray(to_mni, dtype=np.float64)
        xyz = xyz @ t[:3, :3].T + t[:3, 3]
    return xyz


def spatial_feature_names():
    return tuple(f"centroid_{r}_{a}" for r in ("wt", "tc", "et") for a in "xyz")


def spatial_features(lesions, to_mni=None, subject_id=""):
    """Centroids (MNI mm) of WT, TC and ET; empty TC/ET fall back to WT."""
    wt = _world_coords(lesions.wt, to_mni)
    if len(wt) == 0:
        raise DegenerateInputError("whole tumour is empty")
    c_wt = wt.mean(axis=0)
    values = list(c_wt)
    for r in ("tc", "et"):
        xyz = _world_coords(lesions.region(r), to_mni)
        values += list(xyz.mean(axis=0) if len(xyz) else c_wt)
    return FeatureRow(subject_id, spatial_feature_names(), values)


def volumetric_spatial_feature_names(n_regions=21):
    bins = [f"label_{i}" for i in range(n_regions + 1)] + ["left", "middle", "right", "total"]
    return tuple(f"vs_{t}_{b}" for t in LESION_TYPES for b in bins)


def volumetric_spatial_features(lesions, atlas, to_mni=None, subject_id=""):
    """Lesion volume (mm^3) per atlas label, per hemisphere band, and in total.

    Hemisphere bands use the MNI x coordinate of each voxel centre: left
    ``x < -5``, middle ``|x| <= 5``, right ``x > 5``. Label 0 doubles as the
    "other region" bin.
    """
    try:
        require_same_grid(atlas.labels, lesions.necrosis_net)
    except GridError as exc:
        raise GridError(f"lesions must be resampled onto the atlas grid: {exc}") from exc
    n = atlas.n_regions
    vv = atlas.labels.voxel_volume
    values = []
    for t in LESION_TYPES:
        mask = lesions.region(t)
        inside = mask.data.astype(bool)
        per_label = np.bincount(atlas.labels.data[inside], minlength=n + 1) * vv
        x = _world_coords(mask, to_mni)[:, 0]
        left = np.count_nonzero(x < -MIDLINE_MM) * vv
        right = np.count_nonzero(x > MIDLINE_MM) * vv
        middle = np.count_nonzero(np.abs(x) <= MIDLINE_MM) * vv
        values += list(per_label) + [left, middle, right, np.count_nonzero(inside) * vv]
    return FeatureRow(subject_id, volumetric_spatial_feature_names(n), values)


def principal_axes(mask):
    """(major, minor) axis lengths: twice the root of the extreme covariance eigenvalues."""
    xyz = _world_coords(mask)
    if len(xyz) == 0:
        return 0.0, 0.0
    cov = np.cov(xyz.T, bias=True).reshape(3, 3)
    ev = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    return 2.0 * float(np.sqrt(ev[-1])), 2.0 * float(np.sqrt(ev[0]))


def surface_area(mask):
    """Marching-cubes iso-surface area (mm^2) of a binary mask."""
    if _count(mask) == 0:
        return 0.0
    padded = np.pad(mask.data.astype(np.float32), 1)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, spacing=mask.spacing)
    return float(measure.mesh_surface_area(verts, faces))


def surface_irregularity(mask):
    """``A / (36 pi V^2)^(1/3)``; 1 for a sphere, larger for ragged shapes."""
    v = _count(mask) * mask.voxel_volume
    if v == 0:
        return 0.0
    return surface_area(mask) / (36.0 * np.pi * v * v) ** (1.0 / 3.0)


def morphological_feature_names():
    per = [f"{m}_{r}" for r in REGIONS for m in ("major_axis", "minor_axis", "surface_irregularity")]
    return tuple(per + ["elongation_wt", "elongation_tc", "elongation_et", "sphericity_wt"])


def morphological_features(lesions, subject_id=""):
    if _count(lesions.wt) == 0:
        raise DegenerateInputError("whole tumour is empty")
    values, axes, irr = [], {}, {}
    for r in REGIONS:
        mask = lesions.region(r)
        axes[r] = principal_axes(mask)
        irr[r] = surface_irregularity(mask)
        values += [axes[r][0], axes[r][1], irr[r]]
    values += [_ratio(*axes[r]) for r in ("wt", "tc", "et")]
    values.append(_ratio(1.0, irr["wt"]))
    return FeatureRow(subject_id, morphological_feature_names(), values)
