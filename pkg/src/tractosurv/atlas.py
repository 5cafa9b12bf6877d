"""Parcellation atlas bookkeeping.

An atlas is a label volume with regions ``1..N`` (``0`` is background) plus a
JSON sidecar ``{"n_regions": N, "names": [...]}`` stored next to the ``.nii``.
"""

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, GridError
from .volume import Volume, load_nifti, require_same_grid, save_nifti


@dataclass(frozen=True)
class ParcellationAtlas:
    labels: Volume
    n_regions: int
    names: tuple

    def __post_init__(self):
        if self.labels.kind != "label":
            raise DataError("atlas labels must be a label volume")
        n = int(self.n_regions)
        if n < 1:
            raise DataError("atlas needs at least one region")
        names = tuple(self.names) if self.names is not None else default_names(n)
        if len(names) != n:
            raise DataError(f"atlas has {n} regions but {len(names)} names")
        if self.labels.data.size and self.labels.data.max() > n:
            raise DataError(f"atlas label {self.labels.data.max()} exceeds n_regions={n}")
        object.__setattr__(self, "n_regions", n)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_volume(cls, labels, n_regions=None, names=None):
        if n_regions is None:
            n_regions = int(labels.data.max()) if names is None else len(names)
        return cls(labels, n_regions, names)

    @property
    def grid(self):
        return self.labels.grid


def default_names(n):
    return tuple(f"region_{i}" for i in range(1, n + 1))


def sidecar_path(nii_path):
    root = os.fspath(nii_path)
    if root.endswith(".nii"):
        root = root[:-4]
    return root + ".json"


def load_atlas(path):
    labels = load_nifti(path, kind="label")
    side = sidecar_path(path)
    if os.path.exists(side):
        try:
            with open(side, encoding="utf-8") as f:
                meta = json.load(f)
            return ParcellationAtlas(labels, meta["n_regions"], meta.get("names"))
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{side}: invalid atlas sidecar: {exc}") from exc
    return ParcellationAtlas.from_volume(labels)


def save_atlas(atlas, path):
    save_nifti(atlas.labels, path)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump({"n_regions": atlas.n_regions, "names": list(atlas.names)}, f, indent=2)
        f.write("\n")


def region_volumes(atlas):
    """Voxel count per label ``0..N``."""
    return np.bincount(atlas.labels.data.ravel(), minlength=atlas.n_regions + 1)


def _overlap_counts(mask, atlas):
    labels = atlas.labels.data[mask.data.astype(bool)]
    return np.bincount(labels, minlength=atlas.n_regions + 1)


def lesion_region_distribution(lesions, atlas):
    """Fraction of every region occupied by each lesion type.

    ``lesions`` is a sequence of ``(name, mask)`` pairs. A mask may also be a
    list of masks (one per subject, all on the atlas grid); numerator and
    denominator are then summed over the list, which is how a cohort-level
    distribution is formed. Empty regions report 0.

    Returns a dict ``name -> (N+1,) array`` in input order.
    """
    b = region_volumes(atlas).astype(np.float64)
    out = {}
    for name, masks in lesions:
        if isinstance(masks, Volume):
            masks = [masks]
        t = np.zeros(atlas.n_regions + 1, dtype=np.float64)
        total_b = np.zeros_like(t)
        for m in masks:
            try:
                require_same_grid(atlas.labels, m)
            except GridError as exc:
                raise GridError(f"lesion {name!r}: {exc}") from exc
            t += _overlap_counts(m, atlas)
            total_b += b
        ratio = np.zeros_like(t)
        np.divide(t, total_b, out=ratio, where=total_b > 0)
        out[name] = ratio
    return out


def distribution_csv(distribution):
    """Render a distribution as CSV text: ``region_label,<lesion>...``."""
    names = list(distribution)
    n = len(next(iter(distribution.values()))) if names else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region_label"] + names)
    for r in range(n):
        w.writerow([r] + [repr(float(distribution[k][r])) for k in names])
    return buf.getvalue()


def onehot_channels(atlas):
    """``(N, X, Y, Z)`` uint8 stack; channel ``i-1`` marks label ``i``.

    Background voxels are zero in every channel.
    """
    lab = atlas.labels.data
    channels = np.zeros((atlas.n_regions,) + lab.shape, dtype=np.uint8)
    inside = lab > 0
    idx = np.nonzero(inside)
    channels[(lab[inside] - 1,) + idx] = 1
    return channels


def labels_from_onehot(channels):
    """Inverse of :func:`onehot_channels` (argmax with zero fallback)."""
    channels = np.asarray(channels)
    lab = channels.argmax(axis=0) + 1
    lab[channels.max(axis=0) == 0] = 0
    return lab
