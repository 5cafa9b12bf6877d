"""Connectivity matrices and tractographic feature vectors.

Pass-type: every tract adds 1 to ``w[i, j]`` for all ordered pairs of distinct
nonzero labels it visits (diagonal included). End-type: a tract whose two
endpoints carry nonzero labels ``a`` and ``b`` adds 1 to ``w[a, b]`` and
``w[b, a]`` (so 2 to ``w[a, a]`` when ``a == b``). Labels are read at the
nearest atlas voxel of each point; points off the atlas grid count as 0.
"""

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .atlas import region_volumes
from .errors import DataError, DegenerateInputError
from .volume import require_same_grid

log = logging.getLogger(__name__)

KINDS = ("pass", "end")
VARIANTS = ("original", "normalized", "binarized")


@dataclass(frozen=True)
class ConnectivityMatrix:
    w: np.ndarray
    kind: str = "pass"
    variant: str = "original"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DataError(f"connectivity matrix must be square, got {w.shape}")
        if self.kind not in KINDS or self.variant not in VARIANTS:
            raise DataError(f"unknown matrix kind/variant {self.kind}/{self.variant}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("connectivity weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def n(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class CoverageWeights:
    alpha: np.ndarray
    t: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class TractographicFeature:
    kind: str
    variant: str
    v: np.ndarray
    v_wei: np.ndarray


def point_labels(points, atlas):
    """Atlas label at the nearest voxel of every point (0 off-grid)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w2v = np.linalg.inv(atlas.labels.affine)
    idx = np.floor(points @ w2v[:3, :3].T + w2v[:3, 3] + 0.5).astype(np.int64)
    dims = np.array(atlas.labels.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(points), dtype=np.int64)
    i = idx[inside]
    out[inside] = atlas.labels.data[i[:, 0], i[:, 1], i[:, 2]]
    return out


def build_matrix(streamlines, atlas, kind="pass"):
    """Original (count) connectivity matrix of ``kind`` 'pass' or 'end'."""
    if kind not in KINDS:
        raise DataError(f"kind must be 'pass' or 'end', got {kind!r}")
    n = atlas.n_regions
    counts = np.asarray(streamlines.n_points)
    empty = int(np.sum(counts == 0))
    if empty:
        log.warning("skipped %d empty streamlines", empty)
    nonempty = np.nonzero(counts > 0)[0]
    w = np.zeros((n, n), dtype=np.int64)
    if len(nonempty) == 0:
        return ConnectivityMatrix(w, kind, "original")

    if kind == "pass":
        labels = point_labels(streamlines.points, atlas)
        tract_of_point = np.repeat(np.arange(len(counts)), counts)
        hit = labels > 0
        # incidence (tract x region) with duplicates collapsed to 1
        inc = sparse.coo_matrix(
            (np.ones(int(hit.sum()), dtype=np.int64), (tract_of_point[hit], labels[hit] - 1)),
            shape=(len(counts), n)).tocsr()
        inc.sum_duplicates()
        inc.data[:] = 1
        w = np.asarray((inc.T @ inc).todense(), dtype=np.int64)
    else:
        off = streamlines.offsets
        first = streamlines.points[off[nonempty]]
        last = streamlines.points[off[nonempty + 1] - 1]
        a = point_labels(first, atlas)
        b = point_labels(last, atlas)
        both = (a > 0) & (b > 0)
        np.add.at(w, (a[both] - 1, b[both] - 1), 1)
        np.add.at(w, (b[both] - 1, a[both] - 1), 1)
    return ConnectivityMatrix(w, kind, "original")


def normalize(m):
    if m.variant != "original":
        raise DataError("normalize expects an original matrix")
    top = m.w.max() if m.w.size else 0.0
    if top <= 0:
        raise DegenerateInputError("cannot normalise an all-zero connectivity matrix")
    return ConnectivityMatrix(m.w / top, m.kind, "normalized")


def binarize(m):
    if m.variant != "original":
        raise DataError("binarize expects an original matrix")
    return ConnectivityMatrix((m.w > 0).astype(np.float64), m.kind, "binarized")


def column_sums(m):
    w = m.w if isinstance(m, ConnectivityMatrix) else np.asarray(m, dtype=np.float64)
    return w.sum(axis=0)


def coverage_weights(tumor, atlas):
    """Tumour fraction of every region: ``alpha_i = t_i / b_i`` (0 if ``b_i = 0``)."""
    require_same_grid(atlas.labels, tumor)
    n = atlas.n_regions
    b = region_volumes(atlas)[1:].astype(np.float64)
    lab = atlas.labels.data[tumor.data.astype(bool)]
    t = np.bincount(lab, minlength=n + 1)[1:].astype(np.float64)
    alpha = np.zeros(n)
    np.divide(t, b, out=alpha, where=b > 0)
    return CoverageWeights(alpha, t, b)


def variant_matrix(original, variant):
    if variant == "original":
        return original
    if variant == "binarized":
        return binarize(original)
    if not np.any(original.w > 0):
        # features of an empty connectome are defined as zero
        return ConnectivityMatrix(np.zeros_like(original.w), original.kind, "normalized")
    return normalize(original)


def tractographic_features(streamlines, atlas, tumor):
    """All six (kind x variant) weighted tractographic features, in fixed order."""
    cov = coverage_weights(tumor, atlas)
    out = []
    for kind in KINDS:
        orig = build_matrix(streamlines, atlas, kind)
        for variant in VARIANTS:
            v = column_sums(variant_matrix(orig, variant))
            out.append(TractographicFeature(kind, variant, v, cov.alpha * v))
    return out


def feature_header(n):
    return (["subject_id", "kind", "variant"] + [f"v_{i}" for i in range(1, n + 1)]
            + [f"vwei_{i}" for i in range(1, n + 1)])


def feature_row(subject_id, feat):
    return ([subject_id, feat.kind, feat.variant] + [repr(float(x)) for x in feat.v]
            + [repr(float(x)) for x in feat.v_wei])


def matrix_csv(m, names):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(list(names))
    for row in m.w:
        wr.writerow([repr(float(x)) for x in row])
    return buf.getvalue()
